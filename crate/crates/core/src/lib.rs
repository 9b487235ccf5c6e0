//! Sieve maximum likelihood estimation of marginal parameters when the
//! dependence between margins is left unspecified.
//!
//! The joint log density is split into marginal log densities plus the log
//! of a copula density evaluated at the marginal cdfs. The copula term is
//! either dropped (QMLE), given a parametric family (FMLE/PMLE) or replaced
//! by a Bernstein-Kantorovich polynomial sieve (SMLE).

pub mod avar;
pub mod copulas;
pub mod data;
pub mod error;
pub mod estimate;
pub mod marginals;
pub mod optim;
pub mod quadrature;
pub mod riskapp;
pub mod sieve;
pub mod simlab;
pub mod special;

pub use error::{Error, Result};
