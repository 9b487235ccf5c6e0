//! QMLE, FMLE/PMLE and SMLE of marginal parameters, and sieve order
//! selection.
//!
//! All estimators maximize the same joint log-likelihood
//! `sum_i [ sum_j ln f_j(y_ij) + ln c(F_1(y_i1), .., F_m(y_im)) ]` and differ
//! only in the copula term: dropped, parametric, or a Bernstein sieve.

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::copulas::ParametricCopula;
use crate::data::DataMatrix;
use crate::error::{Error, Result};
use crate::marginals::{MarginalModel, Transform};
use crate::optim::{minimize, BfgsOptions, Minimum};
use crate::sieve::{free_parameter_count, LogLinearMap, SieveCopula, Workspace, DENSITY_FLOOR};

/// Pseudo-observations are kept this far away from the cube's faces.
pub const U_CLAMP: f64 = 1e-10;
/// Sieve orders from which the weights-only warm-up runs by default.
pub const WARM_UP_ORDER: usize = 10;
/// Default cap on the per-iteration change of any sieve parameter.
pub const SIEVE_MAX_STEP: f64 = 3.0;
/// Relative step for numerical copula-parameter gradients.
const COPULA_FD_STEP: f64 = 1e-5;

/// Reference to parameter `param` of marginal `marginal`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamRef {
    pub marginal: usize,
    pub param: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dependence {
    IndependenceAssumed,
    /// Starting copula; its family is kept, its parameters are estimated.
    Parametric { copula: ParametricCopula },
    Sieve { order: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointModelSpec {
    /// Families with starting values (starting values are replaced by
    /// moment-based ones when `data_start` is set).
    pub marginals: Vec<MarginalModel>,
    /// Groups of marginal parameters constrained to a common value.
    #[serde(default)]
    pub shared: Vec<Vec<ParamRef>>,
    pub dependence: Dependence,
    #[serde(default)]
    pub optimizer: BfgsOptions,
    /// Start the marginals from closed-form or moment estimates.
    #[serde(default = "default_true")]
    pub data_start: bool,
    /// Weights-only warm-up before the joint sieve fit; defaults to on for
    /// orders of at least [`WARM_UP_ORDER`].
    #[serde(default)]
    pub warm_up: Option<bool>,
}

fn default_true() -> bool {
    true
}

impl JointModelSpec {
    pub fn new(marginals: Vec<MarginalModel>, dependence: Dependence) -> Self {
        JointModelSpec {
            marginals,
            shared: Vec::new(),
            dependence,
            optimizer: BfgsOptions::default(),
            data_start: true,
            warm_up: None,
        }
    }

    pub fn with_dependence(&self, dependence: Dependence) -> Self {
        JointModelSpec {
            dependence,
            ..self.clone()
        }
    }

    pub fn dim(&self) -> usize {
        self.marginals.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.marginals.is_empty() {
            return Err(Error::param("model has no marginals"));
        }
        for m in &self.marginals {
            m.validate()?;
        }
        BetaLayout::new(&self.marginals, &self.shared)?;
        match &self.dependence {
            Dependence::IndependenceAssumed => {}
            Dependence::Parametric { copula } => {
                copula.validate()?;
                if copula.dim() != self.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: self.dim(),
                        got: copula.dim(),
                    });
                }
            }
            Dependence::Sieve { order } => {
                if *order < 1 {
                    return Err(Error::param("sieve order must be at least 1"));
                }
                if self.dim() < 2 {
                    return Err(Error::param("a sieve copula needs at least two margins"));
                }
                LogLinearMap::new(*order, self.dim())?;
            }
        }
        Ok(())
    }
}

/// Maps marginal parameters to entries of the estimated vector `beta`,
/// honouring parameter sharing.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaLayout {
    slots: Vec<Vec<usize>>,
    names: Vec<String>,
    transforms: Vec<Transform>,
}

impl BetaLayout {
    pub fn new(marginals: &[MarginalModel], shared: &[Vec<ParamRef>]) -> Result<Self> {
        let mut slots: Vec<Vec<Option<usize>>> =
            marginals.iter().map(|m| vec![None; m.n_params()]).collect();
        let mut names = Vec::new();
        let mut transforms = Vec::new();
        for group in shared {
            if group.is_empty() {
                return Err(Error::param("empty parameter-sharing group"));
            }
            let slot = names.len();
            let mut tr = None;
            for r in group {
                let entry = slots
                    .get_mut(r.marginal)
                    .and_then(|s| s.get_mut(r.param))
                    .ok_or_else(|| Error::param(format!("sharing refers to missing {r:?}")))?;
                if entry.is_some() {
                    return Err(Error::param(format!("{r:?} appears in two sharing groups")));
                }
                *entry = Some(slot);
                let t = marginals[r.marginal].transforms()[r.param];
                if tr.is_some_and(|x| x != t) {
                    return Err(Error::param("shared parameters must have the same domain"));
                }
                tr = Some(t);
            }
            let r = group[0];
            names.push(format!(
                "{}{}",
                marginals[r.marginal].param_names()[r.param],
                r.marginal + 1
            ));
            transforms.push(tr.expect("nonempty group"));
        }
        for (j, m) in marginals.iter().enumerate() {
            let tr = m.transforms();
            let pn = m.param_names();
            for k in 0..m.n_params() {
                if slots[j][k].is_none() {
                    slots[j][k] = Some(names.len());
                    names.push(format!("{}{}", pn[k], j + 1));
                    transforms.push(tr[k]);
                }
            }
        }
        Ok(BetaLayout {
            slots: slots
                .into_iter()
                .map(|s| s.into_iter().map(|x| x.expect("assigned")).collect())
                .collect(),
            names,
            transforms,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn slot(&self, marginal: usize, param: usize) -> usize {
        self.slots[marginal][param]
    }

    /// Current `beta` of a set of marginals (first occurrence of each slot).
    pub fn gather(&self, marginals: &[MarginalModel]) -> Vec<f64> {
        let mut beta = vec![f64::NAN; self.len()];
        for (j, m) in marginals.iter().enumerate() {
            for (k, &p) in m.params.iter().enumerate() {
                let s = self.slots[j][k];
                if beta[s].is_nan() {
                    beta[s] = p;
                }
            }
        }
        beta
    }

    pub fn scatter(&self, beta: &[f64], templates: &[MarginalModel]) -> Result<Vec<MarginalModel>> {
        templates
            .iter()
            .enumerate()
            .map(|(j, m)| {
                let p: Vec<f64> = self.slots[j].iter().map(|&s| beta[s]).collect();
                m.with_params(&p)
            })
            .collect()
    }

    fn to_unconstrained(&self, beta: &[f64]) -> Vec<f64> {
        beta.iter().zip(&self.transforms).map(|(b, t)| t.inverse(*b)).collect()
    }

    fn from_unconstrained(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.transforms).map(|(z, t)| t.forward(*z)).collect()
    }
}

/// Per-observation pieces of the joint score at given marginals.
#[derive(Debug, Clone)]
pub struct ObservationTerms {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    /// Sum of marginal log densities per observation.
    pub log_f: Vec<f64>,
    /// Pseudo-observations `F_j(y_ij)`, clamped into the open cube.
    pub u: DataMatrix,
    /// Marginal score with respect to `beta`, row-major `n x p`.
    pub score: Vec<f64>,
    /// `dF_j(y_ij)/d beta_q` at index `(i * m + j) * p + q`; zero where the
    /// pseudo-observation was clamped.
    pub du_dbeta: Vec<f64>,
}

impl ObservationTerms {
    pub fn compute(data: &DataMatrix, layout: &BetaLayout, marginals: &[MarginalModel]) -> Result<Self> {
        Self::compute_inner(data, layout, marginals, true)
    }

    pub(crate) fn compute_inner(
        data: &DataMatrix,
        layout: &BetaLayout,
        marginals: &[MarginalModel],
        need_du: bool,
    ) -> Result<Self> {
        let (n, m, p) = (data.nrows(), data.ncols(), layout.len());
        if m != marginals.len() {
            return Err(Error::DimensionMismatch {
                expected: marginals.len(),
                got: m,
            });
        }
        let mut log_f = vec![0.0; n];
        let mut u = DataMatrix::zeros(n, m);
        let mut score = vec![0.0; n * p];
        let mut du_dbeta = vec![0.0; if need_du { n * m * p } else { 0 }];
        for i in 0..n {
            let row = data.row(i);
            for (j, marg) in marginals.iter().enumerate() {
                let y = row[j];
                log_f[i] += marg.log_pdf(y)?;
                for (k, s) in marg.score(y)?.into_iter().enumerate() {
                    score[i * p + layout.slot(j, k)] += s;
                }
                let raw = marg.cdf(y);
                let cl = raw.clamp(U_CLAMP, 1.0 - U_CLAMP);
                u.row_mut(i)[j] = cl;
                if need_du && cl == raw {
                    for (k, g) in marg.cdf_param_grad(y)?.into_iter().enumerate() {
                        du_dbeta[(i * m + j) * p + layout.slot(j, k)] += g;
                    }
                }
            }
        }
        Ok(ObservationTerms {
            n,
            m,
            p,
            log_f,
            u,
            score,
            du_dbeta,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FittedDependence {
    Independence,
    Parametric { copula: ParametricCopula },
    Sieve { sieve: SieveCopula },
}

impl FittedDependence {
    pub fn n_free_params(&self) -> usize {
        match self {
            FittedDependence::Independence => 0,
            FittedDependence::Parametric { copula } => copula.params().len(),
            FittedDependence::Sieve { sieve } => free_parameter_count(sieve.order(), sieve.dim()),
        }
    }

    pub fn density(&self, u: &[f64]) -> Result<f64> {
        match self {
            FittedDependence::Independence => Ok(1.0),
            FittedDependence::Parametric { copula } => copula.density(u),
            FittedDependence::Sieve { sieve } => sieve.density(u),
        }
    }

    pub fn log_density(&self, u: &[f64]) -> Result<f64> {
        match self {
            FittedDependence::Independence => Ok(0.0),
            FittedDependence::Parametric { copula } => copula.log_density(u),
            FittedDependence::Sieve { sieve } => sieve.log_density(u),
        }
    }

    pub fn dlogdensity_du(&self, u: &[f64]) -> Result<Vec<f64>> {
        match self {
            FittedDependence::Independence => Ok(vec![0.0; u.len()]),
            FittedDependence::Parametric { copula } => copula.dlogdensity_du(u),
            FittedDependence::Sieve { sieve } => sieve.dlogdensity_du(u),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Qmle,
    Fmle,
    Smle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Criteria {
    pub aic: f64,
    pub bic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub estimator: Estimator,
    pub beta_names: Vec<String>,
    pub beta_hat: Vec<f64>,
    /// Parameter-sharing groups the fit was run with.
    #[serde(default)]
    pub shared: Vec<Vec<ParamRef>>,
    /// Marginal models at the estimate.
    pub marginals: Vec<MarginalModel>,
    pub dependence_hat: FittedDependence,
    pub loglik: f64,
    pub n_obs: usize,
    /// Number of estimated parameters (marginal plus dependence).
    pub n_params: usize,
    pub converged: bool,
    pub n_iter: usize,
    pub grad_max_norm: f64,
    /// Asymptotic covariance of `sqrt(n) (beta_hat - beta)`, when computed.
    pub acov: Option<Vec<Vec<f64>>>,
    pub criterion_values: Criteria,
    #[serde(default)]
    pub warnings: Vec<String>,
}

pub fn aic(k: usize, loglik: f64) -> f64 {
    2.0 * k as f64 - 2.0 * loglik
}

pub fn bic(k: usize, loglik: f64, n: usize) -> f64 {
    k as f64 * (n as f64).ln() - 2.0 * loglik
}

/// Joint log-likelihood of `data` under the given marginals and copula.
pub fn joint_loglik(
    data: &DataMatrix,
    marginals: &[MarginalModel],
    dependence: &FittedDependence,
) -> Result<f64> {
    let layout = BetaLayout::new(marginals, &[])?;
    let terms = ObservationTerms::compute_inner(data, &layout, marginals, false)?;
    let mut total: f64 = terms.log_f.iter().sum();
    match dependence {
        FittedDependence::Independence => {}
        FittedDependence::Parametric { copula } => {
            for r in terms.u.rows() {
                total += copula.log_density(r)?;
            }
        }
        FittedDependence::Sieve { sieve } => {
            total += sieve.log_density_rows(&terms.u).iter().sum::<f64>();
        }
    }
    Ok(total)
}

/// Negative mean log-likelihood over the unconstrained vector
/// `(z_beta, z_dep)`, with gradient.
struct Objective<'a> {
    data: &'a DataMatrix,
    layout: &'a BetaLayout,
    templates: &'a [MarginalModel],
    kind: DepKind<'a>,
    /// Fixed pseudo-observations for dependence-only stages.
    frozen: Option<&'a DataMatrix>,
    /// Main effects from the previous sieve evaluation.
    scaling: RefCell<Vec<f64>>,
}

enum DepKind<'a> {
    Independence,
    Parametric(&'a ParametricCopula),
    /// Parametric copula held at its value; no dependence parameters.
    Fixed(&'a ParametricCopula),
    Sieve(&'a LogLinearMap),
}

impl Objective<'_> {
    #[cfg(test)]
    fn n_dep(&self) -> usize {
        match self.kind {
            DepKind::Independence => 0,
            DepKind::Parametric(c) => c.to_unconstrained().len(),
            DepKind::Fixed(_) => 0,
            DepKind::Sieve(map) => map.n_free(),
        }
    }

    /// Copula log-likelihood over rows of `u`, its gradient in `u`
    /// (row-major, optional) and in the dependence parameters.
    fn copula_part(
        &self,
        u: &DataMatrix,
        z_dep: &[f64],
        mut du: Option<&mut [f64]>,
        g_dep: &mut [f64],
    ) -> Result<f64> {
        match self.kind {
            DepKind::Independence => Ok(0.0),
            DepKind::Parametric(template) => {
                let cop = template.from_unconstrained(z_dep)?;
                let sum = |c: &ParametricCopula| -> Result<f64> {
                    let mut s = 0.0;
                    for r in u.rows() {
                        s += c.log_density(r)?;
                    }
                    Ok(s)
                };
                let total = sum(&cop)?;
                let mut zp = z_dep.to_vec();
                for k in 0..z_dep.len() {
                    let h = COPULA_FD_STEP * z_dep[k].abs().max(1.0);
                    zp[k] = z_dep[k] + h;
                    let up = sum(&template.from_unconstrained(&zp)?)?;
                    zp[k] = z_dep[k] - h;
                    let dn = sum(&template.from_unconstrained(&zp)?)?;
                    zp[k] = z_dep[k];
                    g_dep[k] = (up - dn) / (2.0 * h);
                }
                if let Some(du) = du {
                    let m = u.ncols();
                    for (i, r) in u.rows().enumerate() {
                        du[i * m..(i + 1) * m].copy_from_slice(&cop.dlogdensity_du(r)?);
                    }
                }
                Ok(total)
            }
            DepKind::Fixed(cop) => {
                let m = u.ncols();
                let mut total = 0.0;
                for (i, r) in u.rows().enumerate() {
                    total += cop.log_density(r)?;
                    if let Some(du) = du.as_deref_mut() {
                        du[i * m..(i + 1) * m].copy_from_slice(&cop.dlogdensity_du(r)?);
                    }
                }
                Ok(total)
            }
            DepKind::Sieve(map) => {
                let sieve = map.weights_warm(z_dep, &mut self.scaling.borrow_mut())?;
                let m = u.ncols();
                let mut ws = Workspace::new(sieve.order(), m);
                let mut grad_w = vec![0.0; sieve.weights().len()];
                let mut total = 0.0;
                let mut gbuf = vec![0.0; m];
                for (i, r) in u.rows().enumerate() {
                    let c = ws.density(&sieve, r);
                    if !(c > DENSITY_FLOOR) {
                        return Err(Error::Singular("sieve density vanishes at a data point".into()));
                    }
                    total += c.ln();
                    ws.accumulate_weight_gradient(&sieve, 1.0 / c, &mut grad_w);
                    if let Some(du) = du.as_deref_mut() {
                        ws.density_gradient(&sieve, r, &mut gbuf);
                        for j in 0..m {
                            du[i * m + j] = gbuf[j] / c;
                        }
                    }
                }
                g_dep.copy_from_slice(&map.pullback(&sieve, &grad_w));
                Ok(total)
            }
        }
    }

    /// Full objective over `(z_beta, z_dep)`.
    fn joint(&self, z: &[f64], grad: &mut [f64]) -> Result<f64> {
        let p = self.layout.len();
        let (z_beta, z_dep) = z.split_at(p);
        let beta = self.layout.from_unconstrained(z_beta);
        let marginals = self.layout.scatter(&beta, self.templates)?;
        let need_du = !matches!(self.kind, DepKind::Independence);
        let terms = ObservationTerms::compute_inner(self.data, self.layout, &marginals, need_du)?;
        let (n, m) = (terms.n, terms.m);
        let mut g_beta = vec![0.0; p];
        for i in 0..n {
            for q in 0..p {
                g_beta[q] += terms.score[i * p + q];
            }
        }
        let mut total: f64 = terms.log_f.iter().sum();
        let (g_b, g_d) = grad.split_at_mut(p);
        if need_du {
            let mut du = vec![0.0; n * m];
            total += self.copula_part(&terms.u, z_dep, Some(&mut du), g_d)?;
            for i in 0..n {
                for j in 0..m {
                    let d = du[i * m + j];
                    let base = (i * m + j) * p;
                    for q in 0..p {
                        g_beta[q] += d * terms.du_dbeta[base + q];
                    }
                }
            }
        }
        for q in 0..p {
            g_b[q] = g_beta[q] * self.layout.transforms[q].derivative(z_beta[q]);
        }
        let nf = n as f64;
        grad.iter_mut().for_each(|g| *g = -*g / nf);
        Ok(-total / nf)
    }

    /// Dependence parameters only, at frozen pseudo-observations.
    fn dependence_only(&self, z_dep: &[f64], grad: &mut [f64]) -> Result<f64> {
        let u = self.frozen.expect("frozen pseudo-observations");
        let total = self.copula_part(u, z_dep, None, grad)?;
        let nf = u.nrows() as f64;
        grad.iter_mut().for_each(|g| *g = -*g / nf);
        Ok(-total / nf)
    }
}

fn run<F>(f: F, x0: &[f64], opts: &BfgsOptions) -> Minimum
where
    F: Fn(&[f64], &mut [f64]) -> Result<f64>,
{
    minimize(
        |x, g| match f(x, g) {
            Ok(v) => v,
            Err(_) => f64::NAN,
        },
        x0,
        opts,
    )
}

fn check_data(data: &DataMatrix, spec: &JointModelSpec) -> Result<()> {
    spec.validate()?;
    if data.ncols() != spec.dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.dim(),
            got: data.ncols(),
        });
    }
    if data.nrows() == 0 {
        return Err(Error::Empty("no observations".into()));
    }
    for (i, row) in data.rows().enumerate() {
        for (j, &y) in row.iter().enumerate() {
            spec.marginals[j].log_pdf(y).map_err(|e| {
                Error::domain(format!("observation {} column {}: {e}", i + 1, j + 1))
            })?;
        }
    }
    Ok(())
}

fn starting_marginals(data: &DataMatrix, spec: &JointModelSpec, layout: &BetaLayout) -> Result<Vec<MarginalModel>> {
    if !spec.data_start {
        return Ok(spec.marginals.clone());
    }
    let starts: Vec<Vec<f64>> = spec
        .marginals
        .iter()
        .enumerate()
        .map(|(j, m)| m.moment_start(&data.column(j)))
        .collect();
    // shared slots take the average of their members' starts
    let mut sum = vec![0.0; layout.len()];
    let mut count = vec![0.0; layout.len()];
    for (j, s) in starts.iter().enumerate() {
        for (k, &v) in s.iter().enumerate() {
            sum[layout.slot(j, k)] += v;
            count[layout.slot(j, k)] += 1.0;
        }
    }
    let beta: Vec<f64> = sum.iter().zip(&count).map(|(s, c)| s / c).collect();
    layout.scatter(&beta, &spec.marginals)
}

fn finish(
    estimator: Estimator,
    data: &DataMatrix,
    layout: &BetaLayout,
    templates: &[MarginalModel],
    shared: &[Vec<ParamRef>],
    z_beta: &[f64],
    dependence_hat: FittedDependence,
    min: &Minimum,
    n_iter: usize,
    warnings: Vec<String>,
) -> Result<FitResult> {
    if !min.converged {
        return Err(Error::NonConvergence {
            iterations: n_iter,
            context: format!(
                "{estimator:?} fit stopped with gradient max-norm {:.3e}",
                min.grad_max_norm
            ),
        });
    }
    let beta_hat = layout.from_unconstrained(z_beta);
    let marginals = layout.scatter(&beta_hat, templates)?;
    let loglik = joint_loglik(data, &marginals, &dependence_hat)?;
    let n_params = layout.len() + dependence_hat.n_free_params();
    let n = data.nrows();
    Ok(FitResult {
        estimator,
        beta_names: layout.names().to_vec(),
        beta_hat,
        shared: shared.to_vec(),
        marginals,
        dependence_hat,
        loglik,
        n_obs: n,
        n_params,
        converged: true,
        n_iter,
        grad_max_norm: min.grad_max_norm,
        acov: None,
        criterion_values: Criteria {
            aic: aic(n_params, loglik),
            bic: bic(n_params, loglik, n),
        },
        warnings,
    })
}

/// Maximize the likelihood with the copula term dropped.
pub fn fit_qmle(data: &DataMatrix, spec: &JointModelSpec) -> Result<FitResult> {
    let spec = spec.with_dependence(Dependence::IndependenceAssumed);
    check_data(data, &spec)?;
    let layout = BetaLayout::new(&spec.marginals, &spec.shared)?;
    let start = starting_marginals(data, &spec, &layout)?;
    let obj = Objective {
        data,
        layout: &layout,
        templates: &spec.marginals,
        kind: DepKind::Independence,
        frozen: None,
        scaling: RefCell::default(),
    };
    let z0 = layout.to_unconstrained(&layout.gather(&start));
    let min = run(|z, g| obj.joint(z, g), &z0, &spec.optimizer);
    finish(
        Estimator::Qmle,
        data,
        &layout,
        &spec.marginals,
        &spec.shared,
        &min.x,
        FittedDependence::Independence,
        &min,
        min.iterations,
        Vec::new(),
    )
}

/// Joint maximization over the marginal parameters and a parametric copula.
/// Used with a misspecified family this is the pseudo-MLE.
pub fn fit_fmle(data: &DataMatrix, spec: &JointModelSpec) -> Result<FitResult> {
    let Dependence::Parametric { copula } = &spec.dependence else {
        return Err(Error::param("FMLE needs a parametric dependence specification"));
    };
    check_data(data, spec)?;
    let qmle = fit_qmle(data, spec)?;
    let layout = BetaLayout::new(&spec.marginals, &spec.shared)?;
    let frozen = ObservationTerms::compute_inner(data, &layout, &qmle.marginals, false)?.u;
    let obj = Objective {
        data,
        layout: &layout,
        templates: &spec.marginals,
        kind: DepKind::Parametric(copula),
        frozen: Some(&frozen),
        scaling: RefCell::default(),
    };
    // two-step start: copula at the QMLE pseudo-observations, then joint
    let stage1 = run(|z, g| obj.dependence_only(z, g), &copula.to_unconstrained(), &spec.optimizer);
    let mut z0 = layout.to_unconstrained(&qmle.beta_hat);
    z0.extend_from_slice(&stage1.x);
    let min = run(|z, g| obj.joint(z, g), &z0, &spec.optimizer);
    let p = layout.len();
    let fitted = copula.from_unconstrained(&min.x[p..])?;
    finish(
        Estimator::Fmle,
        data,
        &layout,
        &spec.marginals,
        &spec.shared,
        &min.x[..p],
        FittedDependence::Parametric { copula: fitted },
        &min,
        qmle.n_iter + stage1.iterations + min.iterations,
        Vec::new(),
    )
}

/// Marginal parameters only, with the spec's parametric copula held at its
/// given value.
pub fn fit_given_copula(data: &DataMatrix, spec: &JointModelSpec) -> Result<FitResult> {
    let Dependence::Parametric { copula } = &spec.dependence else {
        return Err(Error::param("a fixed copula needs a parametric dependence specification"));
    };
    check_data(data, spec)?;
    let qmle = fit_qmle(data, spec)?;
    let layout = BetaLayout::new(&spec.marginals, &spec.shared)?;
    let obj = Objective {
        data,
        layout: &layout,
        templates: &spec.marginals,
        kind: DepKind::Fixed(copula),
        frozen: None,
        scaling: RefCell::default(),
    };
    let p = layout.len();
    let min = run(|z, g| obj.joint(z, g), &layout.to_unconstrained(&qmle.beta_hat), &spec.optimizer);
    let mut fit = finish(
        Estimator::Fmle,
        data,
        &layout,
        &spec.marginals,
        &spec.shared,
        &min.x,
        FittedDependence::Parametric { copula: copula.clone() },
        &min,
        qmle.n_iter + min.iterations,
        Vec::new(),
    )?;
    fit.n_params = p;
    Ok(fit)
}

/// Joint maximization over the marginal parameters and the sieve weights.
pub fn fit_smle(data: &DataMatrix, spec: &JointModelSpec) -> Result<FitResult> {
    let Dependence::Sieve { order } = spec.dependence else {
        return Err(Error::param("SMLE needs a sieve dependence specification"));
    };
    check_data(data, spec)?;
    let m = spec.dim();
    let mut warnings = Vec::new();
    let cells = order.pow(m as u32);
    if data.nrows() < cells {
        warnings.push(format!(
            "{} observations for {cells} histogram cells; histogram under-populated",
            data.nrows()
        ));
    }
    let qmle = fit_qmle(data, spec)?;
    let layout = BetaLayout::new(&spec.marginals, &spec.shared)?;
    let map = LogLinearMap::new(order, m)?;
    let frozen = ObservationTerms::compute_inner(data, &layout, &qmle.marginals, false)?.u;
    let obj = Objective {
        data,
        layout: &layout,
        templates: &spec.marginals,
        kind: DepKind::Sieve(&map),
        frozen: Some(&frozen),
        scaling: RefCell::default(),
    };
    // start from the smoothed histogram unless uniform weights fit better
    let hist = SieveCopula::empirical_init(&frozen, order)?;
    let mut phi0 = map.phi_from_weights(&hist)?;
    let mut scratch = vec![0.0; map.n_free()];
    let uniform = vec![0.0; map.n_free()];
    let f_hist = obj.dependence_only(&phi0, &mut scratch).unwrap_or(f64::INFINITY);
    let f_unif = obj.dependence_only(&uniform, &mut scratch)?;
    if !(f_hist <= f_unif) {
        phi0 = uniform;
    }
    let opts = BfgsOptions {
        max_step: spec.optimizer.max_step.or(Some(SIEVE_MAX_STEP)),
        ..spec.optimizer
    };
    let mut iters = qmle.n_iter;
    if spec.warm_up.unwrap_or(order >= WARM_UP_ORDER) {
        let warm = run(|z, g| obj.dependence_only(z, g), &phi0, &opts);
        iters += warm.iterations;
        phi0 = warm.x;
    }
    let mut z0 = layout.to_unconstrained(&qmle.beta_hat);
    z0.extend_from_slice(&phi0);
    let min = run(|z, g| obj.joint(z, g), &z0, &opts);
    let p = layout.len();
    let sieve = map.weights_warm(&min.x[p..], &mut obj.scaling.borrow_mut())?;
    finish(
        Estimator::Smle,
        data,
        &layout,
        &spec.marginals,
        &spec.shared,
        &min.x[..p],
        FittedDependence::Sieve { sieve },
        &min,
        iters + min.iterations,
        warnings,
    )
}

/// Dispatch on the spec's dependence choice.
pub fn fit(data: &DataMatrix, spec: &JointModelSpec) -> Result<FitResult> {
    match spec.dependence {
        Dependence::IndependenceAssumed => fit_qmle(data, spec),
        Dependence::Parametric { .. } => fit_fmle(data, spec),
        Dependence::Sieve { .. } => fit_smle(data, spec),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    #[default]
    Aic,
    Bic,
}

impl std::str::FromStr for Criterion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "aic" => Ok(Criterion::Aic),
            "bic" => Ok(Criterion::Bic),
            _ => Err(Error::param(format!("unknown criterion '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderRow {
    pub order: usize,
    pub k: usize,
    pub loglik: Option<f64>,
    pub aic: Option<f64>,
    pub bic: Option<f64>,
    pub beta_hat: Option<Vec<f64>>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderSelection {
    pub criterion: Criterion,
    pub j_star: usize,
    pub rows: Vec<OrderRow>,
}

/// Index of the smallest value; ties within 1e-9 go to the earliest entry
/// (the grid is sorted ascending so this is the smallest order).
pub fn argmin_parsimonious(values: &[(usize, f64)]) -> Option<usize> {
    let best = values.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
    values
        .iter()
        .filter(|v| v.1 <= best + 1e-9)
        .map(|v| v.0)
        .min()
}

/// Fit the sieve estimator at every order in `grid` and pick the order
/// minimizing the chosen information criterion.
pub fn select_order(
    data: &DataMatrix,
    spec: &JointModelSpec,
    grid: &[usize],
    criterion: Criterion,
) -> Result<OrderSelection> {
    if grid.is_empty() {
        return Err(Error::param("empty sieve-order grid"));
    }
    let mut grid = grid.to_vec();
    grid.sort_unstable();
    grid.dedup();
    let p = BetaLayout::new(&spec.marginals, &spec.shared)?.len();
    let rows: Vec<OrderRow> = grid
        .iter()
        .map(|&order| {
            let k = free_parameter_count(order, spec.dim()) + p;
            match fit_smle(data, &spec.with_dependence(Dependence::Sieve { order })) {
                Ok(f) => OrderRow {
                    order,
                    k,
                    loglik: Some(f.loglik),
                    aic: Some(f.criterion_values.aic),
                    bic: Some(f.criterion_values.bic),
                    beta_hat: Some(f.beta_hat),
                    error: None,
                },
                Err(e) => OrderRow {
                    order,
                    k,
                    loglik: None,
                    aic: None,
                    bic: None,
                    beta_hat: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let scored: Vec<(usize, f64)> = rows
        .iter()
        .filter_map(|r| {
            let v = match criterion {
                Criterion::Aic => r.aic,
                Criterion::Bic => r.bic,
            }?;
            Some((r.order, v))
        })
        .collect();
    let j_star = argmin_parsimonious(&scored).ok_or_else(|| Error::NonConvergence {
        iterations: 0,
        context: "every order in the grid failed to fit".into(),
    })?;
    Ok(OrderSelection {
        criterion,
        j_star,
        rows,
    })
}

/// JSON model configuration for the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub model: JointModelSpec,
    #[serde(default)]
    pub j_grid: Vec<usize>,
    #[serde(default)]
    pub criterion: Criterion,
}

impl ModelConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)?;
        cfg.model.validate()?;
        if let Some(&bad) = cfg.j_grid.iter().find(|&&j| j < 1 || j > crate::sieve::MAX_ORDER) {
            return Err(Error::param(format!("sieve order {bad} in grid out of range")));
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::copulas::ParametricCopula;
    use crate::optim::numerical_gradient;
    use crate::simlab::DgpSpec;

    fn exp_pair() -> Vec<MarginalModel> {
        vec![MarginalModel::exponential(0.5).unwrap(), MarginalModel::exponential(1.0).unwrap()]
    }

    fn plackett_data(n: usize, seed: u64) -> DataMatrix {
        DgpSpec {
            marginals: exp_pair(),
            copula: ParametricCopula::plackett(0.05).unwrap(),
            n,
            seed,
        }
        .generate()
        .unwrap()
    }

    #[test]
    fn qmle_closed_form() {
        let data = DataMatrix::from_columns(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let spec = JointModelSpec::new(
            vec![MarginalModel::exponential(1.0).unwrap()],
            Dependence::IndependenceAssumed,
        );
        let f = fit_qmle(&data, &spec).unwrap();
        assert!((f.beta_hat[0] - 2.0).abs() < 1e-12);
        let spec = JointModelSpec {
            data_start: false,
            ..spec
        };
        let f = fit_qmle(&data, &spec).unwrap();
        assert!((f.beta_hat[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn shared_parameters_pool() {
        let data = DataMatrix::from_columns(&[vec![1.0, 2.0], vec![4.0, 5.0]]).unwrap();
        let mut spec = JointModelSpec::new(exp_pair(), Dependence::IndependenceAssumed);
        spec.shared = vec![vec![ParamRef { marginal: 0, param: 0 }, ParamRef { marginal: 1, param: 0 }]];
        let f = fit_qmle(&data, &spec).unwrap();
        assert_eq!(f.beta_hat.len(), 1);
        assert!((f.beta_hat[0] - 3.0).abs() < 1e-6);
        spec.shared.push(vec![ParamRef { marginal: 0, param: 0 }]);
        assert!(fit_qmle(&data, &spec).is_err());
    }

    #[test]
    fn independence_fmle_is_qmle() {
        let data = plackett_data(300, 1);
        let spec = JointModelSpec::new(
            exp_pair(),
            Dependence::Parametric {
                copula: ParametricCopula::independence(2),
            },
        );
        let q = fit_qmle(&data, &spec).unwrap();
        let f = fit_fmle(&data, &spec).unwrap();
        for (a, b) in q.beta_hat.iter().zip(&f.beta_hat) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn objective_gradients_match_finite_differences() {
        let data = plackett_data(200, 3);
        let layout = BetaLayout::new(&exp_pair(), &[]).unwrap();
        let cop = ParametricCopula::plackett(0.2).unwrap();
        let map = LogLinearMap::new(4, 2).unwrap();
        let marg = exp_pair();
        for kind in [DepKind::Parametric(&cop), DepKind::Sieve(&map)] {
            let obj = Objective {
                data: &data,
                layout: &layout,
                templates: &marg,
                kind,
                frozen: None,
                scaling: RefCell::default(),
            };
            let mut z = vec![(0.6f64).ln(), (0.9f64).ln()];
            z.extend((0..obj.n_dep()).map(|k| 0.3 * ((k as f64) * 1.7).sin() - 1.0));
            let mut g = vec![0.0; z.len()];
            obj.joint(&z, &mut g).unwrap();
            let fd = numerical_gradient(
                |x| {
                    let mut s = vec![0.0; x.len()];
                    obj.joint(x, &mut s).unwrap()
                },
                &z,
                1e-6,
            );
            for (a, b) in g.iter().zip(&fd) {
                assert!((a - b).abs() < 1e-6 * b.abs().max(1e-2), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn smle_improves_on_uniform_start() {
        let data = plackett_data(500, 4);
        let spec = JointModelSpec::new(exp_pair(), Dependence::Sieve { order: 5 });
        let q = fit_qmle(&data, &spec).unwrap();
        let s = fit_smle(&data, &spec).unwrap();
        assert!(s.loglik >= q.loglik);
        let recomputed = joint_loglik(&data, &s.marginals, &s.dependence_hat).unwrap();
        assert!((recomputed - s.loglik).abs() < 1e-8);
        assert_eq!(s.n_params, 16 + 2);
        let again = fit_smle(&data, &spec).unwrap();
        assert_eq!(again, s);
    }

    #[test]
    fn criteria_arithmetic() {
        assert!((aic(2 + 64, -835.55) - 1803.10).abs() < 0.005);
        assert!((aic(3, -1106.44) - 2218.88).abs() < 0.01);
        assert!((bic(6, -1007.75, 1000) - 2056.95).abs() < 0.01);
        assert_eq!(argmin_parsimonious(&[(3, 1.0), (4, 1.0 + 1e-12), (5, 2.0)]), Some(3));
    }

    #[test]
    fn config_parsing() {
        let text = r#"{
            "model": {
                "marginals": [{"family": {"type": "exponential"}, "params": [1.0]},
                              {"family": {"type": "exponential"}, "params": [1.0]}],
                "dependence": {"kind": "sieve", "order": 5}
            },
            "j_grid": [2, 3, 4],
            "criterion": "bic"
        }"#;
        let cfg = ModelConfig::from_json(text).unwrap();
        assert_eq!(cfg.criterion, Criterion::Bic);
        assert!(ModelConfig::from_json(&text.replace("[1.0]}", "[-1.0]}")).is_err());
    }
}
