//! Asymptotic covariance of the marginal parameter estimates.
//!
//! For the sieve estimator the efficient score is
//! `S_q = d ln f / d beta_q + sum_j (d ln c / d u_j) dF_j / d beta_q + g_q(u) / c(u)`,
//! where `g_q` is fitted by least squares on a cosine tensor basis. QMLE
//! uses the marginal Fisher information and parametric fits the outer
//! product of the full score.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::DataMatrix;
use crate::error::{Error, Result};
use crate::estimate::{BetaLayout, Estimator, FitResult, FittedDependence, ObservationTerms, ParamRef};
use crate::marginals::MarginalModel;
use crate::sieve::{Workspace, DENSITY_FLOOR};

/// Default number of frequencies per axis.
pub const DEFAULT_FREQUENCIES: usize = 10;
/// A ridge of `RIDGE_SCALE * trace` is added when the regressor Gram matrix
/// has a condition number above `MAX_CONDITION`.
pub const MAX_CONDITION: f64 = 1e12;
pub const RIDGE_SCALE: f64 = 1e-10;
const CHUNK_ROWS: usize = 4096;

/// `g(u) = sum_k coeffs[k] prod_l cos(k_l pi u_l)` over `k in {1..K}^m`,
/// with the last axis varying fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineTensorSieve {
    pub k: usize,
    pub dim: usize,
    pub coeffs: Vec<f64>,
}

impl CosineTensorSieve {
    pub fn zero(k: usize, dim: usize) -> Self {
        CosineTensorSieve {
            k,
            dim,
            coeffs: vec![0.0; basis_len(k, dim)],
        }
    }

    pub fn value(&self, u: &[f64]) -> f64 {
        let mut basis = vec![0.0; self.coeffs.len()];
        cosine_basis(self.k, u, &mut basis);
        basis.iter().zip(&self.coeffs).map(|(b, c)| b * c).sum()
    }
}

pub fn basis_len(k: usize, dim: usize) -> usize {
    k.pow(dim as u32)
}

/// All products `prod_l cos(k_l pi u_l)`, `k_l = 1..=k`, into `out`.
pub fn cosine_basis(k: usize, u: &[f64], out: &mut [f64]) {
    let tables: Vec<Vec<f64>> = u
        .iter()
        .map(|&x| (1..=k).map(|f| (f as f64 * PI * x).cos()).collect())
        .collect();
    let mut len = 1;
    out[0] = 1.0;
    for t in &tables {
        // expand in place from the back so earlier entries stay readable
        for a in (0..len).rev() {
            let base = out[a];
            for (f, &c) in t.iter().enumerate().rev() {
                out[a * k + f] = base * c;
            }
        }
        len *= k;
    }
}

/// Per-observation pieces of the efficient score, each `n x p` row-major.
#[derive(Debug, Clone)]
pub struct ScoreDecomposition {
    pub n: usize,
    pub p: usize,
    /// `d ln f / d beta`.
    pub marginal: Vec<f64>,
    /// `sum_j (d ln c / d u_j) dF_j / d beta`.
    pub copula: Vec<f64>,
    /// `g_q(u) / c(u)`; zero when no `g` is supplied.
    pub correction: Vec<f64>,
}

impl ScoreDecomposition {
    pub fn total(&self, i: usize, q: usize) -> f64 {
        let a = i * self.p + q;
        self.marginal[a] + self.copula[a] + self.correction[a]
    }

    pub fn column_means(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.p];
        for i in 0..self.n {
            for (q, o) in out.iter_mut().enumerate() {
                *o += self.total(i, q);
            }
        }
        out.iter_mut().for_each(|v| *v /= self.n as f64);
        out
    }

    /// `n^-1 sum_i S_i S_i'`.
    pub fn second_moment(&self) -> DMatrix<f64> {
        let p = self.p;
        let mut m = DMatrix::<f64>::zeros(p, p);
        let mut s = vec![0.0; p];
        for i in 0..self.n {
            for (q, v) in s.iter_mut().enumerate() {
                *v = self.total(i, q);
            }
            for a in 0..p {
                for b in 0..p {
                    m[(a, b)] += s[a] * s[b];
                }
            }
        }
        m / self.n as f64
    }
}

/// Pseudo-observations, fitted density and score pieces at the estimate.
struct Assembled {
    terms: ObservationTerms,
    chat: Vec<f64>,
    copula: Vec<f64>,
}

fn assemble(fit: &FitResult, data: &DataMatrix) -> Result<Assembled> {
    let layout = BetaLayout::new(&fit.marginals, &fit.shared)?;
    let terms = ObservationTerms::compute(data, &layout, &fit.marginals)?;
    let (n, m, p) = (terms.n, terms.m, terms.p);
    let mut chat = vec![1.0; n];
    let mut copula = vec![0.0; n * p];
    let mut dlog = vec![0.0; m];
    let mut ws = match &fit.dependence_hat {
        FittedDependence::Sieve { sieve } => Some(Workspace::new(sieve.order(), sieve.dim())),
        _ => None,
    };
    for i in 0..n {
        let u = terms.u.row(i);
        match &fit.dependence_hat {
            FittedDependence::Independence => continue,
            FittedDependence::Parametric { copula } => {
                chat[i] = copula.density(u)?;
                dlog.copy_from_slice(&copula.dlogdensity_du(u)?);
            }
            FittedDependence::Sieve { sieve } => {
                let ws = ws.as_mut().expect("sieve workspace");
                let c = ws.density(sieve, u);
                chat[i] = c;
                if c > DENSITY_FLOOR {
                    ws.density_gradient(sieve, u, &mut dlog);
                    dlog.iter_mut().for_each(|v| *v /= c);
                }
            }
        }
        if !(chat[i] > DENSITY_FLOOR) {
            return Err(Error::Singular(format!(
                "fitted copula density {:e} at observation {}",
                chat[i],
                i + 1
            )));
        }
        for j in 0..m {
            let base = (i * m + j) * p;
            for q in 0..p {
                copula[i * p + q] += dlog[j] * terms.du_dbeta[base + q];
            }
        }
    }
    Ok(Assembled { terms, chat, copula })
}

/// Least-squares fit of `g_q`, one per marginal parameter: minimize
/// `sum_i (b_iq + g_q(u_i) / c(u_i))^2` where `b_iq` is the marginal plus
/// copula-derivative score.
pub fn fit_gstar(fit: &FitResult, data: &DataMatrix, k: usize) -> Result<Vec<CosineTensorSieve>> {
    if k == 0 {
        return Err(Error::param("at least one cosine frequency is required"));
    }
    let a = assemble(fit, data)?;
    let p = a.terms.p;
    let mut bracket = a.terms.score;
    for (b, c) in bracket.iter_mut().zip(&a.copula) {
        *b += c;
    }
    least_squares_gstar(&a.terms.u, &a.chat, &bracket, p, k)
}

/// Least-squares core of [`fit_gstar`]: `bracket` is `n x p` row-major,
/// `chat` the fitted copula density at each row of `u`.
pub fn least_squares_gstar(
    u: &DataMatrix,
    chat: &[f64],
    bracket: &[f64],
    p: usize,
    k: usize,
) -> Result<Vec<CosineTensorSieve>> {
    let (n, m) = (u.nrows(), u.ncols());
    if chat.len() != n || bracket.len() != n * p {
        return Err(Error::DimensionMismatch {
            expected: n * p,
            got: bracket.len(),
        });
    }
    let len = basis_len(k, m);
    let mut gram = DMatrix::<f64>::zeros(len, len);
    let mut cross = DMatrix::<f64>::zeros(len, p);
    let mut basis = vec![0.0; len];
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK_ROWS).min(n);
        let rows = end - start;
        let mut x = DMatrix::<f64>::zeros(rows, len);
        let mut b = DMatrix::<f64>::zeros(rows, p);
        for i in start..end {
            cosine_basis(k, u.row(i), &mut basis);
            let inv_c = 1.0 / chat[i];
            for (col, v) in basis.iter().enumerate() {
                x[(i - start, col)] = v * inv_c;
            }
            for q in 0..p {
                b[(i - start, q)] = bracket[i * p + q];
            }
        }
        gram += x.transpose() * &x;
        cross += x.transpose() * b;
        start = end;
    }
    let gram = regularize(gram)?;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Singular("cosine regressor Gram matrix is singular".into()))?;
    let coef = chol.solve(&(-cross));
    Ok((0..p)
        .map(|q| CosineTensorSieve {
            k,
            dim: m,
            coeffs: coef.column(q).iter().copied().collect(),
        })
        .collect())
}

fn regularize(mut gram: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = gram.clone().symmetric_eigen();
    let hi = eig.eigenvalues.max();
    let lo = eig.eigenvalues.min();
    if !(hi > 0.0) {
        return Err(Error::Singular("cosine regressor Gram matrix vanishes".into()));
    }
    if !(lo > 0.0) || hi / lo > MAX_CONDITION {
        let ridge = RIDGE_SCALE * gram.trace();
        for d in 0..gram.nrows() {
            gram[(d, d)] += ridge;
        }
    }
    Ok(gram)
}

/// The efficient-score pieces at the fit; `gstar` adds the `g / c` term.
pub fn score_decomposition(
    fit: &FitResult,
    data: &DataMatrix,
    gstar: Option<&[CosineTensorSieve]>,
) -> Result<ScoreDecomposition> {
    let a = assemble(fit, data)?;
    let (n, m, p) = (a.terms.n, a.terms.m, a.terms.p);
    let mut correction = vec![0.0; n * p];
    if let Some(g) = gstar {
        if g.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: g.len(),
            });
        }
        let k = g[0].k;
        if g.iter().any(|s| s.dim != m || s.k != k) {
            return Err(Error::param("g sieves differ in shape from the data"));
        }
        let mut basis = vec![0.0; basis_len(k, m)];
        for i in 0..n {
            cosine_basis(k, a.terms.u.row(i), &mut basis);
            for (q, s) in g.iter().enumerate() {
                let v: f64 = basis.iter().zip(&s.coeffs).map(|(b, c)| b * c).sum();
                correction[i * p + q] = v / a.chat[i];
            }
        }
    }
    Ok(ScoreDecomposition {
        n,
        p,
        marginal: a.terms.score,
        copula: a.copula,
        correction,
    })
}

/// `(n^-1 sum_i S_i S_i')^-1` for the efficient score at the fit.
pub fn asymptotic_covariance(
    fit: &FitResult,
    data: &DataMatrix,
    gstar: &[CosineTensorSieve],
) -> Result<Vec<Vec<f64>>> {
    covariance_from_scores(&score_decomposition(fit, data, Some(gstar))?)
}

/// Inverse of the score second moment.
pub fn covariance_from_scores(s: &ScoreDecomposition) -> Result<Vec<Vec<f64>>> {
    invert_spd(s.second_moment(), "score second moment").map(to_rows)
}

/// Inverse expected Fisher information of the marginals, pooled over
/// shared parameters. This is the QMLE asymptotic covariance whenever no
/// parameters are shared (and under independence in general).
pub fn qmle_avar(marginals: &[MarginalModel], shared: &[Vec<ParamRef>]) -> Result<Vec<Vec<f64>>> {
    let layout = BetaLayout::new(marginals, shared)?;
    let p = layout.len();
    let mut info = DMatrix::<f64>::zeros(p, p);
    for (j, m) in marginals.iter().enumerate() {
        let fi = m.fisher_information();
        for (a, row) in fi.iter().enumerate() {
            for (b, v) in row.iter().enumerate() {
                info[(layout.slot(j, a), layout.slot(j, b))] += v;
            }
        }
    }
    invert_spd(info, "Fisher information").map(to_rows)
}

/// `beta` block of the inverse outer-product-of-gradients matrix of the full
/// (marginal plus copula-parameter) score of a parametric fit.
pub fn parametric_avar(fit: &FitResult, data: &DataMatrix) -> Result<Vec<Vec<f64>>> {
    let copula = match &fit.dependence_hat {
        FittedDependence::Parametric { copula } => copula,
        FittedDependence::Independence => {
            return covariance_from_scores(&score_decomposition(fit, data, None)?);
        }
        FittedDependence::Sieve { .. } => {
            return Err(Error::Unsupported("parametric covariance of a sieve fit".into()))
        }
    };
    let a = assemble(fit, data)?;
    let (n, p) = (a.terms.n, a.terms.p);
    let r = copula.params().len();
    let d = p + r;
    let mut opg = DMatrix::<f64>::zeros(d, d);
    let mut s = vec![0.0; d];
    for i in 0..n {
        for q in 0..p {
            s[q] = a.terms.score[i * p + q] + a.copula[i * p + q];
        }
        s[p..].copy_from_slice(&copula.dlogdensity_dparams(a.terms.u.row(i))?);
        for x in 0..d {
            for y in 0..d {
                opg[(x, y)] += s[x] * s[y];
            }
        }
    }
    let inv = invert_spd(opg / n as f64, "score outer product")?;
    Ok((0..p).map(|x| (0..p).map(|y| inv[(x, y)]).collect()).collect())
}

/// Asymptotic covariance appropriate to the estimator that produced `fit`;
/// `k` is the per-axis cosine frequency count used for sieve fits.
pub fn avar_for_fit(fit: &FitResult, data: &DataMatrix, k: usize) -> Result<Vec<Vec<f64>>> {
    match fit.estimator {
        Estimator::Qmle => qmle_avar(&fit.marginals, &fit.shared),
        Estimator::Fmle => parametric_avar(fit, data),
        Estimator::Smle => {
            let g = fit_gstar(fit, data, k)?;
            asymptotic_covariance(fit, data, &g)
        }
    }
}

/// Per-parameter `diag(avar_b) / diag(avar_a)`; with `avar_a` the QMLE
/// covariance, values below one are efficiency gains of `b`.
pub fn are(avar_a: &[Vec<f64>], avar_b: &[Vec<f64>]) -> Result<Vec<f64>> {
    if avar_a.len() != avar_b.len() {
        return Err(Error::DimensionMismatch {
            expected: avar_a.len(),
            got: avar_b.len(),
        });
    }
    Ok((0..avar_a.len()).map(|q| avar_b[q][q] / avar_a[q][q]).collect())
}

fn invert_spd(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym = (&m + m.transpose()) * 0.5;
    let inv = sym
        .cholesky()
        .ok_or_else(|| Error::Singular(format!("{what} is not positive definite")))?
        .inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

fn to_rows(m: DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::copulas::ParametricCopula;
    use crate::estimate::{fit_qmle, Dependence, JointModelSpec};
    use crate::quadrature::GaussLegendre;
    use crate::simlab::DgpSpec;

    fn exp_pair() -> Vec<MarginalModel> {
        vec![MarginalModel::exponential(0.5).unwrap(), MarginalModel::exponential(1.0).unwrap()]
    }

    #[test]
    fn basis_has_zero_integral_and_zero_slices() {
        let gl = GaussLegendre::new(40);
        let (x, w) = gl.composite(0.0, 1.0, 4);
        let k = 4;
        let mut basis = vec![0.0; basis_len(k, 2)];
        let mut total = vec![0.0; basis.len()];
        for (a, wa) in x.iter().zip(&w) {
            let mut slice = vec![0.0; basis.len()];
            for (b, wb) in x.iter().zip(&w) {
                cosine_basis(k, &[*a, *b], &mut basis);
                for (t, v) in total.iter_mut().zip(&basis) {
                    *t += wa * wb * v;
                }
                for (s, v) in slice.iter_mut().zip(&basis) {
                    *s += wb * v;
                }
            }
            assert!(slice.iter().all(|s| s.abs() < 1e-10));
        }
        assert!(total.iter().all(|t| t.abs() < 1e-10));
    }

    #[test]
    fn basis_ordering() {
        let mut out = vec![0.0; 9];
        let u = [0.2, 0.7];
        cosine_basis(3, &u, &mut out);
        for a in 0..3 {
            for b in 0..3 {
                let want = ((a + 1) as f64 * PI * u[0]).cos() * ((b + 1) as f64 * PI * u[1]).cos();
                assert!((out[a * 3 + b] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn recovers_exact_cosine_multiple() {
        let n = 500;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| vec![(i as f64 + 0.5) / n as f64, ((i * 37 % n) as f64 + 0.3) / n as f64])
            .collect();
        let u = DataMatrix::from_rows(&rows).unwrap();
        let chat: Vec<f64> = rows.iter().map(|r| 1.0 + 0.5 * (r[0] - 0.5) * (r[1] - 0.5)).collect();
        let konst = 0.731;
        let bracket: Vec<f64> = rows
            .iter()
            .zip(&chat)
            .map(|(r, c)| konst * (PI * r[0]).cos() * (PI * r[1]).cos() / c)
            .collect();
        let g = least_squares_gstar(&u, &chat, &bracket, 1, 1).unwrap();
        assert!((g[0].coeffs[0] + konst).abs() < 1e-8);
    }

    #[test]
    fn inverse_of_known_score_variance() {
        let marginal: Vec<f64> = (0..400).map(|i| ((i as f64) * 0.37).sin() * 1.3).collect();
        let v = marginal.iter().map(|s| s * s).sum::<f64>() / 400.0;
        let s = ScoreDecomposition {
            n: 400,
            p: 1,
            copula: vec![0.0; 400],
            correction: vec![0.0; 400],
            marginal,
        };
        let cov = covariance_from_scores(&s).unwrap();
        assert!((cov[0][0] - 1.0 / v).abs() < 1e-8);
    }

    #[test]
    fn qmle_closed_forms() {
        let cov = qmle_avar(&exp_pair(), &[]).unwrap();
        assert_eq!(cov[0][0], 0.25);
        assert_eq!(cov[1][1], 1.0);
        assert_eq!(cov[0][1], 0.0);
        let g = vec![
            MarginalModel::gaussian(0.0, 2.0).unwrap(),
            MarginalModel::gaussian_fixed_variance(1.0, 3.0).unwrap(),
        ];
        let cov = qmle_avar(&g, &[]).unwrap();
        assert!((cov[0][0] - 4.0).abs() < 1e-12);
        assert!((cov[1][1] - 2.0).abs() < 1e-12);
        assert!((cov[2][2] - 3.0).abs() < 1e-12);
        let shared = vec![vec![
            ParamRef { marginal: 0, param: 0 },
            ParamRef { marginal: 1, param: 0 },
        ]];
        let cov = qmle_avar(&[exp_pair()[1].clone(), exp_pair()[1].clone()], &shared).unwrap();
        assert!((cov[0][0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gstar_vanishes_under_independence() {
        let marg = exp_pair();
        let mut sizes = Vec::new();
        for n in [2_000, 40_000] {
            let data = DgpSpec {
                marginals: marg.clone(),
                copula: ParametricCopula::independence(2),
                n,
                seed: 5,
            }
            .generate()
            .unwrap();
            let fit = fit_qmle(&data, &JointModelSpec::new(marg.clone(), Dependence::IndependenceAssumed)).unwrap();
            let g = fit_gstar(&fit, &data, 3).unwrap();
            let norm = g.iter().flat_map(|s| &s.coeffs).fold(0.0f64, |m, c| m.max(c.abs()));
            sizes.push(norm);
        }
        assert!(sizes[1] < sizes[0]);
        assert!(sizes[1] < 0.05, "{sizes:?}");
    }

    #[test]
    fn correction_never_raises_second_moment() {
        let marg = exp_pair();
        let data = DgpSpec {
            marginals: marg.clone(),
            copula: ParametricCopula::plackett(0.2).unwrap(),
            n: 3000,
            seed: 9,
        }
        .generate()
        .unwrap();
        let spec = JointModelSpec::new(marg, Dependence::Sieve { order: 4 });
        let fit = crate::estimate::fit_smle(&data, &spec).unwrap();
        let g = fit_gstar(&fit, &data, 5).unwrap();
        let with = score_decomposition(&fit, &data, Some(&g)).unwrap().second_moment();
        let without = score_decomposition(&fit, &data, None).unwrap().second_moment();
        for q in 0..2 {
            assert!(with[(q, q)] <= without[(q, q)] + 1e-12);
        }
        let cov = asymptotic_covariance(&fit, &data, &g).unwrap();
        assert!((cov[0][1] - cov[1][0]).abs() < 1e-12);
        let m = DMatrix::from_fn(2, 2, |a, b| cov[a][b]);
        assert!(m.symmetric_eigen().eigenvalues.min() > 0.0);
    }

    #[test]
    fn are_ratios() {
        let a = vec![vec![0.25, 0.1], vec![0.1, 1.0]];
        assert_eq!(are(&a, &a).unwrap(), vec![1.0, 1.0]);
        let b = vec![vec![0.2, 0.0], vec![0.0, 0.5]];
        assert_eq!(are(&a, &b).unwrap(), vec![0.8, 0.5]);
        assert!(are(&a, &[vec![1.0]]).is_err());
    }
}
