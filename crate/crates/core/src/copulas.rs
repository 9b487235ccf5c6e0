//! Parametric copula families.
//!
//! Bivariate Archimedean-type families (Clayton, its 90 degree rotation,
//! Plackett, Frank) and the elliptical Gaussian and Student-t copulas in any
//! dimension. Each family provides its log density, the gradient of the log
//! density in the uniform arguments, an exact sampler and Spearman's rho.

use nalgebra::DMatrix;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Exp1, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::DataMatrix;
use crate::error::{Error, Result};
use crate::quadrature::GaussLegendre;
use crate::special::{
    ln_gamma, norm_cdf, norm_quantile, student_t_cdf, student_t_ln_pdf, student_t_quantile,
};

/// Tail parameter bounds for the Student-t copula while fitting.
pub const T_COPULA_DF_MIN: f64 = 2.0;
pub const T_COPULA_DF_MAX: f64 = 200.0;

/// Symmetric positive definite matrix with unit diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct CorrelationMatrix {
    dim: usize,
    values: Vec<f64>,
    inverse: Vec<f64>,
    chol: Vec<f64>,
    ln_det: f64,
}

impl CorrelationMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.len();
        if dim < 2 || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::param("correlation matrix must be square with dim >= 2"));
        }
        let mut values = Vec::with_capacity(dim * dim);
        for (i, r) in rows.iter().enumerate() {
            for (j, &v) in r.iter().enumerate() {
                if !v.is_finite() || (i == j && (v - 1.0).abs() > 1e-12) {
                    return Err(Error::param("correlation matrix needs a unit diagonal"));
                }
                if (v - rows[j][i]).abs() > 1e-12 || v.abs() > 1.0 {
                    return Err(Error::param("correlation matrix must be symmetric in [-1,1]"));
                }
                values.push(v);
            }
        }
        let m = DMatrix::from_row_slice(dim, dim, &values);
        let chol = m
            .clone()
            .cholesky()
            .ok_or_else(|| Error::param("correlation matrix is not positive definite"))?;
        let l = chol.l();
        let ln_det = 2.0 * (0..dim).map(|i| l[(i, i)].ln()).sum::<f64>();
        let inv = chol.inverse();
        let to_rows = |a: &DMatrix<f64>| {
            let mut out = Vec::with_capacity(dim * dim);
            for i in 0..dim {
                for j in 0..dim {
                    out.push(a[(i, j)]);
                }
            }
            out
        };
        Ok(CorrelationMatrix {
            dim,
            values,
            inverse: to_rows(&inv),
            chol: to_rows(&l),
            ln_det,
        })
    }

    pub fn identity(dim: usize) -> Result<Self> {
        Self::new((0..dim).map(|i| (0..dim).map(|j| (i == j) as u8 as f64).collect()).collect())
    }

    pub fn bivariate(rho: f64) -> Result<Self> {
        Self::new(vec![vec![1.0, rho], vec![rho, 1.0]])
    }

    /// Build from the strict upper triangle, row by row.
    pub fn from_upper(dim: usize, upper: &[f64]) -> Result<Self> {
        if upper.len() != dim * (dim - 1) / 2 {
            return Err(Error::DimensionMismatch {
                expected: dim * (dim - 1) / 2,
                got: upper.len(),
            });
        }
        let mut rows = vec![vec![0.0; dim]; dim];
        let mut k = 0;
        for i in 0..dim {
            rows[i][i] = 1.0;
            for j in i + 1..dim {
                rows[i][j] = upper[k];
                rows[j][i] = upper[k];
                k += 1;
            }
        }
        Self::new(rows)
    }

    /// Unconstrained parameterization: each row of the Cholesky factor is
    /// `(z_1, .., z_{i-1}, 1)` normalized to unit length, which always yields
    /// a valid correlation matrix.
    pub fn from_unconstrained(dim: usize, z: &[f64]) -> Result<Self> {
        let mut l = vec![0.0; dim * dim];
        let mut k = 0;
        for i in 0..dim {
            let mut norm = 1.0;
            for j in 0..i {
                l[i * dim + j] = z[k];
                norm += z[k] * z[k];
                k += 1;
            }
            l[i * dim + i] = 1.0;
            let norm = norm.sqrt();
            for j in 0..=i {
                l[i * dim + j] /= norm;
            }
        }
        let mut upper = Vec::with_capacity(dim * (dim - 1) / 2);
        for i in 0..dim {
            for j in i + 1..dim {
                let v: f64 = (0..=i).map(|c| l[i * dim + c] * l[j * dim + c]).sum();
                upper.push(v.clamp(-1.0, 1.0));
            }
        }
        Self::from_upper(dim, &upper)
    }

    /// Inverse of [`Self::from_unconstrained`].
    pub fn to_unconstrained(&self) -> Vec<f64> {
        let d = self.dim;
        let mut z = Vec::with_capacity(d * (d - 1) / 2);
        for i in 0..d {
            let diag = self.chol[i * d + i];
            for j in 0..i {
                z.push(self.chol[i * d + j] / diag);
            }
        }
        z
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.dim + j]
    }

    pub fn upper(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..self.dim {
            for j in i + 1..self.dim {
                out.push(self.get(i, j));
            }
        }
        out
    }

    pub fn ln_det(&self) -> f64 {
        self.ln_det
    }

    fn inv_times(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim;
        (0..d)
            .map(|i| (0..d).map(|j| self.inverse[i * d + j] * x[j]).sum())
            .collect()
    }

    fn chol_times(&self, z: &[f64]) -> Vec<f64> {
        let d = self.dim;
        (0..d)
            .map(|i| (0..=i).map(|j| self.chol[i * d + j] * z[j]).sum())
            .collect()
    }
}

impl TryFrom<Vec<Vec<f64>>> for CorrelationMatrix {
    type Error = Error;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        CorrelationMatrix::new(rows)
    }
}

impl From<CorrelationMatrix> for Vec<Vec<f64>> {
    fn from(c: CorrelationMatrix) -> Self {
        c.values.chunks(c.dim).map(|r| r.to_vec()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CopulaFamily {
    Independence,
    Gaussian,
    StudentT,
    Clayton,
    ClaytonRotated90,
    Plackett,
    Frank,
}

impl std::str::FromStr for CopulaFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "independence" => CopulaFamily::Independence,
            "gaussian" | "normal" => CopulaFamily::Gaussian,
            "student_t" | "t" => CopulaFamily::StudentT,
            "clayton" => CopulaFamily::Clayton,
            "clayton_rotated90" | "clayton90" | "clayton_rotated" => CopulaFamily::ClaytonRotated90,
            "plackett" => CopulaFamily::Plackett,
            "frank" => CopulaFamily::Frank,
            other => return Err(Error::param(format!("unknown copula family '{other}'"))),
        })
    }
}

impl std::fmt::Display for CopulaFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CopulaFamily::Independence => "independence",
            CopulaFamily::Gaussian => "gaussian",
            CopulaFamily::StudentT => "student_t",
            CopulaFamily::Clayton => "clayton",
            CopulaFamily::ClaytonRotated90 => "clayton_rotated90",
            CopulaFamily::Plackett => "plackett",
            CopulaFamily::Frank => "frank",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ParametricCopula {
    Independence { dim: usize },
    Gaussian { corr: CorrelationMatrix },
    StudentT { corr: CorrelationMatrix, df: f64 },
    /// `theta > 0`
    Clayton { theta: f64 },
    /// Clayton density evaluated at `(1 - u1, u2)`; negative dependence.
    ClaytonRotated90 { theta: f64 },
    /// Odds-ratio parameter `theta > 0`; `theta = 1` is independence.
    Plackett { theta: f64 },
    /// `theta != 0`; `theta -> 0` is independence.
    Frank { theta: f64 },
}

const FRANK_ZERO: f64 = 1e-10;

fn check_open_cube(u: &[f64]) -> Result<()> {
    if u.iter().all(|&v| v > 0.0 && v < 1.0) {
        Ok(())
    } else {
        Err(Error::domain(format!("copula argument {u:?} not in the open unit cube")))
    }
}

/// Uniform draw strictly inside (0, 1).
pub fn open_uniform<R: RngCore>(rng: &mut R) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

impl ParametricCopula {
    pub fn independence(dim: usize) -> Self {
        ParametricCopula::Independence { dim }
    }

    pub fn gaussian(rho: f64) -> Result<Self> {
        Ok(ParametricCopula::Gaussian {
            corr: CorrelationMatrix::bivariate(rho)?,
        })
    }

    pub fn gaussian_from(corr: CorrelationMatrix) -> Self {
        ParametricCopula::Gaussian { corr }
    }

    pub fn student_t(corr: CorrelationMatrix, df: f64) -> Result<Self> {
        let c = ParametricCopula::StudentT { corr, df };
        c.validate()?;
        Ok(c)
    }

    pub fn clayton(theta: f64) -> Result<Self> {
        let c = ParametricCopula::Clayton { theta };
        c.validate()?;
        Ok(c)
    }

    pub fn clayton_rotated90(theta: f64) -> Result<Self> {
        let c = ParametricCopula::ClaytonRotated90 { theta };
        c.validate()?;
        Ok(c)
    }

    pub fn plackett(theta: f64) -> Result<Self> {
        let c = ParametricCopula::Plackett { theta };
        c.validate()?;
        Ok(c)
    }

    pub fn frank(theta: f64) -> Result<Self> {
        let c = ParametricCopula::Frank { theta };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ParametricCopula::Independence { dim } => dim >= 2,
            ParametricCopula::Gaussian { .. } => true,
            ParametricCopula::StudentT { df, .. } => df > T_COPULA_DF_MIN && df.is_finite(),
            ParametricCopula::Clayton { theta } | ParametricCopula::ClaytonRotated90 { theta } => {
                theta > 0.0 && theta.is_finite()
            }
            ParametricCopula::Plackett { theta } => theta > 0.0 && theta.is_finite(),
            ParametricCopula::Frank { theta } => theta.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::param(format!("inadmissible copula parameters: {self:?}")))
        }
    }

    pub fn family(&self) -> CopulaFamily {
        match self {
            ParametricCopula::Independence { .. } => CopulaFamily::Independence,
            ParametricCopula::Gaussian { .. } => CopulaFamily::Gaussian,
            ParametricCopula::StudentT { .. } => CopulaFamily::StudentT,
            ParametricCopula::Clayton { .. } => CopulaFamily::Clayton,
            ParametricCopula::ClaytonRotated90 { .. } => CopulaFamily::ClaytonRotated90,
            ParametricCopula::Plackett { .. } => CopulaFamily::Plackett,
            ParametricCopula::Frank { .. } => CopulaFamily::Frank,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ParametricCopula::Independence { dim } => *dim,
            ParametricCopula::Gaussian { corr } | ParametricCopula::StudentT { corr, .. } => {
                corr.dim()
            }
            _ => 2,
        }
    }

    /// Natural dependence parameters (correlations in upper-triangle order,
    /// then the t tail parameter; or the scalar family parameter).
    pub fn params(&self) -> Vec<f64> {
        match self {
            ParametricCopula::Independence { .. } => vec![],
            ParametricCopula::Gaussian { corr } => corr.upper(),
            ParametricCopula::StudentT { corr, df } => {
                let mut p = corr.upper();
                p.push(*df);
                p
            }
            ParametricCopula::Clayton { theta }
            | ParametricCopula::ClaytonRotated90 { theta }
            | ParametricCopula::Plackett { theta }
            | ParametricCopula::Frank { theta } => vec![*theta],
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        match self {
            ParametricCopula::Independence { .. } => vec![],
            ParametricCopula::Gaussian { corr } | ParametricCopula::StudentT { corr, .. } => {
                let d = corr.dim();
                let mut names = Vec::new();
                for i in 0..d {
                    for j in i + 1..d {
                        names.push(format!("rho{}{}", i + 1, j + 1));
                    }
                }
                if matches!(self, ParametricCopula::StudentT { .. }) {
                    names.push("tau".into());
                }
                names
            }
            _ => vec!["theta".into()],
        }
    }

    pub fn with_params(&self, p: &[f64]) -> Result<Self> {
        let c = match self {
            ParametricCopula::Independence { dim } => ParametricCopula::Independence { dim: *dim },
            ParametricCopula::Gaussian { corr } => ParametricCopula::Gaussian {
                corr: CorrelationMatrix::from_upper(corr.dim(), p)?,
            },
            ParametricCopula::StudentT { corr, .. } => {
                let k = p.len() - 1;
                ParametricCopula::StudentT {
                    corr: CorrelationMatrix::from_upper(corr.dim(), &p[..k])?,
                    df: p[k],
                }
            }
            ParametricCopula::Clayton { .. } => ParametricCopula::Clayton { theta: p[0] },
            ParametricCopula::ClaytonRotated90 { .. } => {
                ParametricCopula::ClaytonRotated90 { theta: p[0] }
            }
            ParametricCopula::Plackett { .. } => ParametricCopula::Plackett { theta: p[0] },
            ParametricCopula::Frank { .. } => ParametricCopula::Frank { theta: p[0] },
        };
        c.validate()?;
        Ok(c)
    }

    /// Parameters mapped to the real line for unconstrained optimization.
    pub fn to_unconstrained(&self) -> Vec<f64> {
        match self {
            ParametricCopula::Independence { .. } => vec![],
            ParametricCopula::Gaussian { corr } => corr.to_unconstrained(),
            ParametricCopula::StudentT { corr, df } => {
                let mut z = corr.to_unconstrained();
                let t = ((df - T_COPULA_DF_MIN) / (T_COPULA_DF_MAX - T_COPULA_DF_MIN))
                    .clamp(1e-12, 1.0 - 1e-12);
                z.push((t / (1.0 - t)).ln());
                z
            }
            ParametricCopula::Clayton { theta }
            | ParametricCopula::ClaytonRotated90 { theta }
            | ParametricCopula::Plackett { theta } => vec![theta.ln()],
            ParametricCopula::Frank { theta } => vec![*theta],
        }
    }

    pub fn from_unconstrained(&self, z: &[f64]) -> Result<Self> {
        let c = match self {
            ParametricCopula::Independence { dim } => ParametricCopula::Independence { dim: *dim },
            ParametricCopula::Gaussian { corr } => ParametricCopula::Gaussian {
                corr: CorrelationMatrix::from_unconstrained(corr.dim(), z)?,
            },
            ParametricCopula::StudentT { corr, .. } => {
                let k = z.len() - 1;
                let s = 1.0 / (1.0 + (-z[k]).exp());
                ParametricCopula::StudentT {
                    corr: CorrelationMatrix::from_unconstrained(corr.dim(), &z[..k])?,
                    df: T_COPULA_DF_MIN + (T_COPULA_DF_MAX - T_COPULA_DF_MIN) * s,
                }
            }
            ParametricCopula::Clayton { .. } => ParametricCopula::Clayton { theta: z[0].exp() },
            ParametricCopula::ClaytonRotated90 { .. } => {
                ParametricCopula::ClaytonRotated90 { theta: z[0].exp() }
            }
            ParametricCopula::Plackett { .. } => ParametricCopula::Plackett { theta: z[0].exp() },
            ParametricCopula::Frank { .. } => ParametricCopula::Frank { theta: z[0] },
        };
        c.validate()?;
        Ok(c)
    }

    fn check_dim(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: u.len(),
            });
        }
        Ok(())
    }

    pub fn log_density(&self, u: &[f64]) -> Result<f64> {
        self.check_dim(u)?;
        check_open_cube(u)?;
        Ok(self.log_density_unchecked(u))
    }

    pub fn density(&self, u: &[f64]) -> Result<f64> {
        self.log_density(u).map(f64::exp)
    }

    fn log_density_unchecked(&self, u: &[f64]) -> f64 {
        match self {
            ParametricCopula::Independence { .. } => 0.0,
            ParametricCopula::Gaussian { corr } => {
                let x: Vec<f64> = u.iter().map(|&v| norm_quantile(v)).collect();
                let ix = corr.inv_times(&x);
                let q: f64 = x.iter().zip(&ix).map(|(a, b)| a * (b - a)).sum();
                -0.5 * corr.ln_det() - 0.5 * q
            }
            ParametricCopula::StudentT { corr, df } => {
                let df = *df;
                let x: Vec<f64> = u.iter().map(|&v| student_t_quantile(v, df)).collect();
                t_copula_log_density(corr, df, &x)
            }
            ParametricCopula::Clayton { theta } => clayton_log_density(*theta, u[0], u[1]),
            ParametricCopula::ClaytonRotated90 { theta } => {
                clayton_log_density(*theta, 1.0 - u[0], u[1])
            }
            ParametricCopula::Plackett { theta } => {
                let (t, a, b) = (*theta, u[0], u[1]);
                let s = 1.0 + (t - 1.0) * (a + b);
                let q = s * s - 4.0 * t * (t - 1.0) * a * b;
                t.ln() + (1.0 + (t - 1.0) * (a + b - 2.0 * a * b)).ln() - 1.5 * q.ln()
            }
            ParametricCopula::Frank { theta } => {
                let t = *theta;
                if t.abs() < FRANK_ZERO {
                    return 0.0;
                }
                let (a, b) = (u[0], u[1]);
                let e1 = -(-t).exp_m1(); // 1 - e^{-t}
                let ea = -(-t * a).exp_m1();
                let eb = -(-t * b).exp_m1();
                let d = e1 - ea * eb;
                (t * e1).ln() - t * (a + b) - 2.0 * d.abs().ln()
            }
        }
    }

    /// Gradient of the log density in the uniform arguments.
    pub fn dlogdensity_du(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(u)?;
        check_open_cube(u)?;
        Ok(match self {
            ParametricCopula::Independence { dim } => vec![0.0; *dim],
            ParametricCopula::Gaussian { corr } => {
                let x: Vec<f64> = u.iter().map(|&v| norm_quantile(v)).collect();
                let ix = corr.inv_times(&x);
                x.iter()
                    .zip(&ix)
                    .map(|(&xj, &ixj)| (xj - ixj) / crate::special::norm_pdf(xj))
                    .collect()
            }
            ParametricCopula::StudentT { corr, df } => {
                let df = *df;
                let m = corr.dim() as f64;
                let x: Vec<f64> = u.iter().map(|&v| student_t_quantile(v, df)).collect();
                let ix = corr.inv_times(&x);
                let q: f64 = x.iter().zip(&ix).map(|(a, b)| a * b).sum();
                x.iter()
                    .zip(&ix)
                    .map(|(&xj, &ixj)| {
                        let dx = -(df + m) / df * ixj / (1.0 + q / df)
                            + (df + 1.0) / df * xj / (1.0 + xj * xj / df);
                        dx / student_t_ln_pdf(xj, df).exp()
                    })
                    .collect()
            }
            ParametricCopula::Clayton { theta } => {
                let (g1, g2) = clayton_log_grad(*theta, u[0], u[1]);
                vec![g1, g2]
            }
            ParametricCopula::ClaytonRotated90 { theta } => {
                let (g1, g2) = clayton_log_grad(*theta, 1.0 - u[0], u[1]);
                vec![-g1, g2]
            }
            ParametricCopula::Plackett { theta } => {
                let (t, a, b) = (*theta, u[0], u[1]);
                let s = 1.0 + (t - 1.0) * (a + b);
                let q = s * s - 4.0 * t * (t - 1.0) * a * b;
                let num = 1.0 + (t - 1.0) * (a + b - 2.0 * a * b);
                let ga = (t - 1.0) * (1.0 - 2.0 * b) / num
                    - 1.5 * (2.0 * s * (t - 1.0) - 4.0 * t * (t - 1.0) * b) / q;
                let gb = (t - 1.0) * (1.0 - 2.0 * a) / num
                    - 1.5 * (2.0 * s * (t - 1.0) - 4.0 * t * (t - 1.0) * a) / q;
                vec![ga, gb]
            }
            ParametricCopula::Frank { theta } => {
                let t = *theta;
                if t.abs() < FRANK_ZERO {
                    return Ok(vec![0.0, 0.0]);
                }
                let (a, b) = (u[0], u[1]);
                let e1 = -(-t).exp_m1();
                let ea = -(-t * a).exp_m1();
                let eb = -(-t * b).exp_m1();
                let d = e1 - ea * eb;
                vec![
                    -t + 2.0 * t * (-t * a).exp() * eb / d,
                    -t + 2.0 * t * (-t * b).exp() * ea / d,
                ]
            }
        })
    }

    /// Gradient of the log density in the natural dependence parameters,
    /// by central differences.
    pub fn dlogdensity_dparams(&self, u: &[f64]) -> Result<Vec<f64>> {
        let p = self.params();
        let mut out = Vec::with_capacity(p.len());
        let mut q = p.clone();
        for i in 0..p.len() {
            let h = 1e-5 * p[i].abs().max(0.1);
            q[i] = p[i] + h;
            let up = self.with_params(&q)?.log_density(u)?;
            q[i] = p[i] - h;
            let dn = self.with_params(&q)?.log_density(u)?;
            q[i] = p[i];
            out.push((up - dn) / (2.0 * h));
        }
        Ok(out)
    }

    /// Bivariate copula distribution function.
    pub fn cdf(&self, u: f64, v: f64) -> Result<f64> {
        if self.dim() != 2 {
            return Err(Error::Unsupported("copula cdf only for bivariate families".into()));
        }
        let u = u.clamp(0.0, 1.0);
        let v = v.clamp(0.0, 1.0);
        Ok(match self {
            ParametricCopula::Independence { .. } => u * v,
            ParametricCopula::Clayton { theta } => clayton_cdf(*theta, u, v),
            ParametricCopula::ClaytonRotated90 { theta } => v - clayton_cdf(*theta, 1.0 - u, v),
            ParametricCopula::Plackett { theta } => {
                let t = *theta;
                if (t - 1.0).abs() < 1e-12 {
                    u * v
                } else {
                    let s = 1.0 + (t - 1.0) * (u + v);
                    let disc = (s * s - 4.0 * u * v * t * (t - 1.0)).max(0.0);
                    // rationalized to avoid cancellation: (s - sqrt(disc)) / (2(t-1))
                    2.0 * u * v * t / (s + disc.sqrt())
                }
            }
            ParametricCopula::Frank { theta } => {
                let t = *theta;
                if t.abs() < FRANK_ZERO {
                    u * v
                } else {
                    let num = (-t * u).exp_m1() * (-t * v).exp_m1();
                    -(num / (-t).exp_m1()).ln_1p() / t
                }
            }
            ParametricCopula::Gaussian { .. } | ParametricCopula::StudentT { .. } => {
                return Err(Error::Unsupported(
                    "closed-form cdf not provided for elliptical copulas".into(),
                ))
            }
        })
    }

    /// Spearman's rho (bivariate only).
    pub fn spearman_rho(&self) -> Result<f64> {
        if self.dim() != 2 {
            return Err(Error::Unsupported("Spearman's rho requires a bivariate copula".into()));
        }
        match self {
            ParametricCopula::Independence { .. } => Ok(0.0),
            ParametricCopula::Gaussian { corr } => {
                Ok(6.0 / std::f64::consts::PI * (0.5 * corr.get(0, 1)).asin())
            }
            ParametricCopula::StudentT { .. } => Err(Error::Unsupported(
                "Spearman's rho not implemented for the t copula".into(),
            )),
            _ => Ok(spearman_by_quadrature(self)),
        }
    }

    /// Draw `n` observations; deterministic in `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> DataMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(n, &mut rng)
    }

    pub fn sample_with<R: Rng>(&self, n: usize, rng: &mut R) -> DataMatrix {
        let m = self.dim();
        let mut out = DataMatrix::zeros(n, m);
        let clamp = |v: f64| v.clamp(1e-16, 1.0 - 1e-16);
        for i in 0..n {
            let row = out.row_mut(i);
            match self {
                ParametricCopula::Independence { .. } => {
                    for r in row.iter_mut() {
                        *r = open_uniform(rng);
                    }
                }
                ParametricCopula::Gaussian { corr } => {
                    let z: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
                    let x = corr.chol_times(&z);
                    for (r, xj) in row.iter_mut().zip(x) {
                        *r = clamp(norm_cdf(xj));
                    }
                }
                ParametricCopula::StudentT { corr, df } => {
                    let z: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
                    let w: f64 = ChiSquared::new(*df).expect("df > 2").sample(rng);
                    let scale = (w / df).sqrt();
                    let x = corr.chol_times(&z);
                    for (r, xj) in row.iter_mut().zip(x) {
                        *r = clamp(student_t_cdf(xj / scale, *df));
                    }
                }
                ParametricCopula::Clayton { theta } | ParametricCopula::ClaytonRotated90 { theta } => {
                    // Marshall-Olkin frailty: V ~ Gamma(1/theta), u = (1 + E/V)^(-1/theta)
                    let v: f64 = Gamma::new(1.0 / theta, 1.0).expect("theta > 0").sample(rng);
                    for r in row.iter_mut() {
                        let e: f64 = rng.sample(Exp1);
                        *r = clamp((-(e / v).ln_1p() / theta).exp());
                    }
                    if matches!(self, ParametricCopula::ClaytonRotated90 { .. }) {
                        row[0] = clamp(1.0 - row[0]);
                    }
                }
                ParametricCopula::Plackett { theta } => {
                    let u = open_uniform(rng);
                    let t = open_uniform(rng);
                    row[0] = u;
                    row[1] = clamp(plackett_conditional_quantile(*theta, u, t));
                }
                ParametricCopula::Frank { theta } => {
                    let u = open_uniform(rng);
                    let t = open_uniform(rng);
                    row[0] = u;
                    row[1] = clamp(frank_conditional_quantile(*theta, u, t));
                }
            }
        }
        out
    }
}

fn t_copula_log_density(corr: &CorrelationMatrix, df: f64, x: &[f64]) -> f64 {
    let m = x.len() as f64;
    let ix = corr.inv_times(x);
    let q: f64 = x.iter().zip(&ix).map(|(a, b)| a * b).sum();
    let marg: f64 = x.iter().map(|&xj| (xj * xj / df).ln_1p()).sum();
    ln_gamma(0.5 * (df + m)) + (m - 1.0) * ln_gamma(0.5 * df)
        - m * ln_gamma(0.5 * (df + 1.0))
        - 0.5 * corr.ln_det()
        - 0.5 * (df + m) * (q / df).ln_1p()
        + 0.5 * (df + 1.0) * marg
}

fn clayton_log_density(t: f64, a: f64, b: f64) -> f64 {
    let s = a.powf(-t) + b.powf(-t) - 1.0;
    t.ln_1p() - (t + 1.0) * (a.ln() + b.ln()) - (1.0 / t + 2.0) * s.ln()
}

fn clayton_log_grad(t: f64, a: f64, b: f64) -> (f64, f64) {
    let pa = a.powf(-t);
    let pb = b.powf(-t);
    let s = pa + pb - 1.0;
    (
        -(t + 1.0) / a + (1.0 + 2.0 * t) * pa / (a * s),
        -(t + 1.0) / b + (1.0 + 2.0 * t) * pb / (b * s),
    )
}

fn clayton_cdf(t: f64, u: f64, v: f64) -> f64 {
    if u <= 0.0 || v <= 0.0 {
        return 0.0;
    }
    (u.powf(-t) + v.powf(-t) - 1.0).powf(-1.0 / t)
}

/// v such that dC(u, v)/du = t for the Plackett copula.
pub(crate) fn plackett_conditional_quantile(theta: f64, u: f64, t: f64) -> f64 {
    if (theta - 1.0).abs() < 1e-12 {
        return t;
    }
    let a = t * (1.0 - t);
    let b = theta + a * (theta - 1.0).powi(2);
    let c = 2.0 * a * (u * theta * theta + 1.0 - u) + theta * (1.0 - 2.0 * a);
    let d = theta.sqrt() * (theta + 4.0 * a * u * (1.0 - u) * (1.0 - theta).powi(2)).sqrt();
    (c - (1.0 - 2.0 * t) * d) / (2.0 * b)
}

/// v such that dC(u, v)/du = t for the Frank copula.
pub(crate) fn frank_conditional_quantile(theta: f64, u: f64, t: f64) -> f64 {
    if theta.abs() < FRANK_ZERO {
        return t;
    }
    let em = (-theta).exp_m1(); // e^{-theta} - 1
    let denom = t + (1.0 - t) * (-theta * u).exp();
    -(t * em / denom).ln_1p() / theta
}

/// 12 * integral of C over the unit square minus 3, by composite
/// Gauss-Legendre quadrature.
fn spearman_by_quadrature(cop: &ParametricCopula) -> f64 {
    let gl = GaussLegendre::new(12);
    let (xs, ws) = gl.composite(0.0, 1.0, 24);
    let mut total = 0.0;
    for (u, wu) in xs.iter().zip(&ws) {
        let mut inner = 0.0;
        for (v, wv) in xs.iter().zip(&ws) {
            inner += wv * cop.cdf(*u, *v).unwrap_or(0.0);
        }
        total += wu * inner;
    }
    12.0 * total - 3.0
}

/// Find the family member whose Spearman's rho equals `target`.
pub fn calibrate_to_spearman(family: CopulaFamily, target: f64) -> Result<ParametricCopula> {
    if !(target > -1.0 && target < 1.0) {
        return Err(Error::Range(format!("Spearman's rho {target} outside (-1, 1)")));
    }
    let bisect = |make: &dyn Fn(f64) -> Result<ParametricCopula>, mut lo: f64, mut hi: f64| {
        let rho = |x: f64| -> Result<f64> { make(x)?.spearman_rho() };
        let (rlo, rhi) = (rho(lo)?, rho(hi)?);
        if !(target > rlo.min(rhi) && target < rlo.max(rhi)) {
            return Err(Error::Range(format!(
                "{family} cannot attain Spearman's rho {target} (range {rlo:.4}..{rhi:.4})"
            )));
        }
        let increasing = rhi > rlo;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let r = rho(mid)?;
            if (r - target).abs() < 1e-9 || (hi - lo).abs() < 1e-13 {
                return make(mid);
            }
            if (r < target) == increasing {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        make(0.5 * (lo + hi))
    };
    match family {
        CopulaFamily::Independence => {
            if target == 0.0 {
                Ok(ParametricCopula::independence(2))
            } else {
                Err(Error::Range("independence has Spearman's rho 0".into()))
            }
        }
        CopulaFamily::Gaussian => {
            ParametricCopula::gaussian(2.0 * (target * std::f64::consts::PI / 6.0).sin())
        }
        CopulaFamily::StudentT => Err(Error::Unsupported(
            "Spearman calibration not available for the t copula".into(),
        )),
        CopulaFamily::Clayton => {
            if target <= 0.0 {
                return Err(Error::Range("Clayton supports positive dependence only".into()));
            }
            bisect(&|x| ParametricCopula::clayton(x.exp()), (1e-6f64).ln(), 60f64.ln())
        }
        CopulaFamily::ClaytonRotated90 => {
            if target >= 0.0 {
                return Err(Error::Range(
                    "rotated Clayton supports negative dependence only".into(),
                ));
            }
            bisect(&|x| ParametricCopula::clayton_rotated90(x.exp()), (1e-6f64).ln(), 60f64.ln())
        }
        CopulaFamily::Plackett => {
            if target == 0.0 {
                return ParametricCopula::plackett(1.0);
            }
            bisect(&|x| ParametricCopula::plackett(x.exp()), -12.0, 12.0)
        }
        CopulaFamily::Frank => {
            if target == 0.0 {
                return ParametricCopula::frank(0.0);
            }
            bisect(&|x| ParametricCopula::frank(x), -80.0, 80.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::spearman;
    use crate::optim::numerical_gradient;

    fn bivariate_families() -> Vec<ParametricCopula> {
        vec![
            ParametricCopula::gaussian(0.6).unwrap(),
            ParametricCopula::gaussian(-0.8).unwrap(),
            ParametricCopula::student_t(CorrelationMatrix::bivariate(0.4).unwrap(), 5.0).unwrap(),
            ParametricCopula::clayton(2.5).unwrap(),
            ParametricCopula::clayton_rotated90(1.2).unwrap(),
            ParametricCopula::plackett(0.05).unwrap(),
            ParametricCopula::plackett(7.0).unwrap(),
            ParametricCopula::frank(3.0).unwrap(),
            ParametricCopula::frank(-6.0).unwrap(),
        ]
    }

    #[test]
    fn independence_and_unit_plackett_are_flat() {
        let u = [0.3, 0.8];
        assert_eq!(ParametricCopula::independence(2).log_density(&u).unwrap(), 0.0);
        assert!(ParametricCopula::plackett(1.0).unwrap().log_density(&u).unwrap().abs() < 1e-15);
        assert_eq!(
            ParametricCopula::independence(3).dlogdensity_du(&[0.1, 0.5, 0.9]).unwrap(),
            vec![0.0; 3]
        );
    }

    #[test]
    fn gaussian_density_matches_closed_form() {
        // bivariate normal copula: (1-r^2)^{-1/2} exp(-(r^2(x^2+y^2) - 2rxy) / (2(1-r^2)))
        let r: f64 = 0.5;
        let x = norm_quantile(0.3);
        let y = norm_quantile(0.7);
        let expected = -0.5 * (1.0 - r * r).ln()
            - (r * r * (x * x + y * y) - 2.0 * r * x * y) / (2.0 * (1.0 - r * r));
        let got = ParametricCopula::gaussian(r).unwrap().log_density(&[0.3, 0.7]).unwrap();
        assert!((got - expected).abs() < 1e-13);
    }

    #[test]
    fn gaussian_gradient_vanishes_at_centre() {
        let g = ParametricCopula::gaussian(0.7).unwrap().dlogdensity_du(&[0.5, 0.5]).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn boundary_is_a_domain_error() {
        let c = ParametricCopula::clayton(1.0).unwrap();
        assert!(matches!(c.log_density(&[0.0, 0.5]), Err(Error::Domain(_))));
        assert!(c.dlogdensity_du(&[0.5, 1.0]).is_err());
    }

    #[test]
    fn rotated_clayton_reflects_first_argument() {
        let c = ParametricCopula::clayton(1.7).unwrap();
        let r = ParametricCopula::clayton_rotated90(1.7).unwrap();
        for &(a, b) in &[(0.2, 0.3), (0.9, 0.1), (0.5, 0.5)] {
            assert_eq!(r.log_density(&[a, b]).unwrap(), c.log_density(&[1.0 - a, b]).unwrap());
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut pts = vec![[0.2, 0.6], [0.7, 0.35], [0.05, 0.9], [0.5, 0.5]];
        pts.push([0.93, 0.12]);
        for c in bivariate_families() {
            for u in &pts {
                let g = c.dlogdensity_du(u).unwrap();
                let fd = numerical_gradient(|x| c.log_density(x).unwrap(), u, 1e-6);
                for (a, b) in g.iter().zip(&fd) {
                    assert!(
                        (a - b).abs() < 1e-6 * b.abs().max(1.0),
                        "{c:?} at {u:?}: {a} vs {b}"
                    );
                }
            }
        }
    }

    #[test]
    fn trivariate_gradients() {
        let corr = CorrelationMatrix::from_upper(3, &[-0.5, -0.5, 0.5]).unwrap();
        let g = ParametricCopula::Gaussian { corr: corr.clone() };
        let t = ParametricCopula::student_t(corr, 6.0).unwrap();
        for c in [g, t] {
            let u = [0.3, 0.75, 0.55];
            let a = c.dlogdensity_du(&u).unwrap();
            let fd = numerical_gradient(|x| c.log_density(x).unwrap(), &u, 1e-6);
            for (x, y) in a.iter().zip(&fd) {
                assert!((x - y).abs() < 1e-6 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn densities_integrate_to_one() {
        let gl = GaussLegendre::new(20);
        let (xs, ws) = gl.composite(0.0, 1.0, 10);
        for c in bivariate_families() {
            let mut total = 0.0;
            for (a, wa) in xs.iter().zip(&ws) {
                for (b, wb) in xs.iter().zip(&ws) {
                    total += wa * wb * c.density(&[*a, *b]).unwrap();
                }
            }
            assert!((total - 1.0).abs() < 1e-3, "{c:?}: {total}");
        }
    }

    #[test]
    fn conditional_quantiles_invert_conditional_cdf() {
        // dC/du by central differences of the closed-form cdf
        for (cop, q) in [
            (ParametricCopula::plackett(0.05).unwrap(), plackett_conditional_quantile as fn(f64, f64, f64) -> f64),
            (ParametricCopula::plackett(4.0).unwrap(), plackett_conditional_quantile),
            (ParametricCopula::frank(3.0).unwrap(), frank_conditional_quantile),
            (ParametricCopula::frank(-5.0).unwrap(), frank_conditional_quantile),
        ] {
            let theta = cop.params()[0];
            for &(u, t) in &[(0.3, 0.2), (0.8, 0.9), (0.5, 0.5)] {
                let v = q(theta, u, t);
                let h = 1e-6;
                let cond = (cop.cdf(u + h, v).unwrap() - cop.cdf(u - h, v).unwrap()) / (2.0 * h);
                assert!((cond - t).abs() < 1e-7, "{cop:?} u={u} t={t}: {cond}");
            }
        }
    }

    #[test]
    fn spearman_closed_forms() {
        assert_eq!(ParametricCopula::independence(2).spearman_rho().unwrap(), 0.0);
        let g = ParametricCopula::gaussian(0.99).unwrap().spearman_rho().unwrap();
        assert!((g - 6.0 / std::f64::consts::PI * 0.495f64.asin()).abs() < 1e-15);
        // Plackett closed form (t+1)/(t-1) - 2t ln t/(t-1)^2
        for &t in &[0.05f64, 0.5, 3.0, 20.0] {
            let exact = (t + 1.0) / (t - 1.0) - 2.0 * t * t.ln() / (t - 1.0).powi(2);
            let q = ParametricCopula::plackett(t).unwrap().spearman_rho().unwrap();
            assert!((q - exact).abs() < 1e-6, "theta={t}: {q} vs {exact}");
        }
        // the value quoted for the simulation design
        let r = ParametricCopula::plackett(0.05).unwrap().spearman_rho().unwrap();
        assert!((r + 0.77).abs() < 0.005);
    }

    #[test]
    fn frank_spearman_matches_debye_form() {
        // rho = 1 - 12/theta (D1 - D2), D_k(x) = k/x^k int_0^x t^k/(e^t-1) dt
        let theta = 5.0;
        let debye = |k: i32| {
            let gl = GaussLegendre::new(40);
            gl.integrate(0.0, theta, |t: f64| if t == 0.0 { 0.0 } else { t.powi(k) / t.exp_m1() })
                * k as f64
                / theta.powi(k)
        };
        let exact = 1.0 - 12.0 / theta * (debye(1) - debye(2));
        let q = ParametricCopula::frank(theta).unwrap().spearman_rho().unwrap();
        assert!((q - exact).abs() < 1e-6, "{q} vs {exact}");
    }

    #[test]
    fn calibration() {
        let g = calibrate_to_spearman(CopulaFamily::Gaussian, 0.0).unwrap();
        assert_eq!(g.params(), vec![0.0]);
        let g = calibrate_to_spearman(CopulaFamily::Gaussian, 0.8).unwrap();
        assert!((g.params()[0] - 2.0 * (0.8 * std::f64::consts::PI / 6.0).sin()).abs() < 1e-14);
        let p = calibrate_to_spearman(CopulaFamily::Plackett, -0.77).unwrap();
        assert!((p.params()[0] - 0.05).abs() < 0.003, "{:?}", p.params());
        for fam in [CopulaFamily::Clayton, CopulaFamily::Frank, CopulaFamily::Plackett] {
            let c = calibrate_to_spearman(fam, 0.45).unwrap();
            assert!((c.spearman_rho().unwrap() - 0.45).abs() < 1e-4);
        }
        assert!(matches!(calibrate_to_spearman(CopulaFamily::Clayton, -0.3), Err(Error::Range(_))));
    }

    #[test]
    fn sampler_spearman() {
        let s = ParametricCopula::independence(2).sample(100_000, 1);
        assert!(spearman(&s.column(0), &s.column(1)).abs() < 0.01);
        let s = ParametricCopula::gaussian(0.9).unwrap().sample(100_000, 2);
        let target = 6.0 / std::f64::consts::PI * 0.45f64.asin();
        assert!((spearman(&s.column(0), &s.column(1)) - target).abs() < 0.01);
    }

    #[test]
    fn sampling_is_deterministic() {
        let c = ParametricCopula::frank(2.0).unwrap();
        assert_eq!(c.sample(50, 9), c.sample(50, 9));
        assert_ne!(c.sample(50, 9), c.sample(50, 10));
    }

    #[test]
    fn unconstrained_roundtrip() {
        let corr = CorrelationMatrix::from_upper(3, &[-0.5, -0.5, 0.5]).unwrap();
        let z = corr.to_unconstrained();
        let back = CorrelationMatrix::from_unconstrained(3, &z).unwrap();
        for (a, b) in corr.upper().iter().zip(back.upper()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(CorrelationMatrix::from_upper(3, &[-0.9, -0.9, 0.5]).is_err());
    }
}
