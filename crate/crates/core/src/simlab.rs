//! Data-generating processes and Monte Carlo experiments.
//!
//! Replication `r` of an experiment with master seed `s` draws its sample
//! with seed `s + r`, so results do not depend on how replications are
//! scheduled across threads.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::avar::{are, avar_for_fit, qmle_avar, DEFAULT_FREQUENCIES};
use crate::copulas::{calibrate_to_spearman, CopulaFamily, CorrelationMatrix, ParametricCopula};
use crate::data::DataMatrix;
use crate::error::{Error, Result};
use crate::estimate::{argmin_parsimonious, fit, fit_smle, Criterion, Dependence, JointModelSpec};
use crate::marginals::MarginalModel;

/// Share of failed replications per estimator above which an experiment
/// is abandoned.
pub const MAX_FAILURE_RATE: f64 = 0.02;

/// True marginals plus copula, sample size and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub marginals: Vec<MarginalModel>,
    pub copula: ParametricCopula,
    pub n: usize,
    pub seed: u64,
}

impl DgpSpec {
    /// Draw copula uniforms and map each column through its quantile.
    pub fn generate(&self) -> Result<DataMatrix> {
        if self.copula.dim() != self.marginals.len() {
            return Err(Error::DimensionMismatch {
                expected: self.marginals.len(),
                got: self.copula.dim(),
            });
        }
        let mut data = self.copula.sample(self.n, self.seed);
        for i in 0..self.n {
            let row = data.row_mut(i);
            for (v, m) in row.iter_mut().zip(&self.marginals) {
                *v = m.quantile(*v)?;
            }
        }
        Ok(data)
    }
}

/// Monte Carlo summary of one parameter under one estimator. Variances use
/// the divisor `R - 1`; `n_mse = n_var + n * bias^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub mean: f64,
    pub n_var: Option<f64>,
    pub n_mse: Option<f64>,
    pub n_avar: Option<f64>,
}

pub fn summarize(estimates: &[f64], truth: f64, n: usize) -> CellStats {
    let r = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / r;
    if estimates.len() < 2 {
        return CellStats {
            mean,
            n_var: None,
            n_mse: None,
            n_avar: None,
        };
    }
    let var = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (r - 1.0);
    let n_var = n as f64 * var;
    let bias = mean - truth;
    CellStats {
        mean,
        n_var: Some(n_var),
        n_mse: Some(n_var + n as f64 * bias * bias),
        n_avar: None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: String,
    pub params: Vec<CellStats>,
    pub successes: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub family: String,
    pub spearman: f64,
    pub order: Option<usize>,
    pub n: usize,
    pub replications: usize,
    pub param_names: Vec<String>,
    pub true_beta: Vec<f64>,
    pub rows: Vec<EstimatorSummary>,
    /// One line per failed fit.
    pub failure_log: Vec<String>,
}

impl ExperimentResult {
    pub fn row(&self, estimator: &str) -> Option<&EstimatorSummary> {
        self.rows.iter().find(|r| r.estimator == estimator)
    }

    /// Table layout: one line per statistic and parameter, one column per
    /// estimator; absent values are empty fields.
    pub fn to_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["statistic".to_string(), "parameter".to_string()];
        header.extend(self.rows.iter().map(|r| r.estimator.clone()));
        w.write_record(&header)?;
        let stats: [(&str, fn(&CellStats) -> Option<f64>); 4] = [
            ("mean", |c| Some(c.mean)),
            ("n_var", |c| c.n_var),
            ("n_mse", |c| c.n_mse),
            ("n_avar", |c| c.n_avar),
        ];
        for (name, get) in stats {
            for (q, pname) in self.param_names.iter().enumerate() {
                let mut rec = vec![name.to_string(), pname.clone()];
                rec.extend(self.rows.iter().map(|r| fmt_opt(get(&r.params[q]))));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn check_failures(failed: usize, total: usize) -> Result<()> {
    if failed as f64 > MAX_FAILURE_RATE * total as f64 {
        return Err(Error::TooManyFailures { failed, total });
    }
    Ok(())
}

fn exp_marginals(means: &[f64]) -> Result<Vec<MarginalModel>> {
    means.iter().map(|&m| MarginalModel::exponential(m)).collect()
}

fn default_theta() -> f64 {
    0.05
}

fn default_means() -> Vec<f64> {
    vec![0.5, 1.0]
}

fn default_k() -> usize {
    DEFAULT_FREQUENCIES
}

/// Large-sample settings for the asymptotic-variance row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AvarSample {
    pub n: usize,
    /// Sieve order of the SMLE fit whose density enters the variance bound.
    pub order: usize,
    #[serde(default = "default_k")]
    pub k: usize,
}

/// Plackett DGP with exponential marginals, compared across FMLE, SMLE,
/// QMLE and two misspecified parametric fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Table1Config {
    pub replications: usize,
    pub n: usize,
    pub order: usize,
    pub seed: u64,
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default = "default_means")]
    pub means: Vec<f64>,
    #[serde(default)]
    pub avar: Option<AvarSample>,
}

impl Table1Config {
    pub fn desk(seed: u64) -> Self {
        Table1Config {
            replications: 200,
            n: 1000,
            order: 9,
            seed,
            theta: default_theta(),
            means: default_means(),
            avar: Some(AvarSample {
                n: 100_000,
                order: 20,
                k: DEFAULT_FREQUENCIES,
            }),
        }
    }
}

/// Column labels of the Table 1 comparison, in output order.
pub const TABLE1_ESTIMATORS: [&str; 5] = ["FMLE", "SMLE", "QMLE", "PMLE(G)", "PMLE(C)"];

fn table1_dependence(label: &str, order: usize, m: usize) -> Result<Dependence> {
    Ok(match label {
        "FMLE" => Dependence::Parametric {
            copula: ParametricCopula::plackett(1.0)?,
        },
        "SMLE" => Dependence::Sieve { order },
        "QMLE" => Dependence::IndependenceAssumed,
        "PMLE(G)" => Dependence::Parametric {
            copula: ParametricCopula::gaussian_from(CorrelationMatrix::new(identity(m))?),
        },
        "PMLE(C)" => Dependence::Parametric {
            copula: ParametricCopula::clayton_rotated90(1.0)?,
        },
        other => return Err(Error::param(format!("unknown estimator {other}"))),
    })
}

fn identity(m: usize) -> Vec<Vec<f64>> {
    (0..m)
        .map(|i| (0..m).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

pub fn run_table1(config: &Table1Config) -> Result<ExperimentResult> {
    if config.replications == 0 || config.n == 0 {
        return Err(Error::param("replications and n must be positive"));
    }
    let marginals = exp_marginals(&config.means)?;
    if marginals.len() != 2 {
        return Err(Error::param("the Plackett design is bivariate"));
    }
    let copula = ParametricCopula::plackett(config.theta)?;
    let specs: Vec<JointModelSpec> = TABLE1_ESTIMATORS
        .iter()
        .map(|l| Ok(JointModelSpec::new(marginals.clone(), table1_dependence(l, config.order, 2)?)))
        .collect::<Result<_>>()?;
    let outcomes: Vec<Vec<std::result::Result<Vec<f64>, String>>> = (0..config.replications)
        .into_par_iter()
        .map(|r| {
            let dgp = DgpSpec {
                marginals: marginals.clone(),
                copula: copula.clone(),
                n: config.n,
                seed: config.seed.wrapping_add(r as u64),
            };
            match dgp.generate() {
                Ok(data) => specs
                    .iter()
                    .map(|s| fit(&data, s).map(|f| f.beta_hat).map_err(|e| e.to_string()))
                    .collect(),
                Err(e) => vec![Err(e.to_string()); specs.len()],
            }
        })
        .collect();
    let mut rows = Vec::new();
    let mut failure_log = Vec::new();
    for (e, label) in TABLE1_ESTIMATORS.iter().enumerate() {
        let mut ok = Vec::new();
        for (r, out) in outcomes.iter().enumerate() {
            match &out[e] {
                Ok(b) => ok.push(b.clone()),
                Err(msg) => failure_log.push(format!("{label} replication {r}: {msg}")),
            }
        }
        let failures = config.replications - ok.len();
        check_failures(failures, config.replications)?;
        let params = (0..2)
            .map(|q| summarize(&ok.iter().map(|b| b[q]).collect::<Vec<_>>(), config.means[q], config.n))
            .collect();
        rows.push(EstimatorSummary {
            estimator: label.to_string(),
            params,
            successes: ok.len(),
            failures,
        });
    }
    if let Some(av) = &config.avar {
        let dgp = DgpSpec {
            marginals: marginals.clone(),
            copula: copula.clone(),
            n: av.n,
            seed: config.seed.wrapping_add(config.replications as u64),
        };
        let data = dgp.generate()?;
        let avars: Vec<Result<Vec<Vec<f64>>>> = TABLE1_ESTIMATORS
            .par_iter()
            .map(|label| {
                if *label == "QMLE" {
                    return qmle_avar(&marginals, &[]);
                }
                let order = if *label == "SMLE" { av.order } else { config.order };
                let spec = JointModelSpec::new(marginals.clone(), table1_dependence(label, order, 2)?);
                avar_for_fit(&fit(&data, &spec)?, &data, av.k)
            })
            .collect();
        for (row, a) in rows.iter_mut().zip(avars) {
            let a = a?;
            for (q, cell) in row.params.iter_mut().enumerate() {
                cell.n_avar = Some(a[q][q]);
            }
        }
    }
    Ok(ExperimentResult {
        family: "plackett".into(),
        spearman: copula.spearman_rho()?,
        order: Some(config.order),
        n: config.n,
        replications: config.replications,
        param_names: (1..=2).map(|j| format!("mu{j}")).collect(),
        true_beta: config.means.clone(),
        rows,
        failure_log,
    })
}

/// One ARE entry: `avar` is `n` times the asymptotic variance of the
/// estimator, `are` its ratio to the QMLE value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreRow {
    pub rho: f64,
    pub estimator: String,
    pub parameter: String,
    pub are: f64,
    pub avar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPoint {
    pub rho: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AreTable {
    pub rows: Vec<AreRow>,
    pub skipped: Vec<SkippedPoint>,
}

impl AreTable {
    pub fn get(&self, rho: f64, estimator: &str, parameter: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| (r.rho - rho).abs() < 1e-9 && r.estimator == estimator && r.parameter == parameter)
            .map(|r| r.are)
    }

    /// Columns `rho,estimator,parameter,are`.
    pub fn to_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["rho", "estimator", "parameter", "are"])?;
        for r in &self.rows {
            w.write_record([r.rho.to_string(), r.estimator.clone(), r.parameter.clone(), r.are.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Bivariate ARE curve over a grid of Spearman correlations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AreCurveConfig {
    pub family: CopulaFamily,
    pub marginals: Vec<MarginalModel>,
    pub rho_grid: Vec<f64>,
    pub n: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    /// Sieve order of the large-sample SMLE fit.
    pub order: usize,
    pub seed: u64,
}

fn param_labels(marginals: &[MarginalModel]) -> Vec<String> {
    let mut out = Vec::new();
    for (j, m) in marginals.iter().enumerate() {
        for name in m.param_names() {
            out.push(format!("{name}{}", j + 1));
        }
    }
    out
}

/// AVar of QMLE (closed form) and of each requested estimator on one
/// sample, as ARE rows at `rho`.
fn are_point(
    rho: f64,
    data: &DataMatrix,
    marginals: &[MarginalModel],
    copula: &ParametricCopula,
    order: usize,
    k: usize,
    with_fmle: bool,
) -> Result<Vec<AreRow>> {
    let labels = param_labels(marginals);
    let qspec = JointModelSpec::new(marginals.to_vec(), Dependence::IndependenceAssumed);
    let qfit = fit(data, &qspec)?;
    let aq = qmle_avar(&qfit.marginals, &[])?;
    let mut out = Vec::new();
    let mut push = |label: &str, a: &[Vec<f64>]| -> Result<()> {
        for (q, r) in are(&aq, a)?.into_iter().enumerate() {
            out.push(AreRow {
                rho,
                estimator: label.into(),
                parameter: labels[q].clone(),
                are: r,
                avar: a[q][q],
            });
        }
        Ok(())
    };
    if with_fmle {
        let fspec = JointModelSpec::new(
            marginals.to_vec(),
            Dependence::Parametric {
                copula: copula.clone(),
            },
        );
        let f = fit(data, &fspec)?;
        push("FMLE", &avar_for_fit(&f, data, k)?)?;
    }
    let sspec = JointModelSpec::new(marginals.to_vec(), Dependence::Sieve { order });
    let s = fit(data, &sspec)?;
    push("SMLE", &avar_for_fit(&s, data, k)?)?;
    Ok(out)
}

pub fn run_are_curve(config: &AreCurveConfig) -> Result<AreTable> {
    if config.marginals.len() != 2 {
        return Err(Error::param("ARE curves are bivariate"));
    }
    let points: Vec<std::result::Result<Vec<AreRow>, String>> = config
        .rho_grid
        .par_iter()
        .enumerate()
        .map(|(g, &rho)| {
            let copula = calibrate_to_spearman(config.family, rho).map_err(|e| e.to_string())?;
            let data = DgpSpec {
                marginals: config.marginals.clone(),
                copula: copula.clone(),
                n: config.n,
                seed: config.seed.wrapping_add(g as u64),
            }
            .generate()
            .map_err(|e| e.to_string())?;
            are_point(rho, &data, &config.marginals, &copula, config.order, config.k, true)
                .map_err(|e| e.to_string())
        })
        .collect();
    Ok(collect_points(&config.rho_grid, points))
}

fn collect_points(grid: &[f64], points: Vec<std::result::Result<Vec<AreRow>, String>>) -> AreTable {
    let mut table = AreTable::default();
    for (&rho, p) in grid.iter().zip(points) {
        match p {
            Ok(rows) => table.rows.extend(rows),
            Err(reason) => table.skipped.push(SkippedPoint { rho, reason }),
        }
    }
    table
}

/// Trivariate Gaussian-copula design: exponential marginals, correlation
/// parameters `rho12 = rho13` over the grid with `rho23` fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Are3dConfig {
    pub rho_grid: Vec<f64>,
    pub rho23: f64,
    #[serde(default = "default_means3")]
    pub means: Vec<f64>,
    pub n: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    pub order: usize,
    pub seed: u64,
}

fn default_means3() -> Vec<f64> {
    vec![0.1, 0.5, 1.0]
}

pub fn run_are_3d(config: &Are3dConfig) -> Result<AreTable> {
    let marginals = exp_marginals(&config.means)?;
    if marginals.len() != 3 {
        return Err(Error::param("the trivariate design needs three means"));
    }
    let points: Vec<std::result::Result<Vec<AreRow>, String>> = config
        .rho_grid
        .par_iter()
        .enumerate()
        .map(|(g, &rho)| {
            let corr = CorrelationMatrix::new(vec![
                vec![1.0, rho, rho],
                vec![rho, 1.0, config.rho23],
                vec![rho, config.rho23, 1.0],
            ])
            .map_err(|e| e.to_string())?;
            let copula = ParametricCopula::gaussian_from(corr);
            let data = DgpSpec {
                marginals: marginals.clone(),
                copula: copula.clone(),
                n: config.n,
                seed: config.seed.wrapping_add(g as u64),
            }
            .generate()
            .map_err(|e| e.to_string())?;
            are_point(rho, &data, &marginals, &copula, config.order, config.k, false).map_err(|e| e.to_string())
        })
        .collect();
    Ok(collect_points(&config.rho_grid, points))
}

/// Sieve-order study on the Table 1 design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Table2Config {
    pub replications: usize,
    pub n: usize,
    pub orders: Vec<usize>,
    pub seed: u64,
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default = "default_means")]
    pub means: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Row {
    pub order: usize,
    /// Free sieve parameters plus marginal parameters.
    pub k: usize,
    pub params: Vec<CellStats>,
    pub sum_mse: Option<f64>,
    /// Mean log-likelihood over successful replications.
    pub loglik: f64,
    pub aic: f64,
    pub bic: f64,
    /// Mean wall-clock seconds per fit.
    pub runtime: f64,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2 {
    pub n: usize,
    pub replications: usize,
    pub rows: Vec<Table2Row>,
    /// Order chosen in each replication, `None` when every order failed.
    pub aic_selected: Vec<Option<usize>>,
    pub bic_selected: Vec<Option<usize>>,
    pub failure_log: Vec<String>,
}

impl Table2 {
    /// Most frequent selected order (smallest on ties).
    pub fn mode(selected: &[Option<usize>]) -> Option<usize> {
        let mut counts = std::collections::BTreeMap::new();
        for s in selected.iter().flatten() {
            *counts.entry(*s).or_insert(0usize) += 1;
        }
        let best = counts.values().copied().max()?;
        counts.into_iter().find(|&(_, c)| c == best).map(|(j, _)| j)
    }

    /// Columns `order,k,mean1,..,n_var1,..,n_mse1,..,sum_mse,loglik,aic,bic`;
    /// run-times are written separately by [`Table2::timings_csv`] so this
    /// file is reproducible.
    pub fn to_csv<W: Write>(&self, writer: W) -> Result<()> {
        let p = self.rows.first().map_or(0, |r| r.params.len());
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["order".to_string(), "k".to_string()];
        for stat in ["mean", "n_var", "n_mse"] {
            header.extend((1..=p).map(|q| format!("{stat}{q}")));
        }
        header.extend(["sum_mse", "loglik", "aic", "bic", "failures"].map(String::from));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.order.to_string(), r.k.to_string()];
            rec.extend(r.params.iter().map(|c| c.mean.to_string()));
            rec.extend(r.params.iter().map(|c| fmt_opt(c.n_var)));
            rec.extend(r.params.iter().map(|c| fmt_opt(c.n_mse)));
            rec.push(fmt_opt(r.sum_mse));
            rec.extend([r.loglik, r.aic, r.bic].map(|v| v.to_string()));
            rec.push(r.failures.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn timings_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["order", "runtime"])?;
        for r in &self.rows {
            w.write_record([r.order.to_string(), format!("{:.4}", r.runtime)])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn run_table2(config: &Table2Config) -> Result<Table2> {
    if config.orders.is_empty() || config.replications == 0 {
        return Err(Error::param("order grid and replications must be nonempty"));
    }
    let marginals = exp_marginals(&config.means)?;
    let copula = ParametricCopula::plackett(config.theta)?;
    let spec = JointModelSpec::new(marginals.clone(), Dependence::IndependenceAssumed);
    let per_rep: Vec<Vec<(std::result::Result<(Vec<f64>, f64, usize), String>, f64)>> = (0..config
        .replications)
        .into_par_iter()
        .map(|r| {
            let data = DgpSpec {
                marginals: marginals.clone(),
                copula: copula.clone(),
                n: config.n,
                seed: config.seed.wrapping_add(r as u64),
            }
            .generate();
            config
                .orders
                .iter()
                .map(|&j| {
                    let t = Instant::now();
                    let out = match &data {
                        Ok(d) => fit_smle(d, &spec.with_dependence(Dependence::Sieve { order: j }))
                            .map(|f| (f.beta_hat, f.loglik, f.n_params))
                            .map_err(|e| e.to_string()),
                        Err(e) => Err(e.to_string()),
                    };
                    (out, t.elapsed().as_secs_f64())
                })
                .collect()
        })
        .collect();
    let n = config.n;
    let p = marginals.len();
    let mut rows = Vec::new();
    let mut failure_log = Vec::new();
    for (g, &order) in config.orders.iter().enumerate() {
        let mut betas = Vec::new();
        let mut lls = Vec::new();
        let mut time = 0.0;
        let mut k = 0;
        for (r, rep) in per_rep.iter().enumerate() {
            time += rep[g].1;
            match &rep[g].0 {
                Ok((b, ll, kk)) => {
                    betas.push(b.clone());
                    lls.push(*ll);
                    k = *kk;
                }
                Err(msg) => failure_log.push(format!("order {order} replication {r}: {msg}")),
            }
        }
        let failures = config.replications - betas.len();
        check_failures(failures, config.replications)?;
        let params: Vec<CellStats> = (0..p)
            .map(|q| summarize(&betas.iter().map(|b| b[q]).collect::<Vec<_>>(), config.means[q], n))
            .collect();
        let sum_mse = params.iter().map(|c| c.n_mse).sum::<Option<f64>>();
        let loglik = lls.iter().sum::<f64>() / lls.len() as f64;
        rows.push(Table2Row {
            order,
            k,
            params,
            sum_mse,
            loglik,
            aic: crate::estimate::aic(k, loglik),
            bic: crate::estimate::bic(k, loglik, n),
            runtime: time / config.replications as f64,
            failures,
        });
    }
    let pick = |crit: Criterion| -> Vec<Option<usize>> {
        per_rep
            .iter()
            .map(|rep| {
                let cands: Vec<(usize, f64)> = config
                    .orders
                    .iter()
                    .zip(rep)
                    .filter_map(|(&j, (out, _))| {
                        out.as_ref().ok().map(|(_, ll, k)| {
                            let v = match crit {
                                Criterion::Aic => crate::estimate::aic(*k, *ll),
                                Criterion::Bic => crate::estimate::bic(*k, *ll, n),
                            };
                            (j, v)
                        })
                    })
                    .collect();
                argmin_parsimonious(&cands)
            })
            .collect()
    };
    Ok(Table2 {
        n,
        replications: config.replications,
        aic_selected: pick(Criterion::Aic),
        bic_selected: pick(Criterion::Bic),
        rows,
        failure_log,
    })
}

/// Parse `start:stop:step` (inclusive, values rounded to 12 decimals) or a
/// comma-separated list.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let s = s.trim();
    let num = |t: &str| -> Result<f64> {
        let v: f64 = t
            .trim()
            .parse()
            .map_err(|_| Error::param(format!("invalid number {t:?} in grid")))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::param(format!("non-finite grid value {t:?}")))
        }
    };
    if s.contains(':') {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::param("grid ranges have the form start:stop:step"));
        }
        let (a, b, h) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
        if !(h > 0.0) || b < a {
            return Err(Error::param("grid step must be positive and stop >= start"));
        }
        let steps = ((b - a) / h + 1e-9).floor();
        if steps > 1e6 {
            return Err(Error::param("grid has too many points"));
        }
        Ok((0..=steps as usize)
            .map(|i| {
                let v = a + i as f64 * h;
                let r = (v * 1e12).round() / 1e12;
                if r == 0.0 {
                    0.0
                } else {
                    r
                }
            })
            .collect())
    } else {
        let v: Vec<f64> = s.split(',').map(num).collect::<Result<_>>()?;
        if v.is_empty() {
            return Err(Error::param("empty grid"));
        }
        Ok(v)
    }
}

/// Parse an order grid `a..b` (inclusive), `a:b` or comma list.
pub fn parse_orders(s: &str) -> Result<Vec<usize>> {
    let s = s.trim();
    let num = |t: &str| -> Result<usize> {
        t.trim()
            .parse()
            .map_err(|_| Error::param(format!("invalid order {t:?}")))
    };
    let range = s.split_once("..").or_else(|| s.split_once(':'));
    let out: Vec<usize> = match range {
        Some((a, b)) => {
            let (a, b) = (num(a)?, num(b)?);
            if b < a || b - a > 10_000 {
                return Err(Error::param("invalid order range"));
            }
            (a..=b).collect()
        }
        None => s.split(',').map(num).collect::<Result<_>>()?,
    };
    if out.is_empty() || out.contains(&0) {
        return Err(Error::param("orders must be positive"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_identity_and_single_replication() {
        let est = [0.48, 0.52, 0.55, 0.47, 0.51];
        let c = summarize(&est, 0.5, 1000);
        let mean = est.iter().sum::<f64>() / 5.0;
        assert_eq!(c.mean, mean);
        let var = est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / 4.0;
        assert!((c.n_var.unwrap() - 1000.0 * var).abs() < 1e-12);
        let bias2 = 1000.0 * (mean - 0.5).powi(2);
        assert!((c.n_mse.unwrap() - c.n_var.unwrap() - bias2).abs() < 1e-12);
        let one = summarize(&[0.7], 0.5, 10);
        assert_eq!(one.mean, 0.7);
        assert!(one.n_var.is_none() && one.n_mse.is_none());
    }

    #[test]
    fn grids() {
        let g = parse_grid("-0.8:0.8:0.1").unwrap();
        assert_eq!(g.len(), 17);
        assert_eq!(g[8], 0.0);
        assert_eq!(g[0], -0.8);
        assert_eq!(g[16], 0.8);
        assert_eq!(parse_grid("0.4, -0.4").unwrap(), vec![0.4, -0.4]);
        assert!(parse_grid("1:0:0.1").is_err());
        assert!(parse_grid("0:1:0").is_err());
        assert!(parse_grid("a").is_err());
        assert_eq!(parse_orders("2..5").unwrap(), vec![2, 3, 4, 5]);
        assert_eq!(parse_orders("9").unwrap(), vec![9]);
        assert!(parse_orders("0,1").is_err());
    }

    #[test]
    fn mode_prefers_smaller_order() {
        let s = [Some(5), Some(8), Some(8), Some(5), None];
        assert_eq!(Table2::mode(&s), Some(5));
        assert_eq!(Table2::mode(&[None]), None);
    }

    #[test]
    fn small_table1_is_reproducible() {
        let cfg = Table1Config {
            replications: 2,
            n: 300,
            order: 3,
            seed: 1,
            theta: 0.05,
            means: vec![0.5, 1.0],
            avar: None,
        };
        let a = run_table1(&cfg).unwrap();
        let b = run_table1(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 5);
        let mut out = Vec::new();
        a.to_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("statistic,parameter,FMLE,SMLE,QMLE,PMLE(G),PMLE(C)\n"));
        assert_eq!(text.lines().count(), 9);
        let one = run_table1(&Table1Config { replications: 1, ..cfg }).unwrap();
        assert!(one.rows.iter().all(|r| r.params[0].n_var.is_none()));
    }

    #[test]
    fn single_order_table2() {
        let cfg = Table2Config {
            replications: 2,
            n: 300,
            orders: vec![3],
            seed: 4,
            theta: 0.05,
            means: vec![0.5, 1.0],
        };
        let t = run_table2(&cfg).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.rows[0].k, 6);
        assert!(t.aic_selected.iter().all(|s| *s == Some(3)));
        let r = &t.rows[0];
        assert!((r.aic - (2.0 * 6.0 - 2.0 * r.loglik)).abs() < 1e-9);
    }
}
