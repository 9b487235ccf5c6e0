use std::path::PathBuf;

use bksieve::copulas::CopulaFamily;
use bksieve::estimate::Criterion;
use bksieve::marginals::MarginalModel;
use bksieve::riskapp::{BacktestConfig, Companion, VarMethod};
use bksieve::simlab::{
    parse_grid, parse_orders, Are3dConfig, AreCurveConfig, AvarSample, Table1Config, Table2Config,
};
use bksieve::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::run::RunConfig;

pub const DEFAULT_SEED: u64 = 1;

#[derive(Debug, Parser)]
#[command(name = "bksieve", version, about = "Sieve copula MLE of marginal parameters")]
pub struct Cli {
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads; defaults to BKSIEVE_WORKERS, then to the available parallelism.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a joint model to a numeric CSV.
    Fit(FitArgs),
    /// Choose the sieve order by AIC or BIC.
    SelectOrder(SelectOrderArgs),
    /// Monte Carlo comparison of FMLE, SMLE, QMLE and two PMLEs.
    SimulateTable1(Table1Args),
    /// Monte Carlo study of the sieve order.
    SimulateTable2(Table2Args),
    /// Asymptotic relative efficiency over a grid of Spearman correlations.
    AreCurve(AreCurveArgs),
    /// Trivariate Gaussian-copula efficiency study.
    #[command(name = "are-3d")]
    Are3d(Are3dArgs),
    /// Rolling-window Value-at-Risk backtest from daily prices.
    VarBacktest(VarArgs),
    /// Repeat the run recorded in a manifest.
    Rerun {
        manifest: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// JSON model configuration.
    #[arg(long)]
    pub model: PathBuf,
    /// Also compute the asymptotic covariance with this many frequencies.
    #[arg(long)]
    pub avar_k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SelectOrderArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Orders such as `2..15` or `3,5,7`; defaults to the model's grid.
    #[arg(long)]
    pub orders: Option<String>,
    #[arg(long)]
    pub criterion: Option<CriterionArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CriterionArg {
    Aic,
    Bic,
}

#[derive(Debug, Args)]
pub struct Table1Args {
    #[arg(long, default_value_t = 200)]
    pub reps: usize,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 9)]
    pub order: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Plackett odds ratio of the data-generating copula.
    #[arg(long, default_value_t = 0.05)]
    pub theta: f64,
    /// Sample size of the single large sample behind the AVar row.
    #[arg(long, default_value_t = 100_000)]
    pub avar_n: usize,
    #[arg(long, default_value_t = 20)]
    pub avar_order: usize,
    #[arg(long, default_value_t = 10)]
    pub avar_k: usize,
    /// Skip the AVar row.
    #[arg(long)]
    pub no_avar: bool,
}

#[derive(Debug, Args)]
pub struct Table2Args {
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value = "2..15")]
    pub orders: String,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.05)]
    pub theta: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MarginalsArg {
    /// Exponential means 0.5 and 1.
    ExpExp,
    /// Exponential mean 1 and Gaussian mean 0 with variance fixed at 1.
    ExpGauss,
}

impl MarginalsArg {
    fn models(self) -> Result<Vec<MarginalModel>> {
        match self {
            MarginalsArg::ExpExp => Ok(vec![MarginalModel::exponential(0.5)?, MarginalModel::exponential(1.0)?]),
            MarginalsArg::ExpGauss => Ok(vec![
                MarginalModel::exponential(1.0)?,
                MarginalModel::gaussian_fixed_variance(0.0, 1.0)?,
            ]),
        }
    }
}

#[derive(Debug, Args)]
pub struct AreCurveArgs {
    #[arg(long)]
    pub family: String,
    /// Spearman grid as `lo:hi:step` or a comma list.
    #[arg(long, default_value = "-0.8:0.8:0.1", allow_hyphen_values = true)]
    pub rho: String,
    #[arg(long, value_enum, default_value_t = MarginalsArg::ExpExp)]
    pub marginals: MarginalsArg,
    #[arg(long, default_value_t = 100_000)]
    pub n: usize,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 20)]
    pub order: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct Are3dArgs {
    /// Grid of the common correlation parameter rho12 = rho13.
    #[arg(long, default_value = "-0.7:0.7:0.1", allow_hyphen_values = true)]
    pub rho: String,
    #[arg(long, default_value_t = 0.5, allow_hyphen_values = true)]
    pub rho23: f64,
    #[arg(long, default_value_t = 100_000)]
    pub n: usize,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 5)]
    pub order: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CompanionArg {
    Volume,
    Volatility,
    Both,
}

#[derive(Debug, Args)]
pub struct VarArgs {
    /// Daily CSV with header `date,adj_close,volume`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 156)]
    pub window: usize,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Sieve order of the SMLE fits.
    #[arg(long, default_value_t = 5)]
    pub jn: usize,
    #[arg(long, value_enum, default_value_t = CompanionArg::Volatility)]
    pub companion: CompanionArg,
    /// Steepness of the score weight.
    #[arg(long, default_value_t = 30.0)]
    pub a: f64,
    /// Score threshold; defaults to the 5% sample quantile of weekly returns.
    #[arg(long, allow_hyphen_values = true)]
    pub threshold: Option<f64>,
    #[arg(long, default_value_t = 10)]
    pub jack_d: usize,
    /// Comma-separated subset of qmle, fmle_t, smle.
    #[arg(long, default_value = "qmle,fmle_t,smle")]
    pub methods: String,
}

impl Command {
    /// Resolve flags into a run configuration; `None` for `rerun`.
    pub fn resolve(&self) -> Result<Option<RunConfig>> {
        let cfg = match self {
            Command::Fit(a) => RunConfig::Fit {
                data: absolute(&a.data)?,
                model: absolute(&a.model)?,
                avar_k: a.avar_k,
            },
            Command::SelectOrder(a) => RunConfig::SelectOrder {
                data: absolute(&a.data)?,
                model: absolute(&a.model)?,
                orders: a.orders.as_deref().map(parse_orders).transpose()?,
                criterion: a.criterion.map(|c| match c {
                    CriterionArg::Aic => Criterion::Aic,
                    CriterionArg::Bic => Criterion::Bic,
                }),
            },
            Command::SimulateTable1(a) => RunConfig::SimulateTable1(Table1Config {
                replications: a.reps,
                n: a.n,
                order: a.order,
                seed: a.seed,
                theta: a.theta,
                means: vec![0.5, 1.0],
                avar: (!a.no_avar).then_some(AvarSample {
                    n: a.avar_n,
                    order: a.avar_order,
                    k: a.avar_k,
                }),
            }),
            Command::SimulateTable2(a) => RunConfig::SimulateTable2(Table2Config {
                replications: a.reps,
                n: a.n,
                orders: parse_orders(&a.orders)?,
                seed: a.seed,
                theta: a.theta,
                means: vec![0.5, 1.0],
            }),
            Command::AreCurve(a) => RunConfig::AreCurve(AreCurveConfig {
                family: a.family.parse::<CopulaFamily>()?,
                marginals: a.marginals.models()?,
                rho_grid: parse_grid(&a.rho)?,
                n: a.n,
                k: a.k,
                order: a.order,
                seed: a.seed,
            }),
            Command::Are3d(a) => RunConfig::Are3d(Are3dConfig {
                rho_grid: parse_grid(&a.rho)?,
                rho23: a.rho23,
                means: vec![0.1, 0.5, 1.0],
                n: a.n,
                k: a.k,
                order: a.order,
                seed: a.seed,
            }),
            Command::VarBacktest(a) => RunConfig::VarBacktest {
                data: absolute(&a.data)?,
                methods: a
                    .methods
                    .split(',')
                    .map(|m| m.trim().parse::<VarMethod>())
                    .collect::<Result<Vec<_>>>()?,
                backtest: BacktestConfig {
                    window: a.window,
                    alpha: a.alpha,
                    order: a.jn,
                    companion: match a.companion {
                        CompanionArg::Volume => Companion::Volume,
                        CompanionArg::Volatility => Companion::Volatility,
                        CompanionArg::Both => Companion::Both,
                    },
                    steepness: a.a,
                    threshold: a.threshold,
                    jack_d: a.jack_d,
                    fixed_t_copula: None,
                },
            },
            Command::Rerun { .. } => return Ok(None),
        };
        Ok(Some(cfg))
    }
}

fn absolute(p: &std::path::Path) -> Result<PathBuf> {
    std::path::absolute(p).map_err(Error::from)
}
