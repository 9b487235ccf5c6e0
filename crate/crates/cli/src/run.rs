use std::fmt::Write as _;
use std::path::PathBuf;

use bksieve::avar::avar_for_fit;
use bksieve::data::DataMatrix;
use bksieve::estimate::{fit, select_order, Criterion, Dependence, ModelConfig};
use bksieve::riskapp::{ingest_daily, run_backtest, weekly_features, BacktestConfig, VarMethod};
use bksieve::simlab::{
    run_are_3d, run_are_curve, run_table1, run_table2, Are3dConfig, AreCurveConfig, AreTable, Table1Config,
    Table2Config,
};
use bksieve::{Error, Result};
use serde::{Deserialize, Serialize};

/// Fully resolved configuration of one run; recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum RunConfig {
    Fit {
        data: PathBuf,
        model: PathBuf,
        avar_k: Option<usize>,
    },
    SelectOrder {
        data: PathBuf,
        model: PathBuf,
        orders: Option<Vec<usize>>,
        criterion: Option<Criterion>,
    },
    SimulateTable1(Table1Config),
    SimulateTable2(Table2Config),
    AreCurve(AreCurveConfig),
    Are3d(Are3dConfig),
    VarBacktest {
        data: PathBuf,
        methods: Vec<VarMethod>,
        backtest: BacktestConfig,
    },
}

/// A file produced by a run. Non-reproducible outputs (timings) are
/// marked so reruns can be compared on the rest.
pub struct Output {
    pub name: &'static str,
    pub bytes: Vec<u8>,
    pub reproducible: bool,
}

fn out(name: &'static str, bytes: Vec<u8>) -> Output {
    Output {
        name,
        bytes,
        reproducible: true,
    }
}

impl RunConfig {
    pub fn name(&self) -> &'static str {
        match self {
            RunConfig::Fit { .. } => "fit",
            RunConfig::SelectOrder { .. } => "select-order",
            RunConfig::SimulateTable1(_) => "simulate-table1",
            RunConfig::SimulateTable2(_) => "simulate-table2",
            RunConfig::AreCurve(_) => "are-curve",
            RunConfig::Are3d(_) => "are-3d",
            RunConfig::VarBacktest { .. } => "var-backtest",
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            RunConfig::SimulateTable1(c) => Some(c.seed),
            RunConfig::SimulateTable2(c) => Some(c.seed),
            RunConfig::AreCurve(c) => Some(c.seed),
            RunConfig::Are3d(c) => Some(c.seed),
            _ => None,
        }
    }

    pub fn execute(&self) -> Result<Vec<Output>> {
        match self {
            RunConfig::Fit { data, model, avar_k } => {
                let data = read_data(data)?;
                let cfg = read_model(model)?;
                let mut spec = cfg.model.clone();
                if let (Dependence::Sieve { .. }, false) = (&spec.dependence, cfg.j_grid.is_empty()) {
                    let sel = select_order(&data, &spec, &cfg.j_grid, cfg.criterion)?;
                    spec = spec.with_dependence(Dependence::Sieve { order: sel.j_star });
                }
                let mut f = fit(&data, &spec)?;
                if let Some(k) = avar_k {
                    f.acov = Some(avar_for_fit(&f, &data, *k)?);
                }
                Ok(vec![out("fit.json", json(&f)?)])
            }
            RunConfig::SelectOrder {
                data,
                model,
                orders,
                criterion,
            } => {
                let data = read_data(data)?;
                let cfg = read_model(model)?;
                let grid = orders.clone().unwrap_or_else(|| cfg.j_grid.clone());
                let sel = select_order(&data, &cfg.model, &grid, criterion.unwrap_or(cfg.criterion))?;
                let mut csv = String::from("order,k,loglik,aic,bic,error\n");
                for r in &sel.rows {
                    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
                    let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
                    writeln!(csv, "{},{},{},{},{},{}", r.order, r.k, opt(r.loglik), opt(r.aic), opt(r.bic), err)
                        .expect("write to string");
                }
                Ok(vec![out("order_selection.json", json(&sel)?), out("order_selection.csv", csv.into_bytes())])
            }
            RunConfig::SimulateTable1(c) => {
                let res = run_table1(c)?;
                let mut csv = Vec::new();
                res.to_csv(&mut csv)?;
                Ok(vec![out("table1.csv", csv), out("table1_failures.json", json(&res.failure_log)?)])
            }
            RunConfig::SimulateTable2(c) => {
                let t = run_table2(c)?;
                let mut csv = Vec::new();
                t.to_csv(&mut csv)?;
                let mut sel = String::from("replication,aic_order,bic_order\n");
                for (r, (a, b)) in t.aic_selected.iter().zip(&t.bic_selected).enumerate() {
                    let opt = |x: &Option<usize>| x.map(|v| v.to_string()).unwrap_or_default();
                    writeln!(sel, "{r},{},{}", opt(a), opt(b)).expect("write to string");
                }
                let mut timings = Vec::new();
                t.timings_csv(&mut timings)?;
                Ok(vec![
                    out("table2.csv", csv),
                    out("table2_selection.csv", sel.into_bytes()),
                    out("table2_failures.json", json(&t.failure_log)?),
                    Output {
                        name: "table2_timings.csv",
                        bytes: timings,
                        reproducible: false,
                    },
                ])
            }
            RunConfig::AreCurve(c) => are_outputs("are_curve.csv", &run_are_curve(c)?),
            RunConfig::Are3d(c) => are_outputs("are_3d.csv", &run_are_3d(c)?),
            RunConfig::VarBacktest {
                data,
                methods,
                backtest,
            } => {
                let daily = ingest_daily(data)?;
                let ws = weekly_features(&daily)?;
                let bt = run_backtest(&ws, methods, backtest)?;
                let failures: Vec<(String, usize)> =
                    bt.series.iter().map(|s| (s.method.label().to_string(), s.failures)).collect();
                Ok(vec![
                    out("weekly.csv", ws.to_csv().into_bytes()),
                    out("var_series.csv", bt.to_csv().into_bytes()),
                    out("score_comparison.json", bt.comparisons_json()?.into_bytes()),
                    out("var_failures.json", json(&failures)?),
                ])
            }
        }
    }
}

fn are_outputs(name: &'static str, table: &AreTable) -> Result<Vec<Output>> {
    let mut csv = Vec::new();
    table.to_csv(&mut csv)?;
    let mut skipped = String::from("rho,reason\n");
    for s in &table.skipped {
        writeln!(skipped, "{},{}", s.rho, s.reason.replace([',', '\n'], ";")).expect("write to string");
    }
    Ok(vec![out(name, csv), out("are_skipped.csv", skipped.into_bytes())])
}

fn read_data(path: &PathBuf) -> Result<DataMatrix> {
    DataMatrix::from_csv(std::fs::File::open(path)?)
}

fn read_model(path: &PathBuf) -> Result<ModelConfig> {
    ModelConfig::from_json(&std::fs::read_to_string(path)?)
}

fn json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v).map_err(Error::from)?;
    s.push('\n');
    Ok(s.into_bytes())
}
