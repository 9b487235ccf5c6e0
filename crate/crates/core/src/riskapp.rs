//! Weekly Value-at-Risk backtests.
//!
//! Daily prices and volumes are turned into weekly returns `R`, dollar
//! volume changes `M` and realized volatilities `V`. The Student-t marginal
//! of `R` is re-estimated on a rolling window by QMLE, t-copula FMLE or SMLE
//! with `M` and/or `V` as companions, and each window's fit yields a VaR for
//! the following week together with a censored likelihood score.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::copulas::{CorrelationMatrix, ParametricCopula};
use crate::data::DataMatrix;
use crate::error::{Error, Result};
use crate::estimate::{fit, fit_given_copula, Dependence, JointModelSpec};
use crate::marginals::MarginalModel;
use crate::quadrature::{integrate_adaptive, integrate_lower_tail, integrate_real_line, integrate_upper_tail};
use crate::simlab::DgpSpec;

pub const DEFAULT_WINDOW: usize = 156;
pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_ORDER: usize = 5;
pub const DEFAULT_STEEPNESS: f64 = 30.0;
pub const DEFAULT_JACKKNIFE_BLOCK: usize = 10;
/// Sample quantile of the weekly returns used as the default score threshold.
pub const THRESHOLD_LEVEL: f64 = 0.05;
/// Realized volatility is divided by `VOLATILITY_HEADROOM` times the window
/// maximum before the Beta fit.
pub const VOLATILITY_HEADROOM: f64 = 1.05;
/// Lower bound on rescaled volatility, keeping zero-volatility weeks inside
/// the Beta support.
pub const VOLATILITY_FLOOR: f64 = 1e-6;
/// Starting degrees of freedom of the t-copula in FMLE.
const T_COPULA_START_DF: f64 = 8.0;
const SCORE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DailyRecord {
    pub date: NaiveDate,
    pub adj_close: f64,
    pub volume: f64,
}

/// Read a daily CSV with header `date,adj_close,volume`.
pub fn ingest_daily(path: &Path) -> Result<Vec<DailyRecord>> {
    parse_daily(std::fs::File::open(path)?)
}

/// Parse daily records, reject malformed rows with their line number and
/// return them sorted by date.
pub fn parse_daily<R: Read>(reader: R) -> Result<Vec<DailyRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| csv_data_error(&e))?.clone();
    let column = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Data {
            line: 1,
            message: format!("missing column '{name}'"),
        })
    };
    let (i_date, i_close, i_volume) = (column("date")?, column("adj_close")?, column("volume")?);
    let mut out = Vec::new();
    let mut seen: HashMap<NaiveDate, usize> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_data_error(&e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let bad = |message: String| Error::Data { line, message };
        let field = |i: usize, name: &str| rec.get(i).ok_or_else(|| bad(format!("missing field '{name}'")));
        let raw = field(i_date, "date")?;
        let date = NaiveDate::parse_from_str(raw, "%Y-%m-%d")
            .map_err(|_| bad(format!("'{raw}' is not an ISO-8601 date")))?;
        let number = |i: usize, name: &str| -> Result<f64> {
            let raw = field(i, name)?;
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(bad(format!("{name} '{raw}' is not a finite number"))),
            }
        };
        let adj_close = number(i_close, "adj_close")?;
        if adj_close <= 0.0 {
            return Err(bad(format!("nonpositive price {adj_close}")));
        }
        let volume = number(i_volume, "volume")?;
        if volume < 0.0 {
            return Err(bad(format!("negative volume {volume}")));
        }
        if let Some(first) = seen.insert(date, line) {
            return Err(bad(format!("duplicate date {date} (first seen at line {first})")));
        }
        out.push(DailyRecord {
            date,
            adj_close,
            volume,
        });
    }
    if out.is_empty() {
        return Err(Error::Empty("no daily records after the header".into()));
    }
    out.sort_by_key(|r| r.date);
    Ok(out)
}

fn csv_data_error(e: &csv::Error) -> Error {
    Error::Data {
        line: e.position().map_or(0, |p| p.line() as usize),
        message: e.to_string(),
    }
}

pub fn write_daily<W: Write>(records: &[DailyRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeeklyObservation {
    /// Last trading day of the calendar week.
    pub week_end: NaiveDate,
    /// `ln(P_t / P_{t-1})` of week-end closes.
    pub r: f64,
    /// `ln(m_t / m_{t-1})` with `m_t` the week's dollar volume.
    pub m: f64,
    /// Sample standard deviation of the week's daily log returns; `None`
    /// for weeks with fewer than two trading days.
    pub v: Option<f64>,
    pub trading_days: usize,
}

impl WeeklyObservation {
    pub fn is_flagged(&self) -> bool {
        self.v.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeeklySeries {
    pub rows: Vec<WeeklyObservation>,
}

impl WeeklySeries {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn returns(&self) -> Vec<f64> {
        self.rows.iter().map(|w| w.r).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("week_end,r,m,v,trading_days\n");
        for w in &self.rows {
            let v = w.v.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{},{},{}\n", w.week_end, w.r, w.m, v, w.trading_days));
        }
        s
    }
}

/// Weekly features from date-sorted daily records. Weeks run Monday to
/// Sunday and close on their last trading day; the first week only serves
/// as the base of the first return.
pub fn weekly_features(daily: &[DailyRecord]) -> Result<WeeklySeries> {
    if let Some(w) = daily.windows(2).find(|w| w[1].date <= w[0].date) {
        return Err(Error::param(format!("daily dates not strictly increasing at {}", w[1].date)));
    }
    struct Week {
        end: NaiveDate,
        close: f64,
        dollar_volume: f64,
        day_returns: Vec<f64>,
        days: usize,
    }
    let mut weeks: Vec<Week> = Vec::new();
    let mut key = None;
    for (k, d) in daily.iter().enumerate() {
        let iso = d.date.iso_week();
        let this = (iso.year(), iso.week());
        if key != Some(this) {
            key = Some(this);
            weeks.push(Week {
                end: d.date,
                close: d.adj_close,
                dollar_volume: 0.0,
                day_returns: Vec::new(),
                days: 0,
            });
        }
        let w = weeks.last_mut().expect("week started");
        w.end = d.date;
        w.close = d.adj_close;
        w.dollar_volume += d.volume * d.adj_close;
        w.days += 1;
        if k > 0 {
            w.day_returns.push((d.adj_close / daily[k - 1].adj_close).ln());
        }
    }
    if weeks.len() < 2 {
        return Err(Error::Empty("weekly features need at least two weeks of data".into()));
    }
    let mut rows = Vec::with_capacity(weeks.len() - 1);
    for pair in weeks.windows(2) {
        let (prev, w) = (&pair[0], &pair[1]);
        if !(prev.dollar_volume > 0.0 && w.dollar_volume > 0.0) {
            return Err(Error::domain(format!("zero dollar volume around the week ending {}", w.end)));
        }
        let v = (w.days >= 2).then(|| sample_sd(&w.day_returns));
        rows.push(WeeklyObservation {
            week_end: w.end,
            r: (w.close / prev.close).ln(),
            m: (w.dollar_volume / prev.dollar_volume).ln(),
            v,
            trading_days: w.days,
        });
    }
    Ok(WeeklySeries { rows })
}

fn sample_sd(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Linear-interpolation sample quantile (type 7).
pub fn empirical_quantile(x: &[f64], p: f64) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::Empty("quantile of an empty sample".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::domain(format!("probability {p} outside [0, 1]")));
    }
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let h = (s.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(s.len() - 1);
    Ok(s[lo] + (h - lo as f64) * (s[hi] - s[lo]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VarMethod {
    #[serde(rename = "QMLE")]
    Qmle,
    #[serde(rename = "FMLE_T")]
    FmleT,
    #[serde(rename = "SMLE")]
    Smle,
}

impl VarMethod {
    pub const ALL: [VarMethod; 3] = [VarMethod::Qmle, VarMethod::FmleT, VarMethod::Smle];

    pub fn label(&self) -> &'static str {
        match self {
            VarMethod::Qmle => "QMLE",
            VarMethod::FmleT => "FMLE_T",
            VarMethod::Smle => "SMLE",
        }
    }
}

impl FromStr for VarMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "qmle" => Ok(VarMethod::Qmle),
            "fmle_t" | "fmle-t" | "fmle" => Ok(VarMethod::FmleT),
            "smle" => Ok(VarMethod::Smle),
            _ => Err(Error::param(format!("unknown VaR method '{s}'"))),
        }
    }
}

impl std::fmt::Display for VarMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Variables modelled jointly with the returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Companion {
    Volume,
    #[default]
    Volatility,
    Both,
}

impl Companion {
    fn uses_volume(&self) -> bool {
        matches!(self, Companion::Volume | Companion::Both)
    }

    fn uses_volatility(&self) -> bool {
        matches!(self, Companion::Volatility | Companion::Both)
    }

    pub fn dim(&self) -> usize {
        1 + self.uses_volume() as usize + self.uses_volatility() as usize
    }
}

impl FromStr for Companion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "volume" => Ok(Companion::Volume),
            "volatility" => Ok(Companion::Volatility),
            "both" => Ok(Companion::Both),
            _ => Err(Error::param(format!("unknown companion '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestConfig {
    pub window: usize,
    pub alpha: f64,
    /// Sieve order for SMLE.
    pub order: usize,
    pub companion: Companion,
    /// Steepness `a` of the score weight.
    pub steepness: f64,
    /// Score threshold `y`; the sample quantile at [`THRESHOLD_LEVEL`] of all
    /// weekly returns when absent.
    pub threshold: Option<f64>,
    pub jack_d: usize,
    /// Hold the FMLE t-copula at this value instead of estimating it.
    #[serde(default)]
    pub fixed_t_copula: Option<ParametricCopula>,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        BacktestConfig {
            window: DEFAULT_WINDOW,
            alpha: DEFAULT_ALPHA,
            order: DEFAULT_ORDER,
            companion: Companion::default(),
            steepness: DEFAULT_STEEPNESS,
            threshold: None,
            jack_d: DEFAULT_JACKKNIFE_BLOCK,
            fixed_t_copula: None,
        }
    }
}

impl BacktestConfig {
    fn validate(&self, ws: &WeeklySeries) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::param(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        if self.window < 10 {
            return Err(Error::param("window must cover at least 10 weeks"));
        }
        if self.window + 1 > ws.len() {
            return Err(Error::param(format!(
                "window of {} weeks needs at least {} weekly observations, got {}",
                self.window,
                self.window + 1,
                ws.len()
            )));
        }
        if !(self.steepness > 0.0) {
            return Err(Error::param("score steepness must be positive"));
        }
        if self.jack_d < 1 {
            return Err(Error::param("jackknife block size must be at least 1"));
        }
        Ok(())
    }

    pub fn score_weight(&self, ws: &WeeklySeries) -> Result<ScoreWeight> {
        let threshold = match self.threshold {
            Some(y) => y,
            None => empirical_quantile(&ws.returns(), THRESHOLD_LEVEL)?,
        };
        Ok(ScoreWeight {
            threshold,
            steepness: self.steepness,
        })
    }
}

/// Logistic score weight `w(s) = 1 / (1 + exp(a (y - s)))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreWeight {
    pub threshold: f64,
    pub steepness: f64,
}

impl ScoreWeight {
    pub fn weight(&self, s: f64) -> f64 {
        1.0 / (1.0 + (self.steepness * (self.threshold - s)).exp())
    }

    /// `1 - w(s)`, computed without cancellation.
    pub fn complement(&self, s: f64) -> f64 {
        1.0 / (1.0 + (self.steepness * (s - self.threshold)).exp())
    }
}

/// Censored likelihood score
/// `w(r) ln f(r) + (1 - w(r)) ln(1 - int w(s) f(s) ds)`.
/// The censored mass is integrated as `int (1 - w) f` over the support.
pub fn censored_score(model: &MarginalModel, realized: f64, weight: &ScoreWeight) -> Result<f64> {
    let w = weight.weight(realized);
    let w_c = weight.complement(realized);
    let mut score = 0.0;
    if w > 0.0 {
        score += w * model.log_pdf(realized)?;
    }
    if w_c > 0.0 {
        let mass = censored_mass(model, weight)?;
        if !(mass > 0.0) {
            return Err(Error::domain("censored probability mass vanishes"));
        }
        score += w_c * mass.ln();
    }
    Ok(score)
}

/// `1 - int w(s) f(s) ds`.
pub fn censored_mass(model: &MarginalModel, weight: &ScoreWeight) -> Result<f64> {
    let g = |s: f64| weight.complement(s) * model.pdf(s);
    let (lo, hi) = model.support();
    match (lo.is_finite(), hi.is_finite()) {
        (true, true) => integrate_adaptive(g, lo, hi, SCORE_TOL, SCORE_TOL),
        (true, false) => integrate_upper_tail(g, lo, SCORE_TOL, SCORE_TOL),
        (false, true) => integrate_lower_tail(g, hi, SCORE_TOL, SCORE_TOL),
        (false, false) => integrate_real_line(g, weight.threshold, SCORE_TOL, SCORE_TOL),
    }
}

pub fn exceedance(var: f64, realized: f64) -> bool {
    realized < var
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarRecord {
    /// End of the week whose return is forecast.
    pub week_end: NaiveDate,
    pub var: Option<f64>,
    pub realized: f64,
    pub exceed: Option<bool>,
    pub score: Option<f64>,
    /// Fitted return marginal of the window ending the week before.
    pub fit: Option<MarginalModel>,
    /// Divisor mapping realized volatility into (0, 1) in that window.
    pub volatility_scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarSeries {
    pub method: VarMethod,
    pub companion: Companion,
    pub alpha: f64,
    pub weight: ScoreWeight,
    pub rows: Vec<VarRecord>,
    /// Windows whose fit or score failed.
    pub failures: usize,
}

impl VarSeries {
    pub fn exceedances(&self) -> usize {
        self.rows.iter().filter(|r| r.exceed == Some(true)).count()
    }

    pub fn evaluated(&self) -> usize {
        self.rows.iter().filter(|r| r.var.is_some()).count()
    }

    pub fn exceedance_rate(&self) -> f64 {
        self.exceedances() as f64 / self.evaluated() as f64
    }

    pub fn scores(&self) -> Vec<Option<f64>> {
        self.rows.iter().map(|r| r.score).collect()
    }

    pub fn mean_score(&self) -> f64 {
        let s: Vec<f64> = self.rows.iter().filter_map(|r| r.score).collect();
        s.iter().sum::<f64>() / s.len() as f64
    }

    /// True when every stored flag equals the one recomputed from the VaR
    /// and the realized return.
    pub fn flags_consistent(&self) -> bool {
        self.rows
            .iter()
            .all(|r| r.exceed == r.var.map(|v| exceedance(v, r.realized)))
    }
}

#[derive(Debug, Clone)]
struct WindowFit {
    model: MarginalModel,
    volatility_scale: Option<f64>,
}

fn window_data(ws: &WeeklySeries, end: usize, cfg: &BacktestConfig) -> Result<(DataMatrix, Option<f64>)> {
    let rows = &ws.rows[end + 1 - cfg.window..=end];
    let companion = cfg.companion;
    let rows: Vec<&WeeklyObservation> = rows
        .iter()
        .filter(|w| !(companion.uses_volatility() && w.is_flagged()))
        .collect();
    let mut cols = vec![rows.iter().map(|w| w.r).collect::<Vec<_>>()];
    if companion.uses_volume() {
        cols.push(rows.iter().map(|w| w.m).collect());
    }
    let mut scale = None;
    if companion.uses_volatility() {
        let v: Vec<f64> = rows.iter().map(|w| w.v.expect("flagged weeks removed")).collect();
        let s = v.iter().copied().fold(0.0, f64::max) * VOLATILITY_HEADROOM;
        if !(s > 0.0) {
            return Err(Error::domain("realized volatility is zero throughout the window"));
        }
        cols.push(v.iter().map(|x| (x / s).max(VOLATILITY_FLOOR)).collect());
        scale = Some(s);
    }
    Ok((DataMatrix::from_columns(&cols)?, scale))
}

fn fit_window(ws: &WeeklySeries, end: usize, method: VarMethod, cfg: &BacktestConfig) -> Result<WindowFit> {
    let (data, volatility_scale) = window_data(ws, end, cfg)?;
    let companion = cfg.companion;
    let mut marginals = vec![MarginalModel::student_t(0.0, 1.0, 5.0)?];
    if companion.uses_volume() {
        marginals.push(MarginalModel::student_t(0.0, 1.0, 5.0)?);
    }
    if companion.uses_volatility() {
        marginals.push(MarginalModel::beta(2.0, 2.0)?);
    }
    let dim = marginals.len();
    let fitted = match method {
        VarMethod::Qmle => fit(&data, &JointModelSpec::new(marginals, Dependence::IndependenceAssumed))?,
        VarMethod::Smle => fit(&data, &JointModelSpec::new(marginals, Dependence::Sieve { order: cfg.order }))?,
        VarMethod::FmleT => match &cfg.fixed_t_copula {
            Some(copula) => {
                let spec = JointModelSpec::new(marginals, Dependence::Parametric { copula: copula.clone() });
                fit_given_copula(&data, &spec)?
            }
            None => {
                let copula = ParametricCopula::student_t(CorrelationMatrix::identity(dim)?, T_COPULA_START_DF)?;
                fit(&data, &JointModelSpec::new(marginals, Dependence::Parametric { copula }))?
            }
        },
    };
    Ok(WindowFit {
        model: fitted.marginals[0].clone(),
        volatility_scale,
    })
}

/// Rolling-window fits and VaR forecasts. The window ending at week `t`
/// forecasts week `t + 1`; windows are fitted in parallel.
pub fn rolling_fit_var(ws: &WeeklySeries, method: VarMethod, cfg: &BacktestConfig) -> Result<VarSeries> {
    cfg.validate(ws)?;
    let weight = cfg.score_weight(ws)?;
    let ends: Vec<usize> = (cfg.window - 1..ws.len() - 1).collect();
    let rows: Vec<(VarRecord, bool)> = ends
        .par_iter()
        .map(|&t| {
            let realized = ws.rows[t + 1].r;
            let mut rec = VarRecord {
                week_end: ws.rows[t + 1].week_end,
                var: None,
                realized,
                exceed: None,
                score: None,
                fit: None,
                volatility_scale: None,
            };
            let outcome = fit_window(ws, t, method, cfg).and_then(|f| {
                let var = f.model.quantile(cfg.alpha)?;
                let score = censored_score(&f.model, realized, &weight)?;
                Ok((f, var, score))
            });
            match outcome {
                Ok((f, var, score)) => {
                    rec.var = Some(var);
                    rec.exceed = Some(exceedance(var, realized));
                    rec.score = Some(score);
                    rec.fit = Some(f.model);
                    rec.volatility_scale = f.volatility_scale;
                    (rec, false)
                }
                Err(_) => (rec, true),
            }
        })
        .collect();
    let failures = rows.iter().filter(|r| r.1).count();
    Ok(VarSeries {
        method,
        companion: cfg.companion,
        alpha: cfg.alpha,
        weight,
        rows: rows.into_iter().map(|r| r.0).collect(),
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreComparison {
    pub method_a: String,
    pub method_b: String,
    /// Observations in the complete blocks the comparison is based on.
    pub n_used: usize,
    pub block: usize,
    /// Mean of `a - b`; positive when `a` scores higher.
    pub mean_difference: f64,
    pub std_error: f64,
    /// `None` when the standard error vanishes but the mean does not.
    pub t_ratio: Option<f64>,
    pub degenerate: bool,
}

/// Mean score difference with a delete-`d` jackknife standard error over
/// contiguous blocks of `d`; a trailing partial block is dropped.
pub fn compare_scores(a: &[f64], b: &[f64], d: usize) -> Result<ScoreComparison> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    if d < 1 {
        return Err(Error::param("jackknife block size must be at least 1"));
    }
    if a.len() < 2 * d {
        return Err(Error::param(format!(
            "{} scores are fewer than two blocks of {d}",
            a.len()
        )));
    }
    let g = a.len() / d;
    let n = g * d;
    let diff: Vec<f64> = a[..n].iter().zip(&b[..n]).map(|(x, y)| x - y).collect();
    let total: f64 = diff.iter().sum();
    let mean = total / n as f64;
    let leave_out: Vec<f64> = diff
        .chunks(d)
        .map(|blk| (total - blk.iter().sum::<f64>()) / (n - d) as f64)
        .collect();
    let centre = leave_out.iter().sum::<f64>() / g as f64;
    let var = (g - 1) as f64 / g as f64 * leave_out.iter().map(|t| (t - centre).powi(2)).sum::<f64>();
    let std_error = var.sqrt();
    let scale = 1.0 + diff.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let degenerate = std_error <= 1e-12 * scale;
    let t_ratio = if mean == 0.0 {
        Some(0.0)
    } else if degenerate {
        None
    } else {
        Some(mean / std_error)
    };
    Ok(ScoreComparison {
        method_a: "a".into(),
        method_b: "b".into(),
        n_used: n,
        block: d,
        mean_difference: mean,
        std_error,
        t_ratio,
        degenerate,
    })
}

/// Compare two methods on the weeks both scored.
pub fn compare_series(a: &VarSeries, b: &VarSeries, d: usize) -> Result<ScoreComparison> {
    let (sa, sb): (Vec<f64>, Vec<f64>) = a
        .rows
        .iter()
        .zip(&b.rows)
        .filter_map(|(x, y)| Some((x.score?, y.score?)))
        .unzip();
    let mut c = compare_scores(&sa, &sb, d)?;
    c.method_a = a.method.label().into();
    c.method_b = b.method.label().into();
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backtest {
    pub config: BacktestConfig,
    pub series: Vec<VarSeries>,
    pub comparisons: Vec<ScoreComparison>,
}

/// Run each method and compare SMLE's scores with every other method.
pub fn run_backtest(ws: &WeeklySeries, methods: &[VarMethod], cfg: &BacktestConfig) -> Result<Backtest> {
    let series = methods
        .iter()
        .map(|&m| rolling_fit_var(ws, m, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut comparisons = Vec::new();
    if let Some(smle) = series.iter().find(|s| s.method == VarMethod::Smle) {
        for other in series.iter().filter(|s| s.method != VarMethod::Smle) {
            comparisons.push(compare_series(smle, other, cfg.jack_d)?);
        }
    }
    Ok(Backtest {
        config: cfg.clone(),
        series,
        comparisons,
    })
}

impl Backtest {
    /// Long-format `week_end,method,var,realized,exceed,score`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("week_end,method,var,realized,exceed,score\n");
        for series in &self.series {
            for r in &series.rows {
                let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
                let exceed = r.exceed.map(|e| (e as u8).to_string()).unwrap_or_default();
                s.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    r.week_end,
                    series.method,
                    opt(r.var),
                    r.realized,
                    exceed,
                    opt(r.score)
                ));
            }
        }
        s
    }

    pub fn comparisons_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.comparisons)?)
    }
}

/// Weekly series drawn from known marginals joined by a copula, with
/// columns ordered (return, volume change, volatility). Volatility is the
/// Beta draw times `volatility_scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMarket {
    pub returns: MarginalModel,
    pub volume: MarginalModel,
    pub volatility: MarginalModel,
    pub volatility_scale: f64,
    pub copula: ParametricCopula,
    pub weeks: usize,
    pub seed: u64,
}

impl SyntheticMarket {
    /// Student-t(5) returns independent of the companions.
    pub fn iid(weeks: usize, seed: u64) -> Result<Self> {
        Ok(SyntheticMarket {
            returns: MarginalModel::student_t(0.002, 0.03, 5.0)?,
            volume: MarginalModel::student_t(0.0, 0.2, 6.0)?,
            volatility: MarginalModel::beta(2.0, 6.0)?,
            volatility_scale: 0.1,
            copula: ParametricCopula::independence(3),
            weeks,
            seed,
        })
    }

    pub fn generate(&self) -> Result<WeeklySeries> {
        let data = DgpSpec {
            marginals: vec![self.returns.clone(), self.volume.clone(), self.volatility.clone()],
            copula: self.copula.clone(),
            n: self.weeks,
            seed: self.seed,
        }
        .generate()?;
        let first = NaiveDate::from_ymd_opt(2000, 1, 7).expect("valid date");
        let rows = data
            .rows()
            .enumerate()
            .map(|(i, y)| WeeklyObservation {
                week_end: first + chrono::Duration::weeks(i as i64),
                r: y[0],
                m: y[1],
                v: Some(y[2] * self.volatility_scale),
                trading_days: 5,
            })
            .collect();
        Ok(WeeklySeries { rows })
    }
}
