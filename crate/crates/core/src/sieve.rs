//! Bernstein-Kantorovich copula sieve.
//!
//! The density is a mixture of products of beta densities,
//! `c(u) = J^m sum_v w_v prod_l b_{v_l, J-1}(u_l)`, where `b_{k,n}` is the
//! Bernstein basis polynomial. Weights are nonnegative, sum to one, and every
//! axis slice sums to `1/J` so that all marginals are uniform.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::DataMatrix;
use crate::error::{Error, Result};

/// Floor applied to raw weights before proportional fitting.
pub const WEIGHT_FLOOR: f64 = 1e-6;
/// Densities at or below this level are treated as singular.
pub const DENSITY_FLOOR: f64 = 1e-12;
pub const MAX_IPF_SWEEPS: usize = 10_000;
/// Tolerance on slice sums for a weight tensor to count as feasible.
pub const FEASIBILITY_TOL: f64 = 1e-10;
pub const MAX_ORDER: usize = 64;
const MAX_SCALING_STEPS: usize = 200;
const COLD_SCALING_STEPS: usize = 40;

/// Multi-index `v` of a histogram cell / weight.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GridCellIndex {
    pub v: Vec<usize>,
}

impl GridCellIndex {
    pub fn from_flat(mut flat: usize, order: usize, dim: usize) -> Self {
        let mut v = vec![0; dim];
        for l in (0..dim).rev() {
            v[l] = flat % order;
            flat /= order;
        }
        GridCellIndex { v }
    }

    pub fn flat(&self, order: usize) -> usize {
        self.v.iter().fold(0, |acc, &k| acc * order + k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SieveCopula {
    order: usize,
    dim: usize,
    /// Row-major over the multi-index, last axis fastest.
    weights: Vec<f64>,
}

/// Bernstein basis `b_{k,n}(x)`, `k = 0..=n`.
pub fn bernstein_basis(n: usize, x: f64, out: &mut [f64]) {
    debug_assert_eq!(out.len(), n + 1);
    if n == 0 {
        out[0] = 1.0;
        return;
    }
    if x <= 0.0 || x >= 1.0 {
        out.iter_mut().for_each(|v| *v = 0.0);
        out[if x <= 0.0 { 0 } else { n }] = 1.0;
        return;
    }
    if n <= 20 {
        // de Casteljau style recurrence, exact partition of unity up to rounding
        out.iter_mut().for_each(|v| *v = 0.0);
        out[0] = 1.0;
        let y = 1.0 - x;
        for j in 1..=n {
            let mut prev = 0.0;
            for k in 0..=j {
                let cur = out[k];
                out[k] = y * cur + x * prev;
                prev = cur;
            }
        }
    } else {
        let (lx, ly) = (x.ln(), (-x).ln_1p());
        let mut ln_binom = 0.0;
        for k in 0..=n {
            if k > 0 {
                ln_binom += ((n - k + 1) as f64 / k as f64).ln();
            }
            out[k] = (ln_binom + k as f64 * lx + (n - k) as f64 * ly).exp();
        }
    }
}

/// Derivative of the order-`n` Bernstein basis: `n (b_{k-1,n-1} - b_{k,n-1})`.
fn bernstein_derivative(n: usize, x: f64, lower: &mut [f64], out: &mut [f64]) {
    if n == 0 {
        out[0] = 0.0;
        return;
    }
    bernstein_basis(n - 1, x, lower);
    let nf = n as f64;
    for k in 0..=n {
        let a = if k > 0 { lower[k - 1] } else { 0.0 };
        let b = if k < n { lower[k] } else { 0.0 };
        out[k] = nf * (a - b);
    }
}

/// Number of free weights: `J^m - m(J-1) - 1`.
pub fn free_parameter_count(order: usize, dim: usize) -> usize {
    order.pow(dim as u32) - dim * (order - 1) - 1
}

fn check_order(order: usize, dim: usize) -> Result<()> {
    if order == 0 || order > MAX_ORDER {
        return Err(Error::param(format!("sieve order {order} outside 1..={MAX_ORDER}")));
    }
    if dim < 2 {
        return Err(Error::param("sieve dimension must be at least 2"));
    }
    if (order as f64).powi(dim as i32) > 5e6 {
        return Err(Error::param(format!("sieve tensor {order}^{dim} too large")));
    }
    Ok(())
}

/// Sums of `w` over all indices except axis `axis`, one per level.
fn slice_sums(w: &[f64], order: usize, dim: usize, axis: usize) -> Vec<f64> {
    let stride = order.pow((dim - 1 - axis) as u32);
    let mut sums = vec![0.0; order];
    for (flat, &x) in w.iter().enumerate() {
        sums[(flat / stride) % order] += x;
    }
    sums
}

fn max_slice_error(w: &[f64], order: usize, dim: usize) -> f64 {
    let target = 1.0 / order as f64;
    (0..dim)
        .flat_map(|l| slice_sums(w, order, dim, l))
        .fold(0.0, |m, s| m.max((s - target).abs()))
}

/// Rescale a positive tensor until every slice sums to `1/J`.
/// Returns the number of sweeps used.
pub(crate) fn ipf_in_place(w: &mut [f64], order: usize, dim: usize, tol: f64) -> Result<usize> {
    let target = 1.0 / order as f64;
    for sweep in 0..MAX_IPF_SWEEPS {
        if max_slice_error(w, order, dim) < tol {
            return Ok(sweep);
        }
        for axis in 0..dim {
            let sums = slice_sums(w, order, dim, axis);
            if sums.iter().any(|&s| s <= 0.0) {
                return Err(Error::Infeasible(
                    "a weight slice is entirely zero; uniform marginals unattainable".into(),
                ));
            }
            let stride = order.pow((dim - 1 - axis) as u32);
            for (flat, x) in w.iter_mut().enumerate() {
                *x *= target / sums[(flat / stride) % order];
            }
        }
    }
    if max_slice_error(w, order, dim) < tol {
        return Ok(MAX_IPF_SWEEPS);
    }
    Err(Error::NonConvergence {
        iterations: MAX_IPF_SWEEPS,
        context: "iterative proportional fitting".into(),
    })
}

impl SieveCopula {
    /// Validate and wrap a feasible weight tensor.
    pub fn new(order: usize, dim: usize, weights: Vec<f64>) -> Result<Self> {
        check_order(order, dim)?;
        if weights.len() != order.pow(dim as u32) {
            return Err(Error::DimensionMismatch {
                expected: order.pow(dim as u32),
                got: weights.len(),
            });
        }
        if weights.iter().any(|&w| !(0.0..=1.0).contains(&w)) {
            return Err(Error::Infeasible("sieve weights must lie in [0, 1]".into()));
        }
        let total: f64 = weights.iter().sum();
        let err = max_slice_error(&weights, order, dim);
        if (total - 1.0).abs() > FEASIBILITY_TOL || err > FEASIBILITY_TOL {
            return Err(Error::Infeasible(format!(
                "sieve weights violate the sum constraints (total {total}, slice error {err:e})"
            )));
        }
        Ok(SieveCopula {
            order,
            dim,
            weights,
        })
    }

    pub fn uniform(order: usize, dim: usize) -> Result<Self> {
        check_order(order, dim)?;
        let n = order.pow(dim as u32);
        Ok(SieveCopula {
            order,
            dim,
            weights: vec![1.0 / n as f64; n],
        })
    }

    /// Make raw nonnegative weights feasible. Input that already satisfies
    /// the constraints is returned unchanged; otherwise the tensor is
    /// normalized to unit mass, entries below [`WEIGHT_FLOOR`] are raised to
    /// it, and proportional fitting enforces the slice sums (finished by
    /// Newton scaling when fitting stalls).
    pub fn project_feasible(order: usize, dim: usize, raw: &[f64]) -> Result<Self> {
        check_order(order, dim)?;
        if raw.len() != order.pow(dim as u32) {
            return Err(Error::DimensionMismatch {
                expected: order.pow(dim as u32),
                got: raw.len(),
            });
        }
        if raw.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::Infeasible("raw weights must be finite and nonnegative".into()));
        }
        let total: f64 = raw.iter().sum();
        if total <= 0.0 {
            return Err(Error::Infeasible("raw weights are all zero".into()));
        }
        if let Ok(s) = SieveCopula::new(order, dim, raw.to_vec()) {
            return Ok(s);
        }
        let mut w: Vec<f64> = raw.iter().map(|&x| (x / total).max(WEIGHT_FLOOR)).collect();
        if let Err(e) = ipf_in_place(&mut w, order, dim, 1e-13) {
            if !matches!(e, Error::NonConvergence { .. }) {
                return Err(e);
            }
            // proportional fitting crawls when the limit has cells near the
            // floor; the Newton solve reaches the same fixed point
            let log_w: Vec<f64> = w.iter().map(|x| x.ln()).collect();
            w = LogLinearMap::new(order, dim)?.solve_main_effects(&log_w, &mut Vec::new())?;
        }
        Ok(SieveCopula {
            order,
            dim,
            weights: w,
        })
    }

    /// Histogram of pseudo-observations on the `J^m` grid, then projected.
    pub fn empirical_init(u: &DataMatrix, order: usize) -> Result<Self> {
        let dim = u.ncols();
        check_order(order, dim)?;
        if u.nrows() == 0 {
            return Err(Error::Empty("no pseudo-observations".into()));
        }
        let raw = Self::histogram(u, order)?;
        Self::project_feasible(order, dim, &raw)
    }

    /// Raw cell frequencies. Points on an interior cell boundary go to the
    /// lower cell.
    pub fn histogram(u: &DataMatrix, order: usize) -> Result<Vec<f64>> {
        let dim = u.ncols();
        let mut counts = vec![0.0; order.pow(dim as u32)];
        let jf = order as f64;
        for row in u.rows() {
            let mut flat = 0;
            for &x in row {
                if !(0.0..=1.0).contains(&x) {
                    return Err(Error::domain(format!("pseudo-observation {x} outside [0, 1]")));
                }
                let cell = ((x * jf).ceil() as usize).saturating_sub(1).min(order - 1);
                flat = flat * order + cell;
            }
            counts[flat] += 1.0;
        }
        let n = u.nrows() as f64;
        counts.iter_mut().for_each(|c| *c /= n);
        Ok(counts)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, idx: &GridCellIndex) -> f64 {
        self.weights[idx.flat(self.order)]
    }

    fn scale(&self) -> f64 {
        (self.order as f64).powi(self.dim as i32)
    }

    fn check_point(&self, u: &[f64], open: bool) -> Result<()> {
        if u.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: u.len(),
            });
        }
        let ok = if open {
            u.iter().all(|&x| x > 0.0 && x < 1.0)
        } else {
            u.iter().all(|&x| (0.0..=1.0).contains(&x))
        };
        if ok {
            Ok(())
        } else {
            Err(Error::domain(format!("sieve argument {u:?} outside the unit cube")))
        }
    }

    pub fn density(&self, u: &[f64]) -> Result<f64> {
        self.check_point(u, false)?;
        let mut ws = Workspace::new(self.order, self.dim);
        Ok(ws.density(self, u))
    }

    pub fn log_density(&self, u: &[f64]) -> Result<f64> {
        self.density(u).map(f64::ln)
    }

    pub fn dlogdensity_du(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check_point(u, true)?;
        let mut ws = Workspace::new(self.order, self.dim);
        let c = ws.density(self, u);
        if c <= DENSITY_FLOOR {
            return Err(Error::Singular(format!("sieve density {c:e} at {u:?}")));
        }
        let mut g = vec![0.0; self.dim];
        ws.density_gradient(self, u, &mut g);
        g.iter_mut().for_each(|v| *v /= c);
        Ok(g)
    }

    /// Log density for each row; rows where the density vanishes give `-inf`.
    pub fn log_density_rows(&self, u: &DataMatrix) -> Vec<f64> {
        let mut ws = Workspace::new(self.order, self.dim);
        u.rows().map(|r| ws.density(self, r).ln()).collect()
    }

    pub fn to_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (1..=self.dim).map(|l| format!("v{l}")).collect();
        header.push("omega".into());
        w.write_record(&header)?;
        for (flat, &x) in self.weights.iter().enumerate() {
            let idx = GridCellIndex::from_flat(flat, self.order, self.dim);
            let mut rec: Vec<String> = idx.v.iter().map(|k| k.to_string()).collect();
            rec.push(format!("{x:e}"));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Parse the `v1,..,vm,omega` layout written by [`Self::to_csv`]. Every
    /// multi-index must appear exactly once and the weights must be feasible.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let dim = headers.len().saturating_sub(1);
        if dim < 2 || headers.get(dim) != Some("omega") {
            return Err(Error::Data {
                line: 1,
                message: "expected header v1,..,vm,omega with m >= 2".into(),
            });
        }
        let mut entries = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec?;
            if rec.len() != dim + 1 {
                return Err(Error::Data {
                    line,
                    message: format!("expected {} fields", dim + 1),
                });
            }
            let mut v = Vec::with_capacity(dim);
            for f in rec.iter().take(dim) {
                v.push(f.parse::<usize>().map_err(|e| Error::Data {
                    line,
                    message: format!("bad index '{f}': {e}"),
                })?);
            }
            let w: f64 = rec[dim].parse().map_err(|e| Error::Data {
                line,
                message: format!("bad weight '{}': {e}", &rec[dim]),
            })?;
            entries.push((line, v, w));
        }
        if entries.is_empty() {
            return Err(Error::Empty("weight file has no rows".into()));
        }
        let order = (entries.len() as f64).powf(1.0 / dim as f64).round() as usize;
        if order == 0 || order > MAX_ORDER || order.checked_pow(dim as u32) != Some(entries.len()) {
            return Err(Error::Data {
                line: entries.len() + 1,
                message: format!("{} rows is not J^{dim} for any order J", entries.len()),
            });
        }
        let mut weights = vec![f64::NAN; entries.len()];
        for (line, v, w) in entries {
            if v.iter().any(|&k| k >= order) {
                return Err(Error::Data {
                    line,
                    message: format!("index {v:?} out of range for order {order}"),
                });
            }
            let flat = GridCellIndex { v }.flat(order);
            if !weights[flat].is_nan() {
                return Err(Error::Data {
                    line,
                    message: "duplicate multi-index".into(),
                });
            }
            weights[flat] = w;
        }
        SieveCopula::new(order, dim, weights)
    }
}

/// Scratch buffers for repeated evaluation at many points.
pub(crate) struct Workspace {
    order: usize,
    dim: usize,
    basis: Vec<Vec<f64>>,
    deriv: Vec<Vec<f64>>,
    lower: Vec<f64>,
    tensor: Vec<f64>,
    next: Vec<f64>,
}

impl Workspace {
    pub(crate) fn new(order: usize, dim: usize) -> Self {
        let size = order.pow(dim as u32);
        Workspace {
            order,
            dim,
            basis: vec![vec![0.0; order]; dim],
            deriv: vec![vec![0.0; order]; dim],
            lower: vec![0.0; order.max(2) - 1],
            tensor: Vec::with_capacity(size),
            next: Vec::with_capacity(size),
        }
    }

    fn fill_basis(&mut self, u: &[f64]) {
        for l in 0..self.dim {
            bernstein_basis(self.order - 1, u[l], &mut self.basis[l]);
        }
    }

    /// Outer product of the per-axis vectors, with axis `swap` (if any)
    /// taken from the derivative buffers.
    fn build_tensor(&mut self, swap: Option<usize>) {
        self.tensor.clear();
        self.tensor.push(1.0);
        for l in 0..self.dim {
            let factor = if swap == Some(l) {
                &self.deriv[l]
            } else {
                &self.basis[l]
            };
            self.next.clear();
            for &t in &self.tensor {
                for &b in factor {
                    self.next.push(t * b);
                }
            }
            std::mem::swap(&mut self.tensor, &mut self.next);
        }
    }

    pub(crate) fn density(&mut self, s: &SieveCopula, u: &[f64]) -> f64 {
        self.fill_basis(u);
        self.build_tensor(None);
        s.scale() * dot(&s.weights, &self.tensor)
    }

    /// After `density`, the product tensor holds the basis products; this
    /// adds `scale * tensor * factor` into `acc`.
    pub(crate) fn accumulate_weight_gradient(&self, s: &SieveCopula, factor: f64, acc: &mut [f64]) {
        let f = s.scale() * factor;
        for (a, t) in acc.iter_mut().zip(&self.tensor) {
            *a += f * t;
        }
    }

    /// Gradient of the (unnormalized) density in `u`. Overwrites the
    /// product tensor.
    pub(crate) fn density_gradient(&mut self, s: &SieveCopula, u: &[f64], out: &mut [f64]) {
        for l in 0..self.dim {
            bernstein_derivative(self.order - 1, u[l], &mut self.lower, &mut self.deriv[l]);
        }
        for l in 0..self.dim {
            self.build_tensor(Some(l));
            out[l] = s.scale() * dot(&s.weights, &self.tensor);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unconstrained parameterization of feasible weights used by the sieve
/// estimator: `w = IPF(exp(phi))`. Adding main effects to `phi` leaves `w`
/// unchanged, so `phi` is pinned to zero at every multi-index with at most
/// one nonzero coordinate and only the remaining entries are free.
#[derive(Debug, Clone)]
pub struct LogLinearMap {
    order: usize,
    dim: usize,
    free: Vec<usize>,
}

impl LogLinearMap {
    pub fn new(order: usize, dim: usize) -> Result<Self> {
        check_order(order, dim)?;
        let free = (0..order.pow(dim as u32))
            .filter(|&f| {
                GridCellIndex::from_flat(f, order, dim)
                    .v
                    .iter()
                    .filter(|&&k| k != 0)
                    .count()
                    >= 2
            })
            .collect::<Vec<_>>();
        debug_assert_eq!(free.len(), free_parameter_count(order, dim));
        Ok(LogLinearMap { order, dim, free })
    }

    pub fn n_free(&self) -> usize {
        self.free.len()
    }

    pub fn weights(&self, phi: &[f64]) -> Result<SieveCopula> {
        let mut r = Vec::new();
        self.weights_warm(phi, &mut r)
    }

    /// As [`LogLinearMap::weights`], starting the main-effect solve from `r`
    /// (ignored unless it has the right length) and leaving the solution
    /// there for the next call.
    pub(crate) fn weights_warm(&self, phi: &[f64], r: &mut Vec<f64>) -> Result<SieveCopula> {
        let mut log_w = vec![0.0; self.order.pow(self.dim as u32)];
        for (&f, &p) in self.free.iter().zip(phi) {
            log_w[f] = p;
        }
        if log_w.iter().any(|x| !x.is_finite()) {
            return Err(Error::domain("non-finite sieve parameters"));
        }
        let weights = self.solve_main_effects(&log_w, r).inspect_err(|_| r.clear())?;
        Ok(SieveCopula {
            order: self.order,
            dim: self.dim,
            weights,
        })
    }

    /// Find main effects `r` with `w = exp(log_w + sum_l r_l(v_l))` meeting
    /// the slice constraints. This is the fixed point proportional fitting
    /// converges to, computed by damped Newton steps on the convex dual
    /// `sum_v w_v - (1/J) sum_{l,k} r_l(k)`. A usable `r` from a previous
    /// call is tried first; from cold, inputs with a wide spread are solved
    /// along the path `s * log_w`, doubling `s` up to 1.
    fn solve_main_effects(&self, log_w: &[f64], r: &mut Vec<f64>) -> Result<Vec<f64>> {
        let n = self.dim * self.order;
        if r.len() == n {
            if let Ok(w) = self.newton_scaling(log_w, r, COLD_SCALING_STEPS) {
                return Ok(w);
            }
        }
        let strides = self.strides();
        r.clear();
        r.resize(n, 0.0);
        for _ in 0..2 {
            log_domain_sweep(log_w, r, self.order, self.dim, &strides);
        }
        if let Ok(w) = self.newton_scaling(log_w, r, COLD_SCALING_STEPS) {
            return Ok(w);
        }
        let spread = log_w.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let mut stages = 0;
        while spread * 0.5f64.powi(stages) > 4.0 {
            stages += 1;
        }
        r.iter_mut().for_each(|x| *x = 0.0);
        let mut scaled = vec![0.0; log_w.len()];
        let mut last = Err(Error::NonConvergence {
            iterations: MAX_SCALING_STEPS,
            context: "sieve weight scaling".into(),
        });
        for k in (0..=stages).rev() {
            let s = 0.5f64.powi(k);
            for (z, &x) in scaled.iter_mut().zip(log_w) {
                *z = s * x;
            }
            if k < stages {
                r.iter_mut().for_each(|x| *x *= 2.0);
            }
            log_domain_sweep(&scaled, r, self.order, self.dim, &strides);
            last = self.newton_scaling(&scaled, r, MAX_SCALING_STEPS);
            if last.is_err() {
                break;
            }
        }
        last
    }

    fn newton_scaling(&self, log_w: &[f64], r: &mut [f64], max_steps: usize) -> Result<Vec<f64>> {
        let order = self.order;
        let dim = self.dim;
        let target = 1.0 / order as f64;
        let strides = self.strides();
        let eval = |r: &[f64], w: &mut Vec<f64>| -> f64 {
            w.clear();
            let mut mass = 0.0;
            for (flat, &x) in log_w.iter().enumerate() {
                let e: f64 = (0..dim).map(|l| r[l * order + (flat / strides[l]) % order]).sum();
                let v = (x + e).exp();
                mass += v;
                w.push(v);
            }
            mass - target * r.iter().sum::<f64>()
        };
        let mut w = Vec::with_capacity(log_w.len());
        let mut f = eval(r, &mut w);
        let mut trial = Vec::with_capacity(log_w.len());
        let mut err = f64::INFINITY;
        let mut rt = r.to_vec();
        for _ in 0..max_steps {
            if !f.is_finite() {
                break;
            }
            let mut grad = vec![0.0; dim * order];
            for l in 0..dim {
                for (k, s) in slice_sums(&w, order, dim, l).into_iter().enumerate() {
                    grad[l * order + k] = s - target;
                }
            }
            err = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
            if err < 1e-14 {
                return Ok(w);
            }
            let (gram, keep) = self.main_effect_gram(&w);
            let rhs = DVector::from_iterator(keep.len(), keep.iter().map(|&a| -grad[a]));
            let step = solve_spd(gram, rhs);
            let slope: f64 = keep.iter().zip(step.iter()).map(|(&a, s)| grad[a] * s).sum();
            let mut t = 1.0;
            let mut accepted = false;
            while slope < 0.0 && t > 1e-4 {
                rt.copy_from_slice(r);
                for (&a, s) in keep.iter().zip(step.iter()) {
                    rt[a] += t * s;
                }
                let ft = eval(&rt, &mut trial);
                // near the solution the decrease in f drops below rounding,
                // so a halved constraint error also accepts the step
                let armijo = ft <= f + 1e-4 * t * slope;
                if ft.is_finite() && (armijo || max_slice_error(&trial, order, dim) < 0.5 * err) {
                    r.copy_from_slice(&rt);
                    f = ft;
                    std::mem::swap(&mut w, &mut trial);
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                // one proportional-fitting sweep: exact minimization of the
                // dual over each axis in turn
                log_domain_sweep(log_w, r, order, dim, &strides);
                f = eval(r, &mut w);
            }
        }
        if f.is_finite() && err < 1e-11 {
            return Ok(w);
        }
        Err(Error::NonConvergence {
            iterations: max_steps,
            context: "sieve weight scaling".into(),
        })
    }

    fn strides(&self) -> Vec<usize> {
        (0..self.dim)
            .map(|l| self.order.pow((self.dim - 1 - l) as u32))
            .collect()
    }

    /// `w`-weighted Gram matrix of main-effect indicators. Level 0 of every
    /// axis after the first is dropped, which removes the constant
    /// ambiguity; returns the matrix and the kept unknowns.
    fn main_effect_gram(&self, w: &[f64]) -> (DMatrix<f64>, Vec<usize>) {
        let order = self.order;
        let dim = self.dim;
        let n = dim * order;
        let strides = self.strides();
        let mut gram = DMatrix::<f64>::zeros(n, n);
        let mut idx = vec![0usize; dim];
        for (flat, &wv) in w.iter().enumerate() {
            for l in 0..dim {
                idx[l] = l * order + (flat / strides[l]) % order;
            }
            for a in 0..dim {
                for b in 0..dim {
                    gram[(idx[a], idx[b])] += wv;
                }
            }
        }
        let keep: Vec<usize> = (0..n).filter(|&i| i < order || i % order != 0).collect();
        let reduced = DMatrix::from_fn(keep.len(), keep.len(), |i, j| gram[(keep[i], keep[j])]);
        (reduced, keep)
    }

    /// Free parameters reproducing strictly positive feasible weights.
    pub fn phi_from_weights(&self, s: &SieveCopula) -> Result<Vec<f64>> {
        if s.weights.iter().any(|&w| w <= 0.0) {
            return Err(Error::Infeasible("log-linear map needs positive weights".into()));
        }
        let log_w: Vec<f64> = s.weights.iter().map(|w| w.ln()).collect();
        // subtract the main effects that make log_w vanish on the pinned cells
        let order = self.order;
        let dim = self.dim;
        let corner = log_w[0];
        let mut main = vec![vec![0.0; order]; dim];
        for (l, m) in main.iter_mut().enumerate() {
            let stride = order.pow((dim - 1 - l) as u32);
            for (k, mk) in m.iter_mut().enumerate() {
                *mk = log_w[k * stride] - corner;
            }
        }
        Ok(self
            .free
            .iter()
            .map(|&f| {
                let v = GridCellIndex::from_flat(f, order, dim).v;
                log_w[f] - corner - v.iter().enumerate().map(|(l, &k)| main[l][k]).sum::<f64>()
            })
            .collect())
    }

    /// Chain rule from `dL/dw` to `dL/dphi`: `w * (G - P G)` where `P` is the
    /// `w`-weighted least-squares projection onto sums of main effects.
    pub fn pullback(&self, s: &SieveCopula, grad_w: &[f64]) -> Vec<f64> {
        let order = self.order;
        let dim = self.dim;
        let w = &s.weights;
        let strides = self.strides();
        let mut rhs = vec![0.0; dim * order];
        for (flat, (&wv, &g)) in w.iter().zip(grad_w).enumerate() {
            for l in 0..dim {
                rhs[l * order + (flat / strides[l]) % order] += wv * g;
            }
        }
        let (gram, keep) = self.main_effect_gram(w);
        let coef = solve_spd(gram, DVector::from_iterator(keep.len(), keep.iter().map(|&a| rhs[a])));
        let mut main = vec![0.0; dim * order];
        for (&a, c) in keep.iter().zip(coef.iter()) {
            main[a] = *c;
        }
        self.free
            .iter()
            .map(|&f| {
                let proj: f64 = (0..dim).map(|l| main[l * order + (f / strides[l]) % order]).sum();
                w[f] * (grad_w[f] - proj)
            })
            .collect()
    }
}

/// Proportional-fitting sweep on the main effects `r`, computed with
/// log-sum-exp over each slice.
fn log_domain_sweep(log_w: &[f64], r: &mut [f64], order: usize, dim: usize, strides: &[usize]) {
    let ln_target = -(order as f64).ln();
    let mut z = vec![0.0; log_w.len()];
    for axis in 0..dim {
        for (flat, (zv, &x)) in z.iter_mut().zip(log_w).enumerate() {
            *zv = x + (0..dim).map(|l| r[l * order + (flat / strides[l]) % order]).sum::<f64>();
        }
        let mut top = vec![f64::NEG_INFINITY; order];
        for (flat, &zv) in z.iter().enumerate() {
            let k = (flat / strides[axis]) % order;
            top[k] = top[k].max(zv);
        }
        let mut acc = vec![0.0; order];
        for (flat, &zv) in z.iter().enumerate() {
            let k = (flat / strides[axis]) % order;
            acc[k] += (zv - top[k]).exp();
        }
        for k in 0..order {
            r[axis * order + k] += ln_target - (top[k] + acc[k].ln());
        }
    }
}

fn solve_spd(a: DMatrix<f64>, b: DVector<f64>) -> DVector<f64> {
    let k = b.len();
    match a.clone().cholesky() {
        Some(ch) => ch.solve(&b),
        None => a
            .svd(true, true)
            .solve(&b, 1e-14)
            .unwrap_or_else(|_| DVector::zeros(k)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::numerical_gradient;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_feasible(order: usize, dim: usize, seed: u64) -> SieveCopula {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..order.pow(dim as u32)).map(|_| rng.random::<f64>().powi(3)).collect();
        SieveCopula::project_feasible(order, dim, &raw).unwrap()
    }

    #[test]
    fn hand_computed_two_by_two() {
        let s = SieveCopula::new(2, 2, vec![0.5, 0.0, 0.0, 0.5]).unwrap();
        assert!((s.density(&[0.0, 0.0]).unwrap() - 2.0).abs() < 1e-15);
        assert!(s.density(&[1.0, 0.0]).unwrap().abs() < 1e-15);
        assert!((s.density(&[0.5, 0.5]).unwrap() - 1.0).abs() < 1e-15);
        let g = s.dlogdensity_du(&[0.5, 0.5]).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15));
        // 2((1-a)(1-b) + ab)
        let (a, b) = (0.3, 0.8);
        let exact = 2.0 * ((1.0 - a) * (1.0 - b) + a * b);
        assert!((s.density(&[a, b]).unwrap() - exact).abs() < 1e-14);
    }

    #[test]
    fn degenerate_and_uniform() {
        let one = SieveCopula::new(1, 2, vec![1.0]).unwrap();
        assert_eq!(one.density(&[0.2, 0.9]).unwrap(), 1.0);
        for order in [2, 5, 12, 30] {
            let s = SieveCopula::uniform(order, 2).unwrap();
            assert!((s.density(&[0.13, 0.77]).unwrap() - 1.0).abs() < 1e-12);
            assert!(s.dlogdensity_du(&[0.13, 0.77]).unwrap().iter().all(|v| v.abs() < 1e-10));
        }
    }

    #[test]
    fn partition_of_unity() {
        for n in [0, 1, 5, 20, 21, 63] {
            let mut b = vec![0.0; n + 1];
            for &x in &[0.0, 1e-9, 0.3, 0.999, 1.0] {
                bernstein_basis(n, x, &mut b);
                assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12, "n={n} x={x}");
            }
        }
    }

    #[test]
    fn basis_matches_binomial_form_across_branches() {
        let x: f64 = 0.37;
        let mut b = vec![0.0; 21];
        bernstein_basis(20, x, &mut b);
        let mut binom = 1.0;
        for k in 0..=20 {
            if k > 0 {
                binom *= (21 - k) as f64 / k as f64;
            }
            let direct = binom * x.powi(k as i32) * (1.0 - x).powi(20 - k as i32);
            assert!((b[k] - direct).abs() < 1e-14);
        }
    }

    #[test]
    fn projection_with_nearly_empty_diagonal() {
        // scaling preserves the cross ratio, so the limit has
        // delta / (1/2 - delta) = sqrt(ad / bc)
        let raw = [2.8e-6, 0.75, 0.52, 8.6e-5];
        let total: f64 = raw.iter().sum();
        let [a, b, c, d] = raw.map(|x| (x / total).max(WEIGHT_FLOOR));
        let q = (a * d / (b * c)).sqrt();
        let delta = 0.5 * q / (1.0 + q);
        let w = SieveCopula::project_feasible(2, 2, &raw).unwrap().weights().to_vec();
        for (x, want) in w.iter().zip([delta, 0.5 - delta, 0.5 - delta, delta]) {
            assert!((x - want).abs() < 1e-14, "{w:?}");
        }
    }

    #[test]
    fn ipf_example() {
        let s = SieveCopula::project_feasible(2, 2, &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let eps = WEIGHT_FLOOR;
        let delta = 0.5 * eps / (0.5 + eps);
        let w = s.weights();
        assert!((w[1] - delta).abs() < 1e-15 && (w[2] - delta).abs() < 1e-15);
        assert!((w[0] + w[1] - 0.5).abs() < 1e-10);
        let again = SieveCopula::project_feasible(2, 2, w).unwrap();
        assert_eq!(again.weights(), w);
    }

    #[test]
    fn empirical_init_cells() {
        // one point per cell center
        let j = 4;
        let mut rows = Vec::new();
        for a in 0..j {
            for b in 0..j {
                rows.push(vec![(a as f64 + 0.5) / j as f64, (b as f64 + 0.5) / j as f64]);
            }
        }
        let s = SieveCopula::empirical_init(&DataMatrix::from_rows(&rows).unwrap(), j).unwrap();
        assert!(s.weights().iter().all(|w| (w - 1.0 / 16.0).abs() < 1e-15));
        // boundaries: interior edge to the lower cell, 0 and 1 to the end cells
        let d = DataMatrix::from_rows(&[vec![0.25, 1.0], vec![0.0, 0.5]]).unwrap();
        let h = SieveCopula::histogram(&d, 4).unwrap();
        assert_eq!(h[3], 0.5); // (0, 3)
        assert_eq!(h[1], 0.5); // (0, 1)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (order, dim, seed) in [(3, 2, 1), (9, 2, 2), (25, 2, 3), (4, 3, 4)] {
            let s = random_feasible(order, dim, seed);
            let u: Vec<f64> = (0..dim).map(|l| 0.2 + 0.25 * l as f64).collect();
            let g = s.dlogdensity_du(&u).unwrap();
            let fd = numerical_gradient(|x| s.log_density(x).unwrap(), &u, 1e-6);
            for (a, b) in g.iter().zip(&fd) {
                assert!((a - b).abs() < 1e-6 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn scaling_handles_wide_banded_input() {
        let map = LogLinearMap::new(9, 2).unwrap();
        let phi: Vec<f64> = map
            .free
            .iter()
            .map(|&f| {
                let v = GridCellIndex::from_flat(f, 9, 2).v;
                let off = (v[0] + v[1]) as i64 - 8;
                if off.abs() <= 1 {
                    600.0 - 40.0 * off as f64
                } else {
                    -450.0 + 7.0 * (v[0] as f64)
                }
            })
            .collect();
        let s = map.weights(&phi).unwrap();
        assert!(max_slice_error(s.weights(), 9, 2) < 1e-11);
        let mut r = Vec::new();
        let warm = map.weights_warm(&phi, &mut r).unwrap();
        let again = map.weights_warm(&phi, &mut r).unwrap();
        for (a, b) in warm.weights().iter().zip(again.weights()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn log_linear_roundtrip_and_pullback() {
        for (order, dim) in [(3, 2), (5, 2), (3, 3)] {
            let map = LogLinearMap::new(order, dim).unwrap();
            assert_eq!(map.n_free(), free_parameter_count(order, dim));
            let s = random_feasible(order, dim, 11);
            let phi = map.phi_from_weights(&s).unwrap();
            let back = map.weights(&phi).unwrap();
            for (a, b) in s.weights().iter().zip(back.weights()) {
                assert!((a - b).abs() < 1e-12);
            }
            // linear functional L(w) = sum g_v w_v
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let g: Vec<f64> = (0..s.weights().len()).map(|_| rng.random::<f64>() - 0.5).collect();
            let analytic = map.pullback(&back, &g);
            let fd = numerical_gradient(
                |p| dot(map.weights(p).unwrap().weights(), &g),
                &phi,
                1e-6,
            );
            for (a, b) in analytic.iter().zip(&fd) {
                assert!((a - b).abs() < 1e-8, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn csv_roundtrip() {
        let s = random_feasible(3, 2, 8);
        let mut buf = Vec::new();
        s.to_csv(&mut buf).unwrap();
        let back = SieveCopula::from_csv(buf.as_slice()).unwrap();
        assert_eq!(back, s);
        assert!(SieveCopula::from_csv("v1,v2,omega\n0,0,1\n".as_bytes()).is_ok());
        assert!(SieveCopula::from_csv("v1,v2,omega\n0,0,1\n0,1,0\n".as_bytes()).is_err());
        assert!(SieveCopula::from_csv("v1,v2,omega\n0,0,0.5\n0,0,0.5\n1,0,0\n1,1,0\n".as_bytes()).is_err());
    }

    #[test]
    fn free_parameter_counts() {
        assert_eq!(free_parameter_count(2, 2), 1);
        assert_eq!(free_parameter_count(3, 2), 4);
        assert_eq!(free_parameter_count(1, 3), 0);
        assert_eq!(free_parameter_count(5, 3), 125 - 13);
    }
}
