//! Dense BFGS minimizer with a strong-Wolfe line search.
//!
//! The objective closure writes the gradient into its second argument and
//! returns the value. Non-finite values are treated as infeasible points and
//! the line search shrinks the step until it lands somewhere finite.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BfgsOptions {
    pub max_iters: usize,
    /// Relative objective change regarded as stationary.
    pub f_rel_tol: f64,
    /// Gradient max-norm regarded as stationary.
    pub g_abs_tol: f64,
    /// Largest change of any coordinate tried in one line search.
    pub max_step: Option<f64>,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            max_iters: 2000,
            f_rel_tol: 1e-9,
            g_abs_tol: 1e-6,
            max_step: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_max_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;
/// Gradient level below which a stalled line search still counts as converged.
const STALL_GRAD_TOL: f64 = 1e-4;
/// Consecutive flat iterations after which a small gradient counts as
/// converged (optima on the boundary of a log-linear parameterisation are
/// approached only asymptotically).
const FLAT_ITERS: usize = 20;
/// Consecutive step-capped iterations after which the inverse Hessian is
/// reset; runaway curvature in flat directions otherwise starves the rest.
const CAPPED_ITERS: usize = 10;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

struct LineEval {
    alpha: f64,
    value: f64,
    x: Vec<f64>,
    grad: Vec<f64>,
}

struct Problem<'a, F> {
    f: &'a mut F,
    evaluations: usize,
}

impl<F: FnMut(&[f64], &mut [f64]) -> f64> Problem<'_, F> {
    fn eval(&mut self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.evaluations += 1;
        let v = (self.f)(x, grad);
        if v.is_finite() && grad.iter().all(|g| g.is_finite()) {
            v
        } else {
            f64::INFINITY
        }
    }

    fn at(&mut self, x0: &[f64], dir: &[f64], alpha: f64) -> LineEval {
        let x: Vec<f64> = x0.iter().zip(dir).map(|(x, d)| x + alpha * d).collect();
        let mut grad = vec![0.0; x.len()];
        let value = self.eval(&x, &mut grad);
        LineEval {
            alpha,
            value,
            x,
            grad,
        }
    }
}

fn interpolate(lo: &LineEval, hi: &LineEval, dir: &[f64]) -> f64 {
    // quadratic through (lo.value, lo.slope) and hi.value, safeguarded
    let d_lo = dot(&lo.grad, dir);
    let span = hi.alpha - lo.alpha;
    let mut trial = f64::NAN;
    if hi.value.is_finite() {
        let denom = 2.0 * (hi.value - lo.value - d_lo * span);
        if denom.abs() > 0.0 {
            trial = lo.alpha - d_lo * span * span / denom;
        }
    }
    let a = lo.alpha.min(hi.alpha);
    let b = lo.alpha.max(hi.alpha);
    let margin = 0.1 * (b - a);
    if !trial.is_finite() || trial < a + margin || trial > b - margin {
        0.5 * (a + b)
    } else {
        trial
    }
}

fn line_search<F: FnMut(&[f64], &mut [f64]) -> f64>(
    prob: &mut Problem<'_, F>,
    x0: &[f64],
    f0: f64,
    g0: &[f64],
    dir: &[f64],
    alpha_init: f64,
    alpha_max: f64,
) -> Option<LineEval> {
    let d0 = dot(g0, dir);
    if d0 >= 0.0 {
        return None;
    }
    let origin = LineEval {
        alpha: 0.0,
        value: f0,
        x: x0.to_vec(),
        grad: g0.to_vec(),
    };
    let mut prev = origin;
    let mut alpha = alpha_init;
    let mut best_decrease: Option<LineEval> = None;
    for i in 0..40 {
        let cur = prob.at(x0, dir, alpha);
        if !cur.value.is_finite() {
            alpha = 0.5 * (prev.alpha + alpha);
            if alpha - prev.alpha < 1e-16 {
                break;
            }
            continue;
        }
        if cur.value <= f0 + C1 * cur.alpha * d0
            && best_decrease.as_ref().is_none_or(|b| cur.value < b.value)
        {
            best_decrease = Some(LineEval {
                alpha: cur.alpha,
                value: cur.value,
                x: cur.x.clone(),
                grad: cur.grad.clone(),
            });
        }
        if cur.value > f0 + C1 * cur.alpha * d0 || (i > 0 && cur.value >= prev.value) {
            return zoom(prob, x0, f0, d0, dir, prev, cur).or(best_decrease);
        }
        let dcur = dot(&cur.grad, dir);
        if dcur.abs() <= -C2 * d0 {
            return Some(cur);
        }
        if dcur >= 0.0 {
            return zoom(prob, x0, f0, d0, dir, cur, prev).or(best_decrease);
        }
        if cur.alpha >= alpha_max {
            return Some(cur);
        }
        alpha = (cur.alpha * 2.0).min(alpha_max);
        prev = cur;
    }
    best_decrease
}

fn zoom<F: FnMut(&[f64], &mut [f64]) -> f64>(
    prob: &mut Problem<'_, F>,
    x0: &[f64],
    f0: f64,
    d0: f64,
    dir: &[f64],
    mut lo: LineEval,
    mut hi: LineEval,
) -> Option<LineEval> {
    for _ in 0..40 {
        let alpha = interpolate(&lo, &hi, dir);
        if (hi.alpha - lo.alpha).abs() < 1e-16 * (1.0 + lo.alpha.abs()) {
            break;
        }
        let cur = prob.at(x0, dir, alpha);
        if !cur.value.is_finite() || cur.value > f0 + C1 * alpha * d0 || cur.value >= lo.value {
            hi = cur;
        } else {
            let dcur = dot(&cur.grad, dir);
            if dcur.abs() <= -C2 * d0 {
                return Some(cur);
            }
            if dcur * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
    }
    if lo.alpha > 0.0 && lo.value < f0 {
        Some(lo)
    } else {
        None
    }
}

/// Minimize `f` from `x0`.
pub fn minimize<F>(mut f: F, x0: &[f64], opts: &BfgsOptions) -> Minimum
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut prob = Problem {
        f: &mut f,
        evaluations: 0,
    };
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut fx = prob.eval(&x, &mut g);
    if n == 0 || !fx.is_finite() {
        return Minimum {
            grad_max_norm: if n == 0 { 0.0 } else { f64::INFINITY },
            x,
            value: fx,
            iterations: 0,
            evaluations: prob.evaluations,
            converged: n == 0 && fx.is_finite(),
        };
    }
    let mut h = identity(n);
    let mut fresh_h = true;
    let mut iterations = 0;
    let mut converged = false;
    let mut flat = 0;
    let mut capped = 0;
    while iterations < opts.max_iters {
        let gnorm = max_abs(&g);
        if gnorm < opts.g_abs_tol {
            converged = true;
            break;
        }
        let dir: Vec<f64> = (0..n)
            .map(|i| -dot(&h[i * n..(i + 1) * n], &g))
            .collect();
        let mut alpha_init = if fresh_h {
            (1.0 / max_abs(&dir).max(1e-12)).min(1.0)
        } else {
            1.0
        };
        let mut alpha_max = f64::INFINITY;
        if let Some(cap) = opts.max_step {
            alpha_max = cap / max_abs(&dir).max(1e-300);
            alpha_init = alpha_init.min(alpha_max);
        }
        let step = match line_search(&mut prob, &x, fx, &g, &dir, alpha_init, alpha_max) {
            Some(step) => step,
            None => {
                if fresh_h {
                    converged = gnorm < STALL_GRAD_TOL;
                    break;
                }
                h = identity(n);
                fresh_h = true;
                continue;
            }
        };
        iterations += 1;
        capped = if step.alpha >= alpha_max * (1.0 - 1e-12) { capped + 1 } else { 0 };
        let s: Vec<f64> = step.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = step.grad.iter().zip(&g).map(|(a, b)| a - b).collect();
        let rel_change = (fx - step.value).abs() / fx.abs().max(1.0);
        x = step.x;
        g = step.grad;
        fx = step.value;
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if fresh_h {
                let scale = sy / dot(&y, &y);
                h.iter_mut().for_each(|v| *v *= scale);
            }
            bfgs_update(&mut h, &s, &y, sy);
            fresh_h = false;
        }
        if capped >= CAPPED_ITERS {
            h = identity(n);
            fresh_h = true;
            capped = 0;
        }
        flat = if rel_change < opts.f_rel_tol { flat + 1 } else { 0 };
        let gnorm = max_abs(&g);
        if flat > 0 && gnorm < opts.g_abs_tol || flat >= FLAT_ITERS && gnorm < STALL_GRAD_TOL {
            converged = true;
            break;
        }
    }
    Minimum {
        grad_max_norm: max_abs(&g),
        x,
        value: fx,
        iterations,
        evaluations: prob.evaluations,
        converged,
    }
}

fn identity(n: usize) -> Vec<f64> {
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = 1.0;
    }
    h
}

fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| dot(&h[i * n..(i + 1) * n], y)).collect();
    let yhy = dot(y, &hy);
    let coef = rho * (1.0 + rho * yhy);
    for i in 0..n {
        let row = &mut h[i * n..(i + 1) * n];
        for j in 0..n {
            row[j] += coef * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
        }
    }
}

/// Central-difference gradient, used for parameters without analytic
/// derivatives and in tests.
pub fn numerical_gradient<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], rel_step: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = rel_step * x[i].abs().max(1.0);
            xp[i] = x[i] + h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            xp[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}
