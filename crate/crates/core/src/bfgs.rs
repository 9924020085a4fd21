//! Dense BFGS with a strong Wolfe line search.
//!
//! The objective is a closure `f(x, grad) -> value` that writes the gradient
//! at `x` into `grad`. The inverse Hessian approximation starts at the
//! identity and is rescaled by `s'y / y'y` before the first update.
//! Updates that would break positive definiteness (`s'y` not sufficiently
//! positive) are skipped. On a line-search failure the inverse Hessian is
//! reset once; a second consecutive failure ends the run with the best point
//! seen so far.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BfgsOptions {
    /// Stop when the sup-norm of the gradient falls to this.
    pub grad_tol: f64,
    pub max_iters: usize,
    pub wolfe_c1: f64,
    pub wolfe_c2: f64,
    /// Objective evaluations allowed per line search.
    pub max_line_search_steps: usize,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            grad_tol: 1e-6,
            max_iters: 500,
            wolfe_c1: 1e-4,
            wolfe_c2: 0.9,
            max_line_search_steps: 50,
        }
    }
}

impl BfgsOptions {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.wolfe_c1 && self.wolfe_c1 < self.wolfe_c2 && self.wolfe_c2 < 1.0) {
            return Err(Error::config(format!(
                "Wolfe constants need 0 < c1 < c2 < 1 (got {}, {})",
                self.wolfe_c1, self.wolfe_c2
            )));
        }
        if !(self.grad_tol > 0.0) || self.max_line_search_steps == 0 {
            return Err(Error::config("gradient tolerance and line-search budget must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    GradTol,
    MaxIters,
    LineSearchFail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BfgsResult {
    pub x_star: Vec<f64>,
    pub f_star: f64,
    /// Sup-norm of the gradient at `x_star`.
    pub grad_norm: f64,
    /// Accepted steps.
    pub iters: usize,
    pub converged: bool,
    pub termination: Termination,
    pub n_evals: usize,
    /// Objective value at the start and after every accepted step.
    pub trace: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// One evaluated trial point along the search direction.
#[derive(Clone, Copy)]
struct Trial {
    alpha: f64,
    phi: f64,
    dphi: f64,
}

struct LineSearch<'a, F> {
    f: &'a mut F,
    x: &'a [f64],
    d: &'a [f64],
    x_trial: Vec<f64>,
    g_trial: Vec<f64>,
    evals: usize,
    budget: usize,
    /// Lowest sufficiently-decreasing trial seen, as a fallback.
    best: Option<(f64, f64)>,
}

impl<F: FnMut(&[f64], &mut [f64]) -> f64> LineSearch<'_, F> {
    fn eval(&mut self, alpha: f64) -> Trial {
        for ((xt, x), d) in self.x_trial.iter_mut().zip(self.x).zip(self.d) {
            *xt = x + alpha * d;
        }
        self.evals += 1;
        let phi = (self.f)(&self.x_trial, &mut self.g_trial);
        let dphi = dot(&self.g_trial, self.d);
        if !phi.is_finite() || !dphi.is_finite() || !all_finite(&self.g_trial) {
            return Trial { alpha, phi: f64::INFINITY, dphi: f64::NAN };
        }
        Trial { alpha, phi, dphi }
    }

    fn note(&mut self, t: Trial, phi0: f64, dphi0: f64, c1: f64) {
        if t.phi <= phi0 + c1 * t.alpha * dphi0 && t.phi < phi0 && self.best.is_none_or(|(_, p)| t.phi < p) {
            self.best = Some((t.alpha, t.phi));
        }
    }
}

/// Minimizer of the cubic matching values and slopes at `a` and `b`,
/// kept at least a tenth of the interval away from either end.
fn cubic_step(a: Trial, b: Trial) -> f64 {
    let (lo, hi) = if a.alpha < b.alpha { (a.alpha, b.alpha) } else { (b.alpha, a.alpha) };
    let width = hi - lo;
    let mid = 0.5 * (lo + hi);
    if !b.phi.is_finite() || !b.dphi.is_finite() {
        // no usable information at b: shrink toward a
        return a.alpha + 0.25 * (b.alpha - a.alpha);
    }
    let d1 = a.dphi + b.dphi - 3.0 * (a.phi - b.phi) / (a.alpha - b.alpha);
    let disc = d1 * d1 - a.dphi * b.dphi;
    if !(disc >= 0.0) {
        return mid;
    }
    let d2 = (b.alpha - a.alpha).signum() * disc.sqrt();
    let denom = b.dphi - a.dphi + 2.0 * d2;
    if denom == 0.0 {
        return mid;
    }
    let t = b.alpha - (b.alpha - a.alpha) * (b.dphi + d2 - d1) / denom;
    if !t.is_finite() {
        return mid;
    }
    t.clamp(lo + 0.1 * width, hi - 0.1 * width)
}

/// Strong Wolfe search along `d` from `x` (slope `dphi0 < 0`). On success the
/// accepted point and its gradient are left in `ls.x_trial` / `ls.g_trial`.
fn strong_wolfe<F: FnMut(&[f64], &mut [f64]) -> f64>(
    ls: &mut LineSearch<'_, F>,
    phi0: f64,
    dphi0: f64,
    opts: &BfgsOptions,
) -> Option<Trial> {
    let (c1, c2) = (opts.wolfe_c1, opts.wolfe_c2);
    let curvature = |t: &Trial| t.dphi.abs() <= -c2 * dphi0;
    // Near a minimizer the decrease drops below the rounding error of phi,
    // which for sums of many terms is well above one ulp. Values within
    // `rounding` of each other are compared by slope only, and a point with
    // a flat enough slope is accepted if it is no worse than phi0 up to
    // `rounding`. The cap keeps accepted steps within 1e-12 of descent.
    let rounding = (1e3 * f64::EPSILON * phi0.abs()).min(1e-12);
    let admissible = |t: &Trial| t.phi <= phi0 + c1 * t.alpha * dphi0 || t.phi <= phi0 + rounding;

    let mut prev = Trial { alpha: 0.0, phi: phi0, dphi: dphi0 };
    let mut alpha = 1.0;
    let (mut lo, mut hi);
    let mut first = true;
    loop {
        if ls.evals >= ls.budget {
            return None;
        }
        let t = ls.eval(alpha);
        ls.note(t, phi0, dphi0, c1);
        if !admissible(&t) || (!first && t.phi > prev.phi + rounding) {
            lo = prev;
            hi = t;
            break;
        }
        if curvature(&t) {
            return Some(t);
        }
        if t.dphi >= 0.0 {
            lo = t;
            hi = prev;
            break;
        }
        prev = t;
        first = false;
        alpha *= 4.0;
        if alpha > 1e20 {
            return None;
        }
    }

    // zoom: `lo` satisfies Armijo with the lowest value so far, and the
    // interval between lo and hi contains a strong Wolfe point.
    loop {
        if ls.evals >= ls.budget || (hi.alpha - lo.alpha).abs() <= 1e-16 * lo.alpha.abs().max(1e-300) {
            return None;
        }
        let t = ls.eval(cubic_step(lo, hi));
        ls.note(t, phi0, dphi0, c1);
        if !admissible(&t) || t.phi > lo.phi + rounding || (t.phi >= lo.phi - rounding && t.dphi * (hi.alpha - lo.alpha) >= 0.0 && !curvature(&t)) {
            hi = t;
        } else {
            if curvature(&t) {
                return Some(t);
            }
            if t.dphi * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = t;
        }
    }
}

/// Minimizes `f` from `x0`.
pub fn bfgs_minimize<F>(mut f: F, x0: &[f64], opts: &BfgsOptions) -> Result<BfgsResult>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    opts.validate()?;
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    let mut n_evals = 1;
    if !fx.is_finite() || !all_finite(&g) {
        return Err(Error::Optimizer(format!("objective is not finite at the starting point (value {fx})")));
    }

    let identity = |h: &mut Vec<f64>| {
        h.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n {
            h[i * n + i] = 1.0;
        }
    };
    let mut h = vec![0.0; n * n];
    identity(&mut h);
    let mut fresh = true;
    let mut trace = vec![fx];
    let mut d = vec![0.0; n];
    let mut hy = vec![0.0; n];
    let mut iters = 0;
    let mut termination = Termination::MaxIters;

    while iters < opts.max_iters {
        if sup_norm(&g) <= opts.grad_tol {
            termination = Termination::GradTol;
            break;
        }
        for i in 0..n {
            d[i] = -dot(&h[i * n..(i + 1) * n], &g);
        }
        let mut dphi0 = dot(&d, &g);
        if !(dphi0 < 0.0) {
            identity(&mut h);
            fresh = true;
            d.iter_mut().zip(&g).for_each(|(di, gi)| *di = -gi);
            dphi0 = dot(&d, &g);
        }

        let mut ls = LineSearch {
            f: &mut f,
            x: &x,
            d: &d,
            x_trial: vec![0.0; n],
            g_trial: vec![0.0; n],
            evals: 0,
            budget: opts.max_line_search_steps,
            best: None,
        };
        let accepted = strong_wolfe(&mut ls, fx, dphi0, opts);
        n_evals += ls.evals;
        let Some(step) = accepted else {
            let fallback = ls.best;
            if !fresh {
                // retry once along steepest descent
                identity(&mut h);
                fresh = true;
                continue;
            }
            if let Some((alpha, phi)) = fallback {
                // keep the best decreasing point of the failed search
                x.iter_mut().zip(&d).for_each(|(xi, di)| *xi += alpha * di);
                fx = phi;
                f(&x, &mut g);
                n_evals += 1;
                iters += 1;
                trace.push(fx);
            }
            termination = Termination::LineSearchFail;
            break;
        };
        let x_new = ls.x_trial;
        let g_new = ls.g_trial;

        let s: Vec<f64> = d.iter().map(|di| step.alpha * di).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        x = x_new;
        g = g_new;
        fx = step.phi;
        iters += 1;
        trace.push(fx);

        let sy = dot(&s, &y);
        let yy = dot(&y, &y);
        if sy > 1e-10 * dot(&s, &s).sqrt() * yy.sqrt() {
            if fresh {
                let scale = sy / yy;
                h.iter_mut().for_each(|v| *v *= scale);
                fresh = false;
            }
            for i in 0..n {
                hy[i] = dot(&h[i * n..(i + 1) * n], &y);
            }
            let rho = 1.0 / sy;
            let coef = rho * rho * dot(&y, &hy) + rho;
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] += coef * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
                }
            }
        }
    }
    if sup_norm(&g) <= opts.grad_tol {
        termination = Termination::GradTol;
    }

    Ok(BfgsResult {
        grad_norm: sup_norm(&g),
        x_star: x,
        f_star: fx,
        iters,
        converged: termination == Termination::GradTol,
        termination,
        n_evals,
        trace,
    })
}
