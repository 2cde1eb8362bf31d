//! Limited-memory BFGS with a strong-Wolfe line search (bracketing phase
//! followed by a cubic-interpolation zoom).
//!
//! The minimizer is driven one iteration at a time so that callers can
//! interleave their own checks, such as validation-based early stopping.

use std::collections::VecDeque;

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsConfig {
    pub memory: usize,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    pub max_line_search_evals: usize,
    pub tolerance_grad: f64,
    pub tolerance_change: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self { memory: 10, c1: 1e-4, c2: 0.9, max_line_search_evals: 25, tolerance_grad: 1e-12, tolerance_change: 1e-16 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Progress,
    /// Gradient or change below tolerance; further iterations are pointless.
    Converged,
    /// No decrease could be found along the search direction.
    Failed,
}

pub struct Lbfgs {
    cfg: LbfgsConfig,
    s_hist: VecDeque<Vec<f64>>,
    y_hist: VecDeque<Vec<f64>>,
    rho_hist: VecDeque<f64>,
    iterations: usize,
    pub function_evals: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Minimiser of the cubic interpolating `(x1, f1, g1)` and `(x2, f2, g2)`,
/// clamped to `bounds`; falls back to the midpoint when the cubic has no
/// real minimiser.
fn cubic_interpolate(x1: f64, f1: f64, g1: f64, x2: f64, f2: f64, g2: f64, bounds: (f64, f64)) -> f64 {
    let (lo, hi) = if bounds.0 <= bounds.1 { bounds } else { (bounds.1, bounds.0) };
    let d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2);
    let d2_sq = d1 * d1 - g1 * g2;
    if d2_sq >= 0.0 {
        let d2 = d2_sq.sqrt();
        let t = if x1 <= x2 {
            x2 - (x2 - x1) * ((g2 + d2 - d1) / (g2 - g1 + 2.0 * d2))
        } else {
            x1 - (x1 - x2) * ((g1 + d2 - d1) / (g1 - g2 + 2.0 * d2))
        };
        if t.is_finite() {
            return t.clamp(lo, hi);
        }
    }
    0.5 * (lo + hi)
}

struct Point {
    t: f64,
    f: f64,
    g: Vec<f64>,
    dphi: f64,
}

impl Lbfgs {
    pub fn new(cfg: LbfgsConfig) -> Self {
        Self {
            cfg,
            s_hist: VecDeque::new(),
            y_hist: VecDeque::new(),
            rho_hist: VecDeque::new(),
            iterations: 0,
            function_evals: 0,
        }
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    fn reset(&mut self) {
        self.s_hist.clear();
        self.y_hist.clear();
        self.rho_hist.clear();
    }

    /// Two-loop recursion: `-H g`.
    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q: Vec<f64> = g.iter().map(|v| -v).collect();
        let m = self.s_hist.len();
        let mut alpha = vec![0.0; m];
        for i in (0..m).rev() {
            alpha[i] = self.rho_hist[i] * dot(&self.s_hist[i], &q);
            for (qv, yv) in q.iter_mut().zip(&self.y_hist[i]) {
                *qv -= alpha[i] * yv;
            }
        }
        if m > 0 {
            let (s, y) = (&self.s_hist[m - 1], &self.y_hist[m - 1]);
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for i in 0..m {
            let beta = self.rho_hist[i] * dot(&self.y_hist[i], &q);
            for (qv, sv) in q.iter_mut().zip(&self.s_hist[i]) {
                *qv += (alpha[i] - beta) * sv;
            }
        }
        q
    }

    /// One quasi-Newton iteration. `x`, `f` and `g` hold the current point and
    /// are updated in place; `fun(x, g)` returns `f(x)` and writes `∇f(x)`.
    pub fn step<F>(&mut self, x: &mut [f64], f: &mut f64, g: &mut [f64], fun: &mut F) -> StepOutcome
    where
        F: FnMut(&[f64], &mut [f64]) -> f64,
    {
        if max_abs(g) <= self.cfg.tolerance_grad {
            return StepOutcome::Converged;
        }
        let mut d = self.direction(g);
        let mut dphi0 = dot(g, &d);
        if !(dphi0 < 0.0) {
            self.reset();
            d = g.iter().map(|v| -v).collect();
            dphi0 = dot(g, &d);
        }
        let t0 = if self.s_hist.is_empty() {
            (1.0 / g.iter().map(|v| v.abs()).sum::<f64>()).min(1.0)
        } else {
            1.0
        };

        let found = self.strong_wolfe(x, *f, dphi0, &d, t0, fun);
        let Some(p) = found else {
            if !self.s_hist.is_empty() {
                // Retry once along steepest descent with a fresh memory.
                self.reset();
                return self.step(x, f, g, fun);
            }
            return StepOutcome::Failed;
        };

        let s: Vec<f64> = d.iter().map(|v| v * p.t).collect();
        let y: Vec<f64> = p.g.iter().zip(g.iter()).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * dot(&y, &y).max(f64::MIN_POSITIVE) {
            if self.s_hist.len() == self.cfg.memory {
                self.s_hist.pop_front();
                self.y_hist.pop_front();
                self.rho_hist.pop_front();
            }
            self.s_hist.push_back(s.clone());
            self.y_hist.push_back(y);
            self.rho_hist.push_back(1.0 / sy);
        }
        for (xv, sv) in x.iter_mut().zip(&s) {
            *xv += sv;
        }
        let change = *f - p.f;
        *f = p.f;
        g.copy_from_slice(&p.g);
        self.iterations += 1;
        if change.abs() <= self.cfg.tolerance_change || max_abs(&s) <= self.cfg.tolerance_change {
            return StepOutcome::Converged;
        }
        StepOutcome::Progress
    }

    fn evaluate<F>(&mut self, x: &[f64], d: &[f64], t: f64, fun: &mut F) -> Point
    where
        F: FnMut(&[f64], &mut [f64]) -> f64,
    {
        let xt: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + t * b).collect();
        let mut g = vec![0.0; x.len()];
        let f = fun(&xt, &mut g);
        self.function_evals += 1;
        let dphi = dot(&g, d);
        Point { t, f, g, dphi }
    }

    /// Step satisfying the strong Wolfe conditions, or failing that the best
    /// sufficiently decreasing point seen. `None` when nothing decreased.
    fn strong_wolfe<F>(&mut self, x: &[f64], f0: f64, dphi0: f64, d: &[f64], t_init: f64, fun: &mut F) -> Option<Point>
    where
        F: FnMut(&[f64], &mut [f64]) -> f64,
    {
        let (c1, c2) = (self.cfg.c1, self.cfg.c2);
        let max_evals = self.cfg.max_line_search_evals;
        let d_norm = max_abs(d);
        let armijo = |p: &Point| p.f.is_finite() && p.f <= f0 + c1 * p.t * dphi0;
        let curvature = |p: &Point| p.dphi.abs() <= -c2 * dphi0;

        let mut best: Option<Point> = None;
        let remember = |best: &mut Option<Point>, p: &Point| {
            if p.f.is_finite() && p.f < f0 && best.as_ref().is_none_or(|b| p.f < b.f) {
                *best = Some(Point { t: p.t, f: p.f, g: p.g.clone(), dphi: p.dphi });
            }
        };

        let mut prev = Point { t: 0.0, f: f0, g: Vec::new(), dphi: dphi0 };
        let mut t = t_init;
        let mut evals = 0;
        let (mut lo, mut hi);
        loop {
            let p = self.evaluate(x, d, t, fun);
            evals += 1;
            remember(&mut best, &p);
            if !armijo(&p) || (evals > 1 && p.f >= prev.f) {
                lo = prev;
                hi = p;
                break;
            }
            if curvature(&p) {
                return Some(p);
            }
            if p.dphi >= 0.0 {
                lo = p;
                hi = prev;
                break;
            }
            if evals >= max_evals {
                return best;
            }
            let min_step = p.t + 0.01 * (p.t - prev.t);
            let max_step = p.t * 10.0;
            let next = cubic_interpolate(prev.t, prev.f, prev.dphi, p.t, p.f, p.dphi, (min_step, max_step));
            prev = p;
            t = next;
        }

        // Zoom: `lo` satisfies Armijo and has the lowest value in the bracket.
        while evals < max_evals {
            let width = (hi.t - lo.t).abs();
            if width * d_norm < self.cfg.tolerance_change {
                break;
            }
            let (a, b) = (lo.t.min(hi.t), lo.t.max(hi.t));
            let mut t = if hi.f.is_finite() {
                cubic_interpolate(lo.t, lo.f, lo.dphi, hi.t, hi.f, hi.dphi, (a, b))
            } else {
                0.5 * (a + b)
            };
            // Keep the trial away from the bracket ends.
            let eps = 0.1 * (b - a);
            if (t - a).min(b - t) < eps {
                t = 0.5 * (a + b);
            }
            let p = self.evaluate(x, d, t, fun);
            evals += 1;
            remember(&mut best, &p);
            if !armijo(&p) || p.f >= lo.f {
                hi = p;
            } else {
                if curvature(&p) {
                    return Some(p);
                }
                if p.dphi * (hi.t - lo.t) >= 0.0 {
                    hi = lo;
                }
                lo = p;
            }
        }
        best
    }
}

/// Runs up to `max_iters` iterations from `x`; returns the final value.
pub fn minimize<F>(x: &mut [f64], max_iters: usize, cfg: LbfgsConfig, mut fun: F) -> (f64, StepOutcome)
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let mut g = vec![0.0; x.len()];
    let mut f = fun(x, &mut g);
    let mut opt = Lbfgs::new(cfg);
    let mut outcome = StepOutcome::Progress;
    for _ in 0..max_iters {
        outcome = opt.step(x, &mut f, &mut g, &mut fun);
        if outcome != StepOutcome::Progress {
            break;
        }
    }
    (f, outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64], g: &mut [f64]) -> f64 {
        let n = x.len();
        let mut f = 0.0;
        g.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n - 1 {
            let a = x[i + 1] - x[i] * x[i];
            let b = 1.0 - x[i];
            f += 100.0 * a * a + b * b;
            g[i] += -400.0 * x[i] * a - 2.0 * b;
            g[i + 1] += 200.0 * a;
        }
        f
    }

    #[test]
    fn minimizes_rosenbrock() {
        let mut x = vec![-1.2, 1.0, -1.2, 1.0];
        let (f, _) = minimize(&mut x, 500, LbfgsConfig::default(), rosenbrock);
        assert!(f < 1e-12, "f = {f}");
        for v in &x {
            assert!((v - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn quadratic_converges_quickly() {
        let diag = [1.0, 10.0, 100.0];
        let fun = |x: &[f64], g: &mut [f64]| {
            let mut f = 0.0;
            for i in 0..3 {
                f += 0.5 * diag[i] * x[i] * x[i];
                g[i] = diag[i] * x[i];
            }
            f
        };
        let mut x = vec![1.0, 1.0, 1.0];
        let (f, _) = minimize(&mut x, 50, LbfgsConfig::default(), fun);
        assert!(f < 1e-16);
    }

    #[test]
    fn accepted_steps_satisfy_armijo() {
        let mut x = vec![-1.2, 1.0];
        let mut g = vec![0.0; 2];
        let mut f = rosenbrock(&x, &mut g);
        let mut opt = Lbfgs::new(LbfgsConfig::default());
        for _ in 0..30 {
            let before = f;
            if opt.step(&mut x, &mut f, &mut g, &mut rosenbrock) != StepOutcome::Progress {
                break;
            }
            assert!(f < before);
        }
    }

    #[test]
    fn cubic_interpolation_recovers_quadratic_minimum() {
        // f(t) = (t - 0.3)^2 on [0, 1].
        let f = |t: f64| (t - 0.3) * (t - 0.3);
        let g = |t: f64| 2.0 * (t - 0.3);
        let t = cubic_interpolate(0.0, f(0.0), g(0.0), 1.0, f(1.0), g(1.0), (0.0, 1.0));
        assert!((t - 0.3).abs() < 1e-12);
    }
}
