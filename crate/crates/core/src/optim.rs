//! Adam and L-BFGS minimizers over flat parameter vectors, plus a central
//! finite-difference gradient used as a test oracle.
//!
//! Objectives are `FnMut(&[f64]) -> Result<(f64, Vec<f64>)>`. Both methods return
//! the best iterate seen, not the last one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimMethod {
    Adam,
    Lbfgs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub method: OptimMethod,
    pub learning_rate: f64,
    pub iterations: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub history: usize,
    pub c1: f64,
    pub c2: f64,
    /// L-BFGS stops once the gradient's max-norm falls below this.
    pub grad_tolerance: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            method: OptimMethod::Adam,
            learning_rate: 1e-3,
            iterations: 1000,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            history: 10,
            c1: 1e-4,
            c2: 0.9,
            grad_tolerance: 1e-10,
        }
    }
}

impl OptimConfig {
    pub fn adam(learning_rate: f64, iterations: usize) -> Self {
        OptimConfig { method: OptimMethod::Adam, learning_rate, iterations, ..Default::default() }
    }

    pub fn lbfgs(iterations: usize) -> Self {
        OptimConfig { method: OptimMethod::Lbfgs, learning_rate: 1.0, iterations, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("optimizer iterations must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return Err(Error::Config("invalid Adam moment parameters".into()));
        }
        if self.history == 0 || !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(Error::Config("invalid L-BFGS history or Wolfe constants".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    /// Objective at the starting point followed by one entry per iteration.
    pub trace: Vec<f64>,
    /// Set when L-BFGS stopped because the line search failed.
    pub degraded: bool,
}

/// Dispatches on `cfg.method`.
pub fn minimize<F>(f: F, x0: &[f64], cfg: &OptimConfig) -> Result<OptimResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    match cfg.method {
        OptimMethod::Adam => adam(f, x0, cfg),
        OptimMethod::Lbfgs => lbfgs(f, x0, cfg),
    }
}

pub fn adam<F>(f: F, x0: &[f64], cfg: &OptimConfig) -> Result<OptimResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    adam_in_box(f, x0, cfg, None)
}

/// Adam with iterates projected onto `[lower, upper]` after every step.
pub fn adam_in_box<F>(mut f: F, x0: &[f64], cfg: &OptimConfig, bounds: Option<(&[f64], &[f64])>) -> Result<OptimResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    cfg.validate()?;
    let n = x0.len();
    if let Some((lo, hi)) = bounds {
        if lo.len() != n || hi.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: lo.len().min(hi.len()) });
        }
    }
    let mut x = x0.to_vec();
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    let mut best_x = x.clone();
    let mut best = f64::INFINITY;
    let (mut b1t, mut b2t) = (1.0, 1.0);

    for t in 0..=cfg.iterations {
        let (value, grad) = f(&x)?;
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { iteration: t });
        }
        if grad.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: grad.len() });
        }
        trace.push(value);
        if value < best {
            best = value;
            best_x.copy_from_slice(&x);
        }
        if t == cfg.iterations {
            break;
        }
        b1t *= cfg.beta1;
        b2t *= cfg.beta2;
        for i in 0..n {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let mh = m[i] / (1.0 - b1t);
            let vh = v[i] / (1.0 - b2t);
            x[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
        }
        if let Some((lo, hi)) = bounds {
            for i in 0..n {
                x[i] = x[i].clamp(lo[i], hi[i]);
            }
        }
    }
    Ok(OptimResult { x: best_x, value: best, trace, degraded: false })
}

struct Point {
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Evaluates `f`, mapping errors and non-finite values to `+∞` so the line
/// search can back away from them.
fn probe<F>(f: &mut F, x: Vec<f64>) -> Point
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    match f(&x) {
        Ok((v, g)) if v.is_finite() && g.iter().all(|c| c.is_finite()) => Point { x, f: v, g },
        _ => Point { g: vec![f64::NAN; x.len()], x, f: f64::INFINITY },
    }
}

const MAX_LINE_SEARCH: usize = 30;

/// Strong-Wolfe line search (bracketing then zoom). Returns `None` on failure.
fn line_search<F>(f: &mut F, cur: &Point, dir: &[f64], alpha0: f64, cfg: &OptimConfig) -> Option<Point>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let d0 = dot(&cur.g, dir);
    if d0 >= 0.0 {
        return None;
    }
    let at = |a: f64| -> Vec<f64> { cur.x.iter().zip(dir).map(|(x, d)| x + a * d).collect() };
    let mut evals = 0;
    let mut prev_a = 0.0;
    let mut prev_f = cur.f;
    let mut prev_d = d0;
    let mut a = alpha0;
    let mut bracket = None;

    while evals < MAX_LINE_SEARCH {
        let p = probe(f, at(a));
        evals += 1;
        if !p.f.is_finite() {
            // stepped outside the finite region: shrink toward the last good point
            bracket = Some((prev_a, prev_f, prev_d, a, f64::INFINITY, f64::NAN));
            break;
        }
        let dp = dot(&p.g, dir);
        if p.f > cur.f + cfg.c1 * a * d0 || (evals > 1 && p.f >= prev_f) {
            bracket = Some((prev_a, prev_f, prev_d, a, p.f, dp));
            break;
        }
        if dp.abs() <= -cfg.c2 * d0 {
            return Some(p);
        }
        if dp >= 0.0 {
            bracket = Some((a, p.f, dp, prev_a, prev_f, prev_d));
            break;
        }
        prev_a = a;
        prev_f = p.f;
        prev_d = dp;
        a *= 2.0;
    }

    let (mut lo_a, mut lo_f, mut lo_d, mut hi_a, mut hi_f, mut hi_d) = bracket?;
    let mut best_sufficient: Option<Point> = None;
    while evals < MAX_LINE_SEARCH {
        let a = zoom_trial(lo_a, lo_f, lo_d, hi_a, hi_f, hi_d);
        let p = probe(f, at(a));
        evals += 1;
        if !p.f.is_finite() {
            hi_a = a;
            hi_f = f64::INFINITY;
            hi_d = f64::NAN;
            continue;
        }
        let dp = dot(&p.g, dir);
        if p.f > cur.f + cfg.c1 * a * d0 || p.f >= lo_f {
            hi_a = a;
            hi_f = p.f;
            hi_d = dp;
        } else {
            if dp.abs() <= -cfg.c2 * d0 {
                return Some(p);
            }
            if dp * (hi_a - lo_a) >= 0.0 {
                hi_a = lo_a;
                hi_f = lo_f;
                hi_d = lo_d;
            }
            lo_a = a;
            lo_f = p.f;
            lo_d = dp;
            best_sufficient = Some(p);
        }
        if (hi_a - lo_a).abs() < 1e-16 * lo_a.abs().max(1.0) {
            break;
        }
    }
    // accept an Armijo point if the curvature condition never held
    best_sufficient.filter(|p| p.f < cur.f)
}

/// Cubic interpolation inside the bracket, falling back to bisection.
fn zoom_trial(lo_a: f64, lo_f: f64, lo_d: f64, hi_a: f64, hi_f: f64, hi_d: f64) -> f64 {
    let (a, b) = (lo_a.min(hi_a), lo_a.max(hi_a));
    let mid = 0.5 * (lo_a + hi_a);
    if !hi_f.is_finite() || !hi_d.is_finite() {
        return mid;
    }
    let d1 = lo_d + hi_d - 3.0 * (lo_f - hi_f) / (lo_a - hi_a);
    let disc = d1 * d1 - lo_d * hi_d;
    if disc < 0.0 {
        return mid;
    }
    let d2 = (hi_a - lo_a).signum() * disc.sqrt();
    let t = hi_a - (hi_a - lo_a) * (hi_d + d2 - d1) / (hi_d - lo_d + 2.0 * d2);
    let margin = 0.1 * (b - a);
    if t.is_finite() && t > a + margin && t < b - margin {
        t
    } else {
        mid
    }
}

/// Limited-memory BFGS with a strong-Wolfe line search.
pub fn lbfgs<F>(mut f: F, x0: &[f64], cfg: &OptimConfig) -> Result<OptimResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    cfg.validate()?;
    let n = x0.len();
    let (f0, g0) = f(x0)?;
    if !f0.is_finite() || g0.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { iteration: 0 });
    }
    if g0.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: g0.len() });
    }
    let mut cur = Point { x: x0.to_vec(), f: f0, g: g0 };
    let mut trace = vec![f0];
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho: Vec<f64> = Vec::new();
    let mut degraded = false;

    for _ in 0..cfg.iterations {
        if cur.g.iter().fold(0.0f64, |m, g| m.max(g.abs())) <= cfg.grad_tolerance {
            break;
        }
        // two-loop recursion
        let mut q = cur.g.clone();
        let k = s_hist.len();
        let mut alpha = vec![0.0; k];
        for i in (0..k).rev() {
            alpha[i] = rho[i] * dot(&s_hist[i], &q);
            for (qj, yj) in q.iter_mut().zip(&y_hist[i]) {
                *qj -= alpha[i] * yj;
            }
        }
        let gamma = if k > 0 { dot(&s_hist[k - 1], &y_hist[k - 1]) / dot(&y_hist[k - 1], &y_hist[k - 1]) } else { 1.0 };
        for qj in q.iter_mut() {
            *qj *= gamma;
        }
        for i in 0..k {
            let b = rho[i] * dot(&y_hist[i], &q);
            for (qj, sj) in q.iter_mut().zip(&s_hist[i]) {
                *qj += (alpha[i] - b) * sj;
            }
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        if dot(&dir, &cur.g) >= 0.0 {
            // lost descent; restart from steepest descent
            s_hist.clear();
            y_hist.clear();
            rho.clear();
            dir = cur.g.iter().map(|v| -v).collect();
        }
        let alpha0 = if k == 0 {
            (1.0 / cur.g.iter().map(|g| g * g).sum::<f64>().sqrt()).min(1.0)
        } else {
            cfg.learning_rate
        };
        let next = match line_search(&mut f, &cur, &dir, alpha0, cfg) {
            Some(p) => p,
            None => {
                degraded = true;
                break;
            }
        };
        let s: Vec<f64> = next.x.iter().zip(&cur.x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = next.g.iter().zip(&cur.g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if s_hist.len() == cfg.history {
                s_hist.remove(0);
                y_hist.remove(0);
                rho.remove(0);
            }
            s_hist.push(s);
            y_hist.push(y);
            rho.push(1.0 / sy);
        }
        let stalled = (cur.f - next.f).abs() <= 1e-15 * cur.f.abs().max(1e-300);
        cur = next;
        trace.push(cur.f);
        if stalled {
            break;
        }
    }
    // the line search only accepts decreasing steps, so `cur` is the best iterate
    Ok(OptimResult { x: cur.x, value: cur.f, trace, degraded })
}

/// Central differences with step `h` in every coordinate.
pub fn finite_diff_grad<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(scales: Vec<f64>) -> impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)> {
        move |x: &[f64]| {
            let v = x.iter().zip(&scales).map(|(x, s)| s * x * x).sum();
            Ok((v, x.iter().zip(&scales).map(|(x, s)| 2.0 * s * x).collect()))
        }
    }

    fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        Ok((v, vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)]))
    }

    #[test]
    fn adam_shifted_parabola() {
        let f = |x: &[f64]| Ok(((x[0] - 3.0).powi(2), vec![2.0 * (x[0] - 3.0)]));
        let r = adam(f, &[0.0], &OptimConfig::adam(0.1, 500)).unwrap();
        assert!((r.x[0] - 3.0).abs() <= 1e-3, "{}", r.x[0]);
        assert_eq!(r.trace.len(), 501);
    }

    #[test]
    fn adam_ill_conditioned_quadratic() {
        let r = adam(quadratic(vec![1.0, 100.0]), &[1.0, 1.0], &OptimConfig::adam(0.01, 5000)).unwrap();
        assert!(r.value <= 1e-6, "{}", r.value);
    }

    #[test]
    fn adam_is_deterministic() {
        let cfg = OptimConfig::adam(0.05, 200);
        let a = adam(rosenbrock, &[-1.2, 1.0], &cfg).unwrap();
        let b = adam(rosenbrock, &[-1.2, 1.0], &cfg).unwrap();
        assert_eq!(a.trace.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.trace.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(a.x, b.x);
    }

    #[test]
    fn adam_reports_non_finite_iteration() {
        let mut calls = 0;
        let f = |x: &[f64]| {
            calls += 1;
            if calls == 4 {
                Ok((f64::NAN, vec![0.0]))
            } else {
                Ok((x[0] * x[0], vec![2.0 * x[0]]))
            }
        };
        match adam(f, &[1.0], &OptimConfig::adam(0.1, 10)) {
            Err(Error::NonFinite { iteration }) => assert_eq!(iteration, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn adam_box_projection() {
        let f = |x: &[f64]| Ok(((x[0] - 3.0).powi(2), vec![2.0 * (x[0] - 3.0)]));
        let r = adam_in_box(f, &[0.0], &OptimConfig::adam(0.1, 300), Some((&[-1.0], &[1.0]))).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lbfgs_quadratic_terminates() {
        // finite termination needs near-exact line searches
        let cfg = OptimConfig { c2: 0.01, ..OptimConfig::lbfgs(10) };
        let r = lbfgs(quadratic(vec![1.0, 3.0, 10.0, 0.5, 7.0]), &[1.0, -2.0, 0.5, 3.0, -1.0], &cfg).unwrap();
        let (_, g) = quadratic(vec![1.0, 3.0, 10.0, 0.5, 7.0])(&r.x).unwrap();
        assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-8, "{g:?} {:?}", r.trace);
    }

    #[test]
    fn lbfgs_rosenbrock() {
        let r = lbfgs(rosenbrock, &[-1.2, 1.0], &OptimConfig::lbfgs(100)).unwrap();
        assert!(r.value <= 1e-6, "{}", r.value);
        assert!(!r.degraded);
    }

    #[test]
    fn lbfgs_stays_inside_finite_region() {
        // minimum of the smooth part lies outside the box where f is +inf
        let f = |x: &[f64]| {
            if x.iter().any(|v| v.abs() > 1.0) {
                Ok((f64::INFINITY, vec![0.0; 2]))
            } else {
                Ok(((x[0] - 5.0).powi(2) + (x[1] + 5.0).powi(2), vec![2.0 * (x[0] - 5.0), 2.0 * (x[1] + 5.0)]))
            }
        };
        let r = lbfgs(f, &[0.0, 0.0], &OptimConfig::lbfgs(50)).unwrap();
        assert!(r.x.iter().all(|v| v.abs() <= 1.0));
        assert!(r.value.is_finite());
        assert!(r.value <= r.trace[0]);
    }

    #[test]
    fn lbfgs_never_worse_than_start() {
        let r = lbfgs(rosenbrock, &[1.0, 1.0], &OptimConfig::lbfgs(20)).unwrap();
        assert_eq!(r.value, 0.0);
        let r = lbfgs(rosenbrock, &[0.3, -0.4], &OptimConfig::lbfgs(3)).unwrap();
        assert!(r.value <= r.trace[0]);
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[2.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8);
        for h in [1e-6, 0.1, 3.0] {
            let g = finite_diff_grad(|x| 2.0 * x[0] - 0.5 * x[1] + 1.0, &[0.3, 0.7], h);
            assert!((g[0] - 2.0).abs() < 1e-9 && (g[1] + 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = OptimConfig::adam(0.1, 0);
        assert!(adam(quadratic(vec![1.0]), &[1.0], &cfg).is_err());
        cfg.iterations = 5;
        cfg.learning_rate = -1.0;
        assert!(adam(quadratic(vec![1.0]), &[1.0], &cfg).is_err());
    }
}
