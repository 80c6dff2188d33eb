//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! The objective returns `None` where it cannot be evaluated (for instance when a
//! covariance matrix fails to factorise); the line search treats such points as `+inf`.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use num_traits::Float;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub max_iters: usize,
    /// Stop when the infinity norm of the gradient drops below this.
    pub grad_tol: f64,
    /// Stop when an iteration improves the objective by less than this (relative).
    pub f_tol: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig { memory: 8, max_iters: 200, grad_tol: 1e-6, f_tol: 1e-11 }
    }
}

#[derive(Clone, Debug)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;
const MAX_LINE_EVALS: usize = 30;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

struct Probe {
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
}

/// Minimises `objective` from `x0`. Returns `None` only when `x0` itself cannot be evaluated.
pub fn minimize<F>(mut objective: F, x0: &[f64], cfg: &LbfgsConfig) -> Option<Minimum>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let (f0, g0) = objective(x0).filter(|(f, g)| f.is_finite() && g.iter().all(|v| v.is_finite()))?;
    let mut x = x0.to_vec();
    let mut f = f0;
    let mut g = g0;
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.memory);

    for iter in 0..cfg.max_iters {
        if inf_norm(&g) < cfg.grad_tol {
            return Some(Minimum { x, f, iterations: iter, converged: true });
        }
        let mut dir = two_loop(&g, &history);
        let mut slope = dot(&dir, &g);
        if !(slope < 0.0) {
            history.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = dot(&dir, &g);
        }
        let first_step = if history.is_empty() { (1.0 / inf_norm(&g)).min(1.0) } else { 1.0 };
        let probe = match line_search(&mut objective, &x, f, slope, &dir, first_step) {
            Some(p) => p,
            None if !history.is_empty() => {
                // retry along steepest descent before giving up
                history.clear();
                continue;
            }
            None => return Some(Minimum { x, f, iterations: iter, converged: false }),
        };
        let s: Vec<f64> = probe.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = probe.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * Float::sqrt(dot(&s, &s) * dot(&y, &y)) {
            if history.len() == cfg.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        let improvement = f - probe.f;
        x = probe.x;
        g = probe.g;
        let prev = f;
        f = probe.f;
        if improvement <= cfg.f_tol * prev.abs().max(1.0) {
            return Some(Minimum { x, f, iterations: iter + 1, converged: true });
        }
    }
    let converged = inf_norm(&g) < cfg.grad_tol;
    Some(Minimum { x, f, iterations: cfg.max_iters, converged })
}

fn two_loop(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q: Vec<f64> = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

fn line_search<F>(objective: &mut F, x: &[f64], f0: f64, d0: f64, dir: &[f64], first: f64) -> Option<Probe>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let mut eval = |a: f64| -> (Probe, f64) {
        let xa: Vec<f64> = x.iter().zip(dir).map(|(xi, di)| xi + a * di).collect();
        match objective(&xa) {
            Some((f, g)) if f.is_finite() && g.iter().all(|v| v.is_finite()) => {
                let d = dot(&g, dir);
                (Probe { x: xa, f, g }, d)
            }
            _ => (Probe { x: xa, f: f64::INFINITY, g: Vec::new() }, f64::NAN),
        }
    };
    // best strictly decreasing point seen, returned if the Wolfe search runs out of budget
    let mut best: Option<Probe> = None;
    let remember = |p: &Probe, best: &mut Option<Probe>| {
        if p.f < f0 && best.as_ref().map_or(true, |b| p.f < b.f) {
            *best = Some(Probe { x: p.x.clone(), f: p.f, g: p.g.clone() });
        }
    };

    let (mut a_lo, mut f_lo, mut d_lo) = (0.0, f0, d0);
    let (mut a_hi, mut f_hi);
    let mut a = first;
    let mut evals = 0;
    loop {
        if evals >= MAX_LINE_EVALS {
            return best;
        }
        evals += 1;
        let (p, d) = eval(a);
        remember(&p, &mut best);
        if !p.f.is_finite() || p.f > f0 + C1 * a * d0 || (evals > 1 && p.f >= f_lo) {
            a_hi = a;
            f_hi = p.f;
            break;
        }
        if d.abs() <= -C2 * d0 {
            return Some(p);
        }
        if d >= 0.0 {
            a_hi = a_lo;
            f_hi = f_lo;
            a_lo = a;
            f_lo = p.f;
            d_lo = d;
            break;
        }
        a_lo = a;
        f_lo = p.f;
        d_lo = d;
        a *= 2.0;
    }
    while evals < MAX_LINE_EVALS {
        evals += 1;
        let t = a_hi - a_lo;
        let mut trial = a_lo + 0.5 * t;
        if f_hi.is_finite() {
            // quadratic through (a_lo, f_lo) with slope d_lo and (a_hi, f_hi)
            let c = (f_hi - f_lo - d_lo * t) / (t * t);
            if c > 0.0 {
                let cand = a_lo - d_lo / (2.0 * c);
                let (lo, hi) = if a_lo < a_hi { (a_lo, a_hi) } else { (a_hi, a_lo) };
                let margin = 0.1 * (hi - lo);
                if cand > lo + margin && cand < hi - margin {
                    trial = cand;
                }
            }
        }
        let (p, d) = eval(trial);
        remember(&p, &mut best);
        if !p.f.is_finite() || p.f > f0 + C1 * trial * d0 || p.f >= f_lo {
            a_hi = trial;
            f_hi = p.f;
        } else {
            if d.abs() <= -C2 * d0 {
                return Some(p);
            }
            if d * (a_hi - a_lo) >= 0.0 {
                a_hi = a_lo;
                f_hi = f_lo;
            }
            a_lo = trial;
            f_lo = p.f;
            d_lo = d;
        }
        if (a_hi - a_lo).abs() <= 1e-14 * a_lo.abs().max(a_hi.abs()) {
            break;
        }
    }
    best
}
