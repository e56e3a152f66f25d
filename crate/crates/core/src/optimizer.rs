//! Limited-memory BFGS with a strong Wolfe line search, and a seeded
//! multi-restart driver around it.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MEMORY: usize = 10;
const C1: f64 = 1e-4;
const C2: f64 = 0.9;
const MAX_BRACKET_STEPS: usize = 25;
const MAX_ZOOM_STEPS: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub num_restarts: usize,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub step_tolerance: f64,
    pub seed: u64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            num_restarts: 5,
            max_iterations: 200,
            gradient_tolerance: 1e-5,
            step_tolerance: 1e-9,
            seed: 0,
        }
    }
}

impl OptimizerSettings {
    pub fn validate(&self) -> Result<()> {
        if self.num_restarts == 0 || self.max_iterations == 0 {
            return Err(Error::Config(
                "num_restarts and max_iterations must be at least 1".into(),
            ));
        }
        if !(self.gradient_tolerance > 0.0) || !(self.step_tolerance > 0.0) {
            return Err(Error::Config(
                "optimizer tolerances must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Gradient,
    Step,
    MaxIterations,
    LineSearchFailure,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Termination::Gradient => "gradient",
            Termination::Step => "step",
            Termination::MaxIterations => "max-iterations",
            Termination::LineSearchFailure => "line-search-failure",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub iterations: usize,
    pub evaluations: usize,
    /// Infinity norm of the gradient at the returned point.
    pub gradient_norm: f64,
    pub termination: Termination,
    pub line_search_failed: bool,
    /// Objective value at every accepted iterate, starting with `f(x0)`.
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub diagnostics: Diagnostics,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|v| v.is_finite())
}

#[derive(Clone)]
struct Probe {
    alpha: f64,
    f: f64,
    /// directional derivative; NaN when the point was rejected as non-finite
    d: f64,
    g: Vec<f64>,
}

/// Counts calls and maps non-finite objective values to +∞.
struct Counted<'a, F> {
    objective: &'a mut F,
    calls: usize,
}

impl<F> Counted<'_, F>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    fn eval(&mut self, x: &[f64]) -> (f64, Vec<f64>) {
        self.calls += 1;
        let (f, g) = (self.objective)(x);
        if f.is_finite() && g.len() == x.len() && all_finite(&g) {
            (f, g)
        } else {
            (f64::INFINITY, vec![f64::NAN; x.len()])
        }
    }

    fn probe(&mut self, x: &[f64], dir: &[f64], alpha: f64) -> Probe {
        let xt: Vec<f64> = x.iter().zip(dir).map(|(a, b)| a + alpha * b).collect();
        let (f, g) = self.eval(&xt);
        let d = if f.is_finite() {
            dot(&g, dir)
        } else {
            f64::NAN
        };
        Probe { alpha, f, d, g }
    }
}

/// Minimizer of the cubic through two points with known values and slopes,
/// or bisection when it is undefined or too close to an endpoint.
fn cubic_step(lo: &Probe, hi: &Probe) -> f64 {
    let (a, b) = (lo.alpha, hi.alpha);
    let mid = 0.5 * (a + b);
    if !(lo.f.is_finite() && hi.f.is_finite() && lo.d.is_finite() && hi.d.is_finite()) {
        return mid;
    }
    let d1 = lo.d + hi.d - 3.0 * (lo.f - hi.f) / (a - b);
    let disc = d1 * d1 - lo.d * hi.d;
    if disc < 0.0 {
        return mid;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (hi.d + d2 - d1) / (hi.d - lo.d + 2.0 * d2);
    let (left, right) = if a < b { (a, b) } else { (b, a) };
    let margin = 0.1 * (right - left);
    if !t.is_finite() || t < left + margin || t > right - margin {
        mid
    } else {
        t
    }
}

enum Search {
    Wolfe(Probe),
    /// Only sufficient decrease could be established.
    Armijo(Probe),
    Failed,
}

fn line_search<F>(
    obj: &mut Counted<'_, F>,
    x: &[f64],
    dir: &[f64],
    f0: f64,
    d0: f64,
    alpha0: f64,
) -> Search
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let armijo = |p: &Probe| p.f.is_finite() && p.f <= f0 + C1 * p.alpha * d0;
    let mut best: Option<Probe> = None;
    let keep = |p: &Probe, best: &mut Option<Probe>| {
        if armijo(p) && best.as_ref().is_none_or(|b| p.f < b.f) {
            *best = Some(p.clone());
        }
    };

    let mut prev = Probe {
        alpha: 0.0,
        f: f0,
        d: d0,
        g: Vec::new(),
    };
    let mut alpha = alpha0;
    let mut bracket = None;
    for i in 0..MAX_BRACKET_STEPS {
        let cur = obj.probe(x, dir, alpha);
        keep(&cur, &mut best);
        if !armijo(&cur) || (i > 0 && cur.f >= prev.f) {
            bracket = Some((prev, cur));
            break;
        }
        if cur.d.abs() <= -C2 * d0 {
            return Search::Wolfe(cur);
        }
        if cur.d >= 0.0 {
            bracket = Some((cur, prev));
            break;
        }
        prev = cur;
        alpha *= 2.0;
    }

    if let Some((mut lo, mut hi)) = bracket {
        for _ in 0..MAX_ZOOM_STEPS {
            if (hi.alpha - lo.alpha).abs() <= 1e-14 * lo.alpha.abs().max(1.0) {
                break;
            }
            let t = cubic_step(&lo, &hi);
            let cur = obj.probe(x, dir, t);
            keep(&cur, &mut best);
            if !armijo(&cur) || cur.f >= lo.f {
                hi = cur;
            } else {
                if cur.d.abs() <= -C2 * d0 {
                    return Search::Wolfe(cur);
                }
                if cur.d * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = lo;
                }
                lo = cur;
            }
        }
    }
    match best {
        Some(p) if p.f < f0 => Search::Armijo(p),
        _ => Search::Failed,
    }
}

/// Minimizes a smooth objective returning `(value, gradient)`.
///
/// The returned value never exceeds `f(x0)`. A line-search breakdown is not
/// an error: the best point found is returned with
/// `diagnostics.line_search_failed` set.
pub fn minimize<F>(mut objective: F, x0: &[f64], settings: &OptimizerSettings) -> Result<Minimum>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    settings.validate()?;
    let mut obj = Counted {
        objective: &mut objective,
        calls: 0,
    };
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut f, mut g) = obj.eval(&x);
    if !f.is_finite() {
        return Err(Error::OptimizerInput(
            "objective or gradient is not finite at the initial point".into(),
        ));
    }

    let mut s_hist: Vec<Vec<f64>> = Vec::with_capacity(MEMORY);
    let mut y_hist: Vec<Vec<f64>> = Vec::with_capacity(MEMORY);
    let mut history = vec![f];
    let mut line_search_failed = false;
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;

    while iterations < settings.max_iterations {
        if inf_norm(&g) <= settings.gradient_tolerance {
            termination = Termination::Gradient;
            break;
        }
        let mut dir = two_loop(&g, &s_hist, &y_hist);
        let mut d0 = dot(&g, &dir);
        if !(d0 < 0.0) || !all_finite(&dir) {
            s_hist.clear();
            y_hist.clear();
            dir = g.iter().map(|v| -v).collect();
            d0 = dot(&g, &dir);
        }
        let alpha0 = if s_hist.is_empty() {
            (1.0 / inf_norm(&g)).min(1.0)
        } else {
            1.0
        };

        let accepted = match line_search(&mut obj, &x, &dir, f, d0, alpha0) {
            Search::Wolfe(p) | Search::Armijo(p) => Some(p),
            Search::Failed if !s_hist.is_empty() => {
                // stale curvature pairs; retry once along steepest descent
                s_hist.clear();
                y_hist.clear();
                dir = g.iter().map(|v| -v).collect();
                d0 = dot(&g, &dir);
                match line_search(&mut obj, &x, &dir, f, d0, (1.0 / inf_norm(&g)).min(1.0)) {
                    Search::Wolfe(p) | Search::Armijo(p) => Some(p),
                    Search::Failed => None,
                }
            }
            Search::Failed => None,
        };
        let Some(p) = accepted else {
            line_search_failed = true;
            termination = Termination::LineSearchFailure;
            break;
        };
        iterations += 1;

        let s: Vec<f64> = dir.iter().map(|d| p.alpha * d).collect();
        let y: Vec<f64> = p.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        for (xi, si) in x.iter_mut().zip(&s) {
            *xi += si;
        }
        f = p.f;
        g = p.g;
        history.push(f);

        let sy = dot(&s, &y);
        if sy > f64::EPSILON * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
            if s_hist.len() == MEMORY {
                s_hist.remove(0);
                y_hist.remove(0);
            }
            s_hist.push(s.clone());
            y_hist.push(y);
        }
        if inf_norm(&s) < settings.step_tolerance {
            termination = Termination::Step;
            break;
        }
    }
    if termination == Termination::MaxIterations && inf_norm(&g) <= settings.gradient_tolerance {
        termination = Termination::Gradient;
    }
    debug_assert_eq!(x.len(), n);

    Ok(Minimum {
        x,
        f,
        diagnostics: Diagnostics {
            iterations,
            evaluations: obj.calls,
            gradient_norm: inf_norm(&g),
            termination,
            line_search_failed,
            history,
        },
    })
}

/// L-BFGS two-loop recursion: returns `−H g`.
fn two_loop(g: &[f64], s_hist: &[Vec<f64>], y_hist: &[Vec<f64>]) -> Vec<f64> {
    let mut q = g.to_vec();
    let k = s_hist.len();
    let mut alphas = vec![0.0; k];
    for i in (0..k).rev() {
        let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
        alphas[i] = rho * dot(&s_hist[i], &q);
        for (qj, yj) in q.iter_mut().zip(&y_hist[i]) {
            *qj -= alphas[i] * yj;
        }
    }
    if k > 0 {
        let gamma = dot(&s_hist[k - 1], &y_hist[k - 1]) / dot(&y_hist[k - 1], &y_hist[k - 1]);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for i in 0..k {
        let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
        let beta = rho * dot(&y_hist[i], &q);
        for (qj, sj) in q.iter_mut().zip(&s_hist[i]) {
            *qj += (alphas[i] - beta) * sj;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// Outcome of one restart, kept for fit logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartSummary {
    pub restart: usize,
    pub seed: u64,
    pub initial_f: Option<f64>,
    pub final_f: Option<f64>,
    pub iterations: usize,
    pub termination: Option<Termination>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct MultiRestart {
    pub best: Minimum,
    pub best_restart: usize,
    pub restarts: Vec<RestartSummary>,
}

/// Seed of restart `r`.
pub fn restart_seed(seed: u64, restart: usize) -> u64 {
    seed.wrapping_add(restart as u64)
}

/// Runs [`minimize`] from `num_restarts` sampled starting points and keeps the
/// lowest final value (earliest restart on ties). Restart `r` draws its start
/// from a generator seeded with `seed + r`.
pub fn multi_restart_minimize<F, S>(
    mut objective: F,
    mut init_sampler: S,
    settings: &OptimizerSettings,
) -> Result<MultiRestart>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
    S: FnMut(&mut ChaCha8Rng) -> Vec<f64>,
{
    settings.validate()?;
    let mut best: Option<(usize, Minimum)> = None;
    let mut restarts = Vec::with_capacity(settings.num_restarts);
    for r in 0..settings.num_restarts {
        let seed = restart_seed(settings.seed, r);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = init_sampler(&mut rng);
        match minimize(&mut objective, &x0, settings) {
            Ok(m) => {
                restarts.push(RestartSummary {
                    restart: r,
                    seed,
                    initial_f: m.diagnostics.history.first().copied(),
                    final_f: Some(m.f),
                    iterations: m.diagnostics.iterations,
                    termination: Some(m.diagnostics.termination),
                    error: None,
                });
                if best.as_ref().is_none_or(|(_, b)| m.f < b.f) {
                    best = Some((r, m));
                }
            }
            Err(e) => restarts.push(RestartSummary {
                restart: r,
                seed,
                initial_f: None,
                final_f: None,
                iterations: 0,
                termination: None,
                error: Some(e.to_string()),
            }),
        }
    }
    match best {
        Some((best_restart, best)) => Ok(MultiRestart {
            best,
            best_restart,
            restarts,
        }),
        None => Err(Error::AllRestartsFailed {
            restarts: settings.num_restarts,
            diagnostics: restarts.into_iter().filter_map(|r| r.error).collect(),
        }),
    }
}
