//! Nonsmooth unconstrained local optimization.
//!
//! BFGS with a weak Wolfe line search copes well with objectives that are
//! smooth almost everywhere but not at their minimizers (spectral abscissa,
//! H-infinity norm, exact penalties). Gradient sampling runs afterwards to
//! certify approximate stationarity near kinks. Objectives may return `+inf`
//! (for instance on unstable closed loops); such points are never accepted.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{pseudo_inverse, Matrix};

/// Oracle output: a value, possibly `+inf`, and a gradient when finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub value: f64,
    pub gradient: Option<DVector<f64>>,
}

impl Point {
    pub fn infinite() -> Point {
        Point {
            value: f64::INFINITY,
            gradient: None,
        }
    }

    pub fn new(value: f64, gradient: DVector<f64>) -> Point {
        Point {
            value,
            gradient: Some(gradient),
        }
    }

    fn finite(&self) -> Option<(f64, &DVector<f64>)> {
        match &self.gradient {
            Some(g) if self.value.is_finite() && g.iter().all(|x| x.is_finite()) => {
                Some((self.value, g))
            }
            _ => None,
        }
    }
}

pub const WOLFE_C1: f64 = 1e-4;
pub const WOLFE_C2: f64 = 0.5;
const MAX_BISECTIONS: usize = 50;
const MAX_EXPANSIONS: usize = 50;

#[derive(Debug, Clone)]
pub struct Options {
    pub tol_grad: f64,
    pub max_iter: usize,
    /// Stop as soon as the best value drops to or below this level.
    pub target: Option<f64>,
    /// Run gradient sampling after BFGS.
    pub sampling: bool,
    pub tol_sample: f64,
    /// Iteration cap per sampling radius.
    pub max_sample_iter: usize,
    pub seed: u64,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            tol_grad: 1e-6,
            max_iter: 1000,
            target: None,
            sampling: false,
            tol_sample: 1e-6,
            max_sample_iter: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    GradientTolerance,
    TargetReached,
    MaxIterations,
    LineSearchFailed,
    /// Gradient sampling found the point stationary at every radius.
    Stationary,
    SamplingFailed,
}

#[derive(Debug, Clone)]
pub struct RunTrace {
    /// Accepted iterates with their values, starting point first.
    pub iterates: Vec<(DVector<f64>, f64)>,
    pub best_k: DVector<f64>,
    pub best_value: f64,
    pub termination: Termination,
    pub fn_evals: usize,
}

impl RunTrace {
    fn start(k: DVector<f64>, value: f64) -> RunTrace {
        RunTrace {
            iterates: vec![(k.clone(), value)],
            best_k: k,
            best_value: value,
            termination: Termination::MaxIterations,
            fn_evals: 1,
        }
    }

    fn push(&mut self, k: DVector<f64>, value: f64) {
        if value < self.best_value {
            self.best_value = value;
            self.best_k = k.clone();
        }
        self.iterates.push((k, value));
    }

    /// Running minimum of the iterate values.
    pub fn best_so_far(&self) -> Vec<f64> {
        self.iterates
            .iter()
            .scan(f64::INFINITY, |best, (_, v)| {
                *best = best.min(*v);
                Some(*best)
            })
            .collect()
    }

    fn reached(&self, opts: &Options) -> bool {
        opts.target.is_some_and(|t| self.best_value <= t)
    }
}

#[derive(Debug, Clone)]
pub struct Step {
    pub t: f64,
    pub value: f64,
    pub gradient: DVector<f64>,
}

#[derive(Debug, Clone)]
pub enum LineSearch {
    /// Armijo and weak Wolfe both hold.
    Wolfe(Step),
    /// Bracketing failed; carries the best Armijo point seen, if any.
    Failed(Option<Step>),
}

/// Weak Wolfe line search by expansion then bisection.
///
/// Infinite values count as Armijo failures, so the step shrinks back into
/// the region where the objective is finite.
pub fn line_search_weak_wolfe<F>(
    f: &F,
    k: &DVector<f64>,
    d: &DVector<f64>,
    f0: f64,
    g0: &DVector<f64>,
    evals: &mut usize,
) -> LineSearch
where
    F: Fn(&DVector<f64>) -> Point,
{
    let slope0 = g0.dot(d);
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    let mut t = 1.0;
    let mut armijo_best: Option<Step> = None;
    let (mut bisections, mut expansions) = (0, 0);
    loop {
        let pt = f(&(k + d * t));
        *evals += 1;
        match pt.finite() {
            Some((ft, gt)) if ft <= f0 + WOLFE_C1 * t * slope0 => {
                let step = Step {
                    t,
                    value: ft,
                    gradient: gt.clone(),
                };
                if gt.dot(d) >= WOLFE_C2 * slope0 {
                    return LineSearch::Wolfe(step);
                }
                lo = t;
                if armijo_best.as_ref().is_none_or(|b| ft < b.value) {
                    armijo_best = Some(step);
                }
            }
            _ => hi = t,
        }
        if hi.is_finite() {
            if bisections >= MAX_BISECTIONS {
                return LineSearch::Failed(armijo_best);
            }
            bisections += 1;
            t = 0.5 * (lo + hi);
        } else {
            if expansions >= MAX_EXPANSIONS {
                return LineSearch::Failed(armijo_best);
            }
            expansions += 1;
            t = 2.0 * lo;
        }
    }
}

/// BFGS with inverse-Hessian updates and a weak Wolfe line search.
pub fn bfgs<F>(f: &F, k0: &DVector<f64>, opts: &Options) -> Result<RunTrace>
where
    F: Fn(&DVector<f64>) -> Point,
{
    let p0 = f(k0);
    let (mut fk, g) = p0.finite().ok_or(Error::InvalidStart)?;
    let mut g = g.clone();
    let mut k = k0.clone();
    let mut trace = RunTrace::start(k.clone(), fk);
    let n = k.len();
    let mut h = Matrix::identity(n, n);
    let mut scaled = false;

    for _ in 0..opts.max_iter {
        if trace.reached(opts) {
            trace.termination = Termination::TargetReached;
            return Ok(trace);
        }
        if g.norm() <= opts.tol_grad {
            trace.termination = Termination::GradientTolerance;
            return Ok(trace);
        }
        let mut d = -(&h * &g);
        if g.dot(&d) >= 0.0 {
            // Lost positive definiteness to rounding: restart from steepest descent.
            h = Matrix::identity(n, n);
            d = -g.clone();
        }
        let step = match line_search_weak_wolfe(f, &k, &d, fk, &g, &mut trace.fn_evals) {
            LineSearch::Wolfe(s) => s,
            LineSearch::Failed(Some(s)) => {
                let knew = &k + &d * s.t;
                trace.push(knew, s.value);
                trace.termination = Termination::LineSearchFailed;
                return Ok(trace);
            }
            LineSearch::Failed(None) => {
                trace.termination = Termination::LineSearchFailed;
                return Ok(trace);
            }
        };
        let s = &d * step.t;
        let y = &step.gradient - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if !scaled {
                h *= sy / y.dot(&y);
                scaled = true;
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            // H <- (I - rho s y^T) H (I - rho y s^T) + rho s s^T
            let yhy = y.dot(&hy);
            h -= rho * (&hy * s.transpose() + &s * hy.transpose());
            h += (rho * rho * yhy + rho) * &s * s.transpose();
        }
        k += &s;
        fk = step.value;
        g = step.gradient;
        trace.push(k.clone(), fk);
    }
    trace.termination = if trace.reached(opts) {
        Termination::TargetReached
    } else {
        Termination::MaxIterations
    };
    Ok(trace)
}

/// Minimum-norm point of the convex hull of `gradients` (Wolfe's
/// vertex-exchange method on the Gram matrix).
pub fn min_norm_hull(gradients: &[DVector<f64>]) -> DVector<f64> {
    min_norm_hull_weights(gradients).0
}

/// The minimum-norm point together with convex weights reproducing it.
pub fn min_norm_hull_weights(gradients: &[DVector<f64>]) -> (DVector<f64>, Vec<f64>) {
    assert!(!gradients.is_empty(), "hull of an empty set");
    let m = gradients.len();
    let combine = |w: &[f64]| {
        w.iter()
            .zip(gradients)
            .fold(DVector::zeros(gradients[0].len()), |acc, (wi, g)| {
                acc + g * *wi
            })
    };
    let scale = gradients
        .iter()
        .map(|g| g.norm_squared())
        .fold(0.0, f64::max);
    if scale == 0.0 {
        let mut w = vec![0.0; m];
        w[0] = 1.0;
        return (DVector::zeros(gradients[0].len()), w);
    }

    let first = (0..m)
        .min_by(|&a, &b| {
            gradients[a]
                .norm_squared()
                .total_cmp(&gradients[b].norm_squared())
        })
        .unwrap();
    let mut active = vec![first];
    let mut weights = vec![1.0];
    let mut x = gradients[first].clone();

    for _ in 0..(50 * m + 100) {
        let (j, best) = (0..m)
            .map(|i| (i, x.dot(&gradients[i])))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        if x.norm_squared() - best <= 1e-14 * scale || active.contains(&j) {
            break;
        }
        active.push(j);
        weights.push(0.0);
        loop {
            let mu = affine_min_norm(gradients, &active);
            if mu.iter().all(|&v| v > 1e-15) {
                weights = mu;
                break;
            }
            // Step from the current weights toward mu until one weight hits zero.
            let theta = weights
                .iter()
                .zip(&mu)
                .filter(|(_, &u)| u <= 1e-15)
                .map(|(&w, &u)| if w - u > 0.0 { w / (w - u) } else { 0.0 })
                .fold(1.0, f64::min);
            for (w, u) in weights.iter_mut().zip(&mu) {
                *w += theta * (u - *w);
            }
            let mut i = 0;
            while i < active.len() {
                if weights[i] <= 1e-15 {
                    active.remove(i);
                    weights.remove(i);
                } else {
                    i += 1;
                }
            }
            let total: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= total);
            if active.len() <= 1 {
                break;
            }
        }
        let mut full = vec![0.0; m];
        for (&i, &w) in active.iter().zip(&weights) {
            full[i] = w;
        }
        x = combine(&full);
    }
    let mut full = vec![0.0; m];
    for (&i, &w) in active.iter().zip(&weights) {
        full[i] = w;
    }
    (combine(&full), full)
}

/// Weights `mu` (summing to one) of the minimum-norm point of the affine
/// hull of the active gradients.
fn affine_min_norm(gradients: &[DVector<f64>], active: &[usize]) -> Vec<f64> {
    let s = active.len();
    let mut kkt = Matrix::zeros(s + 1, s + 1);
    for (a, &i) in active.iter().enumerate() {
        for (b, &j) in active.iter().enumerate() {
            kkt[(a, b)] = gradients[i].dot(&gradients[j]);
        }
        kkt[(a, s)] = 1.0;
        kkt[(s, a)] = 1.0;
    }
    let mut rhs = DVector::zeros(s + 1);
    rhs[s] = 1.0;
    let sol = match kkt.clone().lu().solve(&rhs) {
        Some(x) if x.iter().all(|v| v.is_finite()) => x,
        _ => pseudo_inverse(&kkt).expect("finite Gram matrix") * rhs,
    };
    sol.rows(0, s).iter().copied().collect()
}

/// Radii multipliers for gradient sampling, largest first.
pub const SAMPLING_RADII: [f64; 3] = [1e-4, 1e-5, 1e-6];
const SAMPLE_ARMIJO: f64 = 1e-4;
const MAX_RESAMPLES: usize = 20;

fn sample_ball(rng: &mut ChaCha8Rng, center: &DVector<f64>, radius: f64) -> DVector<f64> {
    let n = center.len();
    let dir = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let norm = dir.norm();
    let r = radius * rng.random::<f64>().powf(1.0 / n as f64);
    if norm == 0.0 {
        center.clone()
    } else {
        center + dir * (r / norm)
    }
}

/// Gradient sampling with three shrinking radii.
pub fn gradient_sampling<F>(f: &F, k0: &DVector<f64>, opts: &Options) -> Result<RunTrace>
where
    F: Fn(&DVector<f64>) -> Point,
{
    let p0 = f(k0);
    let (mut fk, g0) = p0.finite().ok_or(Error::InvalidStart)?;
    let mut gk = g0.clone();
    let mut k = k0.clone();
    let mut trace = RunTrace::start(k.clone(), fk);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let n = k.len();
    let scale = 1.0 + k0.norm();
    let mut stationary_everywhere = true;

    for radius in SAMPLING_RADII.iter().map(|r| r * scale) {
        let mut stationary = false;
        for _ in 0..opts.max_sample_iter {
            if trace.reached(opts) {
                trace.termination = Termination::TargetReached;
                return Ok(trace);
            }
            let mut grads = vec![gk.clone()];
            let mut failures = 0;
            while grads.len() < 2 * n + 1 {
                let x = sample_ball(&mut rng, &k, radius);
                trace.fn_evals += 1;
                match f(&x).finite() {
                    Some((_, g)) => grads.push(g.clone()),
                    None => {
                        failures += 1;
                        if failures > MAX_RESAMPLES * (2 * n + 1) {
                            break;
                        }
                    }
                }
            }
            if grads.len() == 1 && n > 0 {
                trace.termination = Termination::SamplingFailed;
                return Ok(trace);
            }
            let gstar = min_norm_hull(&grads);
            let gnorm2 = gstar.norm_squared();
            if gnorm2.sqrt() <= opts.tol_sample {
                stationary = true;
                break;
            }
            let d = -&gstar;
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..MAX_BISECTIONS {
                let x = &k + &d * t;
                let pt = f(&x);
                trace.fn_evals += 1;
                if let Some((ft, g)) = pt.finite() {
                    if ft <= fk - SAMPLE_ARMIJO * t * gnorm2 {
                        accepted = Some((x, ft, g.clone()));
                        break;
                    }
                }
                t *= 0.5;
            }
            match accepted {
                Some((x, ft, g)) => {
                    k = x;
                    fk = ft;
                    gk = g;
                    trace.push(k.clone(), fk);
                }
                // No decrease along -g*: treat as stationary at this radius.
                None => {
                    stationary = true;
                    break;
                }
            }
        }
        stationary_everywhere &= stationary;
    }
    trace.termination = if stationary_everywhere {
        Termination::Stationary
    } else {
        Termination::MaxIterations
    };
    Ok(trace)
}

/// BFGS followed, when enabled, by gradient sampling from the BFGS result.
pub fn local_search<F>(f: &F, k0: &DVector<f64>, opts: &Options) -> Result<RunTrace>
where
    F: Fn(&DVector<f64>) -> Point,
{
    let mut trace = bfgs(f, k0, opts)?;
    if opts.sampling && !trace.reached(opts) {
        let refine = gradient_sampling(f, &trace.best_k, opts)?;
        trace.fn_evals += refine.fn_evals;
        for (k, v) in refine.iterates.into_iter().skip(1) {
            trace.push(k, v);
        }
        trace.termination = refine.termination;
    }
    Ok(trace)
}

#[derive(Debug, Clone)]
pub struct MultiStart {
    pub best: RunTrace,
    pub best_index: usize,
    /// One entry per start; `None` where the start point was infinite.
    pub traces: Vec<Option<RunTrace>>,
}

/// Seed for the `index`-th independent run derived from a base seed.
pub fn run_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64)
        .wrapping_add(1)
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Independent local searches from each start, run in parallel; the best
/// trace wins with ties broken by start index.
pub fn multi_start<F>(f: &F, starts: &[DVector<f64>], opts: &Options) -> Result<MultiStart>
where
    F: Fn(&DVector<f64>) -> Point + Sync,
{
    if starts.is_empty() {
        return Err(Error::InvalidInput("no starting points".into()));
    }
    let traces: Vec<Option<RunTrace>> = starts
        .par_iter()
        .enumerate()
        .map(|(i, k0)| {
            let run_opts = Options {
                seed: run_seed(opts.seed, i),
                ..opts.clone()
            };
            local_search(f, k0, &run_opts).ok()
        })
        .collect();
    let (best_index, best) = traces
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.as_ref().map(|t| (i, t)))
        .min_by(|a, b| {
            a.1.best_value
                .total_cmp(&b.1.best_value)
                .then(a.0.cmp(&b.0))
        })
        .ok_or(Error::NoFiniteStart)?;
    Ok(MultiStart {
        best: best.clone(),
        best_index,
        traces,
    })
}
