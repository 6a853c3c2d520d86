//! Phased controller synthesis over a set of plants.
//!
//! Each plant carries one objective entry: a kind (`s`, `t`, `h`) and a bound.
//! Entries with an infinite bound are minimized (the worst one, when there are
//! several); entries with a finite bound are constraints. From every starting
//! point the driver
//!
//! 1. stabilizes all closed loops by minimizing the largest spectral abscissa,
//! 2. if some constraint is violated, minimizes the largest violation,
//! 3. minimizes `max(minimized entries) + rho * sum(violations)`, raising `rho`
//!    tenfold while the result is infeasible.
//!
//! H2 entries are handled in norm units (the square root of the Gramian
//! trace) so they share units with bounds and H-infinity entries. Plants with
//! a nonzero `D22` are optimized in shifted coordinates and the controller is
//! mapped back at the end.

use std::cell::RefCell;

use log::{debug, info};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::closedloop::{
    assemble, eliminate_feedthrough_all, shift_feedthrough, unshift_controller, Controller,
    ParamMap,
};
use crate::error::{Error, Result};
use crate::objectives::{
    abscissa_closed_loop, evaluate, h2_closed_loop, hinf_closed_loop, ObjectiveKind,
};
use crate::optimizer::{local_search, run_seed, Options, Point, RunTrace};
use crate::plant::{Plant, PlantSet};

/// Relative slack allowed on constraint bounds when judging feasibility.
pub const FEASIBILITY_RTOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub kind: ObjectiveKind,
    /// `f64::INFINITY` for an entry to minimize.
    pub bound: f64,
}

impl Entry {
    pub fn minimize(kind: ObjectiveKind) -> Entry {
        Entry {
            kind,
            bound: f64::INFINITY,
        }
    }

    pub fn bounded(kind: ObjectiveKind, bound: f64) -> Entry {
        Entry { kind, bound }
    }

    pub fn is_constraint(&self) -> bool {
        self.bound.is_finite()
    }
}

#[derive(Debug, Clone)]
pub struct SynthesisOptions {
    pub order: usize,
    pub starts: usize,
    pub seed: u64,
    /// Gradient-sampling refinement after each BFGS run.
    pub sampling: bool,
    pub stab_margin: f64,
    pub max_iter: usize,
    pub rho_initial: f64,
    pub rho_max: f64,
    /// Optional initial controller, used as the first starting point.
    pub warm: Option<Controller>,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        SynthesisOptions {
            order: 0,
            starts: 3,
            seed: 0,
            sampling: false,
            stab_margin: 1e-7,
            max_iter: 1000,
            rho_initial: 10.0,
            rho_max: 1e6,
            warm: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ObjectiveSpec {
    pub entries: Vec<Entry>,
    pub options: SynthesisOptions,
}

impl ObjectiveSpec {
    pub fn new(entries: Vec<Entry>, options: SynthesisOptions) -> Result<ObjectiveSpec> {
        if entries.is_empty() {
            return Err(Error::InvalidInput("objective spec has no entries".into()));
        }
        for e in &entries {
            if e.bound.is_nan() || (e.bound.is_finite() && e.bound <= 0.0) || e.bound < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "bound {} of a '{}' entry must be positive or infinite",
                    e.bound, e.kind
                )));
            }
        }
        if options.starts == 0 {
            return Err(Error::InvalidInput("at least one start is required".into()));
        }
        Ok(ObjectiveSpec { entries, options })
    }

    /// Parses a spec string such as `"th"` with one bound per character.
    pub fn parse(spec: &str, bounds: &[f64], options: SynthesisOptions) -> Result<ObjectiveSpec> {
        let kinds: Vec<ObjectiveKind> = spec
            .chars()
            .map(ObjectiveKind::from_char)
            .collect::<Result<_>>()?;
        if kinds.len() != bounds.len() {
            return Err(Error::InvalidInput(format!(
                "spec '{spec}' has {} entries but {} bounds were given",
                kinds.len(),
                bounds.len()
            )));
        }
        let entries = kinds
            .into_iter()
            .zip(bounds)
            .map(|(kind, &bound)| Entry { kind, bound })
            .collect();
        ObjectiveSpec::new(entries, options)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseOutcome {
    /// The starting point already met the phase goal.
    Skipped,
    Succeeded,
    Failed,
    /// Not run because an earlier phase failed.
    NotRun,
}

impl PhaseOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            PhaseOutcome::Skipped => "skipped",
            PhaseOutcome::Succeeded => "succeeded",
            PhaseOutcome::Failed => "failed",
            PhaseOutcome::NotRun => "not-run",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Phases {
    pub stabilization: PhaseOutcome,
    pub feasibility: PhaseOutcome,
    pub optimization: PhaseOutcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Feasible,
    Infeasible,
    NoStabilizingController,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Feasible => "feasible",
            Status::Infeasible => "infeasible",
            Status::NoStabilizingController => "no stabilizing controller was found",
        }
    }
}

/// Per-iteration objective values of one start's final phase.
#[derive(Debug, Clone, PartialEq)]
pub struct History {
    pub start: usize,
    pub values: Vec<f64>,
}

impl History {
    pub fn best_so_far(&self) -> Vec<f64> {
        self.values
            .iter()
            .scan(f64::INFINITY, |b, &v| {
                *b = b.min(v);
                Some(*b)
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SynthesisReport {
    /// Controller for the original (unshifted) plants.
    pub controller: Controller,
    /// Achieved value per plant, recomputed from `controller`: spectral
    /// abscissa, H2 norm or H-infinity norm.
    pub values: Vec<f64>,
    pub entries: Vec<Entry>,
    pub feasible: bool,
    pub status: Status,
    pub phases: Phases,
    pub best_start: usize,
    pub histories: Vec<History>,
    pub seed: u64,
}

/// Starting points: the projected warm controller (or zero), then i.i.d.
/// normal entries scaled by `1/sqrt(dim)`.
pub fn initial_points(
    pm: &ParamMap,
    count: usize,
    seed: u64,
    warm: Option<&Controller>,
) -> Result<Vec<DVector<f64>>> {
    let dim = pm.dim();
    let first = match warm {
        Some(k) => pm.project(k)?,
        None => DVector::zeros(dim),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (dim.max(1) as f64).sqrt();
    let mut points = vec![first];
    for _ in 1..count {
        points.push(DVector::from_fn(dim, |_, _| {
            scale * rng.sample::<f64, _>(StandardNormal)
        }));
    }
    Ok(points)
}

/// Value of one entry on a plant with zero `D22`, in report units, with its
/// gradient in the free parameters.
fn entry_point(kind: ObjectiveKind, p: &Plant, pm: &ParamMap, k: &DVector<f64>) -> Point {
    match evaluate(kind, p, pm, k) {
        Ok(e) => match (kind, e.gradient) {
            (_, None) => Point::infinite(),
            (ObjectiveKind::HTwo, Some(g)) => {
                let norm = e.value.sqrt();
                if norm > 0.0 {
                    Point::new(norm, g / (2.0 * norm))
                } else {
                    Point::new(0.0, g * 0.0)
                }
            }
            (_, Some(g)) => Point::new(e.value, g),
        },
        Err(err) => {
            debug!("evaluation failed: {err}");
            Point::infinite()
        }
    }
}

struct Problem<'a> {
    plants: Vec<Plant>,
    entries: &'a [Entry],
    pm: ParamMap,
    options: &'a SynthesisOptions,
}

struct Snapshot {
    points: Vec<Point>,
}

impl Snapshot {
    fn all_finite(&self) -> bool {
        self.points.iter().all(|p| p.value.is_finite())
    }
}

impl Problem<'_> {
    fn snapshot(&self, k: &DVector<f64>) -> Snapshot {
        Snapshot {
            points: self
                .plants
                .iter()
                .zip(self.entries)
                .map(|(p, e)| entry_point(e.kind, p, &self.pm, k))
                .collect(),
        }
    }

    fn stability(&self, k: &DVector<f64>) -> Point {
        max_point(
            self.plants
                .iter()
                .map(|p| entry_point(ObjectiveKind::SpectralAbscissa, p, &self.pm, k)),
        )
    }

    fn violation(&self, snap: &Snapshot) -> Point {
        max_point(
            snap.points
                .iter()
                .zip(self.entries)
                .filter(|(_, e)| e.is_constraint())
                .map(|(p, e)| Point {
                    value: p.value - e.bound,
                    gradient: p.gradient.clone(),
                }),
        )
    }

    /// Largest minimized entry; zero with zero gradient when every entry is
    /// a constraint.
    fn objective(&self, snap: &Snapshot) -> Point {
        if !self.entries.iter().any(|e| !e.is_constraint()) {
            return Point::new(0.0, DVector::zeros(self.pm.dim()));
        }
        max_point(
            snap.points
                .iter()
                .zip(self.entries)
                .filter(|(_, e)| !e.is_constraint())
                .map(|(p, _)| p.clone()),
        )
    }

    fn feasible(&self, snap: &Snapshot) -> bool {
        snap.all_finite()
            && snap
                .points
                .iter()
                .zip(self.entries)
                .all(|(p, e)| !e.is_constraint() || p.value <= e.bound)
    }

    fn penalized(&self, snap: &Snapshot, rho: f64) -> Point {
        if !snap.all_finite() {
            return Point::infinite();
        }
        let mut out = self.objective(snap);
        let g = out
            .gradient
            .as_mut()
            .expect("finite points carry gradients");
        for (p, e) in snap.points.iter().zip(self.entries) {
            if e.is_constraint() && p.value > e.bound {
                out.value += rho * (p.value - e.bound);
                *g += p.gradient.as_ref().unwrap() * rho;
            }
        }
        out
    }

    fn optimizer_options(&self, seed: u64, target: Option<f64>, sampling: bool) -> Options {
        Options {
            max_iter: self.options.max_iter,
            target,
            sampling,
            seed,
            ..Options::default()
        }
    }
}

/// Pointwise maximum; the first maximizer supplies the gradient.
fn max_point(points: impl Iterator<Item = Point>) -> Point {
    let mut best: Option<Point> = None;
    for p in points {
        if p.gradient.is_none() || !p.value.is_finite() {
            return Point::infinite();
        }
        if best.as_ref().is_none_or(|b| p.value > b.value) {
            best = Some(p);
        }
    }
    best.unwrap_or_else(Point::infinite)
}

struct StartResult {
    k: DVector<f64>,
    phases: Phases,
    feasible: bool,
    stable: bool,
    objective: f64,
    violation: f64,
    history: Vec<f64>,
}

/// Lowest objective among feasible evaluated points, ties broken by the
/// parameter vector so the choice does not depend on evaluation order.
#[derive(Default)]
struct BestFeasible {
    best: Option<(f64, DVector<f64>)>,
}

impl BestFeasible {
    fn offer(&mut self, value: f64, k: &DVector<f64>) {
        let better = match &self.best {
            None => true,
            Some((v, kb)) => {
                value < *v
                    || (value == *v
                        && k.iter()
                            .zip(kb.iter())
                            .map(|(a, b)| a.total_cmp(b))
                            .find(|o| o.is_ne())
                            .is_some_and(|o| o.is_lt()))
            }
        };
        if better {
            self.best = Some((value, k.clone()));
        }
    }
}

fn run_start(problem: &Problem<'_>, index: usize, k0: &DVector<f64>) -> StartResult {
    let opts = problem.options;
    let seed = run_seed(opts.seed, index);
    let mut phases = Phases {
        stabilization: PhaseOutcome::Skipped,
        feasibility: PhaseOutcome::NotRun,
        optimization: PhaseOutcome::NotRun,
    };
    let unstable = |phases, k: DVector<f64>| StartResult {
        k,
        phases,
        feasible: false,
        stable: false,
        objective: f64::INFINITY,
        violation: f64::INFINITY,
        history: Vec::new(),
    };

    // Phase 1: stabilization.
    let mut k = k0.clone();
    let stab = |x: &DVector<f64>| problem.stability(x);
    let margin = -opts.stab_margin;
    let start = stab(&k).value;
    if start >= margin || start.is_nan() {
        if !start.is_finite() {
            phases.stabilization = PhaseOutcome::Failed;
            return unstable(phases, k);
        }
        let o = problem.optimizer_options(seed, Some(margin), false);
        match local_search(&stab, &k, &o) {
            Ok(trace) if trace.best_value < margin => {
                k = trace.best_k;
                phases.stabilization = PhaseOutcome::Succeeded;
            }
            Ok(trace) => {
                info!(
                    "start {index}: stabilization stalled at abscissa {:e}",
                    trace.best_value
                );
                phases.stabilization = PhaseOutcome::Failed;
                return unstable(phases, trace.best_k);
            }
            Err(_) => {
                phases.stabilization = PhaseOutcome::Failed;
                return unstable(phases, k);
            }
        }
    }
    debug!("start {index}: stabilized, abscissa {:e}", stab(&k).value);

    // Phase 2: feasibility.
    let violation_at = |x: &DVector<f64>| {
        let snap = problem.snapshot(x);
        if snap.all_finite() {
            problem.violation(&snap)
        } else {
            Point::infinite()
        }
    };
    phases.feasibility = PhaseOutcome::Skipped;
    if problem.entries.iter().any(Entry::is_constraint) {
        let v0 = violation_at(&k);
        if !v0.value.is_finite() {
            // Stable for the abscissa but a norm could not be evaluated.
            phases.feasibility = PhaseOutcome::Failed;
            return StartResult {
                stable: true,
                ..unstable(phases, k)
            };
        }
        if v0.value > 0.0 {
            let o = problem.optimizer_options(seed, Some(0.0), false);
            let trace = local_search(&violation_at, &k, &o).ok();
            match trace {
                Some(t) if t.best_value <= 0.0 => {
                    k = t.best_k;
                    phases.feasibility = PhaseOutcome::Succeeded;
                }
                Some(t) => {
                    phases.feasibility = PhaseOutcome::Failed;
                    let snap = problem.snapshot(&t.best_k);
                    return StartResult {
                        objective: problem.objective(&snap).value,
                        violation: t.best_value,
                        k: t.best_k,
                        phases,
                        feasible: false,
                        stable: true,
                        history: Vec::new(),
                    };
                }
                None => {
                    phases.feasibility = PhaseOutcome::Failed;
                    return StartResult {
                        stable: true,
                        violation: v0.value,
                        ..unstable(phases, k)
                    };
                }
            }
        }
    }

    // Phase 3: penalized minimization from a feasible point.
    let mut history = Vec::new();
    let record = RefCell::new(BestFeasible::default());
    {
        let snap = problem.snapshot(&k);
        record
            .borrow_mut()
            .offer(problem.objective(&snap).value, &k);
    }
    if !problem.entries.iter().any(|e| !e.is_constraint()) {
        phases.optimization = PhaseOutcome::Skipped;
    } else {
        let mut rho = opts.rho_initial;
        let mut from = k.clone();
        let mut outcome = PhaseOutcome::Failed;
        loop {
            let phi = |x: &DVector<f64>| {
                let snap = problem.snapshot(x);
                if problem.feasible(&snap) {
                    record.borrow_mut().offer(problem.objective(&snap).value, x);
                }
                problem.penalized(&snap, rho)
            };
            let o = problem.optimizer_options(seed, None, opts.sampling);
            let trace: Option<RunTrace> = local_search(&phi, &from, &o).ok();
            let Some(trace) = trace else { break };
            history.extend(trace.iterates.iter().map(|(_, v)| *v));
            let snap = problem.snapshot(&trace.best_k);
            let within = snap.all_finite()
                && snap.points.iter().zip(problem.entries).all(|(p, e)| {
                    !e.is_constraint() || p.value <= e.bound * (1.0 + FEASIBILITY_RTOL)
                });
            if within {
                outcome = PhaseOutcome::Succeeded;
                break;
            }
            if rho >= opts.rho_max {
                break;
            }
            rho = (rho * 10.0).min(opts.rho_max);
            debug!("start {index}: penalty raised to {rho}");
            from = record
                .borrow()
                .best
                .as_ref()
                .map(|(_, x)| x.clone())
                .unwrap_or(trace.best_k);
        }
        phases.optimization = outcome;
    }
    let (objective, k) = record.into_inner().best.expect("phase 3 starts feasible");
    StartResult {
        k,
        phases,
        feasible: true,
        stable: true,
        objective,
        violation: 0.0,
        history,
    }
}

/// Achieved value of every entry for a controller of the original plants:
/// abscissa for `s`, H2 norm for `t`, H-infinity norm for `h`; `+inf` when
/// the closed loop is unstable or a norm is undefined.
pub fn report_values(ps: &PlantSet, entries: &[Entry], k: &Controller) -> Result<Vec<f64>> {
    if entries.len() != ps.len() {
        return Err(Error::InvalidInput(format!(
            "{} entries for {} plants",
            entries.len(),
            ps.len()
        )));
    }
    let d22 = &ps.plants[0].d22;
    // Controller seen from the shifted measurement.
    let neg = -d22;
    let khat = unshift_controller(k, &neg)?;
    ps.plants
        .iter()
        .zip(entries)
        .map(|(p, e)| {
            let cl = assemble(&shift_feedthrough(p), &khat)?;
            let stable = abscissa_closed_loop(&cl)?.value;
            Ok(match e.kind {
                ObjectiveKind::SpectralAbscissa => stable,
                _ if stable >= 0.0 => f64::INFINITY,
                ObjectiveKind::HTwo => match h2_closed_loop(&cl) {
                    Ok(v) => v.value.sqrt(),
                    Err(Error::NoFiniteH2(_)) | Err(Error::NotHurwitz { .. }) => f64::INFINITY,
                    Err(e) => return Err(e),
                },
                ObjectiveKind::HInf => hinf_closed_loop(&cl)?.value,
            })
        })
        .collect()
}

fn feasible_values(values: &[f64], entries: &[Entry]) -> bool {
    values.iter().zip(entries).all(|(v, e)| {
        let finite = v.is_finite() || e.kind == ObjectiveKind::SpectralAbscissa;
        let stable = e.kind != ObjectiveKind::SpectralAbscissa || *v < 0.0 || e.is_constraint();
        finite && stable && (!e.is_constraint() || *v <= e.bound * (1.0 + FEASIBILITY_RTOL))
    })
}

pub fn synthesize(ps: &PlantSet, spec: &ObjectiveSpec) -> Result<SynthesisReport> {
    let ps = ps.clone().check()?;
    if spec.entries.len() != ps.len() {
        return Err(Error::InvalidInput(format!(
            "{} objective entries for {} plants",
            spec.entries.len(),
            ps.len()
        )));
    }
    let opts = &spec.options;
    let (m2, p2) = ps.interface();
    let d22 = ps.plants[0].d22.clone();
    let shifted: Vec<Plant> = ps.plants.iter().map(shift_feedthrough).collect();

    let h2_plants: Vec<&Plant> = shifted
        .iter()
        .zip(&spec.entries)
        .filter(|(_, e)| e.kind == ObjectiveKind::HTwo)
        .map(|(p, _)| p)
        .collect();
    let pm = if h2_plants.is_empty() {
        ParamMap::canonical(opts.order, m2, p2)
    } else {
        eliminate_feedthrough_all(&h2_plants, opts.order)?
    };
    info!(
        "{} plant(s), order {}, {} free parameters",
        ps.len(),
        opts.order,
        pm.dim()
    );

    let warm = match &opts.warm {
        Some(k) => Some(unshift_controller(k, &(-&d22))?),
        None => None,
    };
    let starts = initial_points(&pm, opts.starts, opts.seed, warm.as_ref())?;
    let problem = Problem {
        plants: shifted,
        entries: &spec.entries,
        pm,
        options: opts,
    };
    let results: Vec<StartResult> = starts
        .par_iter()
        .enumerate()
        .map(|(i, k0)| run_start(&problem, i, k0))
        .collect();

    // Feasible first (by objective), then stable (by violation), then index.
    let rank = |r: &StartResult| -> (u8, f64) {
        if r.feasible {
            (0, r.objective)
        } else if r.stable {
            (1, r.violation)
        } else {
            (2, 0.0)
        }
    };
    let (best_start, best) = results
        .iter()
        .enumerate()
        .min_by(|a, b| {
            let (ra, rb) = (rank(a.1), rank(b.1));
            ra.0.cmp(&rb.0)
                .then(ra.1.total_cmp(&rb.1))
                .then(a.0.cmp(&b.0))
        })
        .expect("at least one start");

    let khat = problem.pm.to_controller(&best.k)?;
    let controller = unshift_controller(&khat, &d22)?;
    let values = report_values(&ps, &spec.entries, &controller)?;
    let feasible = best.stable && feasible_values(&values, &spec.entries);
    let status = if !best.stable {
        Status::NoStabilizingController
    } else if feasible {
        Status::Feasible
    } else {
        Status::Infeasible
    };
    info!(
        "best start {best_start}: {} with values {values:?}",
        status.as_str()
    );

    Ok(SynthesisReport {
        controller,
        values,
        entries: spec.entries.clone(),
        feasible,
        status,
        phases: best.phases,
        best_start,
        histories: results
            .iter()
            .enumerate()
            .map(|(start, r)| History {
                start,
                values: r.history.clone(),
            })
            .collect(),
        seed: opts.seed,
    })
}
