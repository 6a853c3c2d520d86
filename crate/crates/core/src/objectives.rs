//! Closed-loop objectives and their gradients in the free parameters.
//!
//! Every objective is computed on the [`ClosedLoop`] first, as a value plus
//! the Euclidean gradient with respect to the closed-loop matrices, then
//! pulled back through [`controller_gradient`] and the [`ParamMap`]. Norms
//! are only evaluated after a stability check; an unstable closed loop yields
//! `+inf` without a gradient.

use std::fmt;

use nalgebra::DVector;
use num_complex::Complex64;

use crate::closedloop::{assemble, controller_gradient, ClosedLoop, ClosedLoopGradient, ParamMap};
use crate::error::{Error, Result};
use crate::numerics::{
    complex_null_pair, complex_top_singular, eigenvalues, solve_lyapunov, svd, to_complex, CMatrix,
    Matrix,
};
use crate::plant::Plant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObjectiveKind {
    /// `'s'`: maximum real part of the closed-loop eigenvalues.
    SpectralAbscissa,
    /// `'t'`: H2 norm (squared by [`h2_squared`]).
    HTwo,
    /// `'h'`: H-infinity norm.
    HInf,
}

impl ObjectiveKind {
    pub fn from_char(c: char) -> Result<ObjectiveKind> {
        match c {
            's' => Ok(ObjectiveKind::SpectralAbscissa),
            't' => Ok(ObjectiveKind::HTwo),
            'h' => Ok(ObjectiveKind::HInf),
            other => Err(Error::InvalidInput(format!(
                "unknown objective '{other}', expected one of s, t, h"
            ))),
        }
    }

    pub fn as_char(self) -> char {
        match self {
            ObjectiveKind::SpectralAbscissa => 's',
            ObjectiveKind::HTwo => 't',
            ObjectiveKind::HInf => 'h',
        }
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Diagnostics {
    None,
    /// The eigenvalue attaining the abscissa.
    Abscissa {
        eigenvalue: Complex64,
    },
    /// Both trace forms of the squared H2 norm, `trace(C Wc C^T)` and
    /// `trace(B^T Wo B)`, with the controllability and observability
    /// Gramians.
    HTwo {
        trace_c: f64,
        trace_b: f64,
        controllability: Matrix,
        observability: Matrix,
    },
    /// Frequency of the H-infinity peak (`inf` when the peak is the
    /// feedthrough at infinite frequency).
    HInf {
        peak_frequency: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: Option<DVector<f64>>,
    pub diagnostics: Diagnostics,
}

impl Evaluation {
    pub fn unstable() -> Evaluation {
        Evaluation {
            value: f64::INFINITY,
            gradient: None,
            diagnostics: Diagnostics::None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
    }
}

/// Value, closed-loop gradient and diagnostics of one objective.
#[derive(Debug, Clone)]
pub struct ClosedLoopValue {
    pub value: f64,
    pub gradient: Option<ClosedLoopGradient>,
    pub diagnostics: Diagnostics,
}

impl ClosedLoopValue {
    fn unstable() -> ClosedLoopValue {
        ClosedLoopValue {
            value: f64::INFINITY,
            gradient: None,
            diagnostics: Diagnostics::None,
        }
    }
}

fn zero_gradient(cl: &ClosedLoop) -> ClosedLoopGradient {
    ClosedLoopGradient {
        a: Matrix::zeros(cl.a.nrows(), cl.a.ncols()),
        b: Matrix::zeros(cl.b.nrows(), cl.b.ncols()),
        c: Matrix::zeros(cl.c.nrows(), cl.c.ncols()),
        d: Matrix::zeros(cl.d.nrows(), cl.d.ncols()),
    }
}

/// Rightmost eigenvalue, ties broken toward the larger imaginary part.
fn rightmost(a: &Matrix) -> Result<Option<Complex64>> {
    let ev = eigenvalues(a)?;
    Ok(ev.into_iter().reduce(|best, l| {
        if l.re > best.re || (l.re == best.re && l.im > best.im) {
            l
        } else {
            best
        }
    }))
}

pub fn abscissa_closed_loop(cl: &ClosedLoop) -> Result<ClosedLoopValue> {
    let n = cl.a.nrows();
    let Some(lambda) = rightmost(&cl.a)? else {
        return Ok(ClosedLoopValue {
            value: f64::NEG_INFINITY,
            gradient: Some(zero_gradient(cl)),
            diagnostics: Diagnostics::None,
        });
    };
    // d(lambda) = y^H dA x / (y^H x)
    let shifted = to_complex(&cl.a) - CMatrix::identity(n, n) * lambda;
    let (x, y) = complex_null_pair(&shifted);
    let s = y.dotc(&x);
    let mut g = zero_gradient(cl);
    for i in 0..n {
        for j in 0..n {
            g.a[(i, j)] = (y[i].conj() * x[j] / s).re;
        }
    }
    Ok(ClosedLoopValue {
        value: lambda.re,
        gradient: Some(g),
        diagnostics: Diagnostics::Abscissa { eigenvalue: lambda },
    })
}

/// Squared H2 norm of a strictly proper closed loop.
pub fn h2_closed_loop(cl: &ClosedLoop) -> Result<ClosedLoopValue> {
    if cl.d.norm() > 1e-12 * (1.0 + cl.b.norm() * cl.c.norm()) {
        return Err(Error::NoFiniteH2(format!(
            "closed-loop feedthrough is nonzero ({:e})",
            cl.d.norm()
        )));
    }
    if let Some(l) = rightmost(&cl.a)? {
        if l.re >= 0.0 {
            return Ok(ClosedLoopValue::unstable());
        }
    }
    // A Wc + Wc A^T + B B^T = 0 and A^T Wo + Wo A + C^T C = 0
    let wc = solve_lyapunov(&cl.a.transpose(), &(&cl.b * cl.b.transpose()))?;
    let wo = solve_lyapunov(&cl.a, &(cl.c.transpose() * &cl.c))?;
    let trace_c = (&cl.c * &wc * cl.c.transpose()).trace();
    let trace_b = (cl.b.transpose() * &wo * &cl.b).trace();
    let g = ClosedLoopGradient {
        a: 2.0 * &wo * &wc,
        b: 2.0 * &wo * &cl.b,
        c: 2.0 * &cl.c * &wc,
        d: Matrix::zeros(cl.d.nrows(), cl.d.ncols()),
    };
    Ok(ClosedLoopValue {
        value: trace_c,
        gradient: Some(g),
        diagnostics: Diagnostics::HTwo {
            trace_c,
            trace_b,
            controllability: wc,
            observability: wo,
        },
    })
}

/// `C (jw I - A)^-1 B + D`.
pub fn frequency_response(cl: &ClosedLoop, omega: f64) -> CMatrix {
    let n = cl.a.nrows();
    let mut t = to_complex(&cl.d);
    if n > 0 {
        let m = CMatrix::identity(n, n) * Complex64::new(0.0, omega) - to_complex(&cl.a);
        let rb = m.lu().solve(&to_complex(&cl.b)).unwrap_or_else(|| {
            CMatrix::from_element(n, cl.b.ncols(), Complex64::new(f64::INFINITY, 0.0))
        });
        t += to_complex(&cl.c) * rb;
    }
    t
}

/// Top singular triple of the frequency response plus the resolvent products
/// `q = u^H C R` (row) and `p = R B v` where `R = (jw I - A)^-1`.
struct PeakData {
    sigma: f64,
    u: DVector<Complex64>,
    v: DVector<Complex64>,
    q: DVector<Complex64>,
    p: DVector<Complex64>,
}

struct Response<'a> {
    cl: &'a ClosedLoop,
    ca: CMatrix,
    cb: CMatrix,
    cc: CMatrix,
    cd: CMatrix,
}

impl<'a> Response<'a> {
    fn new(cl: &'a ClosedLoop) -> Self {
        Response {
            cl,
            ca: to_complex(&cl.a),
            cb: to_complex(&cl.b),
            cc: to_complex(&cl.c),
            cd: to_complex(&cl.d),
        }
    }

    fn resolvent_lu(&self, omega: f64) -> nalgebra::LU<Complex64, nalgebra::Dyn, nalgebra::Dyn> {
        let n = self.cl.a.nrows();
        (CMatrix::identity(n, n) * Complex64::new(0.0, omega) - &self.ca).lu()
    }

    fn sigma(&self, omega: f64) -> f64 {
        let lu = self.resolvent_lu(omega);
        match lu.solve(&self.cb) {
            Some(rb) => {
                let t = &self.cc * rb + &self.cd;
                complex_top_singular(&t).0
            }
            None => f64::INFINITY,
        }
    }

    fn peak_data(&self, omega: f64) -> PeakData {
        let lu = self.resolvent_lu(omega);
        let rb = lu
            .solve(&self.cb)
            .expect("stable closed loop has no imaginary poles");
        let t = &self.cc * &rb + &self.cd;
        let (sigma, u, v) = complex_top_singular(&t);
        let p = &rb * &v;
        // q^T = (u^H C R)^T solves (jw I - A)^T q = C^T conj(u)
        let n = self.cl.a.nrows();
        let mt = (CMatrix::identity(n, n) * Complex64::new(0.0, omega) - &self.ca).transpose();
        let q = mt
            .lu()
            .solve(&(self.cc.transpose() * u.map(|z| z.conj())))
            .expect("stable closed loop has no imaginary poles");
        PeakData { sigma, u, v, q, p }
    }

    /// `d sigma / d omega = Im(q . p)`.
    fn slope(&self, omega: f64) -> f64 {
        let d = self.peak_data(omega);
        d.q.iter()
            .zip(d.p.iter())
            .map(|(a, b)| a * b)
            .sum::<Complex64>()
            .im
    }
}

/// Imaginary-axis eigenvalue frequencies of the Hamiltonian at level `gamma`.
fn crossing_frequencies(cl: &ClosedLoop, gamma: f64) -> Result<Vec<f64>> {
    let n = cl.a.nrows();
    let (m, p) = (cl.b.ncols(), cl.c.nrows());
    let r = Matrix::identity(m, m) * (gamma * gamma) - cl.d.transpose() * &cl.d;
    let r_inv = r
        .try_inverse()
        .ok_or_else(|| Error::InvalidInput("gamma does not exceed the feedthrough gain".into()))?;
    let ah = &cl.a + &cl.b * &r_inv * cl.d.transpose() * &cl.c;
    let top_right = &cl.b * &r_inv * cl.b.transpose();
    let weight = Matrix::identity(p, p) + &cl.d * &r_inv * cl.d.transpose();
    let bottom_left = -(cl.c.transpose() * weight * &cl.c);
    let mut h = Matrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(&ah);
    h.view_mut((0, n), (n, n)).copy_from(&top_right);
    h.view_mut((n, 0), (n, n)).copy_from(&bottom_left);
    h.view_mut((n, n), (n, n)).copy_from(&(-ah.transpose()));
    let tol = 1e-8 * (1.0 + h.norm());
    let mut freqs: Vec<f64> = eigenvalues(&h)?
        .into_iter()
        .filter(|l| l.re.abs() <= tol)
        .map(|l| l.im.abs())
        .collect();
    freqs.sort_by(f64::total_cmp);
    freqs.dedup();
    Ok(freqs)
}

const HINF_RTOL: f64 = 1e-8;

/// H-infinity norm of a stable closed loop with its peak frequency.
///
/// The level `gamma` is bisected using the Hamiltonian test; each test also
/// evaluates the response at the crossing frequencies (and between them) to
/// raise the lower bound. The peak found last is polished by locating the zero
/// of `d sigma / d omega`.
pub fn hinf_value(cl: &ClosedLoop) -> Result<(f64, f64)> {
    let n = cl.a.nrows();
    let dmax = if cl.d.is_empty() {
        0.0
    } else {
        svd(&cl.d)?.s[0]
    };
    if n == 0 || cl.b.ncols() == 0 || cl.c.nrows() == 0 {
        return Ok((dmax, f64::INFINITY));
    }
    let resp = Response::new(cl);
    let poles = eigenvalues(&cl.a)?;

    let mut best = (dmax, f64::INFINITY);
    let consider = |omega: f64, best: &mut (f64, f64)| {
        let s = resp.sigma(omega);
        if s > best.0 {
            *best = (s, omega);
        }
    };

    // Coarse grid spanning the pole magnitudes, plus resonance candidates.
    let mags: Vec<f64> = poles
        .iter()
        .map(|l| l.norm())
        .filter(|&m| m > 0.0)
        .collect();
    let wmin = 0.1 * mags.iter().copied().fold(f64::INFINITY, f64::min).min(1.0);
    let wmax = 10.0 * mags.iter().copied().fold(0.0, f64::max).max(1.0);
    consider(0.0, &mut best);
    for i in 0..32 {
        let t = i as f64 / 31.0;
        consider(wmin * (wmax / wmin).powf(t), &mut best);
    }
    for l in &poles {
        consider(l.im.abs(), &mut best);
        consider(l.norm(), &mut best);
    }

    if best.0 == 0.0 {
        return Ok((0.0, f64::INFINITY));
    }

    let mut lo = best.0;
    let mut hi = 2.0 * lo;
    let probe = |gamma: f64, best: &mut (f64, f64)| -> Result<bool> {
        let freqs = crossing_frequencies(cl, gamma)?;
        if freqs.is_empty() {
            return Ok(false);
        }
        let mut top = 0.0f64;
        let mut points = freqs.clone();
        points.extend(freqs.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        for w in points {
            let s = resp.sigma(w);
            top = top.max(s);
            if s > best.0 {
                *best = (s, w);
            }
        }
        Ok(top >= gamma * (1.0 - 1e-6))
    };
    while probe(hi, &mut best)? {
        lo = lo.max(best.0);
        hi *= 2.0;
        if !hi.is_finite() {
            return Ok((f64::INFINITY, best.1));
        }
    }
    lo = lo.max(best.0);
    while hi - lo > HINF_RTOL * lo {
        let mid = 0.5 * (lo + hi);
        if probe(mid, &mut best)? {
            lo = mid.max(best.0);
        } else {
            hi = mid;
        }
        lo = lo.max(best.0);
    }

    if best.1.is_infinite() {
        return Ok(best);
    }
    let omega = polish_peak(&resp, best.1, wmax);
    let refined = resp.sigma(omega);
    if refined >= best.0 {
        Ok((refined, omega))
    } else {
        Ok(best)
    }
}

/// Bisection on the sign of `d sigma / d omega` around a near-peak frequency.
fn polish_peak(resp: &Response<'_>, omega0: f64, scale: f64) -> f64 {
    let g0 = resp.slope(omega0);
    if g0 == 0.0 {
        return omega0;
    }
    let mut step = 1e-6 * omega0.max(1e-3 * scale);
    let (mut a, mut b);
    if g0 > 0.0 {
        a = omega0;
        b = omega0 + step;
        let mut k = 0;
        while resp.slope(b) > 0.0 {
            a = b;
            step *= 2.0;
            b += step;
            k += 1;
            if k > 200 {
                return omega0;
            }
        }
    } else {
        b = omega0;
        a = (omega0 - step).max(0.0);
        let mut k = 0;
        while a > 0.0 && resp.slope(a) < 0.0 {
            b = a;
            step *= 2.0;
            a = (a - step).max(0.0);
            k += 1;
            if k > 200 {
                return omega0;
            }
        }
        if a == 0.0 && resp.sigma(0.0) >= resp.sigma(b) {
            // Monotone decrease from DC: check the DC value against the bracket.
            if resp.slope(f64::MIN_POSITIVE.max(1e-12 * b)) <= 0.0 {
                return 0.0;
            }
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            break;
        }
        if resp.slope(mid) > 0.0 {
            a = mid;
        } else {
            b = mid;
        }
    }
    0.5 * (a + b)
}

pub fn hinf_closed_loop(cl: &ClosedLoop) -> Result<ClosedLoopValue> {
    if let Some(l) = rightmost(&cl.a)? {
        if l.re >= 0.0 {
            return Ok(ClosedLoopValue::unstable());
        }
    }
    let (value, omega) = hinf_value(cl)?;
    let mut g = zero_gradient(cl);
    if omega.is_finite() {
        let d = Response::new(cl).peak_data(omega);
        for i in 0..g.a.nrows() {
            for j in 0..g.a.ncols() {
                g.a[(i, j)] = (d.q[i] * d.p[j]).re;
            }
            for j in 0..g.b.ncols() {
                g.b[(i, j)] = (d.q[i] * d.v[j]).re;
            }
        }
        for i in 0..g.c.nrows() {
            for j in 0..g.c.ncols() {
                g.c[(i, j)] = (d.u[i].conj() * d.p[j]).re;
            }
        }
        for i in 0..g.d.nrows() {
            for j in 0..g.d.ncols() {
                g.d[(i, j)] = (d.u[i].conj() * d.v[j]).re;
            }
        }
        debug_assert!((d.sigma - value).abs() <= 1e-6 * (1.0 + value));
    } else if !cl.d.is_empty() {
        let dec = svd(&cl.d)?;
        g.d = dec.u.column(0) * dec.v.column(0).transpose();
    }
    Ok(ClosedLoopValue {
        value,
        gradient: Some(g),
        diagnostics: Diagnostics::HInf {
            peak_frequency: omega,
        },
    })
}

fn pull_back(p: &Plant, pm: &ParamMap, v: ClosedLoopValue) -> Evaluation {
    let gradient = v
        .gradient
        .filter(|_| v.value.is_finite())
        .map(|g| pm.pull_back(&controller_gradient(p, pm.nk, &g)));
    Evaluation {
        value: v.value,
        gradient,
        diagnostics: v.diagnostics,
    }
}

fn closed_loop(p: &Plant, pm: &ParamMap, k: &DVector<f64>) -> Result<ClosedLoop> {
    assemble(p, &pm.to_controller(k)?)
}

pub fn spectral_abscissa(p: &Plant, pm: &ParamMap, k: &DVector<f64>) -> Result<Evaluation> {
    let cl = closed_loop(p, pm, k)?;
    Ok(pull_back(p, pm, abscissa_closed_loop(&cl)?))
}

/// Squared closed-loop H2 norm. `pm` must enforce zero closed-loop
/// feedthrough (see [`crate::closedloop::eliminate_feedthrough`]).
pub fn h2_squared(p: &Plant, pm: &ParamMap, k: &DVector<f64>) -> Result<Evaluation> {
    let cl = closed_loop(p, pm, k)?;
    Ok(pull_back(p, pm, h2_closed_loop(&cl)?))
}

pub fn hinf_norm(p: &Plant, pm: &ParamMap, k: &DVector<f64>) -> Result<Evaluation> {
    let cl = closed_loop(p, pm, k)?;
    Ok(pull_back(p, pm, hinf_closed_loop(&cl)?))
}

pub fn evaluate(
    kind: ObjectiveKind,
    p: &Plant,
    pm: &ParamMap,
    k: &DVector<f64>,
) -> Result<Evaluation> {
    match kind {
        ObjectiveKind::SpectralAbscissa => spectral_abscissa(p, pm, k),
        ObjectiveKind::HTwo => h2_squared(p, pm, k),
        ObjectiveKind::HInf => hinf_norm(p, pm, k),
    }
}
