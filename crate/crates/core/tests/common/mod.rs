//! Random systems and brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use fosynth::closedloop::{ClosedLoop, Controller};
use fosynth::plant::Plant;
use fosynth::Matrix;
use nalgebra::{dmatrix, DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type CMatrix = DMatrix<Complex64>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

/// Largest real part of the eigenvalues via the characteristic roots of the
/// complex Schur form computed by nalgebra.
pub fn abscissa(a: &Matrix) -> f64 {
    if a.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    a.clone()
        .complex_eigenvalues()
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Random Hurwitz matrix with abscissa `-margin`.
pub fn stable_matrix(rng: &mut ChaCha8Rng, n: usize, margin: f64) -> Matrix {
    let m = gaussian(rng, n, n) / (n as f64).sqrt();
    let shift = abscissa(&m) + margin;
    m - Matrix::identity(n, n) * shift
}

pub struct Dims {
    pub n: usize,
    pub m1: usize,
    pub m2: usize,
    pub p1: usize,
    pub p2: usize,
}

pub fn random_dims(rng: &mut ChaCha8Rng, max_n: usize) -> Dims {
    Dims {
        n: rng.random_range(1..=max_n),
        m1: rng.random_range(1..=3),
        m2: rng.random_range(1..=2),
        p1: rng.random_range(1..=3),
        p2: rng.random_range(1..=2),
    }
}

/// Plant with a stable `A` and all blocks random except `D22 = 0`.
pub fn random_plant(rng: &mut ChaCha8Rng, d: &Dims) -> Plant {
    let margin = rng.random_range(0.1..1.0);
    let a = stable_matrix(rng, d.n, margin);
    Plant {
        name: "random".into(),
        a,
        b1: gaussian(rng, d.n, d.m1),
        b2: gaussian(rng, d.n, d.m2),
        c1: gaussian(rng, d.p1, d.n),
        c2: gaussian(rng, d.p2, d.n),
        d11: gaussian(rng, d.p1, d.m1),
        d12: gaussian(rng, d.p1, d.m2),
        d21: gaussian(rng, d.p2, d.m1),
        d22: Matrix::zeros(d.p2, d.m2),
    }
}

pub fn random_controller(
    rng: &mut ChaCha8Rng,
    nk: usize,
    m2: usize,
    p2: usize,
    scale: f64,
) -> Controller {
    Controller {
        ak: stable_matrix(rng, nk, 0.5),
        bk: gaussian(rng, nk, p2) * scale,
        ck: gaussian(rng, m2, nk) * scale,
        dk: gaussian(rng, m2, p2) * scale,
    }
}

/// The scalar example: `x' = -x + w + u`, `z = [x; u]`, `y = x`.
pub fn scalar_plant() -> Plant {
    Plant {
        name: "scalar".into(),
        a: dmatrix![-1.0],
        b1: dmatrix![1.0],
        b2: dmatrix![1.0],
        c1: dmatrix![1.0; 0.0],
        c2: dmatrix![1.0],
        d11: dmatrix![0.0; 0.0],
        d12: dmatrix![0.0; 1.0],
        d21: dmatrix![0.0],
        d22: dmatrix![0.0],
    }
}

/// Undamped oscillator with H2 performance on position and control.
pub fn p2_plant() -> Plant {
    Plant {
        name: "p2".into(),
        a: dmatrix![0.0, 1.0; -1.0, 0.0],
        b1: Matrix::identity(2, 2),
        b2: dmatrix![0.0; 1.0],
        c1: dmatrix![1.0, 0.0; 0.0, 0.0],
        c2: dmatrix![0.0, 1.0],
        d11: Matrix::zeros(2, 2),
        d12: dmatrix![0.0; 1.0],
        d21: dmatrix![0.0, 0.0],
        d22: dmatrix![0.0],
    }
}

/// Same oscillator, disturbance to velocity output.
pub fn pinf_plant() -> Plant {
    Plant {
        name: "pinf".into(),
        a: dmatrix![0.0, 1.0; -1.0, 0.0],
        b1: dmatrix![1.0; 0.0],
        b2: dmatrix![0.0; 1.0],
        c1: dmatrix![0.0, 1.0],
        c2: dmatrix![0.0, 1.0],
        d11: dmatrix![0.0],
        d12: dmatrix![0.0],
        d21: dmatrix![0.0],
        d22: dmatrix![0.0],
    }
}

fn complex(m: &Matrix) -> CMatrix {
    m.map(|x| Complex64::new(x, 0.0))
}

/// `C (sI - A)^{-1} B + D` by a dense complex LU solve.
pub fn transfer(a: &Matrix, b: &Matrix, c: &Matrix, d: &Matrix, s: Complex64) -> CMatrix {
    let n = a.nrows();
    if n == 0 {
        return complex(d);
    }
    let m = CMatrix::identity(n, n) * s - complex(a);
    let x = m.lu().solve(&complex(b)).expect("s is not an eigenvalue");
    complex(c) * x + complex(d)
}

pub fn sigma_max(g: &CMatrix) -> f64 {
    if g.is_empty() {
        return 0.0;
    }
    g.clone().singular_values().max()
}

pub fn sigma_at(cl: &ClosedLoop, w: f64) -> f64 {
    sigma_max(&transfer(
        &cl.a,
        &cl.b,
        &cl.c,
        &cl.d,
        Complex64::new(0.0, w),
    ))
}

/// Largest singular value over a log-spaced grid on `[1e-4, 1e4]` plus
/// `0` and a large frequency, refined by golden-section search around every
/// grid local maximum within half of the grid peak.
pub fn hinf_grid(cl: &ClosedLoop, points: usize) -> f64 {
    let mut w: Vec<f64> = (0..points)
        .map(|i| 10f64.powf(-4.0 + 8.0 * i as f64 / (points - 1) as f64))
        .collect();
    w.insert(0, 0.0);
    w.push(1e8);
    let s: Vec<f64> = w.iter().map(|&x| sigma_at(cl, x)).collect();
    let peak = s.iter().cloned().fold(0.0, f64::max);
    let mut best = peak;
    for i in 1..w.len() - 1 {
        if s[i] >= s[i - 1] && s[i] >= s[i + 1] && s[i] >= 0.5 * peak {
            best = best.max(golden(|x| sigma_at(cl, x), w[i - 1], w[i + 1]));
        }
    }
    best
}

fn golden(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - r * (hi - lo);
    let mut x2 = lo + r * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..200 {
        if hi - lo <= 1e-14 * hi {
            break;
        }
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + r * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - r * (hi - lo);
            f1 = f(x1);
        }
    }
    f1.max(f2)
}

/// Solves `A^T X + X A + Q = 0` through the `n^2` Kronecker system.
pub fn lyapunov_kron(a: &Matrix, q: &Matrix) -> Matrix {
    let n = a.nrows();
    let i = Matrix::identity(n, n);
    let big = i.kronecker(&a.transpose()) + a.transpose().kronecker(&i);
    let rhs = DVector::from_column_slice((-q).as_slice());
    let x = big.lu().solve(&rhs).expect("nonsingular Lyapunov operator");
    Matrix::from_column_slice(n, n, x.as_slice())
}

/// Closed-loop transfer at `s` from the four plant blocks and a dynamic
/// controller, as a lower linear fractional transformation.
pub fn lft(p: &Plant, k: &Controller, s: Complex64) -> CMatrix {
    let blk = |c: &Matrix, b: &Matrix, d: &Matrix| transfer(&p.a, b, c, d, s);
    let p11 = blk(&p.c1, &p.b1, &p.d11);
    let p12 = blk(&p.c1, &p.b2, &p.d12);
    let p21 = blk(&p.c2, &p.b1, &p.d21);
    let p22 = blk(&p.c2, &p.b2, &p.d22);
    let kk = transfer(&k.ak, &k.bk, &k.ck, &k.dk, s);
    let m2 = kk.nrows();
    let inner = CMatrix::identity(m2, m2) - &kk * &p22;
    let u = inner
        .lu()
        .solve(&(kk * p21))
        .expect("well-posed interconnection");
    p11 + p12 * u
}

/// Central-difference gradient with steps `1e-6 (1 + |k_i|)`.
pub fn central_difference(f: impl Fn(&DVector<f64>) -> f64, k: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(k.len(), |i, _| {
        let h = 1e-6 * (1.0 + k[i].abs());
        let mut kp = k.clone();
        let mut km = k.clone();
        kp[i] += h;
        km[i] -= h;
        (f(&kp) - f(&km)) / (2.0 * h)
    })
}

/// Writes one line to stdout outside the test harness capture.
pub fn report(line: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
}
