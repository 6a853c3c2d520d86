//! Dense linear-algebra kernels: real Schur form, eigenvalues, the
//! continuous-time Lyapunov equation and singular value decompositions.

use nalgebra::{ComplexField, DMatrix, DVector, Schur};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type CMatrix = DMatrix<Complex64>;

const SCHUR_MAX_SWEEPS: usize = 200;

pub(crate) fn ensure_square(a: &Matrix, what: &str) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::dim(format!(
            "{what} must be square, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(())
}

pub(crate) fn ensure_finite(a: &Matrix, what: &str) -> Result<()> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "{what} has non-finite entries"
        )))
    }
}

/// Real Schur decomposition `a = q * t * q^T` with `t` quasi-upper triangular.
///
/// Entries of `t` below the first subdiagonal are exactly zero and negligible
/// subdiagonal entries are flushed, so every nonzero subdiagonal entry marks a
/// 2x2 diagonal block.
pub fn real_schur(a: &Matrix) -> Result<(Matrix, Matrix)> {
    ensure_square(a, "matrix")?;
    ensure_finite(a, "matrix")?;
    let n = a.nrows();
    if n == 0 {
        return Ok((Matrix::zeros(0, 0), Matrix::zeros(0, 0)));
    }
    let (q, mut t) = match Schur::try_new(a.clone(), f64::EPSILON, SCHUR_MAX_SWEEPS * n) {
        Some(s) => s.unpack(),
        None => {
            // Retry on an orthogonally similar matrix to escape a stagnating
            // shift sequence.
            let h = householder(n);
            let rotated = &h * a * &h;
            let s = Schur::try_new(rotated, f64::EPSILON, SCHUR_MAX_SWEEPS * n)
                .ok_or(Error::NoConvergence(n))?;
            let (q, t) = s.unpack();
            (&h * q, t)
        }
    };
    for j in 0..n {
        for i in (j + 2)..n {
            t[(i, j)] = 0.0;
        }
    }
    for i in 0..n.saturating_sub(1) {
        let scale = t[(i, i)].abs() + t[(i + 1, i + 1)].abs();
        if t[(i + 1, i)].abs() <= f64::EPSILON * scale {
            t[(i + 1, i)] = 0.0;
        }
    }
    for i in 0..n.saturating_sub(2) {
        if t[(i + 1, i)] != 0.0 && t[(i + 2, i + 1)] != 0.0 {
            return Err(Error::NoConvergence(n));
        }
    }
    Ok((q, t))
}

fn householder(n: usize) -> Matrix {
    let v = DVector::from_fn(n, |i, _| 1.0 + (i as f64 * 0.618_033_988_75).fract());
    let v = v.normalize();
    Matrix::identity(n, n) - 2.0 * &v * v.transpose()
}

/// Diagonal blocks of a quasi-triangular matrix as `(start, size)` pairs.
pub(crate) fn schur_blocks(t: &Matrix) -> Vec<(usize, usize)> {
    let n = t.nrows();
    let mut blocks = Vec::with_capacity(n);
    let mut i = 0;
    while i < n {
        if i + 1 < n && t[(i + 1, i)] != 0.0 {
            blocks.push((i, 2));
            i += 2;
        } else {
            blocks.push((i, 1));
            i += 1;
        }
    }
    blocks
}

fn block_eigenvalues(a: f64, b: f64, c: f64, d: f64) -> (Complex64, Complex64) {
    let mean = 0.5 * (a + d);
    let half = 0.5 * (a - d);
    let disc = half * half + b * c;
    if disc >= 0.0 {
        let r = disc.sqrt();
        (Complex64::new(mean + r, 0.0), Complex64::new(mean - r, 0.0))
    } else {
        let r = (-disc).sqrt();
        (Complex64::new(mean, r), Complex64::new(mean, -r))
    }
}

fn eigenvalues_of_schur(t: &Matrix) -> Vec<Complex64> {
    let mut out = Vec::with_capacity(t.nrows());
    for (i, size) in schur_blocks(t) {
        if size == 1 {
            out.push(Complex64::new(t[(i, i)], 0.0));
        } else {
            let (l1, l2) =
                block_eigenvalues(t[(i, i)], t[(i, i + 1)], t[(i + 1, i)], t[(i + 1, i + 1)]);
            out.push(l1);
            out.push(l2);
        }
    }
    out
}

/// All eigenvalues of a real square matrix, complex pairs adjacent.
pub fn eigenvalues(a: &Matrix) -> Result<Vec<Complex64>> {
    let (_, t) = real_schur(a)?;
    Ok(eigenvalues_of_schur(&t))
}

/// Maximum real part over the spectrum; `-inf` for an empty matrix.
pub fn spectral_abscissa(a: &Matrix) -> Result<f64> {
    Ok(eigenvalues(a)?
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Threshold below which the Lyapunov operator of `a` is treated as singular.
pub fn hurwitz_tolerance(a: &Matrix) -> f64 {
    1e-12 * (1.0 + a.norm())
}

/// Solves `a^T x + x a + q = 0` for symmetric `x`.
///
/// `a` must be Hurwitz. The transposed equation `a y + y a^T + q = 0` is
/// solved by passing `a^T`.
pub fn solve_lyapunov(a: &Matrix, q: &Matrix) -> Result<Matrix> {
    ensure_square(a, "A")?;
    ensure_finite(a, "A")?;
    ensure_finite(q, "Q")?;
    let n = a.nrows();
    if q.nrows() != n || q.ncols() != n {
        return Err(Error::dim(format!(
            "Q is {}x{} but A is {n}x{n}",
            q.nrows(),
            q.ncols()
        )));
    }
    if (q - q.transpose()).norm() > 1e-10 * (1.0 + q.norm()) {
        return Err(Error::InvalidInput("Q is not symmetric".into()));
    }
    if n == 0 {
        return Ok(Matrix::zeros(0, 0));
    }
    let (u, t) = real_schur(a)?;
    let abscissa = eigenvalues_of_schur(&t)
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max);
    if abscissa >= -hurwitz_tolerance(a) {
        return Err(Error::NotHurwitz { abscissa });
    }

    // t^T z + z t = -u^T q u, solved block by block in row-major block order.
    let rhs = -(u.transpose() * q * &u);
    let blocks = schur_blocks(&t);
    let mut z = Matrix::zeros(n, n);
    for &(bi, pi) in &blocks {
        for &(bj, qj) in &blocks {
            let mut r = rhs.view((bi, bj), (pi, qj)).clone_owned();
            for &(bk, pk) in blocks.iter().take_while(|b| b.0 < bi) {
                r -= t.view((bk, bi), (pk, pi)).transpose() * z.view((bk, bj), (pk, qj));
            }
            for &(bk, pk) in blocks.iter().take_while(|b| b.0 < bj) {
                r -= z.view((bi, bk), (pi, pk)) * t.view((bk, bj), (pk, qj));
            }
            let tii = t.view((bi, bi), (pi, pi)).clone_owned();
            let tjj = t.view((bj, bj), (qj, qj)).clone_owned();
            let block = solve_small_sylvester(&tii, &tjj, &r)?;
            z.view_mut((bi, bj), (pi, qj)).copy_from(&block);
        }
    }
    let x = &u * z * u.transpose();
    Ok(0.5 * (&x + x.transpose()))
}

/// Solves `l^T z + z r = c` for blocks of size at most 2 via the Kronecker form.
fn solve_small_sylvester(l: &Matrix, r: &Matrix, c: &Matrix) -> Result<Matrix> {
    let p = l.nrows();
    let q = r.nrows();
    let m = p * q;
    let mut k = Matrix::zeros(m, m);
    // vec(l^T z) = (I_q (x) l^T) vec z ; vec(z r) = (r^T (x) I_p) vec z
    for col in 0..q {
        for i in 0..p {
            for j in 0..p {
                k[(col * p + i, col * p + j)] += l[(j, i)];
            }
        }
    }
    for a in 0..q {
        for b in 0..q {
            for i in 0..p {
                k[(a * p + i, b * p + i)] += r[(b, a)];
            }
        }
    }
    let rhs = DVector::from_column_slice(c.as_slice());
    let lu = k.full_piv_lu();
    let sol = lu.solve(&rhs).ok_or(Error::NotHurwitz { abscissa: 0.0 })?;
    Ok(Matrix::from_column_slice(p, q, sol.as_slice()))
}

/// Thin singular value decomposition `m = u * diag(s) * v^T`, `s` descending.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    pub s: DVector<f64>,
    pub v: Matrix,
}

impl Svd {
    /// Numerical rank with threshold `max(rows, cols) * ulp * s[0]`.
    pub fn rank(&self) -> usize {
        let cutoff = rank_threshold(self.u.nrows(), self.v.nrows(), &self.s);
        self.s.iter().filter(|&&x| x > cutoff).count()
    }
}

pub(crate) fn rank_threshold(rows: usize, cols: usize, s: &DVector<f64>) -> f64 {
    let top = s.iter().copied().fold(0.0, f64::max);
    rows.max(cols) as f64 * f64::EPSILON * top
}

pub fn svd(m: &Matrix) -> Result<Svd> {
    ensure_finite(m, "matrix")?;
    let (u, s, v) = thin_svd(m);
    Ok(Svd { u, s, v })
}

/// Full decomposition: `u` is rows x rows, `v` is cols x cols and the
/// singular values (length `min(rows, cols)`) are descending.
pub fn svd_full(m: &Matrix) -> Result<Svd> {
    let Svd { u, s, v } = svd(m)?;
    Ok(Svd {
        u: complete_basis(u),
        s,
        v: complete_basis(v),
    })
}

/// Moore-Penrose pseudo-inverse with the standard rank threshold.
pub fn pseudo_inverse(m: &Matrix) -> Result<Matrix> {
    let dec = svd(m)?;
    let cutoff = rank_threshold(m.nrows(), m.ncols(), &dec.s);
    let mut out = Matrix::zeros(m.ncols(), m.nrows());
    for (i, &s) in dec.s.iter().enumerate() {
        if s > cutoff {
            out += dec.v.column(i) * dec.u.column(i).transpose() / s;
        }
    }
    Ok(out)
}

// nalgebra's bidiagonal SVD occasionally returns factors that do not
// reproduce the input (seen on rank-deficient matrices), so decompositions
// go through one-sided Jacobi instead. The sizes here are small.

const JACOBI_MAX_SWEEPS: usize = 80;

/// One-sided Jacobi on the columns of `w` (rows >= cols). On return the
/// columns of `w` are mutually orthogonal and `w = a * v` for the unitary
/// `v` returned.
fn jacobi_columns<T>(w: &mut DMatrix<T>) -> DMatrix<T>
where
    T: ComplexField<RealField = f64> + Copy,
{
    let n = w.ncols();
    let mut v = DMatrix::<T>::identity(n, n);
    let tol = f64::EPSILON * (w.nrows().max(1) as f64);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = w.column(p).norm_squared();
                let beta = w.column(q).norm_squared();
                let gamma = w.column(p).dotc(&w.column(q));
                let g = gamma.modulus();
                if g == 0.0 || g <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let phase = gamma.unscale(g).conjugate();
                let zeta = (beta - alpha) / (2.0 * g);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(w, p, q, c, s, phase);
                rotate(&mut v, p, q, c, s, phase);
            }
        }
        if !rotated {
            break;
        }
    }
    v
}

/// `[x_p, x_q] <- [c x_p - s phase x_q, s x_p + c phase x_q]`.
fn rotate<T>(x: &mut DMatrix<T>, p: usize, q: usize, c: f64, s: f64, phase: T)
where
    T: ComplexField<RealField = f64> + Copy,
{
    for i in 0..x.nrows() {
        let (xp, xq) = (x[(i, p)], x[(i, q)] * phase);
        x[(i, p)] = xp.scale(c) - xq.scale(s);
        x[(i, q)] = xp.scale(s) + xq.scale(c);
    }
}

/// Thin SVD `m = u diag(s) v^H` with `s` descending.
fn thin_svd<T>(m: &DMatrix<T>) -> (DMatrix<T>, DVector<f64>, DMatrix<T>)
where
    T: ComplexField<RealField = f64> + Copy,
{
    let (rows, cols) = m.shape();
    if rows.min(cols) == 0 {
        return (
            DMatrix::zeros(rows, 0),
            DVector::zeros(0),
            DMatrix::zeros(cols, 0),
        );
    }
    let wide = rows < cols;
    let mut w = if wide { m.adjoint() } else { m.clone() };
    let v = jacobi_columns(&mut w);
    let k = w.ncols();
    let norms: Vec<f64> = (0..k).map(|j| w.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let s = DVector::from_iterator(k, order.iter().map(|&j| norms[j]));
    let mut left = DMatrix::<T>::zeros(w.nrows(), k);
    let mut right = DMatrix::<T>::zeros(k, k);
    let mut filled = 0;
    for (dst, &j) in order.iter().enumerate() {
        right.set_column(dst, &v.column(j));
        if norms[j] > 0.0 {
            left.set_column(dst, &w.column(j).unscale(norms[j]));
            filled += 1;
        }
    }
    // Zero singular values leave zero columns; fill them orthonormally.
    let left = complete_basis(left.columns(0, filled).into_owned())
        .columns(0, k)
        .into_owned();
    if wide {
        (right, s, left)
    } else {
        (left, s, right)
    }
}

/// Extends orthonormal columns to an orthonormal basis of the whole space.
fn complete_basis<T>(q: DMatrix<T>) -> DMatrix<T>
where
    T: ComplexField<RealField = f64> + Copy,
{
    let n = q.nrows();
    let mut cols: Vec<DVector<T>> = q.column_iter().map(|c| c.into_owned()).collect();
    while cols.len() < n {
        // The unit vector least represented in the current span.
        let mut best: Option<(f64, DVector<T>)> = None;
        for i in 0..n {
            let mut e = DVector::<T>::zeros(n);
            e[i] = T::one();
            for _ in 0..2 {
                for c in &cols {
                    let proj = c.dotc(&e);
                    e -= c * proj;
                }
            }
            let norm = e.norm();
            if best.as_ref().is_none_or(|(b, _)| norm > *b) {
                best = Some((norm, e));
            }
        }
        let (norm, e) = best.expect("n > 0");
        cols.push(e.unscale(norm));
    }
    if cols.is_empty() {
        return DMatrix::zeros(n, 0);
    }
    DMatrix::from_columns(&cols)
}

pub(crate) fn to_complex(m: &Matrix) -> CMatrix {
    m.map(|x| Complex64::new(x, 0.0))
}

/// Unit vectors spanning the (numerical) null space of `m`: the right and
/// left singular vectors of its smallest singular value.
pub(crate) fn complex_null_pair(m: &CMatrix) -> (DVector<Complex64>, DVector<Complex64>) {
    let smallest = |m: &CMatrix| {
        let (_, _, v) = thin_svd(m);
        v.column(v.ncols() - 1).into_owned()
    };
    let right = smallest(m);
    let left = smallest(&m.adjoint());
    (
        inverse_iteration(m, right),
        inverse_iteration(&m.adjoint(), left),
    )
}

/// Two steps of inverse iteration to polish an approximate null vector.
fn inverse_iteration(m: &CMatrix, mut v: DVector<Complex64>) -> DVector<Complex64> {
    let lu = m.clone().lu();
    for _ in 0..2 {
        let Some(z) = lu.solve(&v) else { break };
        let norm = z.norm();
        if !norm.is_finite() || norm == 0.0 {
            break;
        }
        v = z / Complex64::new(norm, 0.0);
    }
    v
}

/// Largest singular value of a complex matrix with its singular vectors
/// `(sigma, u, v)`, so that `m v = sigma u`.
pub(crate) fn complex_top_singular(m: &CMatrix) -> (f64, DVector<Complex64>, DVector<Complex64>) {
    let (u, s, v) = thin_svd(m);
    (s[0], u.column(0).into_owned(), v.column(0).into_owned())
}
