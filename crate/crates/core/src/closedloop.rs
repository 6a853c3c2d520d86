//! Controller parameterization and closed-loop assembly.
//!
//! A controller `dx_K = A_K x_K + B_K y`, `u = C_K x_K + D_K y` is packed into
//! a flat vector by stacking `A_K`, `B_K`, `C_K` and `D_K`, each column-major,
//! in that order. A [`ParamMap`] restricts controllers to an affine subspace
//! `base + basis * k` with orthonormal basis columns, which is how the
//! zero-feedthrough condition `D11 + D12 D_K D21 = 0` of the H2 norm is
//! eliminated.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::numerics::{ensure_finite, svd, svd_full, Matrix};
use crate::plant::{json_object, matrix_json, parse_error, Plant, Rows};

#[derive(Debug, Clone, PartialEq)]
pub struct Controller {
    pub ak: Matrix,
    pub bk: Matrix,
    pub ck: Matrix,
    pub dk: Matrix,
}

impl Controller {
    pub fn zeros(nk: usize, m2: usize, p2: usize) -> Controller {
        Controller {
            ak: Matrix::zeros(nk, nk),
            bk: Matrix::zeros(nk, p2),
            ck: Matrix::zeros(m2, nk),
            dk: Matrix::zeros(m2, p2),
        }
    }

    /// Static output feedback `u = D_K y`.
    pub fn static_gain(dk: Matrix) -> Controller {
        let (m2, p2) = dk.shape();
        Controller {
            dk,
            ..Controller::zeros(0, m2, p2)
        }
    }

    pub fn order(&self) -> usize {
        self.ak.nrows()
    }

    /// `(nk, m2, p2)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.ak.nrows(), self.dk.nrows(), self.dk.ncols())
    }

    fn check_shape(&self) -> Result<()> {
        let (nk, m2, p2) = self.shape();
        let ok = self.ak.shape() == (nk, nk)
            && self.bk.shape() == (nk, p2)
            && self.ck.shape() == (m2, nk)
            && self.dk.shape() == (m2, p2);
        if ok {
            Ok(())
        } else {
            Err(Error::dim(format!(
                "inconsistent controller blocks AK {:?}, BK {:?}, CK {:?}, DK {:?}",
                self.ak.shape(),
                self.bk.shape(),
                self.ck.shape(),
                self.dk.shape()
            )))
        }
    }

    pub fn pack(&self) -> DVector<f64> {
        let parts = [&self.ak, &self.bk, &self.ck, &self.dk];
        DVector::from_iterator(
            parts.iter().map(|m| m.len()).sum(),
            parts.iter().flat_map(|m| m.iter().copied()),
        )
    }

    pub fn unpack(nk: usize, m2: usize, p2: usize, v: &[f64]) -> Result<Controller> {
        let sizes = [nk * nk, nk * p2, m2 * nk, m2 * p2];
        let total: usize = sizes.iter().sum();
        if v.len() != total {
            return Err(Error::dim(format!(
                "controller vector has length {}, expected {total}",
                v.len()
            )));
        }
        let (a, rest) = v.split_at(sizes[0]);
        let (b, rest) = rest.split_at(sizes[1]);
        let (c, d) = rest.split_at(sizes[2]);
        Ok(Controller {
            ak: Matrix::from_column_slice(nk, nk, a),
            bk: Matrix::from_column_slice(nk, p2, b),
            ck: Matrix::from_column_slice(m2, nk, c),
            dk: Matrix::from_column_slice(m2, p2, d),
        })
    }

    /// Controller file: a JSON object with fields `AK`, `BK`, `CK`, `DK` in
    /// the same row-array layout as plant files.
    pub fn to_json(&self) -> String {
        json_object(&[
            ("AK", matrix_json(&self.ak)),
            ("BK", matrix_json(&self.bk)),
            ("CK", matrix_json(&self.ck)),
            ("DK", matrix_json(&self.dk)),
        ])
    }

    pub fn from_json(document: &str) -> Result<Controller> {
        #[derive(serde::Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Doc {
            #[serde(rename = "AK")]
            ak: Rows,
            #[serde(rename = "BK")]
            bk: Rows,
            #[serde(rename = "CK")]
            ck: Rows,
            #[serde(rename = "DK")]
            dk: Rows,
        }
        let doc: Doc = serde_json::from_str(document).map_err(parse_error)?;
        let dk = doc.dk.to_matrix("DK", None)?;
        let ak = doc.ak.to_matrix("AK", Some(0))?;
        let nk = ak.nrows();
        let k = Controller {
            bk: doc.bk.to_matrix("BK", Some(dk.ncols()))?,
            ck: doc.ck.to_matrix("CK", Some(nk))?,
            ak,
            dk,
        };
        k.check_shape()?;
        for m in [&k.ak, &k.bk, &k.ck, &k.dk] {
            ensure_finite(m, "controller")?;
        }
        Ok(k)
    }
}

/// Affine map `k -> base + basis * k` from free parameters to packed
/// controllers. Basis columns are orthonormal.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamMap {
    pub nk: usize,
    pub m2: usize,
    pub p2: usize,
    base: DVector<f64>,
    basis: Matrix,
}

impl ParamMap {
    /// Every controller entry free: zero base, unit basis in packing order.
    pub fn canonical(nk: usize, m2: usize, p2: usize) -> ParamMap {
        let len = packed_len(nk, m2, p2);
        ParamMap {
            nk,
            m2,
            p2,
            base: DVector::zeros(len),
            basis: Matrix::identity(len, len),
        }
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn base(&self) -> Controller {
        self.unpack(self.base.as_slice())
    }

    /// The `i`-th basis direction as a controller-shaped increment.
    pub fn direction(&self, i: usize) -> Controller {
        self.unpack(self.basis.column(i).as_slice())
    }

    fn unpack(&self, v: &[f64]) -> Controller {
        Controller::unpack(self.nk, self.m2, self.p2, v).expect("packed length is fixed")
    }

    pub fn to_controller(&self, k: &DVector<f64>) -> Result<Controller> {
        if k.len() != self.dim() {
            return Err(Error::dim(format!(
                "parameter vector has length {}, expected {}",
                k.len(),
                self.dim()
            )));
        }
        let v = &self.base + &self.basis * k;
        Ok(self.unpack(v.as_slice()))
    }

    /// Least-squares parameters of a controller (exact when the controller
    /// lies in the image of the map).
    pub fn project(&self, k: &Controller) -> Result<DVector<f64>> {
        if k.shape() != (self.nk, self.m2, self.p2) {
            return Err(Error::dim(format!(
                "controller shape {:?} does not match parameter map ({}, {}, {})",
                k.shape(),
                self.nk,
                self.m2,
                self.p2
            )));
        }
        Ok(self.basis.tr_mul(&(k.pack() - &self.base)))
    }

    /// Pulls a gradient with respect to the controller matrices back to the
    /// free parameters.
    pub fn pull_back(&self, grad: &Controller) -> DVector<f64> {
        self.basis.tr_mul(&grad.pack())
    }
}

fn packed_len(nk: usize, m2: usize, p2: usize) -> usize {
    nk * nk + nk * p2 + m2 * nk + m2 * p2
}

/// Closed-loop realization `dx = A x + B w`, `z = C x + D w` in the extended
/// state `[x; x_K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoop {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    pub d: Matrix,
}

/// Closes the loop around a plant with zero `D22`.
pub fn assemble(p: &Plant, k: &Controller) -> Result<ClosedLoop> {
    let d = p.dims();
    let (nk, m2, p2) = k.shape();
    k.check_shape()?;
    if (m2, p2) != (d.m2, d.p2) {
        return Err(Error::dim(format!(
            "controller maps {p2} measurements to {m2} inputs, plant '{}' has {} and {}",
            p.name, d.p2, d.m2
        )));
    }
    if p.d22.iter().any(|&x| x != 0.0) {
        return Err(Error::Precondition(format!(
            "plant '{}' has nonzero D22; shift the feedthrough first",
            p.name
        )));
    }
    let n = d.n;
    let b2dk = &p.b2 * &k.dk;
    let d12dk = &p.d12 * &k.dk;

    let mut a = Matrix::zeros(n + nk, n + nk);
    a.view_mut((0, 0), (n, n))
        .copy_from(&(&p.a + &b2dk * &p.c2));
    a.view_mut((0, n), (n, nk)).copy_from(&(&p.b2 * &k.ck));
    a.view_mut((n, 0), (nk, n)).copy_from(&(&k.bk * &p.c2));
    a.view_mut((n, n), (nk, nk)).copy_from(&k.ak);

    let mut b = Matrix::zeros(n + nk, d.m1);
    b.view_mut((0, 0), (n, d.m1))
        .copy_from(&(&p.b1 + &b2dk * &p.d21));
    b.view_mut((n, 0), (nk, d.m1)).copy_from(&(&k.bk * &p.d21));

    let mut c = Matrix::zeros(d.p1, n + nk);
    c.view_mut((0, 0), (d.p1, n))
        .copy_from(&(&p.c1 + &d12dk * &p.c2));
    c.view_mut((0, n), (d.p1, nk)).copy_from(&(&p.d12 * &k.ck));

    let dd = &p.d11 + &d12dk * &p.d21;
    Ok(ClosedLoop { a, b, c, d: dd })
}

/// Euclidean gradients of a scalar function with respect to the closed-loop
/// matrices.
#[derive(Debug, Clone)]
pub struct ClosedLoopGradient {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    pub d: Matrix,
}

/// Chain rule through [`assemble`]: gradient with respect to the controller
/// matrices from gradients with respect to the closed-loop matrices.
pub fn controller_gradient(p: &Plant, nk: usize, g: &ClosedLoopGradient) -> Controller {
    let n = p.dims().n;
    let ga11 = g.a.view((0, 0), (n, n));
    let ga12 = g.a.view((0, n), (n, nk));
    let ga21 = g.a.view((n, 0), (nk, n));
    let ga22 = g.a.view((n, n), (nk, nk));
    let gb1 = g.b.rows(0, n);
    let gb2 = g.b.rows(n, nk);
    let gc1 = g.c.columns(0, n);
    let gc2 = g.c.columns(n, nk);

    let b2t = p.b2.transpose();
    let d12t = p.d12.transpose();
    let dk = &b2t * ga11 * p.c2.transpose()
        + &b2t * gb1 * p.d21.transpose()
        + &d12t * gc1 * p.c2.transpose()
        + &d12t * &g.d * p.d21.transpose();
    Controller {
        ak: ga22.clone_owned(),
        bk: ga21 * p.c2.transpose() + gb2 * p.d21.transpose(),
        ck: &b2t * ga12 + &d12t * gc2,
        dk,
    }
}

/// Parameter map whose image is `{K : D11 + D12 D_K D21 = 0}` for one plant.
///
/// `D_K` is split along the singular vectors of `D12` and `D21`: entries
/// coupled to two nonzero singular values are pinned to the minimum-norm
/// solution, the rest are free. `A_K`, `B_K` and `C_K` stay free.
pub fn eliminate_feedthrough(p: &Plant, nk: usize) -> Result<ParamMap> {
    let d = p.dims();
    let (m2, p2) = (d.m2, d.p2);
    let f12 = svd_full(&p.d12)?;
    let f21 = svd_full(&p.d21)?;
    let r1 = f12.rank();
    let r2 = f21.rank();

    // Constraint in rotated coordinates: s1_i * N_ij * s2_j = -(U1^T D11 V2)_ij.
    let rotated = f12.u.transpose() * &p.d11 * &f21.v;
    let mut residual = 0.0f64;
    let mut particular = Matrix::zeros(m2, p2);
    for i in 0..d.p1 {
        for j in 0..d.m1 {
            let x = rotated[(i, j)];
            if i < r1 && j < r2 {
                particular[(i, j)] = -x / (f12.s[i] * f21.s[j]);
            } else {
                residual = residual.hypot(x);
            }
        }
    }
    if residual > 1e-10 * (1.0 + p.d11.norm()) {
        return Err(Error::NoFiniteH2(format!(
            "plant '{}': D11 + D12 D_K D21 = 0 has no solution (residual {residual:e})",
            p.name
        )));
    }
    let dk0 = &f12.v * particular * f21.u.transpose();

    let free: Vec<(usize, usize)> = (0..m2)
        .flat_map(|i| (0..p2).map(move |j| (i, j)))
        .filter(|&(i, j)| i >= r1 || j >= r2)
        .collect();
    let dk_dirs: Vec<Matrix> = if free.len() == m2 * p2 {
        (0..m2 * p2)
            .map(|idx| {
                let mut e = Matrix::zeros(m2, p2);
                e[(idx % m2, idx / m2)] = 1.0;
                e
            })
            .collect()
    } else {
        free.iter()
            .map(|&(i, j)| f12.v.column(i) * f21.u.column(j).transpose())
            .collect()
    };

    let mut base = Controller::zeros(nk, m2, p2);
    base.dk = dk0;
    Ok(with_free_dynamics(nk, m2, p2, base, &dk_dirs))
}

/// Intersection of the zero-feedthrough sets of several plants sharing the
/// controller interface; reduces to [`eliminate_feedthrough`] for one plant.
///
/// The stacked constraint `(D21^T (x) D12) vec D_K = -vec D11` is solved by
/// one SVD.
pub fn eliminate_feedthrough_all(plants: &[&Plant], nk: usize) -> Result<ParamMap> {
    match plants {
        [] => Err(Error::InvalidInput("no plants to eliminate".into())),
        [p] => eliminate_feedthrough(p, nk),
        _ => {
            let d = plants[0].dims();
            let (m2, p2) = (d.m2, d.p2);
            let rows: usize = plants.iter().map(|p| p.dims().p1 * p.dims().m1).sum();
            let mut m = Matrix::zeros(rows, m2 * p2);
            let mut rhs = DVector::zeros(rows);
            let mut offset = 0;
            for p in plants {
                let pd = p.dims();
                let kron = p.d21.transpose().kronecker(&p.d12);
                m.view_mut((offset, 0), kron.shape()).copy_from(&kron);
                rhs.rows_mut(offset, pd.p1 * pd.m1)
                    .copy_from(&(-DVector::from_column_slice(p.d11.as_slice())));
                offset += pd.p1 * pd.m1;
            }
            let dec = svd_full(&m)?;
            let r = dec.rank();
            let mut x = DVector::zeros(m2 * p2);
            for i in 0..r {
                x += dec.v.column(i) * (dec.u.column(i).dot(&rhs) / dec.s[i]);
            }
            let residual = (&m * &x - &rhs).norm();
            if residual > 1e-10 * (1.0 + rhs.norm()) {
                return Err(Error::NoFiniteH2(format!(
                    "zero-feedthrough conditions of {} plants are incompatible (residual {residual:e})",
                    plants.len()
                )));
            }
            let dk_dirs: Vec<Matrix> = if r == 0 {
                (0..m2 * p2)
                    .map(|idx| {
                        let mut e = Matrix::zeros(m2, p2);
                        e[(idx % m2, idx / m2)] = 1.0;
                        e
                    })
                    .collect()
            } else {
                (r..m2 * p2)
                    .map(|i| Matrix::from_column_slice(m2, p2, dec.v.column(i).as_slice()))
                    .collect()
            };
            let mut base = Controller::zeros(nk, m2, p2);
            base.dk = Matrix::from_column_slice(m2, p2, x.as_slice());
            Ok(with_free_dynamics(nk, m2, p2, base, &dk_dirs))
        }
    }
}

fn with_free_dynamics(
    nk: usize,
    m2: usize,
    p2: usize,
    base: Controller,
    dk_dirs: &[Matrix],
) -> ParamMap {
    let dyn_len = packed_len(nk, m2, p2) - m2 * p2;
    let len = packed_len(nk, m2, p2);
    let mut basis = Matrix::zeros(len, dyn_len + dk_dirs.len());
    for i in 0..dyn_len {
        basis[(i, i)] = 1.0;
    }
    for (j, dir) in dk_dirs.iter().enumerate() {
        basis
            .view_mut((dyn_len, dyn_len + j), (m2 * p2, 1))
            .copy_from_slice(dir.as_slice());
    }
    ParamMap {
        nk,
        m2,
        p2,
        base: base.pack(),
        basis,
    }
}

/// The plant seen through the shifted measurement `y - D22 u`.
pub fn shift_feedthrough(p: &Plant) -> Plant {
    let mut out = p.clone();
    out.d22.fill(0.0);
    out
}

/// Maps a controller designed for the shifted plant back to the original
/// measurement.
pub fn unshift_controller(khat: &Controller, d22: &Matrix) -> Result<Controller> {
    khat.check_shape()?;
    let (_, m2, p2) = khat.shape();
    if d22.shape() != (p2, m2) {
        return Err(Error::dim(format!(
            "D22 is {}x{}, controller expects {p2}x{m2}",
            d22.nrows(),
            d22.ncols()
        )));
    }
    if d22.iter().all(|&x| x == 0.0) {
        return Ok(khat.clone());
    }
    let m = Matrix::identity(m2, m2) + &khat.dk * d22;
    let s = svd(&m)?.s;
    let smin = s.iter().copied().fold(f64::INFINITY, f64::min);
    if !(smin > 0.0 && s[0] / smin < 1e12) {
        return Err(Error::IllPosed(format!(
            "I + D_K D22 is singular (condition {:e})",
            s[0] / smin
        )));
    }
    let inv = m
        .try_inverse()
        .ok_or_else(|| Error::IllPosed("I + D_K D22 is singular".into()))?;
    let ck = &inv * &khat.ck;
    let dk = &inv * &khat.dk;
    Ok(Controller {
        ak: &khat.ak - &khat.bk * d22 * &ck,
        bk: &khat.bk * (Matrix::identity(p2, p2) - d22 * &dk),
        ck,
        dk,
    })
}
