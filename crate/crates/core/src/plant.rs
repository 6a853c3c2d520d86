//! Plant model and the JSON problem format.
//!
//! A problem file is a JSON object with the nine state-space blocks, each a
//! row-major array of rows:
//!
//! ```json
//! {
//!   "name": "scalar",
//!   "A": [[-1.0]],
//!   "B1": [[1.0]],
//!   "B2": [[1.0]],
//!   "C1": [[1.0], [0.0]],
//!   "C2": [[1.0]],
//!   "D12": [[0.0], [1.0]]
//! }
//! ```
//!
//! `A`, `B1`, `B2`, `C1` and `C2` are required. Omitted `D11`, `D12`, `D21`
//! and `D22` blocks are zero matrices of the size implied by the other blocks.
//! A block with no rows is written `[]`; its column count is inferred. `name`
//! is optional (callers loading from disk default it to the file stem).
//! Writers emit the shortest decimal that parses back to the same 64-bit
//! float, so load and save round-trip bit-exactly.

use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::numerics::{ensure_finite, Matrix};

/// Dimensions `(n, m1, m2, p1, p2)`: states, disturbance inputs, control
/// inputs, performance outputs, measured outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlantDims {
    pub n: usize,
    pub m1: usize,
    pub m2: usize,
    pub p1: usize,
    pub p2: usize,
}

/// `dx = A x + B1 w + B2 u`, `z = C1 x + D11 w + D12 u`, `y = C2 x + D21 w + D22 u`.
#[derive(Debug, Clone, PartialEq)]
pub struct Plant {
    pub name: String,
    pub a: Matrix,
    pub b1: Matrix,
    pub b2: Matrix,
    pub c1: Matrix,
    pub c2: Matrix,
    pub d11: Matrix,
    pub d12: Matrix,
    pub d21: Matrix,
    pub d22: Matrix,
}

impl Plant {
    pub fn dims(&self) -> PlantDims {
        PlantDims {
            n: self.a.nrows(),
            m1: self.b1.ncols(),
            m2: self.b2.ncols(),
            p1: self.c1.nrows(),
            p2: self.c2.nrows(),
        }
    }

    fn blocks(&self) -> [(&'static str, &Matrix); 9] {
        [
            ("A", &self.a),
            ("B1", &self.b1),
            ("B2", &self.b2),
            ("C1", &self.c1),
            ("C2", &self.c2),
            ("D11", &self.d11),
            ("D12", &self.d12),
            ("D21", &self.d21),
            ("D22", &self.d22),
        ]
    }

    /// Checks block dimensions and finiteness.
    pub fn validate(self) -> Result<Plant> {
        let d = self.dims();
        if d.n == 0 {
            return Err(Error::dim("A must have at least one state"));
        }
        if d.m2 == 0 {
            return Err(Error::dim("B2 must have at least one column"));
        }
        if d.p2 == 0 {
            return Err(Error::dim("C2 must have at least one row"));
        }
        let expected = [
            ("A", d.n, d.n),
            ("B1", d.n, d.m1),
            ("B2", d.n, d.m2),
            ("C1", d.p1, d.n),
            ("C2", d.p2, d.n),
            ("D11", d.p1, d.m1),
            ("D12", d.p1, d.m2),
            ("D21", d.p2, d.m1),
            ("D22", d.p2, d.m2),
        ];
        for ((name, m), (_, rows, cols)) in self.blocks().into_iter().zip(expected) {
            if m.shape() != (rows, cols) {
                return Err(Error::dim(format!(
                    "plant '{}': block {name} is {}x{}, expected {rows}x{cols}",
                    self.name,
                    m.nrows(),
                    m.ncols()
                )));
            }
            ensure_finite(m, &format!("plant '{}' block {name}", self.name))?;
        }
        Ok(self)
    }

    /// Parses a problem document; see the module docs for the format.
    pub fn from_json(document: &str) -> Result<Plant> {
        let doc: PlantDoc = serde_json::from_str(document).map_err(parse_error)?;
        let a = doc.a.to_matrix("A", None)?;
        let n = a.nrows();
        let b1 = doc.b1.to_matrix("B1", Some(0))?;
        let b2 = doc.b2.to_matrix("B2", Some(0))?;
        let c1 = doc.c1.to_matrix("C1", Some(n))?;
        let c2 = doc.c2.to_matrix("C2", Some(n))?;
        let (m1, m2, p1, p2) = (b1.ncols(), b2.ncols(), c1.nrows(), c2.nrows());
        let block = |doc: Option<Rows>, name: &str, rows: usize, cols: usize| -> Result<Matrix> {
            match doc {
                Some(r) => r.to_matrix(name, Some(cols)),
                None => Ok(Matrix::zeros(rows, cols)),
            }
        };
        Plant {
            name: doc.name.unwrap_or_default(),
            d11: block(doc.d11, "D11", p1, m1)?,
            d12: block(doc.d12, "D12", p1, m2)?,
            d21: block(doc.d21, "D21", p2, m1)?,
            d22: block(doc.d22, "D22", p2, m2)?,
            a,
            b1,
            b2,
            c1,
            c2,
        }
        .validate()
    }

    /// Reads a problem file; an absent `name` defaults to the file stem.
    pub fn load(path: &Path) -> Result<Plant> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut plant = Plant::from_json(&text)?;
        if plant.name.is_empty() {
            plant.name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
        }
        Ok(plant)
    }

    pub fn to_json(&self) -> String {
        let mut fields: Vec<(&str, String)> = vec![("name", json_string(&self.name))];
        for (name, m) in self.blocks() {
            fields.push((name, matrix_json(m)));
        }
        json_object(&fields)
    }
}

/// An ordered list of plants closed by a single controller.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantSet {
    pub plants: Vec<Plant>,
}

impl PlantSet {
    pub fn new(plants: Vec<Plant>) -> Result<PlantSet> {
        PlantSet { plants }.check()
    }

    /// All plants must share the controller interface `(m2, p2)` and an
    /// identical `D22` block.
    pub fn check(self) -> Result<PlantSet> {
        let first = self
            .plants
            .first()
            .ok_or_else(|| Error::InvalidInput("plant set is empty".into()))?;
        let d0 = first.dims();
        for p in &self.plants[1..] {
            let d = p.dims();
            if (d.m2, d.p2) != (d0.m2, d0.p2) {
                return Err(Error::dim(format!(
                    "plant '{}' has (m2, p2) = ({}, {}) but plant '{}' has ({}, {})",
                    p.name, d.m2, d.p2, first.name, d0.m2, d0.p2
                )));
            }
            if p.d22 != first.d22 {
                return Err(Error::InvalidInput(format!(
                    "plants '{}' and '{}' have different D22 blocks",
                    first.name, p.name
                )));
            }
        }
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.plants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plants.is_empty()
    }

    /// The common `(m2, p2)` controller interface.
    pub fn interface(&self) -> (usize, usize) {
        let d = self.plants[0].dims();
        (d.m2, d.p2)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PlantDoc {
    name: Option<String>,
    #[serde(rename = "A")]
    a: Rows,
    #[serde(rename = "B1")]
    b1: Rows,
    #[serde(rename = "B2")]
    b2: Rows,
    #[serde(rename = "C1")]
    c1: Rows,
    #[serde(rename = "C2")]
    c2: Rows,
    #[serde(rename = "D11")]
    d11: Option<Rows>,
    #[serde(rename = "D12")]
    d12: Option<Rows>,
    #[serde(rename = "D21")]
    d21: Option<Rows>,
    #[serde(rename = "D22")]
    d22: Option<Rows>,
}

#[derive(Deserialize)]
#[serde(transparent)]
pub(crate) struct Rows(Vec<Vec<f64>>);

impl Rows {
    /// `empty_cols` is the column count to use when there are no rows.
    pub(crate) fn to_matrix(&self, name: &str, empty_cols: Option<usize>) -> Result<Matrix> {
        let rows = &self.0;
        let Some(first) = rows.first() else {
            return Ok(Matrix::zeros(0, empty_cols.unwrap_or(0)));
        };
        let cols = first.len();
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != cols) {
            return Err(Error::dim(format!(
                "block {name}: row {i} has {} entries, row 0 has {cols}",
                r.len()
            )));
        }
        Ok(Matrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
    }
}

pub(crate) fn parse_error(e: serde_json::Error) -> Error {
    Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

/// `[[a, b], [c, d]]` with round-trip decimal formatting.
pub(crate) fn matrix_json(m: &Matrix) -> String {
    let mut out = String::from("[");
    for i in 0..m.nrows() {
        if i > 0 {
            out.push_str(", ");
        }
        out.push('[');
        for j in 0..m.ncols() {
            if j > 0 {
                out.push_str(", ");
            }
            write!(out, "{:?}", m[(i, j)]).unwrap();
        }
        out.push(']');
    }
    out.push(']');
    out
}

pub(crate) fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

pub(crate) fn json_object(fields: &[(&str, String)]) -> String {
    let mut out = String::from("{\n");
    for (i, (k, v)) in fields.iter().enumerate() {
        let sep = if i + 1 < fields.len() { "," } else { "" };
        writeln!(out, "  {}: {v}{sep}", json_string(k)).unwrap();
    }
    out.push_str("}\n");
    out
}
