//! Small dense row-major matrices and the handful of kernels the layer needs.
//!
//! Dimensions here are tiny (D, H in the single digits), so everything is a
//! straight loop over a `Vec<f64>`.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{check_len, GatError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    /// Builds a matrix from nested rows; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            check_len("matrix row", cols, row.len())?;
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len("matrix data", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    /// Single column matrix holding `v`.
    pub fn column(v: &[f64]) -> Self {
        Self {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    /// The block-diagonal Jacobian `∂vec(W x)/∂vec(W)^T = I_rows ⊗ x^T`
    /// for a row-major vectorisation of a `rows × x.len()` matrix `W`.
    pub fn kron_identity_row(rows: usize, x: &[f64]) -> Self {
        let cols = x.len();
        let mut m = Self::zeros(rows, rows * cols);
        for t in 0..rows {
            m.data[t * rows * cols + t * cols..t * rows * cols + (t + 1) * cols].copy_from_slice(x);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    /// `self · x`
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("matvec operand", self.cols, x.len())?;
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// Row vector times matrix, `x^T · self`.
    pub fn vecmat(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("vecmat operand", self.rows, x.len())?;
        let mut out = vec![0.0; self.cols];
        for (r, xr) in x.iter().enumerate() {
            for (o, m) in out.iter_mut().zip(self.row(r)) {
                *o += xr * m;
            }
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(GatError::ShapeMismatch {
                what: "matrix add",
                expected: self.data.len(),
                actual: other.data.len(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| *v == 0.0)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

// JSON form is a list of rows.
impl Serialize for Matrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(deserializer)?;
        Matrix::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub fn add(x: &[f64], y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(a, b)| a + b).collect()
}

pub fn scale(s: f64, x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| s * v).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_and_vecmat() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(m.matvec(&[1.0, -1.0]).unwrap(), vec![-1.0, -1.0, -1.0]);
        assert_eq!(m.vecmat(&[1.0, 0.0, 1.0]).unwrap(), vec![6.0, 8.0]);
        assert!(m.matvec(&[1.0]).is_err());
    }

    #[test]
    fn ragged_rows_rejected() {
        assert!(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }

    #[test]
    fn kron_identity_row_layout() {
        let k = Matrix::kron_identity_row(2, &[1.0, 5.0, 7.0]);
        assert_eq!(k.shape(), (2, 6));
        assert_eq!(k.row(0), &[1.0, 5.0, 7.0, 0.0, 0.0, 0.0]);
        assert_eq!(k.row(1), &[0.0, 0.0, 0.0, 1.0, 5.0, 7.0]);

        // ∂vec(Wx)/∂vec(W) applied to vec(W) reproduces W x.
        let w = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 2.0]]).unwrap();
        let via_kron = k.matvec(w.as_slice()).unwrap();
        assert_eq!(via_kron, w.matvec(&[1.0, 5.0, 7.0]).unwrap());
    }

    #[test]
    fn json_is_nested_rows() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(s, "[[1.0,2.0],[3.0,4.0]]");
        let back: Matrix = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
    }
}
