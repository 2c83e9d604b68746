use serde::{Deserialize, Serialize};

use crate::error::{shape_err, GcrError, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Whether an operand of [`gemm`] is used as stored or transposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trans {
    No,
    Yes,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(shape_err("ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, other: &DenseMatrix, alpha: f64) -> Result<()> {
        self.expect_shape(other.shape())?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(GcrError::Numeric(format!("non-finite value in {what}")))
        }
    }

    pub fn expect_shape(&self, shape: (usize, usize)) -> Result<()> {
        if self.shape() != shape {
            return Err(shape_err(format!(
                "expected {}x{}, got {}x{}",
                shape.0, shape.1, self.rows, self.cols
            )));
        }
        Ok(())
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `op(self) * op(other)` as a fresh matrix.
    pub fn matmul(&self, ta: Trans, other: &DenseMatrix, tb: Trans) -> Result<DenseMatrix> {
        let m = if ta == Trans::No { self.rows } else { self.cols };
        let n = if tb == Trans::No { other.cols } else { other.rows };
        let mut out = DenseMatrix::zeros(m, n);
        gemm(1.0, self, ta, other, tb, 0.0, &mut out)?;
        Ok(out)
    }
}

/// `c = alpha * op(a) * op(b) + beta * c`. When `beta == 0` the prior contents of
/// `c` are ignored.
pub fn gemm(
    alpha: f64,
    a: &DenseMatrix,
    ta: Trans,
    b: &DenseMatrix,
    tb: Trans,
    beta: f64,
    c: &mut DenseMatrix,
) -> Result<()> {
    let (m, k) = match ta {
        Trans::No => (a.rows, a.cols),
        Trans::Yes => (a.cols, a.rows),
    };
    let (kb, n) = match tb {
        Trans::No => (b.rows, b.cols),
        Trans::Yes => (b.cols, b.rows),
    };
    if k != kb || c.rows != m || c.cols != n {
        return Err(shape_err(format!(
            "gemm: op(a) is {m}x{k}, op(b) is {kb}x{n}, c is {}x{}",
            c.rows, c.cols
        )));
    }
    if m == 0 || n == 0 {
        return Ok(());
    }
    let (rsa, csa) = match ta {
        Trans::No => (a.cols as isize, 1),
        Trans::Yes => (1, a.cols as isize),
    };
    let (rsb, csb) = match tb {
        Trans::No => (b.cols as isize, 1),
        Trans::Yes => (1, b.cols as isize),
    };
    // SAFETY: shapes were checked above; every index the kernel touches lies in
    // the backing vectors, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
    Ok(())
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn gemm_matches_naive_in_all_transpose_modes() {
        let a = DenseMatrix::from_vec(3, 4, (0..12).map(|x| x as f64 * 0.5 - 2.0).collect()).unwrap();
        let b = DenseMatrix::from_vec(4, 2, (0..8).map(|x| (x as f64).sin()).collect()).unwrap();
        let want = naive(&a, &b);
        let cases = [
            (a.clone(), Trans::No, b.clone(), Trans::No),
            (a.transpose(), Trans::Yes, b.clone(), Trans::No),
            (a.clone(), Trans::No, b.transpose(), Trans::Yes),
            (a.transpose(), Trans::Yes, b.transpose(), Trans::Yes),
        ];
        for (x, tx, y, ty) in cases {
            let got = x.matmul(tx, &y, ty).unwrap();
            for (g, w) in got.data().iter().zip(want.data()) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gemm_rejects_bad_shapes() {
        let a = DenseMatrix::zeros(2, 3);
        let b = DenseMatrix::zeros(2, 3);
        assert!(a.matmul(Trans::No, &b, Trans::No).is_err());
        assert!(DenseMatrix::from_vec(2, 2, vec![1.0]).is_err());
    }

    #[test]
    fn gemm_accumulates_with_beta() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = DenseMatrix::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        let mut c = DenseMatrix::from_rows(&[vec![1.0]]).unwrap();
        gemm(2.0, &a, Trans::No, &b, Trans::No, 1.0, &mut c).unwrap();
        assert_eq!(c.get(0, 0), 23.0);
    }
}
