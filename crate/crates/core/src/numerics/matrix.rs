//! Dense row-major matrices of `f64`.
//!
//! Every product accumulates each output element over the inner dimension in
//! ascending index order, and each output row depends only on the matching
//! input row. Batched and row-at-a-time evaluation therefore produce
//! bit-identical results, which the cached and uncached forward passes rely on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "Matrix::new",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry {bad}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::ShapeMismatch {
                    op: "Matrix::from_rows",
                    left: (1, cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn row_vector(values: Vec<f64>) -> Self {
        let cols = values.len();
        Self {
            rows: 1,
            cols,
            data: values,
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

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    /// Appends a row; an empty matrix adopts the row's width.
    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if self.rows == 0 && self.data.is_empty() {
            self.cols = row.len();
        }
        if row.len() != self.cols {
            return Err(Error::ShapeMismatch {
                op: "Matrix::push_row",
                left: (1, self.cols),
                right: (1, row.len()),
            });
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    pub fn truncate_rows(&mut self, rows: usize) {
        if rows < self.rows {
            self.rows = rows;
            self.data.truncate(rows * self.cols);
        }
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.rows, "row range out of bounds");
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &aik) in a.iter().enumerate() {
                let b = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (oj, &bkj) in o.iter_mut().zip(b) {
                    *oj += aik * bkj;
                }
            }
        }
        Ok(out)
    }

    /// `self · rhsᵀ`.
    pub fn matmul_t(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(Error::ShapeMismatch {
                op: "matmul_t",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        Ok(Matrix::from_fn(self.rows, rhs.rows, |i, j| {
            dot(self.row(i), rhs.row(j))
        }))
    }

    /// `selfᵀ · rhs`.
    pub fn t_matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows {
            return Err(Error::ShapeMismatch {
                op: "t_matmul",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        for k in 0..self.rows {
            let a = self.row(k);
            let b = rhs.row(k);
            for (i, &aki) in a.iter().enumerate() {
                let o = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (oj, &bkj) in o.iter_mut().zip(b) {
                    *oj += aki * bkj;
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        let mut out = self.clone();
        out.add_assign(rhs)?;
        Ok(out)
    }

    pub fn add_assign(&mut self, rhs: &Matrix) -> Result<()> {
        self.check_same(rhs, "add")?;
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.check_same(rhs, "sub")?;
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// Adds `row` to every row.
    pub fn add_row_broadcast(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.cols {
            return Err(Error::ShapeMismatch {
                op: "add_row_broadcast",
                left: self.shape(),
                right: (1, row.len()),
            });
        }
        for r in 0..self.rows {
            for (a, b) in self.row_mut(r).iter_mut().zip(row) {
                *a += b;
            }
        }
        Ok(())
    }

    /// Concatenates columns: `[self | rhs]`.
    pub fn hstack(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows {
            return Err(Error::ShapeMismatch {
                op: "hstack",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let mut data = Vec::with_capacity(self.rows * (self.cols + rhs.cols));
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(rhs.row(r));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols + rhs.cols,
            data,
        })
    }

    /// Concatenates rows: `[self; rhs]`. Empty operands adopt the other's width.
    pub fn vstack(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows == 0 {
            return Ok(rhs.clone());
        }
        if rhs.rows == 0 {
            return Ok(self.clone());
        }
        if self.cols != rhs.cols {
            return Err(Error::ShapeMismatch {
                op: "vstack",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&rhs.data);
        Ok(Matrix {
            rows: self.rows + rhs.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in self.row_iter() {
            for (o, v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        out
    }

    pub fn column_means(&self) -> Vec<f64> {
        let n = self.rows.max(1) as f64;
        self.column_sums().into_iter().map(|s| s / n).collect()
    }

    pub fn max_abs_diff(&self, rhs: &Matrix) -> f64 {
        assert_eq!(self.shape(), rhs.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    fn check_same(&self, rhs: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        Ok(())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Matrix {
        Matrix::new(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn rejects_wrong_length_and_nan() {
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(matches!(
            Matrix::new(1, 1, vec![f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn products_agree() {
        let a = m(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = m(3, 2, &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let ab = a.matmul(&b).unwrap();
        assert_eq!(ab, m(2, 2, &[58.0, 64.0, 139.0, 154.0]));
        assert_eq!(a.matmul_t(&b.transpose()).unwrap(), ab);
        assert_eq!(a.transpose().t_matmul(&b).unwrap(), ab);
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn row_batched_product_is_bit_identical() {
        let a = Matrix::from_fn(5, 7, |r, c| ((r * 7 + c) as f64 * 0.37).sin());
        let b = Matrix::from_fn(7, 3, |r, c| ((r * 3 + c) as f64 * 1.3).cos());
        let full = a.matmul(&b).unwrap();
        for r in 0..5 {
            let one = a.slice_rows(r, r + 1).matmul(&b).unwrap();
            assert_eq!(one.row(0), full.row(r));
        }
    }

    #[test]
    fn stacking_and_rows() {
        let a = m(1, 2, &[1.0, 2.0]);
        let b = m(1, 1, &[3.0]);
        assert_eq!(a.hstack(&b).unwrap(), m(1, 3, &[1.0, 2.0, 3.0]));
        let mut v = Matrix::zeros(0, 0).vstack(&a).unwrap();
        v.push_row(&[5.0, 6.0]).unwrap();
        assert_eq!(v.shape(), (2, 2));
        assert_eq!(v.column_means(), vec![3.0, 4.0]);
        v.truncate_rows(1);
        assert_eq!(v, a);
        assert!(v.push_row(&[1.0]).is_err());
    }
}
