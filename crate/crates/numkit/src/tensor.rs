//! Row-major dense matrices of `f64`.
//!
//! Every tensor in this crate is two-dimensional; a scalar is a `1×1`
//! tensor and a vector is a single row or column.

use crate::error::{shape_err, NumError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 2],
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(shape_err(
                "new",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Self {
            shape: [rows, cols],
            data,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::full(rows, cols, 0.0)
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::full(rows, cols, 1.0)
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            shape: [rows, cols],
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: [1, 1],
            data: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a tensor from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(shape_err(
                    "from_rows",
                    format!("row {i} has {} columns, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            shape: [1, values.len()],
            data: values.to_vec(),
        }
    }

    pub fn column_vector(values: &[f64]) -> Self {
        Self {
            shape: [values.len(), 1],
            data: values.to_vec(),
        }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        let cols = self.shape[1];
        self.data[r * cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    /// Value of a `1×1` tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.shape != [1, 1] {
            return Err(shape_err(
                "scalar_value",
                format!("expected 1x1, got {}x{}", self.shape[0], self.shape[1]),
            ));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(NumError::NonFinite(op))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err(
                op,
                format!(
                    "{}x{} vs {}x{}",
                    self.shape[0], self.shape[1], other.shape[0], other.shape[1]
                ),
            ));
        }
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    /// Standard matrix product. Summation runs over the inner index in
    /// increasing order, so results are reproducible bit for bit.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let [m, n] = self.shape;
        let [n2, p] = other.shape;
        if n != n2 {
            return Err(shape_err(
                "matmul",
                format!("{m}x{n} times {n2}x{p}: inner dimensions differ"),
            ));
        }
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            let a_row = &self.data[i * n..(i + 1) * n];
            let o_row = &mut out[i * p..(i + 1) * p];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * p..(k + 1) * p];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self {
            shape: [m, p],
            data: out,
        })
    }

    pub fn transpose(&self) -> Self {
        let [m, n] = self.shape;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self {
            shape: [n, m],
            data: out,
        }
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Self {
        let mut out = self.clone();
        let cols = self.shape[1];
        for row in out.data.chunks_mut(cols.max(1)) {
            softmax_in_place(row);
        }
        out
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        let d = self.zip_map(other, "max_abs_diff", |a, b| (a - b).abs())?;
        Ok(d.data.into_iter().fold(0.0, f64::max))
    }
}

/// In-place softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Mean negative log-likelihood of `targets` over the unmasked rows of
/// `logits`, natural log.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<f64> {
    check_targets("cross_entropy", logits, targets, mask)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (t, (&y, &keep)) in targets.iter().zip(mask).enumerate() {
        if !keep {
            continue;
        }
        let row = logits.row(t);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
        count += 1;
    }
    if count == 0 {
        return Err(NumError::EmptySelection("cross_entropy: every position masked"));
    }
    Ok(total / count as f64)
}

pub(crate) fn check_targets(
    op: &'static str,
    logits: &Tensor,
    targets: &[usize],
    mask: &[bool],
) -> Result<()> {
    if targets.len() != logits.rows() || mask.len() != logits.rows() {
        return Err(shape_err(
            op,
            format!(
                "{} rows, {} targets, {} mask entries",
                logits.rows(),
                targets.len(),
                mask.len()
            ),
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&y| y >= logits.cols()) {
        return Err(shape_err(
            op,
            format!("target {bad} outside vocabulary of {}", logits.cols()),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_annihilator() {
        let m = Tensor::from_rows(&[[1.5, -2.0], [0.25, 4.0]]).unwrap();
        assert_eq!(Tensor::identity(2).matmul(&m).unwrap(), m);

        let b = Tensor::from_rows(&[
            [1.0, 2.0, 3.0, 4.0],
            [5.0, 6.0, 7.0, 8.0],
            [9.0, 10.0, 11.0, 12.0],
        ])
        .unwrap();
        assert_eq!(Tensor::zeros(2, 3).matmul(&b).unwrap(), Tensor::zeros(2, 4));
    }

    #[test]
    fn matmul_hand_expansion() {
        let a = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = Tensor::column_vector(&[5.0, 6.0]);
        let c = a.matmul(&b).unwrap();
        // 1*5 + 2*6, 3*5 + 4*6
        assert_eq!(c, Tensor::column_vector(&[17.0, 39.0]));
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(2, 3);
        let b = Tensor::zeros(2, 3);
        assert!(matches!(a.matmul(&b), Err(NumError::Shape { .. })));
    }

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let s = Tensor::row_vector(&[0.0, 0.0, 0.0]).softmax_rows();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = Tensor::row_vector(&[1.0, 0.0]).softmax_rows();
        assert!((s.get(0, 0) - 0.73106).abs() < 1e-5);
        assert!((s.get(0, 1) - 0.26894).abs() < 1e-5);
        let s = Tensor::row_vector(&[-7.5; 4]).softmax_rows();
        assert!(s.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut l = Tensor::zeros(1, 3);
        l.set(0, 1, 1e6);
        assert!(cross_entropy(&l, &[1], &[true]).unwrap().abs() < 1e-12);

        let u = Tensor::zeros(2, 4);
        let ce = cross_entropy(&u, &[0, 3], &[true, true]).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-15);

        let l = Tensor::row_vector(&[1.0, 0.0]);
        assert!((cross_entropy(&l, &[0], &[true]).unwrap() - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_all_masked_is_empty_selection() {
        let u = Tensor::zeros(2, 4);
        assert!(matches!(
            cross_entropy(&u, &[0, 1], &[false, false]),
            Err(NumError::EmptySelection(_))
        ));
    }
}
