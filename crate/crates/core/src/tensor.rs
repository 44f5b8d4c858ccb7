//! Dense row-major f64 matrices.
//!
//! Everything in the engine is 2-D: a sequence activation is `[T x d]`, a
//! weight is `[in x out]`, a scalar is `[1 x 1]`. f64 keeps finite-difference
//! gradient checks tight and makes seeded runs bit-reproducible.

use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor shape/data mismatch");
        Self { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Self {
        Self {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.gauss() * std).collect(),
        }
    }

    pub fn full(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// self += other
    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// out = a @ b, where a is [m x k], b is [k x n].
    pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.cols, b.rows, "matmul inner dimension mismatch");
        let mut out = Tensor::zeros(a.rows, b.cols);
        matmul_into(&mut out.data, &a.data, &b.data, a.rows, a.cols, b.cols);
        out
    }

    /// out = a^T @ b, where a is [k x m], b is [k x n].
    pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.rows, b.rows, "matmul_tn outer dimension mismatch");
        let (k, m, n) = (a.rows, a.cols, b.cols);
        let mut out = Tensor::zeros(m, n);
        for p in 0..k {
            let arow = a.row(p);
            let brow = b.row(p);
            for (i, &aip) in arow.iter().enumerate() {
                if aip == 0.0 {
                    continue;
                }
                let orow = &mut out.data[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        out
    }

    /// out = a @ b^T, where a is [m x k], b is [n x k].
    pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.cols, b.cols, "matmul_nt inner dimension mismatch");
        let (m, k, n) = (a.rows, a.cols, b.rows);
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            let arow = a.row(i);
            let orow = out.row_mut(i);
            for (j, o) in orow.iter_mut().enumerate() {
                let brow = &b.data[j * k..(j + 1) * k];
                *o = dot(arow, brow);
            }
        }
        out
    }
}

/// c += contribution of a[m x k] @ b[k x n], written with the k-loop outside
/// the row loop so the inner update is a contiguous axpy.
pub fn matmul_into(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &v in row {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

/// Stable softmax of one row.
pub fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor::from_vec(2, 3, vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::from_vec(3, 2, vec![7., 8., 9., 10., 11., 12.]);
        let c = Tensor::matmul(&a, &b);
        assert_eq!(c.data, vec![58., 64., 139., 154.]);
    }

    #[test]
    fn matmul_tn_matches_explicit_transpose() {
        let a = Tensor::from_vec(3, 2, vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::from_vec(3, 2, vec![7., 8., 9., 10., 11., 12.]);
        let c = Tensor::matmul_tn(&a, &b);
        // a^T @ b = [2x3] @ [3x2]
        let at = Tensor::from_vec(2, 3, vec![1., 3., 5., 2., 4., 6.]);
        let expect = Tensor::matmul(&at, &b);
        assert_eq!(c.data, expect.data);
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let a = Tensor::from_vec(2, 3, vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::from_vec(4, 3, (0..12).map(|v| v as f64).collect());
        let c = Tensor::matmul_nt(&a, &b);
        let bt = Tensor::from_vec(3, 4, vec![0., 3., 6., 9., 1., 4., 7., 10., 2., 5., 8., 11.]);
        let expect = Tensor::matmul(&a, &bt);
        assert_eq!(c.data, expect.data);
    }

    #[test]
    fn log_softmax_sums_to_one() {
        let row = [1.0, 2.0, 3.0, -5.0];
        let mut out = [0.0; 4];
        log_softmax_row(&row, &mut out);
        let total: f64 = out.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_handles_large_values() {
        let row = [1000.0, 1000.0];
        let mut out = [0.0; 2];
        softmax_row(&row, &mut out);
        assert!((out[0] - 0.5).abs() < 1e-12);
    }
}
