//! Minimal dense linear algebra shared by every other module.
//!
//! Everything is 64-bit floating point and row-major. Matrices at desk scale
//! are small enough that plain loops over slices are both fast and auditable;
//! there is no BLAS, no GPU path, and no general autodiff. Each consumer
//! declares its own backward rules and [`gradcheck`] polices them.

pub mod adamw;
pub mod gradcheck;
pub mod mlp;

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims(
                "DenseMatrix::from_vec",
                format!("{} entries", rows * cols),
                format!("{}", data.len()),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "DenseMatrix::from_vec".into(),
            });
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        DenseMatrix { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        DenseMatrix::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    /// Seeded Gaussian init with standard deviation `sigma`.
    pub fn randn(rows: usize, cols: usize, sigma: f64, rng: &mut crate::rng::DetRng) -> Self {
        let data = (0..rows * cols).map(|_| sigma * rng.next_normal()).collect();
        DenseMatrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// `y = M x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec: x has {} entries, need {}", x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `y = Mᵀ x` without materializing the transpose.
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows, "matvec_t: x has {} entries, need {}", x.len(), self.rows);
        let mut y = vec![0.0; self.cols];
        for r in 0..self.rows {
            let xr = x[r];
            if xr == 0.0 {
                continue;
            }
            for (yc, m) in y.iter_mut().zip(self.row(r)) {
                *yc += xr * m;
            }
        }
        y
    }

    /// `C = A B`.
    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(
            self.cols, other.rows,
            "matmul: inner dims {} vs {}",
            self.cols, other.rows
        );
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a == 0.0 {
                    continue;
                }
                let brow = other.row(k);
                let orow = out.row_mut(r);
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// Rank-1 update `M += alpha · u vᵀ`.
    pub fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        assert_eq!(u.len(), self.rows);
        assert_eq!(v.len(), self.cols);
        for r in 0..self.rows {
            let a = alpha * u[r];
            if a == 0.0 {
                continue;
            }
            for (m, vc) in self.row_mut(r).iter_mut().zip(v) {
                *m += a * vc;
            }
        }
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &DenseMatrix) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place softmax with max subtraction.
pub fn softmax_inplace(x: &mut [f64]) {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Access to a model's named parameter groups.
///
/// One trait powers the optimizer, checkpoints, digests, the trainable-set
/// audit, and finite-difference gradient checking. Names are stable across
/// runs; visit order is the declaration order of the implementor.
pub trait Parameterized {
    fn visit_params(&self, visit: &mut dyn FnMut(&str, &[f64]));
    fn visit_params_mut(&mut self, visit: &mut dyn FnMut(&str, &mut [f64]));
}

/// Snapshot all parameters into a name-keyed map.
pub fn param_map(p: &impl Parameterized) -> BTreeMap<String, Vec<f64>> {
    let mut out = BTreeMap::new();
    p.visit_params(&mut |name, values| {
        out.insert(name.to_string(), values.to_vec());
    });
    out
}

pub fn param_count(p: &impl Parameterized) -> usize {
    let mut n = 0;
    p.visit_params(&mut |_, values| n += values.len());
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;
    use proptest::prelude::*;

    #[test]
    fn from_vec_rejects_wrong_len() {
        assert!(DenseMatrix::from_vec(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn from_vec_rejects_nan() {
        assert!(DenseMatrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn matvec_matches_hand_result() {
        let m = DenseMatrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(m.matvec(&[1.0, 0.0, -1.0]), vec![-2.0, -2.0]);
    }

    #[test]
    fn matvec_t_matches_explicit_transpose() {
        let mut rng = DetRng::new(11);
        let m = DenseMatrix::randn(5, 7, 1.0, &mut rng);
        let x: Vec<f64> = (0..5).map(|_| rng.next_normal()).collect();
        let t = DenseMatrix::from_fn(7, 5, |r, c| m.get(c, r));
        let a = m.matvec_t(&x);
        let b = t.matvec(&x);
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-14);
        }
    }

    proptest! {
        // associativity of matmul on random conforming triples at dims <= 64
        #[test]
        fn matmul_associative(seed in 0u64..500, a in 1usize..12, b in 1usize..12, c in 1usize..12, d in 1usize..12) {
            let mut rng = DetRng::new(seed);
            let ma = DenseMatrix::randn(a, b, 1.0, &mut rng);
            let mb = DenseMatrix::randn(b, c, 1.0, &mut rng);
            let mc = DenseMatrix::randn(c, d, 1.0, &mut rng);
            let left = ma.matmul(&mb).matmul(&mc);
            let right = ma.matmul(&mb.matmul(&mc));
            prop_assert!(left.max_abs_diff(&right) < 1e-9);
        }
    }

    #[test]
    fn matmul_associative_at_dim_64() {
        let mut rng = DetRng::new(99);
        let a = DenseMatrix::randn(64, 64, 1.0, &mut rng);
        let b = DenseMatrix::randn(64, 64, 1.0, &mut rng);
        let c = DenseMatrix::randn(64, 64, 1.0, &mut rng);
        assert!(a.matmul(&b).matmul(&c).max_abs_diff(&a.matmul(&b.matmul(&c))) < 1e-9);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut x = vec![1.0, 2.0, 3.0, -5.0];
        softmax_inplace(&mut x);
        assert!((x.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_stable_at_extremes() {
        assert!(sigmoid(800.0) <= 1.0);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
