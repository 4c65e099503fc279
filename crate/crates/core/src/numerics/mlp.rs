//! Two-layer perceptron with rectified-linear activation.
//!
//! This one shape serves as both lightweight projectors (ID embedding to soft
//! token, hidden representation to interaction matrix) and the feed-forward
//! block of the toy transformer.

use super::{relu, DenseMatrix, Parameterized};
use crate::error::{Error, Result};
use crate::rng::DetRng;

#[derive(Debug, Clone)]
pub struct Mlp2 {
    pub w1: DenseMatrix, // hidden x input
    pub b1: Vec<f64>,
    pub w2: DenseMatrix, // output x hidden
    pub b2: Vec<f64>,
}

/// Gradients shaped like [`Mlp2`].
#[derive(Debug, Clone)]
pub struct Mlp2Grads {
    pub dw1: DenseMatrix,
    pub db1: Vec<f64>,
    pub dw2: DenseMatrix,
    pub db2: Vec<f64>,
}

/// Per-call cache needed by [`Mlp2::backward`].
#[derive(Debug, Clone)]
pub struct Mlp2Cache {
    input: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
}

impl Mlp2 {
    /// Gaussian init for weights, zero biases. `sigma2` controls the final
    /// layer separately so projectors can start near the zero map.
    pub fn init(input: usize, hidden: usize, output: usize, sigma1: f64, sigma2: f64, rng: &mut DetRng) -> Self {
        Mlp2 {
            w1: DenseMatrix::randn(hidden, input, sigma1, rng),
            b1: vec![0.0; hidden],
            w2: DenseMatrix::randn(output, hidden, sigma2, rng),
            b2: vec![0.0; output],
        }
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Mlp2 {
            w1: DenseMatrix::zeros(hidden, input),
            b1: vec![0.0; hidden],
            w2: DenseMatrix::zeros(output, hidden),
            b2: vec![0.0; output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.rows()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::dims(
                "mlp2_forward",
                format!("input of dim {}", self.input_dim()),
                format!("{}", x.len()),
            ));
        }
        if self.w2.cols() != self.hidden_dim() || self.b1.len() != self.hidden_dim() || self.b2.len() != self.output_dim() {
            return Err(Error::dims(
                "mlp2_forward",
                "consistent layer dims".to_string(),
                format!(
                    "w1 {}x{}, w2 {}x{}, b1 {}, b2 {}",
                    self.w1.rows(),
                    self.w1.cols(),
                    self.w2.rows(),
                    self.w2.cols(),
                    self.b1.len(),
                    self.b2.len()
                ),
            ));
        }
        Ok(())
    }

    /// `w2 · relu(w1 · x + b1) + b2`
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<(Vec<f64>, Mlp2Cache)> {
        self.check_input(x)?;
        let mut pre = self.w1.matvec(x);
        for (p, b) in pre.iter_mut().zip(&self.b1) {
            *p += b;
        }
        let hidden: Vec<f64> = pre.iter().map(|&v| relu(v)).collect();
        let mut out = self.w2.matvec(&hidden);
        for (o, b) in out.iter_mut().zip(&self.b2) {
            *o += b;
        }
        Ok((
            out,
            Mlp2Cache {
                input: x.to_vec(),
                hidden_pre: pre,
                hidden,
            },
        ))
    }

    /// Reverse-mode rules; accumulates into `grads` and returns `dL/dx`.
    pub fn backward(&self, cache: &Mlp2Cache, dy: &[f64], grads: &mut Mlp2Grads) -> Vec<f64> {
        assert_eq!(dy.len(), self.output_dim());
        grads.dw2.add_outer(1.0, dy, &cache.hidden);
        for (g, d) in grads.db2.iter_mut().zip(dy) {
            *g += d;
        }
        let mut dh = self.w2.matvec_t(dy);
        for (d, pre) in dh.iter_mut().zip(&cache.hidden_pre) {
            if *pre <= 0.0 {
                *d = 0.0;
            }
        }
        grads.dw1.add_outer(1.0, &dh, &cache.input);
        for (g, d) in grads.db1.iter_mut().zip(&dh) {
            *g += d;
        }
        self.w1.matvec_t(&dh)
    }

    /// Input gradient only, skipping parameter-gradient accumulation (the
    /// frozen-backbone path).
    pub fn backward_data(&self, cache: &Mlp2Cache, dy: &[f64]) -> Vec<f64> {
        assert_eq!(dy.len(), self.output_dim());
        let mut dh = self.w2.matvec_t(dy);
        for (d, pre) in dh.iter_mut().zip(&cache.hidden_pre) {
            if *pre <= 0.0 {
                *d = 0.0;
            }
        }
        self.w1.matvec_t(&dh)
    }

    pub fn zero_grads(&self) -> Mlp2Grads {
        Mlp2Grads {
            dw1: DenseMatrix::zeros(self.w1.rows(), self.w1.cols()),
            db1: vec![0.0; self.b1.len()],
            dw2: DenseMatrix::zeros(self.w2.rows(), self.w2.cols()),
            db2: vec![0.0; self.b2.len()],
        }
    }
}

impl Parameterized for Mlp2 {
    fn visit_params(&self, visit: &mut dyn FnMut(&str, &[f64])) {
        visit("w1", self.w1.data());
        visit("b1", &self.b1);
        visit("w2", self.w2.data());
        visit("b2", &self.b2);
    }

    fn visit_params_mut(&mut self, visit: &mut dyn FnMut(&str, &mut [f64])) {
        visit("w1", self.w1.data_mut());
        visit("b1", &mut self.b1);
        visit("w2", self.w2.data_mut());
        visit("b2", &mut self.b2);
    }
}

impl Parameterized for Mlp2Grads {
    fn visit_params(&self, visit: &mut dyn FnMut(&str, &[f64])) {
        visit("w1", self.dw1.data());
        visit("b1", &self.db1);
        visit("w2", self.dw2.data());
        visit("b2", &self.db2);
    }

    fn visit_params_mut(&mut self, visit: &mut dyn FnMut(&str, &mut [f64])) {
        visit("w1", self.dw1.data_mut());
        visit("b1", &mut self.db1);
        visit("w2", self.dw2.data_mut());
        visit("b2", &mut self.db2);
    }
}
