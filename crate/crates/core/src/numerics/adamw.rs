//! AdamW with decoupled weight decay.
//!
//! Moment buffers are keyed by parameter name so the same optimizer instance
//! can drive any [`Parameterized`](super::Parameterized) model.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Start a new optimizer step (shared by all parameter groups updated
    /// before the next call).
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Update one named parameter group in place.
    ///
    /// Rejects non-finite gradients with a diagnostic naming the parameter.
    pub fn update(&mut self, name: &str, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dims(
                format!("adamw_step({name})"),
                format!("{} gradient entries", params.len()),
                format!("{}", grads.len()),
            ));
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                name: name.to_string(),
                index,
            });
        }
        assert!(self.step > 0, "begin_step must be called before update");
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; params.len()], vec![0.0; params.len()]));
        assert_eq!(m.len(), params.len(), "moment buffer shape drifted for {name}");

        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grads[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            params[i] -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grads_zero_decay_is_identity() {
        let mut opt = AdamW::new(0.1);
        let mut p = vec![1.5, -2.0, 0.25];
        let before = p.clone();
        for _ in 0..5 {
            opt.begin_step();
            opt.update("p", &mut p, &[0.0, 0.0, 0.0]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn degenerate_betas_single_step_closed_form() {
        // beta1 = beta2 = 0: m = g, v = g^2, update = lr * g / (|g| + eps)
        let mut opt = AdamW::new(0.1);
        opt.beta1 = 0.0;
        opt.beta2 = 0.0;
        let mut p = vec![3.0];
        opt.begin_step();
        opt.update("p", &mut p, &[1.0]).unwrap();
        let expected = 3.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-12, "p = {}", p[0]);
        assert!((p[0] - 2.9).abs() < 1e-8);
    }

    #[test]
    fn decoupled_decay_shrinks_params_without_grads() {
        let mut opt = AdamW::new(0.5);
        opt.weight_decay = 0.01;
        let mut p = vec![2.0];
        opt.begin_step();
        opt.update("p", &mut p, &[0.0]).unwrap();
        // p <- p - lr * wd * p
        assert!((p[0] - (2.0 - 0.5 * 0.01 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut opt = AdamW::new(0.1);
        let mut p = vec![1.0, 2.0];
        opt.begin_step();
        let err = opt.update("item_emb", &mut p, &[0.0, f64::NAN]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("item_emb"), "{msg}");
        assert!(msg.contains("1"), "{msg}");
    }

    #[test]
    fn descends_a_quadratic() {
        let mut opt = AdamW::new(0.05);
        let mut p = vec![4.0];
        for _ in 0..500 {
            let g = 2.0 * p[0];
            opt.begin_step();
            opt.update("p", &mut p, &[g]).unwrap();
        }
        assert!(p[0].abs() < 0.05, "p = {}", p[0]);
    }
}
