//! Finite-difference gradient verification.
//!
//! Every module with trainable parameters declares hand-written backward
//! rules; this harness compares them against central differences entry by
//! entry. It is the single policing mechanism for all analytic gradients in
//! the crate.

use std::collections::BTreeMap;

use super::Parameterized;
use crate::error::{Error, Result};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Relative error uses `|a - b| / max(|a|, |b|, REL_FLOOR)` so near-zero
/// gradients are compared absolutely rather than amplifying rounding noise.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked_entries: usize,
    pub max_rel_error: f64,
    pub worst_param: Option<(String, usize)>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "gradcheck: {} entries, max rel error {:.3e} (tolerance {:.1e})",
            self.checked_entries, self.max_rel_error, self.tolerance
        )?;
        if let Some((name, idx)) = &self.worst_param {
            write!(f, ", worst {name}[{idx}]")?;
        }
        Ok(())
    }
}

/// Compare `analytic` gradients against central finite differences of
/// `loss_fn` for every entry named in `analytic`.
///
/// `loss_fn` must be deterministic; two identical evaluations are compared
/// bit-for-bit before any probing starts.
pub fn check_gradients<M: Parameterized>(
    model: &mut M,
    loss_fn: impl Fn(&M) -> f64,
    analytic: &BTreeMap<String, Vec<f64>>,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let first = loss_fn(model);
    let second = loss_fn(model);
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministicLoss { first, second });
    }

    // entry lengths up front, so a stale gradient map fails loudly
    let mut lengths: BTreeMap<String, usize> = BTreeMap::new();
    model.visit_params(&mut |name, values| {
        lengths.insert(name.to_string(), values.len());
    });
    for (name, grad) in analytic {
        match lengths.get(name) {
            Some(&len) if len == grad.len() => {}
            Some(&len) => {
                return Err(Error::dims(
                    format!("check_gradients({name})"),
                    format!("{len} entries"),
                    format!("{}", grad.len()),
                ))
            }
            None => {
                return Err(Error::dims(
                    "check_gradients",
                    format!("parameter `{name}` present in model"),
                    "missing".to_string(),
                ))
            }
        }
    }

    let mut report = GradCheckReport {
        checked_entries: 0,
        max_rel_error: 0.0,
        worst_param: None,
        tolerance,
    };

    for (name, grad) in analytic {
        for idx in 0..grad.len() {
            let nudge = |m: &mut M, delta: f64| {
                m.visit_params_mut(&mut |n, values| {
                    if n == name {
                        values[idx] += delta;
                    }
                });
            };
            nudge(model, FD_STEP);
            let plus = loss_fn(model);
            nudge(model, -2.0 * FD_STEP);
            let minus = loss_fn(model);
            nudge(model, FD_STEP);

            let fd = (plus - minus) / (2.0 * FD_STEP);
            let a = grad[idx];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(REL_FLOOR);
            report.checked_entries += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = Some((name.clone(), idx));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Scalar {
        x: Vec<f64>,
    }

    impl Parameterized for Scalar {
        fn visit_params(&self, visit: &mut dyn FnMut(&str, &[f64])) {
            visit("x", &self.x);
        }
        fn visit_params_mut(&mut self, visit: &mut dyn FnMut(&str, &mut [f64])) {
            visit("x", &mut self.x);
        }
    }

    #[test]
    fn quadratic_is_nearly_exact() {
        // loss(x) = x^2 at x = 3: analytic 6, central difference 6 exactly
        let mut m = Scalar { x: vec![3.0] };
        let analytic = BTreeMap::from([("x".to_string(), vec![6.0])]);
        let report = check_gradients(&mut m, |m| m.x[0] * m.x[0], &analytic, 1e-8).unwrap();
        assert!(report.passed(), "{report}");
        assert!(report.max_rel_error < 1e-8);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let mut m = Scalar { x: vec![3.0] };
        let analytic = BTreeMap::from([("x".to_string(), vec![5.0])]);
        let report = check_gradients(&mut m, |m| m.x[0] * m.x[0], &analytic, 1e-4).unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn nondeterministic_loss_aborts() {
        use std::cell::Cell;
        let mut m = Scalar { x: vec![1.0] };
        let calls = Cell::new(0.0);
        let analytic = BTreeMap::from([("x".to_string(), vec![0.0])]);
        let err = check_gradients(
            &mut m,
            |_| {
                calls.set(calls.get() + 1.0);
                calls.get()
            },
            &analytic,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministicLoss { .. }));
    }

    #[test]
    fn unknown_parameter_name_is_an_error() {
        let mut m = Scalar { x: vec![1.0] };
        let analytic = BTreeMap::from([("y".to_string(), vec![0.0])]);
        assert!(check_gradients(&mut m, |m| m.x[0], &analytic, 1e-4).is_err());
    }
}
