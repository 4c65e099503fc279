//! Invariant suite behind the `selftest` subcommand: algebraic equivalences,
//! gradient checks, scoring properties, and retrieval/metric cross-checks,
//! each cheap enough to run on every checkout.

use std::collections::BTreeMap;

use crate::adapter::{
    adapter_apply, cflora_delta_composite, cflora_delta_decomposed, make_interaction_matrix, AdapterVariant,
    CfLoraAdapter, InteractionSource,
};
use crate::lm::pointwise_score;
use crate::metrics::compute_auc;
use crate::numerics::adamw::AdamW;
use crate::numerics::gradcheck::check_gradients;
use crate::numerics::mlp::Mlp2;
use crate::numerics::{param_map, DenseMatrix};
use crate::rng::DetRng;

type CheckResult = Result<(), String>;

pub struct CheckOutcome {
    pub name: &'static str,
    pub result: CheckResult,
}

fn fail(msg: String) -> CheckResult {
    Err(msg)
}

fn matmul_associativity() -> CheckResult {
    let mut rng = DetRng::new(101);
    for trial in 0..100 {
        let (a, b, c, d) = (
            1 + rng.next_below(16),
            1 + rng.next_below(16),
            1 + rng.next_below(16),
            1 + rng.next_below(16),
        );
        let ma = DenseMatrix::randn(a, b, 1.0, &mut rng);
        let mb = DenseMatrix::randn(b, c, 1.0, &mut rng);
        let mc = DenseMatrix::randn(c, d, 1.0, &mut rng);
        let diff = ma.matmul(&mb).matmul(&mc).max_abs_diff(&ma.matmul(&mb.matmul(&mc)));
        if diff >= 1e-9 {
            return fail(format!("trial {trial}: associativity residual {diff}"));
        }
    }
    Ok(())
}

fn mlp_scalar_loop() -> CheckResult {
    let mut rng = DetRng::new(102);
    for _ in 0..20 {
        let m = Mlp2::init(3, 4, 2, 0.7, 0.7, &mut rng);
        let x: Vec<f64> = (0..3).map(|_| rng.next_normal()).collect();
        let y = m.forward(&x).map_err(|e| e.to_string())?;
        let mut hidden = vec![0.0; 4];
        for h in 0..4 {
            let mut acc = m.b1[h];
            for (i, xi) in x.iter().enumerate() {
                acc += m.w1.get(h, i) * xi;
            }
            hidden[h] = acc.max(0.0);
        }
        for o in 0..2 {
            let mut acc = m.b2[o];
            for (h, hv) in hidden.iter().enumerate() {
                acc += m.w2.get(o, h) * hv;
            }
            if (y[o] - acc).abs() >= 1e-12 {
                return fail(format!("output {o}: {} vs {acc}", y[o]));
            }
        }
    }
    Ok(())
}

fn adamw_identity() -> CheckResult {
    let mut opt = AdamW::new(0.1);
    let mut p = vec![0.5, -1.25, 3.0];
    let before = p.clone();
    for _ in 0..3 {
        opt.begin_step();
        opt.update("p", &mut p, &[0.0; 3]).map_err(|e| e.to_string())?;
    }
    if p != before {
        return fail(format!("{before:?} drifted to {p:?}"));
    }
    Ok(())
}

fn cflora_equivalence() -> CheckResult {
    let mut rng = DetRng::new(103);
    for trial in 0..200 {
        let r = 1 << rng.next_below(4);
        let d_down = 1 + rng.next_below(32);
        let d_up = 1 + rng.next_below(32);
        let a = DenseMatrix::randn(r, d_down, 1.0, &mut rng);
        let b = DenseMatrix::randn(d_up, r, 1.0, &mut rng);
        let w = DenseMatrix::randn(r, r, 1.0, &mut rng);
        let composite = cflora_delta_composite(&a, &b, &w).map_err(|e| e.to_string())?;
        let decomposed = cflora_delta_decomposed(&a, &b, &w).map_err(|e| e.to_string())?;
        let diff = composite.max_abs_diff(&decomposed);
        if diff >= 1e-10 {
            return fail(format!("trial {trial}: composite vs decomposed diff {diff}"));
        }
    }
    Ok(())
}

fn degradation_lattice() -> CheckResult {
    let mut rng = DetRng::new(104);
    let r = 4;
    let a = DenseMatrix::randn(r, 10, 1.0, &mut rng);
    let b = DenseMatrix::randn(12, r, 1.0, &mut rng);

    let identity = make_interaction_matrix(&InteractionSource::Identity, r, None).map_err(|e| e.to_string())?;
    let vanilla = cflora_delta_composite(&a, &b, &identity).map_err(|e| e.to_string())?;
    let diff = vanilla.max_abs_diff(&b.matmul(&a));
    if diff >= 1e-12 {
        return fail(format!("identity W vs B*A diff {diff}"));
    }

    let alphas = [0.4, -1.1];
    let source = InteractionSource::BlockDiagonal { alphas: alphas.to_vec() };
    let w2 = make_interaction_matrix(&source, r, None).map_err(|e| e.to_string())?;
    let block = cflora_delta_composite(&a, &b, &w2).map_err(|e| e.to_string())?;
    let mut oracle = DenseMatrix::zeros(12, 10);
    for j in 0..r {
        let alpha = alphas[j / 2];
        for row in 0..12 {
            for col in 0..10 {
                let v = oracle.get(row, col) + alpha * b.get(row, j) * a.get(j, col);
                oracle.set(row, col, v);
            }
        }
    }
    let diff = block.max_abs_diff(&oracle);
    if diff >= 1e-12 {
        return fail(format!("block-diagonal W vs weighted sum diff {diff}"));
    }
    Ok(())
}

fn zero_b_identity() -> CheckResult {
    let mut rng = DetRng::new(105);
    let adapter = CfLoraAdapter::init(12, 12, 4, 8.0, AdapterVariant::Projected, 6, &mut rng).map_err(|e| e.to_string())?;
    let h: Vec<f64> = (0..6).map(|_| rng.next_normal()).collect();
    let w = make_interaction_matrix(&adapter.w_source, 4, Some(&h)).map_err(|e| e.to_string())?;
    for _ in 0..10 {
        let x: Vec<f64> = (0..12).map(|_| rng.next_normal()).collect();
        let y = adapter_apply(&adapter, &w, &x).map_err(|e| e.to_string())?;
        if y.iter().any(|v| v.abs() >= 1e-12) {
            return fail("zero-B adapter produced nonzero output".to_string());
        }
    }
    Ok(())
}

fn pointwise_properties() -> CheckResult {
    let mut rng = DetRng::new(106);
    for _ in 0..1000 {
        let mut logits = vec![0.0; 8];
        for l in logits.iter_mut() {
            *l = 6.0 * rng.next_normal();
        }
        let a = pointwise_score(&logits, 4, 5);
        let b = pointwise_score(&logits, 5, 4);
        if (a + b - 1.0).abs() >= 1e-12 {
            return fail(format!("swap sum {}", a + b));
        }
        let c = 10.0 * rng.next_normal();
        let mut shifted = logits.clone();
        shifted[4] += c;
        shifted[5] += c;
        if (pointwise_score(&shifted, 4, 5) - a).abs() >= 1e-12 {
            return fail("shift invariance violated".to_string());
        }
    }
    let probe = |m: f64, n: f64| {
        let mut logits = vec![0.0; 6];
        logits[4] = m;
        logits[5] = n;
        pointwise_score(&logits, 4, 5)
    };
    if (probe(0.0, 0.0) - 0.5).abs() >= 1e-12 || (probe(1.0, 0.0) - 0.731059).abs() >= 5e-7 || (probe(0.0, 2.0) - 0.119203).abs() >= 5e-7 {
        return fail("worked pointwise values off".to_string());
    }
    Ok(())
}

fn retrieval_against_exhaustive_scan() -> CheckResult {
    let mut rng = DetRng::new(107);
    for trial in 0..200 {
        let n = 2 + rng.next_below(20);
        let mut reduced: BTreeMap<u32, Vec<f64>> = (1..=n as u32 + 1)
            .map(|id| (id, (0..4).map(|_| rng.next_normal()).collect()))
            .collect();
        if n > 3 {
            let dup = reduced[&1].clone();
            reduced.insert(2, dup);
        }
        let history: Vec<u32> = (1..=n as u32).collect();
        let target = n as u32 + 1;
        let k = 1 + rng.next_below(n);
        let got = crate::subr::retrieve_top_k_indices(&history, target, k, &reduced).map_err(|e| e.to_string())?;
        // independent selection scan
        let want = {
            if k >= n {
                (0..n).collect::<Vec<_>>()
            } else {
                let tv = &reduced[&target];
                let sims: Vec<f64> = history
                    .iter()
                    .map(|id| crate::subr::cosine_similarity(&reduced[id], tv))
                    .collect();
                let mut chosen: Vec<usize> = Vec::new();
                while chosen.len() < k {
                    let mut best: Option<usize> = None;
                    for pos in 0..n {
                        if chosen.contains(&pos) {
                            continue;
                        }
                        best = Some(match best {
                            None => pos,
                            Some(b) => {
                                if sims[pos] > sims[b]
                                    || (sims[pos] == sims[b] && pos > b)
                                    || (sims[pos] == sims[b] && pos == b && history[pos] < history[b])
                                {
                                    pos
                                } else {
                                    b
                                }
                            }
                        });
                    }
                    chosen.push(best.unwrap());
                }
                chosen.sort_unstable();
                chosen
            }
        };
        if got != want {
            return fail(format!("trial {trial}: {got:?} vs {want:?}"));
        }
    }
    Ok(())
}

fn auc_against_pair_counting() -> CheckResult {
    let mut rng = DetRng::new(108);
    for trial in 0..200 {
        let n = 2 + rng.next_below(60);
        let labels: Vec<u8> = (0..n).map(|_| rng.next_below(2) as u8).collect();
        let scores: Vec<f64> = (0..n).map(|_| (rng.next_below(10)) as f64 / 9.0).collect();
        if labels.iter().all(|&l| l == 1) || labels.iter().all(|&l| l == 0) {
            continue;
        }
        let fast = compute_auc(&labels, &scores).map_err(|e| e.to_string())?;
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..n {
            if labels[i] != 1 {
                continue;
            }
            for j in 0..n {
                if labels[j] != 0 {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        let slow = wins / pairs;
        if (fast - slow).abs() >= 1e-12 {
            return fail(format!("trial {trial}: {fast} vs {slow}"));
        }
    }
    Ok(())
}

fn gradient_check_mlp_chain() -> CheckResult {
    let mut rng = DetRng::new(109);
    let mut m = Mlp2::init(3, 5, 2, 0.6, 0.6, &mut rng);
    let x = [0.4, -0.9, 1.3];
    let target = [0.2, -0.5];
    let loss_fn = |m: &Mlp2| {
        let y = m.forward(&x).unwrap();
        0.5 * y.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
    };
    let (y, cache) = m.forward_cached(&x).map_err(|e| e.to_string())?;
    let dy: Vec<f64> = y.iter().zip(&target).map(|(a, b)| a - b).collect();
    let mut grads = m.zero_grads();
    m.backward(&cache, &dy, &mut grads);
    let analytic = param_map(&grads);
    let report = check_gradients(&mut m, loss_fn, &analytic, 1e-6).map_err(|e| e.to_string())?;
    if !report.passed() {
        return fail(report.to_string());
    }
    Ok(())
}

/// Run every check, returning outcomes in execution order.
pub fn run_all() -> Vec<CheckOutcome> {
    let checks: Vec<(&'static str, fn() -> CheckResult)> = vec![
        ("matmul-associativity", matmul_associativity),
        ("mlp2-scalar-loop-oracle", mlp_scalar_loop),
        ("adamw-zero-grad-identity", adamw_identity),
        ("cflora-composite-vs-decomposed", cflora_equivalence),
        ("cflora-degradation-lattice", degradation_lattice),
        ("adapter-zero-b-identity", zero_b_identity),
        ("pointwise-score-properties", pointwise_properties),
        ("retrieval-vs-exhaustive-scan", retrieval_against_exhaustive_scan),
        ("auc-vs-pair-counting", auc_against_pair_counting),
        ("mlp-gradient-check", gradient_check_mlp_chain),
    ];
    checks
        .into_iter()
        .map(|(name, check)| CheckOutcome { name, result: check() })
        .collect()
}

#[cfg(test)]
mod tests {
    #[test]
    fn every_selftest_check_passes() {
        for outcome in super::run_all() {
            assert!(outcome.result.is_ok(), "{}: {:?}", outcome.name, outcome.result);
        }
    }
}
