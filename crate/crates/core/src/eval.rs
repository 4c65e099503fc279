//! Evaluation over test samples: pointwise scores aggregated into AUC, log
//! loss, and accuracy, plus sweep tables over the textual and ID sequence
//! lengths and per-sample attention case studies.

use std::time::Instant;

use crate::data::InteractionSample;
use crate::error::Result;
use crate::lm::extract_item_attention;
use crate::metrics::{compute_auc, compute_logloss_acc};
use crate::train::{forward_sample, FrozenStack, PipelineKnobs, Trainables};

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub auc: f64,
    pub logloss: f64,
    pub acc: f64,
    pub labels: Vec<u8>,
    pub scores: Vec<f64>,
    /// Mean prompt length in tokens (soft tokens included).
    pub mean_tokens: f64,
    pub config_echo: String,
    pub runtime_secs: f64,
}

impl EvalReport {
    /// One-row TSV body matching [`EvalReport::TSV_HEADER`].
    pub const TSV_HEADER: &'static str = "auc\tlogloss\tacc\tn\tmean_tokens";

    pub fn tsv_row(&self) -> String {
        format!(
            "{:.16e}\t{:.16e}\t{:.16e}\t{}\t{:.16e}",
            self.auc,
            self.logloss,
            self.acc,
            self.labels.len(),
            self.mean_tokens
        )
    }

    /// Line-delimited per-sample records: `index<TAB>label<TAB>score`.
    pub fn score_lines(&self) -> String {
        let mut out = String::from("index\tlabel\tscore\n");
        for (i, (label, score)) in self.labels.iter().zip(&self.scores).enumerate() {
            out.push_str(&format!("{i}\t{label}\t{score:.16e}\n"));
        }
        out
    }

    pub fn human_readable(&self) -> String {
        format!(
            "n = {}   AUC = {:.4}   LogLoss = {:.4}   ACC = {:.4}   mean tokens = {:.1}   ({:.2}s)",
            self.labels.len(),
            self.auc,
            self.logloss,
            self.acc,
            self.mean_tokens,
            self.runtime_secs
        )
    }
}

/// Score every sample with the current (possibly untrained) configuration.
///
/// `trainables = None` is the adapter-free base model; adapters with all-zero
/// `B` reproduce it exactly.
pub fn evaluate(
    frozen: &FrozenStack,
    trainables: Option<&Trainables>,
    samples: &[InteractionSample],
    knobs: &PipelineKnobs,
    config_echo: &str,
) -> Result<EvalReport> {
    let started = Instant::now();
    let mut labels = Vec::with_capacity(samples.len());
    let mut scores = Vec::with_capacity(samples.len());
    let mut token_total = 0usize;
    for sample in samples {
        let state = forward_sample(frozen, trainables, sample, knobs, None)?;
        labels.push(sample.label);
        scores.push(state.score);
        token_total += state.lm_forward.hidden.rows();
    }
    let auc = compute_auc(&labels, &scores)?;
    let (logloss, acc) = compute_logloss_acc(&labels, &scores);
    Ok(EvalReport {
        auc,
        logloss,
        acc,
        mean_tokens: token_total as f64 / samples.len().max(1) as f64,
        labels,
        scores,
        config_echo: config_echo.to_string(),
        runtime_secs: started.elapsed().as_secs_f64(),
    })
}

/// Metric rows while varying the textual sequence length K.
pub fn sweep_k(
    frozen: &FrozenStack,
    trainables: Option<&Trainables>,
    samples: &[InteractionSample],
    base: &PipelineKnobs,
    ks: &[usize],
    config_echo: &str,
) -> Result<Vec<(usize, EvalReport)>> {
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let knobs = PipelineKnobs { k_text: k, ..*base };
        rows.push((k, evaluate(frozen, trainables, samples, &knobs, config_echo)?));
    }
    Ok(rows)
}

/// Metric rows while varying the ID sequence length L consumed by the CRM.
pub fn sweep_l(
    frozen: &FrozenStack,
    trainables: Option<&Trainables>,
    samples: &[InteractionSample],
    base: &PipelineKnobs,
    ls: &[usize],
    config_echo: &str,
) -> Result<Vec<(usize, EvalReport)>> {
    let mut rows = Vec::with_capacity(ls.len());
    for &l in ls {
        let knobs = PipelineKnobs { l_id: l, ..*base };
        rows.push((l, evaluate(frozen, trainables, samples, &knobs, config_echo)?));
    }
    Ok(rows)
}

pub fn sweep_tsv(rows: &[(usize, EvalReport)], knob: &str) -> String {
    let mut out = format!("{knob}\t{}\n", EvalReport::TSV_HEADER);
    for (value, report) in rows {
        out.push_str(&format!("{value}\t{}\n", report.tsv_row()));
    }
    out
}

/// Attention mass per rendered history item for one sample, with titles.
#[derive(Debug, Clone)]
pub struct CaseStudy {
    pub target_title: String,
    pub label: u8,
    pub score: f64,
    /// `(title, judgment label, attention mass)` in rendered history order.
    pub items: Vec<(String, u8, f64)>,
    /// Attention mass on the target's own span.
    pub target_mass: f64,
}

impl CaseStudy {
    pub fn tsv(&self) -> String {
        let mut out = String::from("position\ttitle\tjudgment\tattention\n");
        for (i, (title, label, mass)) in self.items.iter().enumerate() {
            let judgment = if *label == 1 { "liked" } else { "disliked" };
            out.push_str(&format!("{}\t{title}\t{judgment}\t{mass:.16e}\n", i + 1));
        }
        out.push_str(&format!("target\t{}\t-\t{:.16e}\n", self.target_title, self.target_mass));
        out
    }
}

pub fn case_study(
    frozen: &FrozenStack,
    trainables: Option<&Trainables>,
    sample: &InteractionSample,
    knobs: &PipelineKnobs,
) -> Result<CaseStudy> {
    let state = forward_sample(frozen, trainables, sample, knobs, None)?;
    let extract = extract_item_attention(&state.lm_forward, state.item_spans())?;
    let mut items = Vec::with_capacity(state.rendered.rendered_history.len());
    for ((item_id, label), mass) in state.rendered.rendered_history.iter().zip(&extract.per_item) {
        items.push((frozen.catalog.item(*item_id)?.title.clone(), *label, *mass));
    }
    let target_mass = *extract.per_item.last().expect("target span present");
    Ok(CaseStudy {
        target_title: frozen.catalog.item(sample.target_item)?.title.clone(),
        label: sample.label,
        score: state.score,
        items,
        target_mass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::train::tests::tiny_stack;
    use crate::train::{init_trainables, TrainConfig};

    fn test_split(samples: &[InteractionSample]) -> Vec<InteractionSample> {
        samples.iter().filter(|s| s.split == Split::Test).cloned().collect()
    }

    #[test]
    fn zero_b_adapters_match_adapter_free_model_exactly() {
        let (frozen, samples) = tiny_stack(11);
        let test = test_split(&samples);
        let knobs = PipelineKnobs {
            subr: true,
            spa: false,
            k_text: 3,
            l_id: 6,
        };
        let cfg = TrainConfig {
            knobs,
            ..TrainConfig::default()
        };
        let trainables = init_trainables(&frozen, &cfg).unwrap();
        let with = evaluate(&frozen, Some(&trainables), &test, &knobs, "with").unwrap();
        let without = evaluate(&frozen, None, &test, &knobs, "without").unwrap();
        for (a, b) in with.scores.iter().zip(&without.scores) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(with.auc, without.auc);
        assert_eq!(with.logloss, without.logloss);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let (frozen, samples) = tiny_stack(12);
        let test = test_split(&samples);
        let knobs = PipelineKnobs {
            subr: true,
            spa: true,
            k_text: 3,
            l_id: 6,
        };
        let cfg = TrainConfig {
            knobs,
            ..TrainConfig::default()
        };
        let trainables = init_trainables(&frozen, &cfg).unwrap();
        let a = evaluate(&frozen, Some(&trainables), &test, &knobs, "x").unwrap();
        let b = evaluate(&frozen, Some(&trainables), &test, &knobs, "x").unwrap();
        assert_eq!(a.scores, b.scores);
        assert_eq!(a.tsv_row(), b.tsv_row());
    }

    #[test]
    fn sweep_k_produces_monotone_token_counts() {
        let (frozen, samples) = tiny_stack(13);
        let test = test_split(&samples);
        let knobs = PipelineKnobs {
            subr: false,
            spa: false,
            k_text: 1,
            l_id: 6,
        };
        let rows = sweep_k(&frozen, None, &test[..8.min(test.len())], &knobs, &[1, 2, 4], "sweep").unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows[0].1.mean_tokens < rows[1].1.mean_tokens);
        assert!(rows[1].1.mean_tokens < rows[2].1.mean_tokens);
        let tsv = sweep_tsv(&rows, "k");
        assert!(tsv.lines().count() == 4);
        assert!(tsv.starts_with("k\tauc"));
    }

    #[test]
    fn case_study_reports_one_mass_per_rendered_item() {
        let (frozen, samples) = tiny_stack(14);
        let sample = samples.iter().find(|s| s.split == Split::Test).unwrap();
        let knobs = PipelineKnobs {
            subr: true,
            spa: true,
            k_text: 4,
            l_id: 6,
        };
        let cfg = TrainConfig {
            knobs,
            ..TrainConfig::default()
        };
        let trainables = init_trainables(&frozen, &cfg).unwrap();
        let study = case_study(&frozen, Some(&trainables), sample, &knobs).unwrap();
        assert_eq!(study.items.len(), 4.min(sample.history.len()));
        assert!(study.items.iter().all(|(_, _, m)| *m >= 0.0));
        assert!(study.target_mass >= 0.0);
        let tsv = study.tsv();
        assert!(tsv.contains("target\t"));
    }
}
