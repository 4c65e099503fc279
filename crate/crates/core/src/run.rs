//! Pipeline assembly: turn a [`RunConfig`] into a frozen stack plus samples,
//! running every pretraining stage deterministically from the root seed.

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::RunConfig;
use crate::crm::{pretrain_crm, CrmConfig, CrmModel, CrmTrainConfig};
use crate::data::movielens::{load_movielens_1m, load_vector_file, Encoding, LoadReport, MovieLensPaths};
use crate::data::samples::{build_samples, SampleRules};
use crate::data::synthetic::{generate, SyntheticSpec};
use crate::data::{Catalog, InteractionSample, Split};
use crate::error::{Error, Result};
use crate::lm::{pretrain_lm, LmConfig, LmPretrainConfig, ToyLm, ToyLmEncoder};
use crate::prompt::vocab::{tokenize, Vocabulary};
use crate::prompt::{render_hard_prompt, render_item_description, HistoryMode, TemplateRegistry};
use crate::rng::DetRng;
use crate::subr::{build_semantic_index, ImportEncoder, ItemEncoder, PcaModel};
use crate::train::FrozenStack;

pub struct BuiltPipeline {
    pub frozen: FrozenStack,
    pub samples: Vec<InteractionSample>,
    pub load_report: Option<LoadReport>,
    pub pca: Option<PcaModel>,
}

impl BuiltPipeline {
    pub fn train_samples(&self) -> Vec<InteractionSample> {
        self.samples.iter().filter(|s| s.split == Split::Train).cloned().collect()
    }

    pub fn test_samples(&self) -> Vec<InteractionSample> {
        self.samples.iter().filter(|s| s.split == Split::Test).cloned().collect()
    }
}

fn load_data(cfg: &RunConfig) -> Result<(Catalog, Vec<crate::data::InteractionEvent>, Option<BTreeMap<u32, Vec<f64>>>, Option<LoadReport>)> {
    match cfg.data.source.as_str() {
        "synthetic" => {
            let corpus = generate(&SyntheticSpec {
                n_users: cfg.data.users,
                n_items: cfg.data.items,
                n_clusters: cfg.data.clusters,
                events_per_user: cfg.data.events_per_user,
                preferred_mix: cfg.data.preferred_mix,
                label_noise: cfg.data.label_noise,
                vector_dim: cfg.data.vector_dim,
                vector_noise: cfg.data.vector_noise,
                seed: cfg.seed,
            });
            Ok((corpus.catalog, corpus.events, Some(corpus.vectors), None))
        }
        "movielens" => {
            let dir = cfg
                .data
                .dir
                .as_ref()
                .ok_or_else(|| Error::Config("data.dir is required for movielens".into()))?;
            let encoding = match cfg.data.encoding.as_str() {
                "latin1" => Encoding::Latin1,
                "utf8" => Encoding::Utf8,
                other => return Err(Error::Config(format!("unknown encoding `{other}`"))),
            };
            let (catalog, events, report) = load_movielens_1m(&MovieLensPaths::in_dir(dir), encoding)?;
            Ok((catalog, events, None, Some(report)))
        }
        other => Err(Error::Config(format!("unknown data source `{other}`"))),
    }
}

/// Vocabulary over every item description, every user profile clause, and a
/// few fully rendered prompts (scaffolding words, judgments, index numbers).
fn build_vocabulary(
    catalog: &Catalog,
    samples: &[InteractionSample],
    template: &crate::prompt::PromptTemplate,
    k_text: usize,
) -> Result<Vocabulary> {
    let mut corpus = Vec::new();
    for item in catalog.items.values() {
        corpus.push(render_item_description(item, template)?);
    }
    for user in catalog.users.values() {
        let mut profile = String::new();
        for (_, value) in &user.profile {
            profile.push_str(value);
            profile.push(' ');
        }
        corpus.push(profile);
    }
    let k_cap = k_text.max(64);
    let indices: Vec<String> = (1..=k_cap).map(|i| i.to_string()).collect();
    corpus.push(indices.join(" "));
    corpus.push("liked disliked".to_string());
    for sample in samples.iter().take(3) {
        let rendered = render_hard_prompt(sample, catalog, template, HistoryMode::Recent, k_text.max(2), None)?;
        corpus.push(rendered.text);
    }
    Ok(Vocabulary::build(corpus.iter().map(String::as_str)))
}

/// Build the whole frozen stack: data, vocabulary, pretrained CRM, briefly
/// pretrained base LM, and the reduced semantic index.
pub fn build_pipeline(cfg: &RunConfig) -> Result<BuiltPipeline> {
    let (catalog, events, planted_vectors, load_report) = load_data(cfg)?;
    let rules = SampleRules {
        label_rule: cfg.data.label_rule.parse()?,
        min_history: cfg.data.min_history,
        ..SampleRules::default()
    };
    let samples = build_samples(&events, &rules)?;
    let train: Vec<InteractionSample> = samples.iter().filter(|s| s.split == Split::Train).cloned().collect();
    if train.is_empty() {
        return Err(Error::Config("no training samples after preprocessing".into()));
    }

    let mut registry = TemplateRegistry::builtin();
    if let Some(path) = &cfg.data.template_file {
        registry.load_file(path)?;
    }
    let template = registry.get(&cfg.data.template)?.clone();
    template.validate()?;

    let vocab = build_vocabulary(&catalog, &train, &template, cfg.train.k_text)?;

    // conventional recommendation model, pretrained on the full train split
    let users: Vec<u32> = catalog.users.keys().copied().collect();
    let items: Vec<u32> = catalog.items.keys().copied().collect();
    let mut crm_rng = DetRng::new(cfg.seed).split("crm-init");
    let crm = CrmModel::init(
        CrmConfig {
            d_e: cfg.model.d_e,
            d_h: cfg.model.d_h,
            aggregator: cfg.model.aggregator.parse()?,
        },
        &users,
        &items,
        &mut crm_rng,
    );
    let (crm, _) = pretrain_crm(
        crm,
        &train,
        &CrmTrainConfig {
            epochs: cfg.crm.epochs,
            batch_size: cfg.crm.batch_size,
            lr: cfg.crm.lr,
            l_id: cfg.train.l_id,
            seed: cfg.seed,
        },
    )?;

    // base LM briefly pretrained on rendered prompts, answers absent
    let mut lm_rng = DetRng::new(cfg.seed).split("lm-init");
    let lm = ToyLm::init(
        LmConfig {
            vocab_size: vocab.len(),
            d_model: cfg.model.d_model,
            n_layers: cfg.model.n_layers,
            n_heads: cfg.model.n_heads,
            context_limit: cfg.model.context_limit,
        },
        &mut lm_rng,
    );
    let mut sequences = Vec::new();
    for sample in train.iter().take(cfg.lm.prompts) {
        let rendered = render_hard_prompt(sample, &catalog, &template, HistoryMode::Recent, cfg.train.k_text, None)?;
        sequences.push(tokenize(&rendered.text, &vocab, &[], rendered.answer)?.tokens);
    }
    let (lm, _) = pretrain_lm(
        lm,
        &sequences,
        &LmPretrainConfig {
            epochs: cfg.lm.epochs,
            batch_size: cfg.lm.batch_size,
            lr: cfg.lm.lr,
            seed: cfg.seed,
        },
    )?;

    // semantic vectors -> PCA -> reduced retrieval index
    let raw_vectors: BTreeMap<u32, Vec<f64>> = match cfg.data.vectors.as_str() {
        "planted" => planted_vectors.ok_or_else(|| Error::Config("planted vectors require the synthetic source".into()))?,
        "toy-lm" => {
            let encoder = ToyLmEncoder {
                lm: &lm,
                vocab: &vocab,
                template: &template,
            };
            catalog
                .items
                .values()
                .map(|item| Ok((item.item_id, encoder.encode(item)?)))
                .collect::<Result<_>>()?
        }
        "import" => {
            let path = cfg
                .data
                .vector_file
                .as_ref()
                .ok_or_else(|| Error::Config("data.vector_file is required for import".into()))?;
            load_vector_file(path)?
        }
        other => return Err(Error::Config(format!("unknown vector source `{other}`"))),
    };
    let encoder = ImportEncoder::new(&raw_vectors)?;
    let d_q = cfg.model.d_q.min(encoder.dim);
    let (index, pca) = build_semantic_index(&catalog.items, &encoder, d_q)?;
    let reduced = index.into_iter().map(|(id, v)| (id, v.reduced)).collect();

    Ok(BuiltPipeline {
        frozen: FrozenStack {
            catalog,
            template,
            vocab,
            crm,
            lm,
            reduced: Some(reduced),
        },
        samples,
        load_report,
        pca: Some(pca),
    })
}

/// Standard artifact layout inside an output directory.
pub struct OutputLayout<'a> {
    pub dir: &'a Path,
}

impl OutputLayout<'_> {
    pub fn write(&self, name: &str, contents: &str) -> Result<()> {
        std::fs::create_dir_all(self.dir)?;
        std::fs::write(self.dir.join(name), contents)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.data.users = 20;
        cfg.data.items = 24;
        cfg.data.clusters = 4;
        cfg.data.events_per_user = 12;
        cfg.data.vector_dim = 6;
        cfg.model.d_e = 6;
        cfg.model.d_h = 8;
        cfg.model.d_model = 16;
        cfg.model.d_q = 3;
        cfg.model.rank = 2;
        cfg.crm.epochs = 2;
        cfg.lm.epochs = 1;
        cfg.lm.prompts = 40;
        cfg.train.k_text = 3;
        cfg.train.l_id = 6;
        cfg.train.shots = 16;
        cfg.train.epochs = 1;
        cfg
    }

    #[test]
    fn pipeline_builds_and_is_deterministic() {
        let cfg = small_cfg();
        let a = build_pipeline(&cfg).unwrap();
        let b = build_pipeline(&cfg).unwrap();
        let (crm_a, lm_a) = a.frozen.digests();
        let (crm_b, lm_b) = b.frozen.digests();
        assert_eq!(crm_a, crm_b);
        assert_eq!(lm_a, lm_b);
        assert!(!a.train_samples().is_empty());
        assert!(!a.test_samples().is_empty());
        assert_eq!(a.frozen.reduced, b.frozen.reduced);
    }

    #[test]
    fn toy_lm_vector_source_works() {
        let mut cfg = small_cfg();
        cfg.data.vectors = "toy-lm".into();
        let built = build_pipeline(&cfg).unwrap();
        let reduced = built.frozen.reduced.as_ref().unwrap();
        assert_eq!(reduced.len(), 24);
        assert!(reduced.values().all(|v| v.len() == 3));
    }

    #[test]
    fn trained_pipeline_beats_chance_on_small_planted_task() {
        use crate::eval::evaluate;
        use crate::train::{init_trainables, train_rellax};

        let mut cfg = small_cfg();
        cfg.data.users = 40;
        cfg.data.events_per_user = 24;
        cfg.data.label_noise = 0.0;
        cfg.train.shots = 200;
        cfg.train.epochs = 2;
        cfg.train.lr = 1e-2;
        cfg.crm.epochs = 6;
        cfg.lm.epochs = 2;
        cfg.lm.prompts = 150;
        let built = build_pipeline(&cfg).unwrap();
        let train_cfg = cfg.train_config().unwrap();
        let trainables = init_trainables(&built.frozen, &train_cfg).unwrap();
        let (trained, _, _) = train_rellax(&built.frozen, trainables, &built.train_samples(), &train_cfg).unwrap();
        let report = evaluate(
            &built.frozen,
            Some(&trained),
            &built.test_samples(),
            &train_cfg.knobs,
            "smoke",
        )
        .unwrap();
        assert!(report.auc > 0.6, "AUC {}", report.auc);
    }
}

