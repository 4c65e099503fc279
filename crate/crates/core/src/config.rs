//! Run configuration: one hand-editable TOML file, with every field
//! defaulted and CLI flags overriding file values. The effective config is
//! echoed verbatim into every output directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterVariant;
use crate::error::{Error, Result};
use crate::train::{variant_lattice, PipelineKnobs, TrainConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every stage splits its own stream from it by name.
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub crm: CrmSection,
    pub lm: LmSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            data: DataSection::default(),
            model: ModelSection::default(),
            crm: CrmSection::default(),
            lm: LmSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// `synthetic` or `movielens`.
    pub source: String,
    /// Directory holding `ratings.dat`, `movies.dat`, `users.dat`.
    pub dir: Option<PathBuf>,
    /// Labeling rule: `ml-1m`, `ml-25m`, or `bookcrossing`.
    pub label_rule: String,
    /// File decoding for real corpora: `latin1` (MovieLens-1M) or `utf8`.
    pub encoding: String,
    /// Prompt template name from the registry.
    pub template: String,
    /// Optional template file merged over the built-ins.
    pub template_file: Option<PathBuf>,
    /// Semantic vector source: `planted` (synthetic only), `toy-lm`, or
    /// `import`.
    pub vectors: String,
    /// Vector import file (`item_id<TAB>v1,v2,...`).
    pub vector_file: Option<PathBuf>,
    pub min_history: usize,
    // synthetic corpus knobs
    pub users: usize,
    pub items: usize,
    pub clusters: usize,
    pub events_per_user: usize,
    pub preferred_mix: f64,
    pub label_noise: f64,
    pub vector_dim: usize,
    pub vector_noise: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: "synthetic".into(),
            dir: None,
            label_rule: "ml-1m".into(),
            encoding: "latin1".into(),
            template: "synthetic".into(),
            template_file: None,
            vectors: "planted".into(),
            vector_file: None,
            min_history: 5,
            users: 150,
            items: 240,
            clusters: 6,
            events_per_user: 40,
            preferred_mix: 0.5,
            label_noise: 0.1,
            vector_dim: 16,
            vector_noise: 0.25,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_e: usize,
    pub d_h: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_limit: usize,
    /// PCA output dimension; clamped to `min(d_q, d_z, rank)` at fit time.
    pub d_q: usize,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    /// CRM aggregator: `target-attention` or `mean-pool`.
    pub aggregator: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_e: 16,
            d_h: 32,
            d_model: 48,
            n_layers: 2,
            n_heads: 2,
            context_limit: 512,
            d_q: 8,
            rank: 4,
            alpha: 8.0,
            dropout: 0.0,
            aggregator: "target-attention".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrmSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for CrmSection {
    fn default() -> Self {
        CrmSection {
            epochs: 20,
            batch_size: 32,
            lr: 3e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Number of rendered training prompts used for base pretraining.
    pub prompts: usize,
}

impl Default for LmSection {
    fn default() -> Self {
        LmSection {
            epochs: 2,
            batch_size: 8,
            lr: 3e-3,
            prompts: 400,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub shots: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub k_text: usize,
    pub l_id: usize,
    /// `rellax`, `rella`, `tallrec`/`identity-w`, `ilora`, or `custom`.
    pub variant: String,
    /// Overrides honored only when `variant = "custom"`.
    pub subr: bool,
    pub spa: bool,
    pub adapter: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            shots: 2000,
            epochs: 3,
            batch_size: 8,
            lr: 3e-3,
            k_text: 8,
            l_id: 30,
            variant: "rellax".into(),
            subr: true,
            spa: true,
            adapter: "projected".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub k_text: usize,
    pub l_id: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { k_text: 8, l_id: 30 }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Canonical TOML echo of the effective configuration.
    pub fn echo(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Resolve the variant name (plus custom overrides) into pipeline flags.
    pub fn resolved_variant(&self) -> Result<(bool, bool, AdapterVariant)> {
        if self.train.variant == "custom" {
            let adapter: AdapterVariant = self.train.adapter.parse()?;
            Ok((self.train.subr, self.train.spa, adapter))
        } else {
            variant_lattice(&self.train.variant)
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let (subr, spa, variant) = self.resolved_variant()?;
        Ok(TrainConfig {
            shots: self.train.shots,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            seed: self.seed,
            knobs: PipelineKnobs {
                subr,
                spa,
                k_text: self.train.k_text,
                l_id: self.train.l_id,
            },
            variant,
            rank: self.model.rank,
            alpha: self.model.alpha,
            dropout: self.model.dropout,
        })
    }

    pub fn eval_knobs(&self) -> Result<PipelineKnobs> {
        let (subr, spa, _) = self.resolved_variant()?;
        Ok(PipelineKnobs {
            subr,
            spa,
            k_text: self.eval.k_text,
            l_id: self.eval.l_id,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let echo = cfg.echo();
        let back: RunConfig = toml::from_str(&echo).unwrap();
        assert_eq!(back.echo(), echo);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let text = "seed = 9\n[train]\nvariant = \"rella\"\nshots = 64\n";
        let cfg: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.shots, 64);
        assert_eq!(cfg.train.epochs, 3);
        let (subr, spa, _) = cfg.resolved_variant().unwrap();
        assert!(subr);
        assert!(!spa);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = "seed = 1\nnot_a_field = 2\n";
        assert!(toml::from_str::<RunConfig>(text).is_err());
    }

    #[test]
    fn custom_variant_honors_flags() {
        let text = "[train]\nvariant = \"custom\"\nsubr = false\nspa = true\nadapter = \"block-diagonal:2\"\n";
        let cfg: RunConfig = toml::from_str(text).unwrap();
        let (subr, spa, adapter) = cfg.resolved_variant().unwrap();
        assert!(!subr);
        assert!(spa);
        assert!(matches!(adapter, AdapterVariant::BlockDiagonal { blocks: 2 }));
    }
}
