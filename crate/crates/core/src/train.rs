//! End-to-end adapter training: frozen base LM and frozen CRM, trainable
//! adapter matrices, interaction projectors, and the soft-prompt projector.
//!
//! Every sample builds its hard prompt (retrieval per config), realizes the
//! per-sample interaction matrices from the CRM representation, assembles the
//! soft-prompt embedding sequence, computes the answer-token loss, and
//! backpropagates into the trainables only. Frozen inputs are digest-checked
//! before and after each run.

use std::collections::BTreeMap;

use crate::adapter::{AdapterSet, AdapterSetGrads, AdapterVariant, Realization};
use crate::checkpoint::digest_params;
use crate::crm::{id_history, CrmModel};
use crate::data::{Catalog, InteractionSample};
use crate::error::{Error, Result};
use crate::lm::{causal_lm_loss_grad, pointwise_score, LmForward, LmInput, ToyLm};
use crate::numerics::adamw::AdamW;
use crate::numerics::mlp::{Mlp2, Mlp2Cache};
use crate::numerics::{param_map, DenseMatrix, Parameterized};
use crate::prompt::spa::{assemble_soft_prompt, embed_tokens, SoftPrompt};
use crate::prompt::vocab::{tokenize, TokenizedPrompt, Vocabulary};
use crate::prompt::{render_hard_prompt, HistoryMode, PromptTemplate, RenderedPrompt};
use crate::rng::DetRng;

/// Everything the pipeline reads but never writes during adapter training.
#[derive(Debug, Clone)]
pub struct FrozenStack {
    pub catalog: Catalog,
    pub template: PromptTemplate,
    pub vocab: Vocabulary,
    pub crm: CrmModel,
    pub lm: ToyLm,
    /// Reduced semantic vectors for retrieval; required when SUBR is on.
    pub reduced: Option<BTreeMap<u32, Vec<f64>>>,
}

impl FrozenStack {
    pub fn digests(&self) -> (String, String) {
        (digest_params(&self.crm), digest_params(&self.lm))
    }
}

/// The trainable parameter set: adapters plus the optional SPA projector.
#[derive(Debug, Clone)]
pub struct Trainables {
    pub adapters: AdapterSet,
    pub spa: Option<Mlp2>,
}

impl Parameterized for Trainables {
    fn visit_params(&self, visit: &mut dyn FnMut(&str, &[f64])) {
        self.adapters.visit_params(visit);
        if let Some(spa) = &self.spa {
            spa.visit_params(&mut |name, values| visit(&format!("spa_proj.{name}"), values));
        }
    }

    fn visit_params_mut(&mut self, visit: &mut dyn FnMut(&str, &mut [f64])) {
        self.adapters.visit_params_mut(visit);
        if let Some(spa) = &mut self.spa {
            spa.visit_params_mut(&mut |name, values| visit(&format!("spa_proj.{name}"), values));
        }
    }
}

/// Pipeline knobs shared by training and evaluation forwards.
#[derive(Debug, Clone, Copy)]
pub struct PipelineKnobs {
    pub subr: bool,
    pub spa: bool,
    /// Textual sequence length (rendered history items).
    pub k_text: usize,
    /// ID sequence length consumed by the CRM.
    pub l_id: usize,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub shots: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub knobs: PipelineKnobs,
    pub variant: AdapterVariant,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            shots: 2000,
            epochs: 3,
            batch_size: 8,
            lr: 3e-3,
            seed: 1,
            knobs: PipelineKnobs {
                subr: true,
                spa: true,
                k_text: 8,
                l_id: 30,
            },
            variant: AdapterVariant::Projected,
            rank: 4,
            alpha: 8.0,
            dropout: 0.0,
        }
    }
}

/// Named pipeline variants: the degradation lattice runs from one code path.
pub fn variant_lattice(name: &str) -> Result<(bool, bool, AdapterVariant)> {
    match name {
        // retrieval + soft prompts + projected interaction matrix
        "rellax" => Ok((true, true, AdapterVariant::Projected)),
        // retrieval only, vanilla LoRA behavior
        "rella" => Ok((true, false, AdapterVariant::Identity)),
        // plain recent-history instruction tuning
        "tallrec" | "identity-w" => Ok((false, false, AdapterVariant::Identity)),
        // multi-set scaled LoRA via a block-diagonal interaction matrix
        "ilora" => Ok((false, false, AdapterVariant::BlockDiagonal { blocks: 4 })),
        other => Err(Error::Config(format!("unknown variant `{other}`"))),
    }
}

pub fn init_trainables(frozen: &FrozenStack, cfg: &TrainConfig) -> Result<Trainables> {
    let mut rng = DetRng::new(cfg.seed).split("trainables");
    let mut adapters = AdapterSet::init(
        frozen.lm.cfg.n_layers,
        frozen.lm.cfg.d_model,
        cfg.rank,
        cfg.alpha,
        cfg.variant,
        frozen.crm.cfg.d_h,
        &mut rng,
    )?;
    for layer in adapters.layers.iter_mut() {
        layer.query.dropout = cfg.dropout;
        layer.value.dropout = cfg.dropout;
    }
    let spa = if cfg.knobs.spa {
        let mut spa_rng = rng.split("spa");
        let d_e = frozen.crm.cfg.d_e;
        let d_v = frozen.lm.cfg.d_model;
        Some(Mlp2::init(d_e, d_v, d_v, (1.0 / d_e as f64).sqrt(), (1.0 / d_v as f64).sqrt(), &mut spa_rng))
    } else {
        None
    };
    Ok(Trainables { adapters, spa })
}

/// One sample pushed through the full pipeline, with everything backward
/// needs retained.
pub struct ForwardState {
    pub rendered: RenderedPrompt,
    pub tokenized: TokenizedPrompt,
    pub h: Option<Vec<f64>>,
    pub realization: Option<Realization>,
    pub soft: Option<SoftPrompt>,
    spa_caches: Vec<Mlp2Cache>,
    pub lm_forward: LmForward,
    pub logits: Vec<f64>,
    pub loss: f64,
    pub score: f64,
}

impl ForwardState {
    /// Token spans for attention reporting (soft tokens included when
    /// assembled).
    pub fn item_spans(&self) -> &[crate::prompt::vocab::TokenSpan] {
        match &self.soft {
            Some(soft) => &soft.item_spans,
            None => &self.tokenized.item_spans,
        }
    }
}

/// Run one sample through prompt rendering, the CRM, soft-prompt assembly,
/// interaction-matrix realization, and the LM.
pub fn forward_sample(
    frozen: &FrozenStack,
    trainables: Option<&Trainables>,
    sample: &InteractionSample,
    knobs: &PipelineKnobs,
    dropout_rng: Option<&mut DetRng>,
) -> Result<ForwardState> {
    let mode = if knobs.subr { HistoryMode::Retrieved } else { HistoryMode::Recent };
    let rendered = render_hard_prompt(
        sample,
        &frozen.catalog,
        &frozen.template,
        mode,
        knobs.k_text,
        frozen.reduced.as_ref(),
    )?;
    let tokenized = tokenize(&rendered.text, &frozen.vocab, &rendered.item_spans, rendered.answer)?;

    // the per-sample CRM representation, wanted by projected interaction
    // sources; cheap enough to compute whenever adapters are attached
    let h = match trainables {
        Some(_) => Some(
            frozen
                .crm
                .forward(sample.user_id, &id_history(sample, knobs.l_id), sample.target_item)?
                .h,
        ),
        None => None,
    };

    let mut realization = None;
    let mut soft = None;
    let mut spa_caches = Vec::new();

    let lm_forward = if let Some(trainables) = trainables {
        realization = Some(trainables.adapters.realize(h.as_deref())?);
        let input_rows;
        if let Some(spa) = &trainables.spa {
            let mut soft_tokens = Vec::with_capacity(rendered.rendered_history.len() + 1);
            for (item_id, _) in rendered
                .rendered_history
                .iter()
                .copied()
                .chain([(rendered.target_item, 0u8)])
            {
                let e_item = frozen.crm.item_row(item_id)?;
                let (v, cache) = spa.forward_cached(e_item)?;
                soft_tokens.push(v);
                spa_caches.push(cache);
            }
            let assembled = assemble_soft_prompt(&tokenized, &frozen.lm.tok_emb, &soft_tokens)?;
            input_rows = assembled.rows.clone();
            soft = Some(assembled);
        } else {
            input_rows = embed_tokens(&tokenized.tokens, &frozen.lm.tok_emb);
        }
        let adapters_arg = realization
            .as_ref()
            .map(|r| (&trainables.adapters, r.per_layer.as_slice()));
        frozen
            .lm
            .forward_with_dropout(&LmInput::Rows(&input_rows), adapters_arg, dropout_rng)?
    } else {
        frozen.lm.forward(&LmInput::Tokens(&tokenized.tokens), None)?
    };

    let logits = frozen.lm.last_logits(&lm_forward);
    let loss = crate::lm::causal_lm_loss(&logits, tokenized.answer_id)?;
    let score = pointwise_score(&logits, frozen.vocab.yes_id(), frozen.vocab.no_id());

    Ok(ForwardState {
        rendered,
        tokenized,
        h,
        realization,
        soft,
        spa_caches,
        lm_forward,
        logits,
        loss,
        score,
    })
}

/// Accumulate gradients for one forwarded sample into `grad_map`.
pub fn backward_sample(
    frozen: &FrozenStack,
    trainables: &Trainables,
    state: &ForwardState,
    grad_map: &mut BTreeMap<String, Vec<f64>>,
) -> Result<()> {
    let (_, dlogits) = causal_lm_loss_grad(&state.logits, state.tokenized.answer_id)?;
    let p = state.lm_forward.hidden.rows();
    let d = frozen.lm.cfg.d_model;
    let mut d_hidden = DenseMatrix::zeros(p, d);
    d_hidden.row_mut(p - 1).copy_from_slice(&frozen.lm.tok_emb.matvec_t(&dlogits));

    let realization = state
        .realization
        .as_ref()
        .expect("backward_sample requires a trainable forward");
    let mut adapter_grads: AdapterSetGrads = trainables.adapters.zero_grads();
    let d_rows = frozen.lm.backward(
        &state.lm_forward,
        &d_hidden,
        Some((&trainables.adapters, &realization.per_layer, &mut adapter_grads)),
        None,
    );

    // soft tokens: route embedding-row gradients through the SPA projector
    if let (Some(spa), Some(soft)) = (&trainables.spa, &state.soft) {
        let mut spa_grads = spa.zero_grads();
        for (j, &row) in soft.inserted_rows.iter().enumerate() {
            spa.backward(&state.spa_caches[j], d_rows.row(row), &mut spa_grads);
        }
        spa_grads.visit_params(&mut |name, values| {
            accumulate(grad_map, &format!("spa_proj.{name}"), values);
        });
    }

    // interaction-matrix gradients through the per-adapter projectors
    let mut proj_grads = BTreeMap::new();
    trainables
        .adapters
        .backward_interaction(realization, &mut adapter_grads, &mut proj_grads)?;
    adapter_grads.visit_params(&mut |name, values| accumulate(grad_map, name, values));
    for (name, values) in proj_grads {
        accumulate(grad_map, &name, &values);
    }
    Ok(())
}

fn accumulate(map: &mut BTreeMap<String, Vec<f64>>, name: &str, values: &[f64]) {
    match map.get_mut(name) {
        Some(slot) => {
            for (g, v) in slot.iter_mut().zip(values) {
                *g += v;
            }
        }
        None => {
            map.insert(name.to_string(), values.to_vec());
        }
    }
}

/// Per-run audit record for the freezing contract and the trainable set.
#[derive(Debug, Clone)]
pub struct TrainAudit {
    pub crm_digest: String,
    pub lm_digest: String,
    /// Trainable parameter names whose values changed during the run.
    pub changed_params: Vec<String>,
    pub steps: usize,
}

/// Train adapters, interaction projectors, and the SPA projector with AdamW
/// and a linear learning-rate decay to zero. Deterministic under the config
/// seed. The CRM and base LM digests must be identical before and after.
pub fn train_rellax(
    frozen: &FrozenStack,
    mut trainables: Trainables,
    train_samples: &[InteractionSample],
    cfg: &TrainConfig,
) -> Result<(Trainables, Vec<f64>, TrainAudit)> {
    let (crm_digest_before, lm_digest_before) = frozen.digests();
    let initial_params = param_map(&trainables);

    let shots = crate::data::samples::sample_few_shot(train_samples, cfg.shots, cfg.seed)?;
    let mut opt = AdamW::new(cfg.lr);
    let batches_per_epoch = shots.len().div_ceil(cfg.batch_size.max(1));
    let total_steps = (cfg.epochs * batches_per_epoch).max(1);
    let mut loss_history = Vec::with_capacity(total_steps);
    let mut dropout_root = DetRng::new(cfg.seed).split("adapter-dropout");
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..shots.len()).collect();
        DetRng::new(cfg.seed).split(&format!("train-epoch-{epoch}")).shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut grad_map = BTreeMap::new();
            let mut batch_loss = 0.0;
            for &idx in chunk {
                let sample = &shots[idx];
                let dropout_rng = if cfg.dropout > 0.0 { Some(&mut dropout_root) } else { None };
                let state = forward_sample(frozen, Some(&trainables), sample, &cfg.knobs, dropout_rng)?;
                batch_loss += state.loss;
                backward_sample(frozen, &trainables, &state, &mut grad_map)?;
            }
            step += 1;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged { step });
            }
            loss_history.push(batch_loss / chunk.len() as f64);

            opt.lr = cfg.lr * (1.0 - (step - 1) as f64 / total_steps as f64).max(0.0);
            opt.begin_step();
            let mut update_err = None;
            trainables.visit_params_mut(&mut |name, values| {
                if update_err.is_some() {
                    return;
                }
                if let Some(grads) = grad_map.get(name) {
                    if let Err(e) = opt.update(name, values, grads) {
                        update_err = Some(e);
                    }
                }
            });
            if let Some(e) = update_err {
                return Err(e);
            }
        }
    }

    let (crm_digest_after, lm_digest_after) = frozen.digests();
    if crm_digest_after != crm_digest_before {
        return Err(Error::FrozenWeightsChanged {
            which: "crm".into(),
            expected: crm_digest_before,
            actual: crm_digest_after,
        });
    }
    if lm_digest_after != lm_digest_before {
        return Err(Error::FrozenWeightsChanged {
            which: "base-lm".into(),
            expected: lm_digest_before,
            actual: lm_digest_after,
        });
    }

    let final_params = param_map(&trainables);
    let changed_params = initial_params
        .iter()
        .filter(|(name, values)| final_params[*name] != **values)
        .map(|(name, _)| name.clone())
        .collect();

    Ok((
        trainables,
        loss_history,
        TrainAudit {
            crm_digest: crm_digest_after,
            lm_digest: lm_digest_after,
            changed_params,
            steps: step,
        },
    ))
}
