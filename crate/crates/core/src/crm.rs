//! Conventional recommendation model: ID embedding tables, an aggregator, and
//! a sigmoid head, pretrained with binary cross-entropy.
//!
//! After pretraining the model is frozen; downstream it supplies per-item ID
//! embeddings for soft prompts and the per-sample representation `h` that
//! drives the adapter interaction matrix. Two aggregators ship: target
//! attention (default) and mean pooling (invariant to history order, used by
//! the smallest tests).

use std::collections::BTreeMap;

use crate::data::InteractionSample;
use crate::error::{Error, Result};
use crate::numerics::adamw::AdamW;
use crate::numerics::mlp::{Mlp2, Mlp2Cache, Mlp2Grads};
use crate::numerics::{dot, param_map, sigmoid, softmax_inplace, DenseMatrix, Parameterized};
use crate::rng::DetRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregator {
    /// Attention of history embeddings against the target embedding.
    #[default]
    TargetAttention,
    /// Plain mean over history embeddings.
    MeanPool,
}

impl std::str::FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target-attention" => Ok(Aggregator::TargetAttention),
            "mean-pool" => Ok(Aggregator::MeanPool),
            other => Err(Error::Config(format!("unknown aggregator `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CrmConfig {
    pub d_e: usize,
    pub d_h: usize,
    pub aggregator: Aggregator,
}

impl Default for CrmConfig {
    fn default() -> Self {
        CrmConfig {
            d_e: 16,
            d_h: 32,
            aggregator: Aggregator::TargetAttention,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CrmModel {
    pub cfg: CrmConfig,
    user_index: BTreeMap<u32, usize>,
    item_index: BTreeMap<u32, usize>,
    pub user_emb: DenseMatrix,
    pub item_emb: DenseMatrix,
    /// Aggregator MLP mapping `[r_u ‖ pooled ‖ e_ic]` to the representation.
    pub agg: Mlp2,
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CrmOutput {
    pub h: Vec<f64>,
    pub y_hat: f64,
}

#[derive(Debug, Clone)]
pub struct CrmCache {
    user_id: u32,
    history: Vec<u32>,
    target: u32,
    pub pooled: Vec<f64>,
    attention: Option<Vec<f64>>,
    mlp_cache: Mlp2Cache,
    pub output: CrmOutput,
}

#[derive(Debug, Clone)]
pub struct CrmGrads {
    pub user_emb: DenseMatrix,
    pub item_emb: DenseMatrix,
    pub agg: Mlp2Grads,
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
}

impl CrmModel {
    /// Seeded init: embeddings N(0, 0.01²), head bias zero so the initial
    /// prediction sits near 0.5.
    pub fn init(cfg: CrmConfig, user_ids: &[u32], item_ids: &[u32], rng: &mut DetRng) -> Self {
        let mut emb_rng = rng.split("crm-emb");
        let user_emb = DenseMatrix::randn(user_ids.len(), cfg.d_e, 0.01, &mut emb_rng);
        let item_emb = DenseMatrix::randn(item_ids.len(), cfg.d_e, 0.01, &mut emb_rng);
        let mut agg_rng = rng.split("crm-agg");
        let input = 3 * cfg.d_e;
        let agg = Mlp2::init(
            input,
            cfg.d_h,
            cfg.d_h,
            (1.0 / input as f64).sqrt(),
            (1.0 / cfg.d_h as f64).sqrt(),
            &mut agg_rng,
        );
        let mut head_rng = rng.split("crm-head");
        let head_w = (0..cfg.d_h).map(|_| 0.1 * head_rng.next_normal()).collect();
        CrmModel {
            cfg,
            user_index: user_ids.iter().enumerate().map(|(i, id)| (*id, i)).collect(),
            item_index: item_ids.iter().enumerate().map(|(i, id)| (*id, i)).collect(),
            user_emb,
            item_emb,
            agg,
            head_w,
            head_b: vec![0.0],
        }
    }

    pub fn user_row(&self, id: u32) -> Result<&[f64]> {
        let idx = self.user_index.get(&id).ok_or(Error::UnknownId { kind: "user", id })?;
        Ok(self.user_emb.row(*idx))
    }

    pub fn item_row(&self, id: u32) -> Result<&[f64]> {
        let idx = self.item_index.get(&id).ok_or(Error::UnknownId { kind: "item", id })?;
        Ok(self.item_emb.row(*idx))
    }

    /// `[e_{i_1}, ..., e_{i_L}, e_{i_c}]`: history rows then the target row.
    pub fn lookup_item_embeddings(&self, history: &[u32], target: u32) -> Result<Vec<Vec<f64>>> {
        let mut rows = Vec::with_capacity(history.len() + 1);
        for id in history {
            rows.push(self.item_row(*id)?.to_vec());
        }
        rows.push(self.item_row(target)?.to_vec());
        Ok(rows)
    }

    pub fn forward(&self, user_id: u32, history: &[u32], target: u32) -> Result<CrmOutput> {
        Ok(self.forward_cached(user_id, history, target)?.output)
    }

    pub fn forward_cached(&self, user_id: u32, history: &[u32], target: u32) -> Result<CrmCache> {
        if history.is_empty() {
            return Err(Error::EmptyHistory { user_id });
        }
        let d_e = self.cfg.d_e;
        let r_u = self.user_row(user_id)?;
        let e_c = self.item_row(target)?;

        let (pooled, attention) = match self.cfg.aggregator {
            Aggregator::MeanPool => {
                let mut pooled = vec![0.0; d_e];
                for id in history {
                    let row = self.item_row(*id)?;
                    for (p, v) in pooled.iter_mut().zip(row) {
                        *p += v / history.len() as f64;
                    }
                }
                (pooled, None)
            }
            Aggregator::TargetAttention => {
                let scale = 1.0 / (d_e as f64).sqrt();
                let mut weights: Vec<f64> = history
                    .iter()
                    .map(|id| self.item_row(*id).map(|row| dot(row, e_c) * scale))
                    .collect::<Result<_>>()?;
                softmax_inplace(&mut weights);
                let mut pooled = vec![0.0; d_e];
                for (w, id) in weights.iter().zip(history) {
                    let row = self.item_row(*id)?;
                    for (p, v) in pooled.iter_mut().zip(row) {
                        *p += w * v;
                    }
                }
                (pooled, Some(weights))
            }
        };

        let mut z = Vec::with_capacity(3 * d_e);
        z.extend_from_slice(r_u);
        z.extend_from_slice(&pooled);
        z.extend_from_slice(e_c);
        let (h, mlp_cache) = self.agg.forward_cached(&z)?;
        let y_hat = sigmoid(dot(&self.head_w, &h) + self.head_b[0]);

        Ok(CrmCache {
            user_id,
            history: history.to_vec(),
            target,
            pooled,
            attention,
            mlp_cache,
            output: CrmOutput { h, y_hat },
        })
    }

    /// Accumulate BCE gradients for one sample into `grads`.
    pub fn backward_bce(&self, cache: &CrmCache, label: u8, weight: f64, grads: &mut CrmGrads) -> Result<()> {
        let d_e = self.cfg.d_e;
        let d_logit = weight * (cache.output.y_hat - f64::from(label));

        for (g, h) in grads.head_w.iter_mut().zip(&cache.output.h) {
            *g += d_logit * h;
        }
        grads.head_b[0] += d_logit;
        let dh: Vec<f64> = self.head_w.iter().map(|w| d_logit * w).collect();

        let dz = self.agg.backward(&cache.mlp_cache, &dh, &mut grads.agg);
        let (dr_u, rest) = dz.split_at(d_e);
        let (dpooled, de_c_direct) = rest.split_at(d_e);

        let user_idx = *self.user_index.get(&cache.user_id).unwrap();
        for (g, d) in grads.user_emb.row_mut(user_idx).iter_mut().zip(dr_u) {
            *g += d;
        }
        let target_idx = *self.item_index.get(&cache.target).unwrap();
        let mut de_c: Vec<f64> = de_c_direct.to_vec();

        match (&self.cfg.aggregator, &cache.attention) {
            (Aggregator::MeanPool, _) => {
                let inv = 1.0 / cache.history.len() as f64;
                for id in &cache.history {
                    let idx = *self.item_index.get(id).unwrap();
                    for (g, d) in grads.item_emb.row_mut(idx).iter_mut().zip(dpooled) {
                        *g += inv * d;
                    }
                }
            }
            (Aggregator::TargetAttention, Some(weights)) => {
                let scale = 1.0 / (d_e as f64).sqrt();
                let e_c = self.item_row(cache.target)?.to_vec();
                // value path and score path per history position
                let dws: Vec<f64> = cache
                    .history
                    .iter()
                    .map(|id| dot(self.item_row(*id).unwrap(), dpooled))
                    .collect();
                let mix: f64 = weights.iter().zip(&dws).map(|(w, d)| w * d).sum();
                for ((id, w), dw) in cache.history.iter().zip(weights).zip(&dws) {
                    let idx = *self.item_index.get(id).unwrap();
                    let dq = w * (dw - mix);
                    let row = self.item_emb.row(idx).to_vec();
                    {
                        let grow = grads.item_emb.row_mut(idx);
                        for i in 0..d_e {
                            // value contribution plus score contribution
                            grow[i] += w * dpooled[i] + dq * scale * e_c[i];
                        }
                    }
                    for i in 0..d_e {
                        de_c[i] += dq * scale * row[i];
                    }
                }
            }
            (Aggregator::TargetAttention, None) => unreachable!("attention cache missing"),
        }

        for (g, d) in grads.item_emb.row_mut(target_idx).iter_mut().zip(&de_c) {
            *g += d;
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> CrmGrads {
        CrmGrads {
            user_emb: DenseMatrix::zeros(self.user_emb.rows(), self.user_emb.cols()),
            item_emb: DenseMatrix::zeros(self.item_emb.rows(), self.item_emb.cols()),
            agg: self.agg.zero_grads(),
            head_w: vec![0.0; self.head_w.len()],
            head_b: vec![0.0],
        }
    }
}

impl Parameterized for CrmModel {
    fn visit_params(&self, visit: &mut dyn FnMut(&str, &[f64])) {
        visit("user_emb", self.user_emb.data());
        visit("item_emb", self.item_emb.data());
        self.agg.visit_params(&mut |name, values| visit(&format!("agg.{name}"), values));
        visit("head.w", &self.head_w);
        visit("head.b", &self.head_b);
    }

    fn visit_params_mut(&mut self, visit: &mut dyn FnMut(&str, &mut [f64])) {
        visit("user_emb", self.user_emb.data_mut());
        visit("item_emb", self.item_emb.data_mut());
        self.agg.visit_params_mut(&mut |name, values| visit(&format!("agg.{name}"), values));
        visit("head.w", &mut self.head_w);
        visit("head.b", &mut self.head_b);
    }
}

impl Parameterized for CrmGrads {
    fn visit_params(&self, visit: &mut dyn FnMut(&str, &[f64])) {
        visit("user_emb", self.user_emb.data());
        visit("item_emb", self.item_emb.data());
        self.agg.visit_params(&mut |name, values| visit(&format!("agg.{name}"), values));
        visit("head.w", &self.head_w);
        visit("head.b", &self.head_b);
    }

    fn visit_params_mut(&mut self, visit: &mut dyn FnMut(&str, &mut [f64])) {
        visit("user_emb", self.user_emb.data_mut());
        visit("item_emb", self.item_emb.data_mut());
        self.agg.visit_params_mut(&mut |name, values| visit(&format!("agg.{name}"), values));
        visit("head.w", &mut self.head_w);
        visit("head.b", &mut self.head_b);
    }
}

/// Binary cross-entropy of one prediction.
pub fn bce(label: u8, y_hat: f64) -> f64 {
    let y = f64::from(label);
    let p = y_hat.clamp(1e-12, 1.0 - 1e-12);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

#[derive(Debug, Clone)]
pub struct CrmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// History truncated to the most recent `l_id` events.
    pub l_id: usize,
    pub seed: u64,
}

impl Default for CrmTrainConfig {
    fn default() -> Self {
        CrmTrainConfig {
            epochs: 20,
            batch_size: 32,
            lr: 3e-3,
            l_id: 30,
            seed: 1,
        }
    }
}

/// Truncate a lifelong history to its most recent `l_id` item ids.
pub fn id_history(sample: &InteractionSample, l_id: usize) -> Vec<u32> {
    let start = sample.history.len().saturating_sub(l_id);
    sample.history[start..].iter().map(|h| h.item_id).collect()
}

/// Pretrain with AdamW on mean BCE; deterministic under the config seed.
/// Returns the trained model and the per-epoch mean training loss.
pub fn pretrain_crm(
    mut model: CrmModel,
    samples: &[InteractionSample],
    cfg: &CrmTrainConfig,
) -> Result<(CrmModel, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::EmptyEvents);
    }
    let mut opt = AdamW::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        DetRng::new(cfg.seed).split(&format!("crm-epoch-{epoch}")).shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut grads = model.zero_grads();
            let mut batch_loss = 0.0;
            for &idx in chunk {
                let sample = &samples[idx];
                let history = id_history(sample, cfg.l_id);
                let cache = model.forward_cached(sample.user_id, &history, sample.target_item)?;
                batch_loss += bce(sample.label, cache.output.y_hat);
                model.backward_bce(&cache, sample.label, 1.0 / chunk.len() as f64, &mut grads)?;
            }
            step += 1;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged { step });
            }
            epoch_loss += batch_loss;
            let grad_map = param_map(&grads);
            opt.begin_step();
            let mut update_err = None;
            model.visit_params_mut(&mut |name, values| {
                if update_err.is_some() {
                    return;
                }
                if let Err(e) = opt.update(name, values, &grad_map[name]) {
                    update_err = Some(e);
                }
            });
            if let Some(e) = update_err {
                return Err(e);
            }
        }
        losses.push(epoch_loss / samples.len() as f64);
    }
    Ok((model, losses))
}
