//! Toy causal transformer with adapter hook points.
//!
//! Pre-normalization residual blocks, multi-head causal self-attention with
//! CFLoRA hooks on the query and value projections, a rectified-linear
//! feed-forward of width `4 * d_model`, learned absolute position embeddings,
//! and an output projection weight-tied to the token embedding table.
//!
//! Forward passes accept either token ids or pre-assembled embedding rows
//! (the soft-prompt path). Backward is hand-written reverse-mode over this
//! fixed structure; passing no base-gradient sink skips frozen-backbone
//! accumulation during adapter training.

use crate::adapter::{adapter_apply_cached, adapter_backward, AdapterCache, AdapterSet, AdapterSetGrads, RealizedW};
use crate::error::{Error, Result};
use crate::numerics::mlp::{Mlp2, Mlp2Cache, Mlp2Grads};
use crate::numerics::{axpy, dot, sigmoid, softmax_inplace, DenseMatrix, Parameterized};
use crate::prompt::vocab::TokenSpan;
use crate::rng::DetRng;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_limit: usize,
}

impl LmConfig {
    pub fn desk_scale(vocab_size: usize) -> Self {
        LmConfig {
            vocab_size,
            d_model: 48,
            n_layers: 2,
            n_heads: 2,
            context_limit: 512,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        LayerNorm {
            gain: vec![1.0; d],
            bias: vec![0.0; d],
        }
    }

    fn forward_rows(&self, x: &DenseMatrix) -> (DenseMatrix, LnCache) {
        let (rows, d) = (x.rows(), x.cols());
        let mut out = DenseMatrix::zeros(rows, d);
        let mut xhat = DenseMatrix::zeros(rows, d);
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = inv;
            let xh = xhat.row_mut(r);
            for i in 0..d {
                xh[i] = (row[i] - mean) * inv;
            }
            let o = out.row_mut(r);
            for i in 0..d {
                o[i] = self.gain[i] * xh[i] + self.bias[i];
            }
        }
        (out, LnCache { xhat, inv_std })
    }

    /// Returns `dL/dx`; gain/bias gradients are accumulated when provided.
    fn backward_rows(
        &self,
        cache: &LnCache,
        dy: &DenseMatrix,
        mut grads: Option<(&mut [f64], &mut [f64])>,
    ) -> DenseMatrix {
        let (rows, d) = (dy.rows(), dy.cols());
        let mut dx = DenseMatrix::zeros(rows, d);
        for r in 0..rows {
            let dyr = dy.row(r);
            let xh = cache.xhat.row(r);
            if let Some((dgain, dbias)) = grads.as_mut() {
                for i in 0..d {
                    dgain[i] += dyr[i] * xh[i];
                    dbias[i] += dyr[i];
                }
            }
            let mut mean_dxhat = 0.0;
            let mut mean_dxhat_xhat = 0.0;
            for i in 0..d {
                let dxh = dyr[i] * self.gain[i];
                mean_dxhat += dxh;
                mean_dxhat_xhat += dxh * xh[i];
            }
            mean_dxhat /= d as f64;
            mean_dxhat_xhat /= d as f64;
            let inv = cache.inv_std[r];
            let dxr = dx.row_mut(r);
            for i in 0..d {
                let dxh = dyr[i] * self.gain[i];
                dxr[i] = inv * (dxh - mean_dxhat - xh[i] * mean_dxhat_xhat);
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub struct LnCache {
    xhat: DenseMatrix,
    inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub wq: DenseMatrix,
    pub wk: DenseMatrix,
    pub wv: DenseMatrix,
    pub wo: DenseMatrix,
    pub ln2: LayerNorm,
    pub ffn: Mlp2,
}

#[derive(Debug, Clone)]
pub struct ToyLm {
    pub cfg: LmConfig,
    pub tok_emb: DenseMatrix,
    pub pos_emb: DenseMatrix,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
}

/// Input to a forward pass.
pub enum LmInput<'a> {
    Tokens(&'a [u32]),
    /// Pre-assembled embedding rows (`P x d_model`), e.g. with soft tokens.
    Rows(&'a DenseMatrix),
}

#[derive(Debug, Clone)]
struct BlockCache {
    ln1: LnCache,
    a: DenseMatrix,
    q: DenseMatrix,
    k: DenseMatrix,
    v: DenseMatrix,
    q_ad: Option<Vec<AdapterCache>>,
    v_ad: Option<Vec<AdapterCache>>,
    /// Per head: row-softmaxed causal attention, `P x P` lower triangle.
    att: Vec<DenseMatrix>,
    ho: DenseMatrix,
    ln2: LnCache,
    ffn: Vec<Mlp2Cache>,
}

#[derive(Debug, Clone)]
pub struct LmForward {
    /// Final hidden states after the last norm, `P x d_model`.
    pub hidden: DenseMatrix,
    tokens: Option<Vec<u32>>,
    block_caches: Vec<BlockCache>,
    lnf: LnCache,
}

impl ToyLm {
    pub fn init(cfg: LmConfig, rng: &mut DetRng) -> Self {
        assert!(cfg.d_model % cfg.n_heads == 0, "n_heads must divide d_model");
        let d = cfg.d_model;
        let mut emb_rng = rng.split("lm-emb");
        // unit-norm-ish token rows keep the weight-tied logits at a usable
        // temperature behind the final norm at desk-scale dims
        let tok_emb = DenseMatrix::randn(cfg.vocab_size, d, (1.0 / d as f64).sqrt(), &mut emb_rng);
        let pos_emb = DenseMatrix::randn(cfg.context_limit, d, 0.02, &mut emb_rng);
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for layer in 0..cfg.n_layers {
            let mut block_rng = rng.split(&format!("lm-block-{layer}"));
            let sigma = (1.0 / d as f64).sqrt();
            blocks.push(Block {
                ln1: LayerNorm::new(d),
                wq: DenseMatrix::randn(d, d, sigma, &mut block_rng),
                wk: DenseMatrix::randn(d, d, sigma, &mut block_rng),
                wv: DenseMatrix::randn(d, d, sigma, &mut block_rng),
                wo: DenseMatrix::randn(d, d, sigma / (2.0 * cfg.n_layers as f64), &mut block_rng),
                ln2: LayerNorm::new(d),
                ffn: Mlp2::init(d, 4 * d, d, sigma, (1.0 / (4.0 * d as f64)).sqrt() / (2.0 * cfg.n_layers as f64), &mut block_rng),
            });
        }
        ToyLm {
            cfg,
            tok_emb,
            pos_emb,
            blocks,
            ln_f: LayerNorm::new(d),
        }
    }

    fn input_rows(&self, input: &LmInput) -> Result<(DenseMatrix, Option<Vec<u32>>)> {
        let (mut rows, tokens) = match input {
            LmInput::Tokens(tokens) => {
                let mut rows = DenseMatrix::zeros(tokens.len(), self.cfg.d_model);
                for (r, &t) in tokens.iter().enumerate() {
                    if t as usize >= self.cfg.vocab_size {
                        return Err(Error::UnknownToken(format!("id {t}")));
                    }
                    rows.row_mut(r).copy_from_slice(self.tok_emb.row(t as usize));
                }
                (rows, Some(tokens.to_vec()))
            }
            LmInput::Rows(rows) => {
                if rows.cols() != self.cfg.d_model {
                    return Err(Error::dims("lm_forward", format!("{}", self.cfg.d_model), format!("{}", rows.cols())));
                }
                ((*rows).clone(), None)
            }
        };
        let p = rows.rows();
        if p == 0 {
            return Err(Error::ContextLimit { len: 0, limit: self.cfg.context_limit });
        }
        if p > self.cfg.context_limit {
            return Err(Error::ContextLimit {
                len: p,
                limit: self.cfg.context_limit,
            });
        }
        for r in 0..p {
            let pos = self.pos_emb.row(r).to_vec();
            axpy(rows.row_mut(r), 1.0, &pos);
        }
        Ok((rows, tokens))
    }

    /// Deterministic forward pass. Each adapted projection computes
    /// `base(x) + adapter(x)`; with no adapters the base path runs alone.
    pub fn forward(
        &self,
        input: &LmInput,
        adapters: Option<(&AdapterSet, &[RealizedW])>,
    ) -> Result<LmForward> {
        self.forward_with_dropout(input, adapters, None)
    }

    /// Forward with optional adapter-path dropout (training only); the mask
    /// source must be a dedicated stream so evaluation stays deterministic.
    pub fn forward_with_dropout(
        &self,
        input: &LmInput,
        adapters: Option<(&AdapterSet, &[RealizedW])>,
        mut dropout_rng: Option<&mut DetRng>,
    ) -> Result<LmForward> {
        if let Some((set, ws)) = adapters {
            if set.layers.len() != self.cfg.n_layers || ws.len() != self.cfg.n_layers {
                return Err(Error::dims(
                    "lm_forward adapters",
                    format!("{} layers", self.cfg.n_layers),
                    format!("{} adapters, {} realized", set.layers.len(), ws.len()),
                ));
            }
        }
        let (mut x, tokens) = self.input_rows(input)?;
        let p = x.rows();
        let d = self.cfg.d_model;
        let heads = self.cfg.n_heads;
        let hd = self.cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();

        let mut block_caches = Vec::with_capacity(self.cfg.n_layers);
        for (layer_idx, block) in self.blocks.iter().enumerate() {
            let (a, ln1) = block.ln1.forward_rows(&x);

            let mut q = DenseMatrix::zeros(p, d);
            let mut k = DenseMatrix::zeros(p, d);
            let mut v = DenseMatrix::zeros(p, d);
            let mut q_ad = None;
            let mut v_ad = None;
            if let Some((set, ws)) = adapters {
                let layer = &set.layers[layer_idx];
                let mut q_caches = Vec::with_capacity(p);
                let mut v_caches = Vec::with_capacity(p);
                for t in 0..p {
                    let at = a.row(t);
                    q.row_mut(t).copy_from_slice(&block.wq.matvec(at));
                    let mask = make_mask(layer.query.dropout, layer.query.rank, &mut dropout_rng);
                    let (qa, qc) = adapter_apply_cached(&layer.query, &ws[layer_idx].query, at, mask)?;
                    axpy(q.row_mut(t), 1.0, &qa);
                    q_caches.push(qc);

                    k.row_mut(t).copy_from_slice(&block.wk.matvec(at));

                    v.row_mut(t).copy_from_slice(&block.wv.matvec(at));
                    let mask = make_mask(layer.value.dropout, layer.value.rank, &mut dropout_rng);
                    let (va, vc) = adapter_apply_cached(&layer.value, &ws[layer_idx].value, at, mask)?;
                    axpy(v.row_mut(t), 1.0, &va);
                    v_caches.push(vc);
                }
                q_ad = Some(q_caches);
                v_ad = Some(v_caches);
            } else {
                for t in 0..p {
                    let at = a.row(t);
                    q.row_mut(t).copy_from_slice(&block.wq.matvec(at));
                    k.row_mut(t).copy_from_slice(&block.wk.matvec(at));
                    v.row_mut(t).copy_from_slice(&block.wv.matvec(at));
                }
            }

            // causal attention per head
            let mut att = Vec::with_capacity(heads);
            let mut ho = DenseMatrix::zeros(p, d);
            for h in 0..heads {
                let off = h * hd;
                let mut att_h = DenseMatrix::zeros(p, p);
                for t in 0..p {
                    let qt = &q.row(t)[off..off + hd];
                    let mut logits: Vec<f64> = (0..=t).map(|s| scale * dot(qt, &k.row(s)[off..off + hd])).collect();
                    softmax_inplace(&mut logits);
                    att_h.row_mut(t)[..=t].copy_from_slice(&logits);
                    let out = &mut ho.row_mut(t)[off..off + hd];
                    for (s, w) in logits.iter().enumerate() {
                        let vs = &v.row(s)[off..off + hd];
                        for i in 0..hd {
                            out[i] += w * vs[i];
                        }
                    }
                }
                att.push(att_h);
            }

            // residual attention output, then pre-norm feed-forward
            let mut x_mid = x.clone();
            for t in 0..p {
                let o = block.wo.matvec(ho.row(t));
                axpy(x_mid.row_mut(t), 1.0, &o);
            }
            let (b_rows, ln2) = block.ln2.forward_rows(&x_mid);
            let mut ffn_caches = Vec::with_capacity(p);
            let mut x_out = x_mid.clone();
            for t in 0..p {
                let (y, cache) = block.ffn.forward_cached(b_rows.row(t))?;
                axpy(x_out.row_mut(t), 1.0, &y);
                ffn_caches.push(cache);
            }

            block_caches.push(BlockCache {
                ln1,
                a,
                q,
                k,
                v,
                q_ad,
                v_ad,
                att,
                ho,
                ln2,
                ffn: ffn_caches,
            });
            x = x_out;
        }

        let (hidden, lnf) = self.ln_f.forward_rows(&x);
        Ok(LmForward {
            hidden,
            tokens,
            block_caches,
            lnf,
        })
    }

    /// Logits over the vocabulary at one position (weight-tied projection).
    pub fn logits_at(&self, forward: &LmForward, position: usize) -> Vec<f64> {
        self.tok_emb.matvec(forward.hidden.row(position))
    }

    /// Last-position logits, the scoring surface.
    pub fn last_logits(&self, forward: &LmForward) -> Vec<f64> {
        self.logits_at(forward, forward.hidden.rows() - 1)
    }

    pub fn zero_base_grads(&self) -> LmBaseGrads {
        LmBaseGrads {
            tok_emb: DenseMatrix::zeros(self.tok_emb.rows(), self.tok_emb.cols()),
            pos_emb: DenseMatrix::zeros(self.pos_emb.rows(), self.pos_emb.cols()),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockGrads {
                    ln1_gain: vec![0.0; b.ln1.gain.len()],
                    ln1_bias: vec![0.0; b.ln1.bias.len()],
                    wq: DenseMatrix::zeros(b.wq.rows(), b.wq.cols()),
                    wk: DenseMatrix::zeros(b.wk.rows(), b.wk.cols()),
                    wv: DenseMatrix::zeros(b.wv.rows(), b.wv.cols()),
                    wo: DenseMatrix::zeros(b.wo.rows(), b.wo.cols()),
                    ln2_gain: vec![0.0; b.ln2.gain.len()],
                    ln2_bias: vec![0.0; b.ln2.bias.len()],
                    ffn: b.ffn.zero_grads(),
                })
                .collect(),
            lnf_gain: vec![0.0; self.ln_f.gain.len()],
            lnf_bias: vec![0.0; self.ln_f.bias.len()],
        }
    }

    /// Reverse-mode pass from `d_hidden` (gradient at the post-norm hidden
    /// states). Returns the gradient w.r.t. the input embedding rows;
    /// adapter and base gradients are accumulated into the provided sinks.
    pub fn backward(
        &self,
        forward: &LmForward,
        d_hidden: &DenseMatrix,
        adapters: Option<(&AdapterSet, &[RealizedW], &mut AdapterSetGrads)>,
        mut base: Option<&mut LmBaseGrads>,
    ) -> DenseMatrix {
        let p = d_hidden.rows();
        let d = self.cfg.d_model;
        let heads = self.cfg.n_heads;
        let hd = self.cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();

        let mut dx = self.ln_f.backward_rows(
            &forward.lnf,
            d_hidden,
            base.as_deref_mut().map(|g| (&mut g.lnf_gain[..], &mut g.lnf_bias[..])),
        );

        let (mut adapter_set, mut realized, mut adapter_grads) = (None, None, None);
        if let Some((set, ws, grads)) = adapters {
            adapter_set = Some(set);
            realized = Some(ws);
            adapter_grads = Some(grads);
        }

        for layer_idx in (0..self.cfg.n_layers).rev() {
            let block = &self.blocks[layer_idx];
            let cache = &forward.block_caches[layer_idx];

            // feed-forward residual
            let mut d_b_rows = DenseMatrix::zeros(p, d);
            for t in 0..p {
                let dbt = if let Some(g) = base.as_deref_mut() {
                    block.ffn.backward(&cache.ffn[t], dx.row(t), &mut g.blocks[layer_idx].ffn)
                } else {
                    block.ffn.backward_data(&cache.ffn[t], dx.row(t))
                };
                d_b_rows.row_mut(t).copy_from_slice(&dbt);
            }
            let d_from_ln2 = block.ln2.backward_rows(
                &cache.ln2,
                &d_b_rows,
                base.as_deref_mut().map(|g| {
                    let bg = &mut g.blocks[layer_idx];
                    (&mut bg.ln2_gain[..], &mut bg.ln2_bias[..])
                }),
            );
            dx.add_scaled(1.0, &d_from_ln2); // residual: dx_mid = dx_out + dln2

            // attention residual
            let mut d_ho = DenseMatrix::zeros(p, d);
            for t in 0..p {
                if let Some(g) = base.as_deref_mut() {
                    g.blocks[layer_idx].wo.add_outer(1.0, dx.row(t), cache.ho.row(t));
                }
                d_ho.row_mut(t).copy_from_slice(&block.wo.matvec_t(dx.row(t)));
            }

            let mut dq = DenseMatrix::zeros(p, d);
            let mut dk = DenseMatrix::zeros(p, d);
            let mut dv = DenseMatrix::zeros(p, d);
            for h in 0..heads {
                let off = h * hd;
                let att_h = &cache.att[h];
                for t in 0..p {
                    let dho_t = &d_ho.row(t)[off..off + hd];
                    let att_row = &att_h.row(t)[..=t];
                    // d att and d v
                    let mut d_att: Vec<f64> = Vec::with_capacity(t + 1);
                    for s in 0..=t {
                        let vs = &cache.v.row(s)[off..off + hd];
                        d_att.push(dot(dho_t, vs));
                    }
                    for (s, w) in att_row.iter().enumerate() {
                        let dvs = &mut dv.row_mut(s)[off..off + hd];
                        for i in 0..hd {
                            dvs[i] += w * dho_t[i];
                        }
                    }
                    // softmax backward
                    let mix: f64 = att_row.iter().zip(&d_att).map(|(w, g)| w * g).sum();
                    for s in 0..=t {
                        let d_logit = att_row[s] * (d_att[s] - mix);
                        if d_logit == 0.0 {
                            continue;
                        }
                        let ks = &cache.k.row(s)[off..off + hd];
                        let dqt = &mut dq.row_mut(t)[off..off + hd];
                        for i in 0..hd {
                            dqt[i] += d_logit * scale * ks[i];
                        }
                        let qt = &cache.q.row(t)[off..off + hd];
                        let dks = &mut dk.row_mut(s)[off..off + hd];
                        for i in 0..hd {
                            dks[i] += d_logit * scale * qt[i];
                        }
                    }
                }
            }

            // back through the three projections (adapters on q and v)
            let mut d_a = DenseMatrix::zeros(p, d);
            for t in 0..p {
                let at = cache.a.row(t);
                if let Some(g) = base.as_deref_mut() {
                    let bg = &mut g.blocks[layer_idx];
                    bg.wq.add_outer(1.0, dq.row(t), at);
                    bg.wk.add_outer(1.0, dk.row(t), at);
                    bg.wv.add_outer(1.0, dv.row(t), at);
                }
                let dat = d_a.row_mut(t);
                axpy(dat, 1.0, &block.wq.matvec_t(dq.row(t)));
                axpy(dat, 1.0, &block.wk.matvec_t(dk.row(t)));
                axpy(dat, 1.0, &block.wv.matvec_t(dv.row(t)));
            }
            if let (Some(set), Some(ws), Some(grads)) = (adapter_set, realized.as_ref(), adapter_grads.as_deref_mut()) {
                let layer = &set.layers[layer_idx];
                let lw = &ws[layer_idx];
                let lg = &mut grads.layers[layer_idx];
                let q_caches = cache.q_ad.as_ref().expect("adapter caches present");
                let v_caches = cache.v_ad.as_ref().expect("adapter caches present");
                for t in 0..p {
                    let at = cache.a.row(t);
                    let dxq = adapter_backward(&layer.query, &lw.query, at, &q_caches[t], dq.row(t), &mut lg.query);
                    axpy(d_a.row_mut(t), 1.0, &dxq);
                    let dxv = adapter_backward(&layer.value, &lw.value, at, &v_caches[t], dv.row(t), &mut lg.value);
                    axpy(d_a.row_mut(t), 1.0, &dxv);
                }
            }

            let d_from_ln1 = block.ln1.backward_rows(
                &cache.ln1,
                &d_a,
                base.as_deref_mut().map(|g| {
                    let bg = &mut g.blocks[layer_idx];
                    (&mut bg.ln1_gain[..], &mut bg.ln1_bias[..])
                }),
            );
            dx.add_scaled(1.0, &d_from_ln1);
        }

        // position embeddings and (for token inputs) the embedding table
        if let Some(g) = base.as_deref_mut() {
            for t in 0..p {
                axpy(g.pos_emb.row_mut(t), 1.0, dx.row(t));
            }
            if let Some(tokens) = &forward.tokens {
                for (t, &tok) in tokens.iter().enumerate() {
                    axpy(g.tok_emb.row_mut(tok as usize), 1.0, dx.row(t));
                }
            }
        }
        dx
    }
}

fn make_mask(dropout: f64, rank: usize, rng: &mut Option<&mut DetRng>) -> Option<Vec<f64>> {
    if dropout <= 0.0 {
        return None;
    }
    let rng = rng.as_deref_mut()?;
    let keep = 1.0 - dropout;
    Some(
        (0..rank)
            .map(|_| if rng.next_f64() < dropout { 0.0 } else { 1.0 / keep })
            .collect(),
    )
}

#[derive(Debug, Clone)]
pub struct BlockGrads {
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub wq: DenseMatrix,
    pub wk: DenseMatrix,
    pub wv: DenseMatrix,
    pub wo: DenseMatrix,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    pub ffn: Mlp2Grads,
}

#[derive(Debug, Clone)]
pub struct LmBaseGrads {
    pub tok_emb: DenseMatrix,
    pub pos_emb: DenseMatrix,
    pub blocks: Vec<BlockGrads>,
    pub lnf_gain: Vec<f64>,
    pub lnf_bias: Vec<f64>,
}

impl Parameterized for ToyLm {
    fn visit_params(&self, visit: &mut dyn FnMut(&str, &[f64])) {
        visit("tok_emb", self.tok_emb.data());
        visit("pos_emb", self.pos_emb.data());
        for (i, b) in self.blocks.iter().enumerate() {
            visit(&format!("blocks.{i}.ln1.gain"), &b.ln1.gain);
            visit(&format!("blocks.{i}.ln1.bias"), &b.ln1.bias);
            visit(&format!("blocks.{i}.attn.wq"), b.wq.data());
            visit(&format!("blocks.{i}.attn.wk"), b.wk.data());
            visit(&format!("blocks.{i}.attn.wv"), b.wv.data());
            visit(&format!("blocks.{i}.attn.wo"), b.wo.data());
            visit(&format!("blocks.{i}.ln2.gain"), &b.ln2.gain);
            visit(&format!("blocks.{i}.ln2.bias"), &b.ln2.bias);
            b.ffn.visit_params(&mut |name, values| visit(&format!("blocks.{i}.ffn.{name}"), values));
        }
        visit("ln_f.gain", &self.ln_f.gain);
        visit("ln_f.bias", &self.ln_f.bias);
    }

    fn visit_params_mut(&mut self, visit: &mut dyn FnMut(&str, &mut [f64])) {
        visit("tok_emb", self.tok_emb.data_mut());
        visit("pos_emb", self.pos_emb.data_mut());
        for (i, b) in self.blocks.iter_mut().enumerate() {
            visit(&format!("blocks.{i}.ln1.gain"), &mut b.ln1.gain);
            visit(&format!("blocks.{i}.ln1.bias"), &mut b.ln1.bias);
            visit(&format!("blocks.{i}.attn.wq"), b.wq.data_mut());
            visit(&format!("blocks.{i}.attn.wk"), b.wk.data_mut());
            visit(&format!("blocks.{i}.attn.wv"), b.wv.data_mut());
            visit(&format!("blocks.{i}.attn.wo"), b.wo.data_mut());
            visit(&format!("blocks.{i}.ln2.gain"), &mut b.ln2.gain);
            visit(&format!("blocks.{i}.ln2.bias"), &mut b.ln2.bias);
            b.ffn.visit_params_mut(&mut |name, values| visit(&format!("blocks.{i}.ffn.{name}"), values));
        }
        visit("ln_f.gain", &mut self.ln_f.gain);
        visit("ln_f.bias", &mut self.ln_f.bias);
    }
}

impl Parameterized for LmBaseGrads {
    fn visit_params(&self, visit: &mut dyn FnMut(&str, &[f64])) {
        visit("tok_emb", self.tok_emb.data());
        visit("pos_emb", self.pos_emb.data());
        for (i, b) in self.blocks.iter().enumerate() {
            visit(&format!("blocks.{i}.ln1.gain"), &b.ln1_gain);
            visit(&format!("blocks.{i}.ln1.bias"), &b.ln1_bias);
            visit(&format!("blocks.{i}.attn.wq"), b.wq.data());
            visit(&format!("blocks.{i}.attn.wk"), b.wk.data());
            visit(&format!("blocks.{i}.attn.wv"), b.wv.data());
            visit(&format!("blocks.{i}.attn.wo"), b.wo.data());
            visit(&format!("blocks.{i}.ln2.gain"), &b.ln2_gain);
            visit(&format!("blocks.{i}.ln2.bias"), &b.ln2_bias);
            b.ffn.visit_params(&mut |name, values| visit(&format!("blocks.{i}.ffn.{name}"), values));
        }
        visit("ln_f.gain", &self.lnf_gain);
        visit("ln_f.bias", &self.lnf_bias);
    }

    fn visit_params_mut(&mut self, visit: &mut dyn FnMut(&str, &mut [f64])) {
        visit("tok_emb", self.tok_emb.data_mut());
        visit("pos_emb", self.pos_emb.data_mut());
        for (i, b) in self.blocks.iter_mut().enumerate() {
            visit(&format!("blocks.{i}.ln1.gain"), &mut b.ln1_gain);
            visit(&format!("blocks.{i}.ln1.bias"), &mut b.ln1_bias);
            visit(&format!("blocks.{i}.attn.wq"), b.wq.data_mut());
            visit(&format!("blocks.{i}.attn.wk"), b.wk.data_mut());
            visit(&format!("blocks.{i}.attn.wv"), b.wv.data_mut());
            visit(&format!("blocks.{i}.attn.wo"), b.wo.data_mut());
            visit(&format!("blocks.{i}.ln2.gain"), &mut b.ln2_gain);
            visit(&format!("blocks.{i}.ln2.bias"), &mut b.ln2_bias);
            b.ffn.visit_params_mut(&mut |name, values| visit(&format!("blocks.{i}.ffn.{name}"), values));
        }
        visit("ln_f.gain", &mut self.lnf_gain);
        visit("ln_f.bias", &mut self.lnf_bias);
    }
}

/// Negative log-softmax of the answer token at the final position; prompt
/// tokens are excluded from the objective.
pub fn causal_lm_loss(logits: &[f64], answer_id: u32) -> Result<f64> {
    if answer_id as usize >= logits.len() {
        return Err(Error::UnknownToken(format!("answer id {answer_id}")));
    }
    let mut probs = logits.to_vec();
    softmax_inplace(&mut probs);
    Ok(-probs[answer_id as usize].max(f64::MIN_POSITIVE).ln())
}

/// Gradient of [`causal_lm_loss`] w.r.t. the logits.
pub fn causal_lm_loss_grad(logits: &[f64], answer_id: u32) -> Result<(f64, Vec<f64>)> {
    if answer_id as usize >= logits.len() {
        return Err(Error::UnknownToken(format!("answer id {answer_id}")));
    }
    let mut probs = logits.to_vec();
    softmax_inplace(&mut probs);
    let loss = -probs[answer_id as usize].max(f64::MIN_POSITIVE).ln();
    probs[answer_id as usize] -= 1.0;
    Ok((loss, probs))
}

/// Two-term softmax over the answer logits, computed in the numerically
/// stable form `sigmoid(s_m - s_n)`.
pub fn pointwise_score(logits: &[f64], yes_id: u32, no_id: u32) -> f64 {
    assert_ne!(yes_id, no_id, "answer token indices must differ");
    sigmoid(logits[yes_id as usize] - logits[no_id as usize])
}

/// Attention mass from the final position onto each item span at the last
/// layer, averaged over heads, soft tokens included.
#[derive(Debug, Clone)]
pub struct AttentionExtract {
    /// Per item, history order then target: summed attention mass.
    pub per_item: Vec<f64>,
    /// Full per-head final-position rows (diagnostics; each sums to 1).
    pub final_rows: Vec<Vec<f64>>,
}

pub fn extract_item_attention(forward: &LmForward, spans: &[TokenSpan]) -> Result<AttentionExtract> {
    let last_block = forward
        .block_caches
        .last()
        .ok_or_else(|| Error::Config("model has no layers".into()))?;
    let p = forward.hidden.rows();
    let final_pos = p - 1;
    let heads = last_block.att.len();
    let mut final_rows = Vec::with_capacity(heads);
    for att in &last_block.att {
        final_rows.push(att.row(final_pos)[..=final_pos].to_vec());
    }
    let mut per_item = Vec::with_capacity(spans.len());
    for span in spans {
        if span.end >= p {
            return Err(Error::dims("extract_item_attention", format!("span within {p} positions"), format!("{span:?}")));
        }
        let mut mass = 0.0;
        for row in &final_rows {
            for s in span.start..=span.end {
                mass += row[s];
            }
        }
        per_item.push(mass / heads as f64);
    }
    Ok(AttentionExtract { per_item, final_rows })
}

/// Full next-token objective used only for the brief base pretraining pass;
/// answer tokens never appear in these sequences.
pub fn next_token_loss_and_dhidden(lm: &ToyLm, forward: &LmForward, tokens: &[u32], base: &mut LmBaseGrads) -> (f64, DenseMatrix) {
    let p = tokens.len();
    let d = lm.cfg.d_model;
    let mut loss = 0.0;
    let mut d_hidden = DenseMatrix::zeros(p, d);
    let norm = 1.0 / (p - 1) as f64;
    for t in 0..p - 1 {
        let logits = lm.logits_at(forward, t);
        let (l, mut dlogits) = causal_lm_loss_grad(&logits, tokens[t + 1]).expect("target token in vocab");
        loss += norm * l;
        dlogits.iter_mut().for_each(|v| *v *= norm);
        // tied head: logits = tok_emb . hidden
        d_hidden.row_mut(t).copy_from_slice(&lm.tok_emb.matvec_t(&dlogits));
        for (tok, dl) in dlogits.iter().enumerate() {
            if *dl != 0.0 {
                axpy(base.tok_emb.row_mut(tok), *dl, forward.hidden.row(t));
            }
        }
    }
    (loss, d_hidden)
}

#[derive(Debug, Clone)]
pub struct LmPretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for LmPretrainConfig {
    fn default() -> Self {
        LmPretrainConfig {
            epochs: 2,
            lr: 3e-3,
            batch_size: 8,
            seed: 1,
        }
    }
}

/// Brief causal-LM pretraining over token sequences (rendered prompts with
/// the answer absent), standing in for an off-the-shelf pretrained backbone.
pub fn pretrain_lm(mut lm: ToyLm, sequences: &[Vec<u32>], cfg: &LmPretrainConfig) -> Result<(ToyLm, Vec<f64>)> {
    use crate::numerics::adamw::AdamW;
    use crate::numerics::param_map;

    if sequences.is_empty() {
        return Err(Error::EmptyEvents);
    }
    let mut opt = AdamW::new(cfg.lr);
    let total_steps = (cfg.epochs * sequences.len().div_ceil(cfg.batch_size.max(1))).max(1);
    let mut losses = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..sequences.len()).collect();
        DetRng::new(cfg.seed).split(&format!("lm-pretrain-{epoch}")).shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut counted = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut grads = lm.zero_base_grads();
            let mut batch_loss = 0.0;
            let mut used = 0usize;
            for &idx in chunk {
                let tokens = &sequences[idx];
                if tokens.len() < 2 {
                    continue;
                }
                let forward = lm.forward(&LmInput::Tokens(tokens), None)?;
                let (loss, d_hidden) = next_token_loss_and_dhidden(&lm, &forward, tokens, &mut grads);
                batch_loss += loss;
                used += 1;
                lm.backward(&forward, &d_hidden, None, Some(&mut grads));
            }
            if used == 0 {
                continue;
            }
            step += 1;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged { step });
            }
            epoch_loss += batch_loss;
            counted += used;
            // linear decay to zero over the total step budget
            opt.lr = cfg.lr * (1.0 - (step - 1) as f64 / total_steps as f64).max(0.0);
            let scale = 1.0 / used as f64;
            let mut grad_map = param_map(&grads);
            for g in grad_map.values_mut() {
                g.iter_mut().for_each(|v| *v *= scale);
            }
            opt.begin_step();
            let mut update_err = None;
            lm.visit_params_mut(&mut |name, values| {
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
        losses.push(epoch_loss / counted.max(1) as f64);
    }
    Ok((lm, losses))
}

/// Encoder over a frozen toy LM: render the item description, tokenize, run
/// the model, and average last-layer hidden states over positions.
pub struct ToyLmEncoder<'a> {
    pub lm: &'a ToyLm,
    pub vocab: &'a crate::prompt::vocab::Vocabulary,
    pub template: &'a crate::prompt::PromptTemplate,
}

impl crate::subr::ItemEncoder for ToyLmEncoder<'_> {
    fn encode(&self, item: &crate::data::Item) -> Result<Vec<f64>> {
        let text = crate::prompt::render_item_description(item, self.template)?;
        let tp = crate::prompt::vocab::tokenize(&text, self.vocab, &[], crate::prompt::vocab::YES)?;
        let forward = self.lm.forward(&LmInput::Tokens(&tp.tokens), None)?;
        let p = forward.hidden.rows();
        let mut mean = vec![0.0; self.lm.cfg.d_model];
        for t in 0..p {
            axpy(&mut mean, 1.0 / p as f64, forward.hidden.row(t));
        }
        Ok(mean)
    }

    fn dim(&self) -> usize {
        self.lm.cfg.d_model
    }
}
