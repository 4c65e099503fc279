//! Component fully-interactive LoRA (CFLoRA).
//!
//! A low-rank update `ΔΘ = B·A` decomposes into atom components: the columns
//! `B_i` of `B` and rows `A_j` of `A`. CFLoRA inserts an `r x r` interaction
//! matrix `W` between them, `ΔΘ = B·W·A = Σ_ij w_ij B_i A_j`, so every pair of
//! atom components interacts. Constraining `W` recovers the familiar family:
//! the identity gives vanilla LoRA, a block-diagonal of repeated scaling
//! weights gives the multi-set variant, and a projector from the per-sample
//! CRM representation `h` gives the fully-interactive form.

use crate::error::{Error, Result};
use crate::numerics::mlp::{Mlp2, Mlp2Cache};
use crate::numerics::{DenseMatrix, Parameterized};
use crate::rng::DetRng;

/// How the interaction matrix is produced for each sample.
#[derive(Debug, Clone)]
pub enum InteractionSource {
    /// `W = I`: vanilla LoRA behavior.
    Identity,
    /// Diagonal `W` with each `alpha_j` repeated over a block of size
    /// `r / alphas.len()`. The weights are fixed constants, not trainables.
    BlockDiagonal { alphas: Vec<f64> },
    /// `W = reshape(projector(h))` with a per-sample CRM representation `h`.
    Projected { projector: Mlp2 },
}

/// Adapter variant selector used by configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterVariant {
    Projected,
    Identity,
    BlockDiagonal { blocks: usize },
}

impl std::str::FromStr for AdapterVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "projected" | "cflora" => Ok(AdapterVariant::Projected),
            "identity" | "identity-w" => Ok(AdapterVariant::Identity),
            other => match other.strip_prefix("block-diagonal:") {
                Some(n) => Ok(AdapterVariant::BlockDiagonal {
                    blocks: n
                        .parse()
                        .map_err(|_| Error::Config(format!("bad block count in `{other}`")))?,
                }),
                None => Err(Error::Config(format!("unknown adapter variant `{other}`"))),
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct CfLoraAdapter {
    /// Down projection, `r x d_down`.
    pub a: DenseMatrix,
    /// Up projection, `d_up x r`. Initialized all-zero so the initial update
    /// vanishes and the adapted model starts identical to the base.
    pub b: DenseMatrix,
    pub rank: usize,
    pub alpha: f64,
    /// Elementwise dropout probability on `A·x`, applied during training
    /// only; zero by default for deterministic tests.
    pub dropout: f64,
    pub w_source: InteractionSource,
}

impl CfLoraAdapter {
    pub fn init(
        d_down: usize,
        d_up: usize,
        rank: usize,
        alpha: f64,
        variant: AdapterVariant,
        d_h: usize,
        rng: &mut DetRng,
    ) -> Result<Self> {
        if rank > d_down.min(d_up) {
            return Err(Error::dims(
                "adapter init",
                format!("rank <= min({d_down}, {d_up})"),
                format!("{rank}"),
            ));
        }
        let w_source = match variant {
            AdapterVariant::Identity => InteractionSource::Identity,
            AdapterVariant::BlockDiagonal { blocks } => {
                if blocks == 0 || rank % blocks != 0 {
                    return Err(Error::dims(
                        "block-diagonal interaction",
                        format!("block count dividing rank {rank}"),
                        format!("{blocks}"),
                    ));
                }
                InteractionSource::BlockDiagonal {
                    alphas: vec![1.0; blocks],
                }
            }
            AdapterVariant::Projected => {
                // final layer near zero so early-training W stays near the
                // zero matrix, complementing the zero-initialized B
                let projector = Mlp2::init(d_h, rank * rank, rank * rank, (1.0 / d_h as f64).sqrt(), 1e-3, rng);
                InteractionSource::Projected { projector }
            }
        };
        Ok(CfLoraAdapter {
            a: DenseMatrix::randn(rank, d_down, (1.0 / d_down as f64).sqrt(), rng),
            b: DenseMatrix::zeros(d_up, rank),
            rank,
            alpha,
            dropout: 0.0,
            w_source,
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn d_down(&self) -> usize {
        self.a.cols()
    }

    pub fn d_up(&self) -> usize {
        self.b.rows()
    }
}

/// Realize the interaction matrix for one sample.
///
/// The projected variant requires the CRM representation `h`; the other
/// variants ignore it.
pub fn make_interaction_matrix(source: &InteractionSource, rank: usize, h: Option<&[f64]>) -> Result<DenseMatrix> {
    match source {
        InteractionSource::Identity => Ok(DenseMatrix::identity(rank)),
        InteractionSource::BlockDiagonal { alphas } => {
            let n = alphas.len();
            if n == 0 || rank % n != 0 {
                return Err(Error::dims(
                    "block-diagonal interaction",
                    format!("block count dividing rank {rank}"),
                    format!("{n}"),
                ));
            }
            let block = rank / n;
            let mut w = DenseMatrix::zeros(rank, rank);
            for j in 0..rank {
                w.set(j, j, alphas[j / block]);
            }
            Ok(w)
        }
        InteractionSource::Projected { projector } => {
            let h = h.ok_or_else(|| Error::Config("projected interaction matrix requires the CRM representation".into()))?;
            let flat = projector.forward(h)?;
            if flat.len() != rank * rank {
                return Err(Error::dims(
                    "projected interaction matrix",
                    format!("{} entries", rank * rank),
                    format!("{}", flat.len()),
                ));
            }
            DenseMatrix::from_vec(rank, rank, flat)
        }
    }
}

/// Realization with the projector cache retained for backward.
pub fn make_interaction_matrix_cached(
    source: &InteractionSource,
    rank: usize,
    h: Option<&[f64]>,
) -> Result<(DenseMatrix, Option<Mlp2Cache>)> {
    match source {
        InteractionSource::Projected { projector } => {
            let h = h.ok_or_else(|| Error::Config("projected interaction matrix requires the CRM representation".into()))?;
            let (flat, cache) = projector.forward_cached(h)?;
            if flat.len() != rank * rank {
                return Err(Error::dims(
                    "projected interaction matrix",
                    format!("{} entries", rank * rank),
                    format!("{}", flat.len()),
                ));
            }
            Ok((DenseMatrix::from_vec(rank, rank, flat)?, Some(cache)))
        }
        other => Ok((make_interaction_matrix(other, rank, h)?, None)),
    }
}

fn check_shapes(a: &DenseMatrix, b: &DenseMatrix, w: &DenseMatrix) -> Result<()> {
    let r = a.rows();
    if b.cols() != r || w.rows() != r || w.cols() != r {
        return Err(Error::dims(
            "cflora delta",
            format!("A r x d_down, B d_up x r, W r x r with r = {r}"),
            format!("A {}x{}, B {}x{}, W {}x{}", a.rows(), a.cols(), b.rows(), b.cols(), w.rows(), w.cols()),
        ));
    }
    Ok(())
}

/// Composite form `ΔΘ = B·W·A` (the implementation route).
pub fn cflora_delta_composite(a: &DenseMatrix, b: &DenseMatrix, w: &DenseMatrix) -> Result<DenseMatrix> {
    check_shapes(a, b, w)?;
    Ok(b.matmul(&w.matmul(a)))
}

/// Decomposed form `Σ_i Σ_j w_ij · B_i A_j` by explicit rank-1 accumulation
/// over atom components (`B_i` = column `i` of B, `A_j` = row `j` of A).
pub fn cflora_delta_decomposed(a: &DenseMatrix, b: &DenseMatrix, w: &DenseMatrix) -> Result<DenseMatrix> {
    check_shapes(a, b, w)?;
    let r = a.rows();
    let mut delta = DenseMatrix::zeros(b.rows(), a.cols());
    for i in 0..r {
        let b_col: Vec<f64> = (0..b.rows()).map(|row| b.get(row, i)).collect();
        for j in 0..r {
            let w_ij = w.get(i, j);
            if w_ij == 0.0 {
                continue;
            }
            delta.add_outer(w_ij, &b_col, a.row(j));
        }
    }
    Ok(delta)
}

/// Activations cached by [`adapter_apply_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct AdapterCache {
    /// `A·x` after optional dropout.
    pub u: Vec<f64>,
    /// `W·u`.
    pub wu: Vec<f64>,
    /// Inverted-dropout mask, when active.
    pub mask: Option<Vec<f64>>,
}

/// The additive adapter path `scale · B·(W·(A·x))`; the host layer adds this
/// to its frozen base output.
pub fn adapter_apply(adapter: &CfLoraAdapter, w: &DenseMatrix, x: &[f64]) -> Result<Vec<f64>> {
    Ok(adapter_apply_cached(adapter, w, x, None)?.0)
}

pub fn adapter_apply_cached(
    adapter: &CfLoraAdapter,
    w: &DenseMatrix,
    x: &[f64],
    mask: Option<Vec<f64>>,
) -> Result<(Vec<f64>, AdapterCache)> {
    if x.len() != adapter.d_down() {
        return Err(Error::dims("adapter_apply", format!("{}", adapter.d_down()), format!("{}", x.len())));
    }
    check_shapes(&adapter.a, &adapter.b, w)?;
    let mut u = adapter.a.matvec(x);
    if let Some(mask) = &mask {
        for (ui, m) in u.iter_mut().zip(mask) {
            *ui *= m;
        }
    }
    let wu = w.matvec(&u);
    let mut y = adapter.b.matvec(&wu);
    let scale = adapter.scale();
    y.iter_mut().for_each(|v| *v *= scale);
    Ok((y, AdapterCache { u, wu, mask }))
}

/// Gradients for one adapter's trainable matrices plus the realized `W`.
#[derive(Debug, Clone)]
pub struct AdapterGrads {
    pub da: DenseMatrix,
    pub db: DenseMatrix,
    /// Gradient w.r.t. the realized interaction matrix; flows into the
    /// projector for the projected variant and is discarded otherwise.
    pub dw: DenseMatrix,
}

impl AdapterGrads {
    pub fn zeros(adapter: &CfLoraAdapter) -> Self {
        AdapterGrads {
            da: DenseMatrix::zeros(adapter.a.rows(), adapter.a.cols()),
            db: DenseMatrix::zeros(adapter.b.rows(), adapter.b.cols()),
            dw: DenseMatrix::zeros(adapter.rank, adapter.rank),
        }
    }
}

/// Reverse-mode rules for the adapter path at one position. Returns `dL/dx`.
pub fn adapter_backward(
    adapter: &CfLoraAdapter,
    w: &DenseMatrix,
    x: &[f64],
    cache: &AdapterCache,
    dy: &[f64],
    grads: &mut AdapterGrads,
) -> Vec<f64> {
    let scale = adapter.scale();
    // y = scale * B wu
    grads.db.add_outer(scale, dy, &cache.wu);
    let mut dwu = adapter.b.matvec_t(dy);
    dwu.iter_mut().for_each(|v| *v *= scale);
    // wu = W u
    grads.dw.add_outer(1.0, &dwu, &cache.u);
    let mut du = w.matvec_t(&dwu);
    if let Some(mask) = &cache.mask {
        for (d, m) in du.iter_mut().zip(mask) {
            *d *= m;
        }
    }
    // u = A x
    grads.da.add_outer(1.0, &du, x);
    adapter.a.matvec_t(&du)
}

impl Parameterized for CfLoraAdapter {
    fn visit_params(&self, visit: &mut dyn FnMut(&str, &[f64])) {
        visit("a", self.a.data());
        visit("b", self.b.data());
        if let InteractionSource::Projected { projector } = &self.w_source {
            projector.visit_params(&mut |name, values| visit(&format!("w_proj.{name}"), values));
        }
    }

    fn visit_params_mut(&mut self, visit: &mut dyn FnMut(&str, &mut [f64])) {
        visit("a", self.a.data_mut());
        visit("b", self.b.data_mut());
        if let InteractionSource::Projected { projector } = &mut self.w_source {
            projector.visit_params_mut(&mut |name, values| visit(&format!("w_proj.{name}"), values));
        }
    }
}

/// Adapters for the query and value projections of one transformer block.
#[derive(Debug, Clone)]
pub struct LayerAdapters {
    pub query: CfLoraAdapter,
    pub value: CfLoraAdapter,
}

/// One adapter pair per transformer block, plus realization helpers.
#[derive(Debug, Clone)]
pub struct AdapterSet {
    pub layers: Vec<LayerAdapters>,
}

/// Interaction matrices realized for one sample, shared across all token
/// positions of that sample's forward pass.
#[derive(Debug, Clone)]
pub struct RealizedW {
    pub query: DenseMatrix,
    pub value: DenseMatrix,
}

/// Realization plus the projector caches needed to push `dL/dW` back into the
/// projected variant's parameters.
#[derive(Debug, Clone)]
pub struct Realization {
    pub per_layer: Vec<RealizedW>,
    caches: Vec<(Option<Mlp2Cache>, Option<Mlp2Cache>)>,
}

#[derive(Debug, Clone)]
pub struct LayerAdapterGrads {
    pub query: AdapterGrads,
    pub value: AdapterGrads,
}

#[derive(Debug, Clone)]
pub struct AdapterSetGrads {
    pub layers: Vec<LayerAdapterGrads>,
}

impl AdapterSet {
    pub fn init(
        n_layers: usize,
        d_model: usize,
        rank: usize,
        alpha: f64,
        variant: AdapterVariant,
        d_h: usize,
        rng: &mut DetRng,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(n_layers);
        for layer in 0..n_layers {
            let mut q_rng = rng.split(&format!("adapter-{layer}-q"));
            let mut v_rng = rng.split(&format!("adapter-{layer}-v"));
            layers.push(LayerAdapters {
                query: CfLoraAdapter::init(d_model, d_model, rank, alpha, variant, d_h, &mut q_rng)?,
                value: CfLoraAdapter::init(d_model, d_model, rank, alpha, variant, d_h, &mut v_rng)?,
            });
        }
        Ok(AdapterSet { layers })
    }

    /// Realize every adapter's interaction matrix for one sample.
    pub fn realize(&self, h: Option<&[f64]>) -> Result<Realization> {
        let mut per_layer = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (wq, cq) = make_interaction_matrix_cached(&layer.query.w_source, layer.query.rank, h)?;
            let (wv, cv) = make_interaction_matrix_cached(&layer.value.w_source, layer.value.rank, h)?;
            per_layer.push(RealizedW { query: wq, value: wv });
            caches.push((cq, cv));
        }
        Ok(Realization { per_layer, caches })
    }

    pub fn zero_grads(&self) -> AdapterSetGrads {
        AdapterSetGrads {
            layers: self
                .layers
                .iter()
                .map(|layer| LayerAdapterGrads {
                    query: AdapterGrads::zeros(&layer.query),
                    value: AdapterGrads::zeros(&layer.value),
                })
                .collect(),
        }
    }

    /// Push accumulated `dL/dW` through each projected source into projector
    /// gradients. `w_grads` lives in the same [`AdapterSetGrads`] the LM
    /// backward filled; projector gradients are appended to `proj_grads`
    /// keyed by the same names `visit_params` yields.
    pub fn backward_interaction(
        &self,
        realization: &Realization,
        grads: &mut AdapterSetGrads,
        proj_grads: &mut std::collections::BTreeMap<String, Vec<f64>>,
    ) -> Result<()> {
        for (idx, layer) in self.layers.iter().enumerate() {
            for (which, adapter, cache, dw) in [
                ("q", &layer.query, &realization.caches[idx].0, &grads.layers[idx].query.dw),
                ("v", &layer.value, &realization.caches[idx].1, &grads.layers[idx].value.dw),
            ] {
                let InteractionSource::Projected { projector } = &adapter.w_source else {
                    continue;
                };
                let cache = cache.as_ref().ok_or_else(|| {
                    Error::Config("projected adapter realized without cache".into())
                })?;
                let mut mlp_grads = projector.zero_grads();
                projector.backward(cache, dw.data(), &mut mlp_grads);
                mlp_grads.visit_params(&mut |name, values| {
                    let key = format!("blocks.{idx}.attn.w{which}.adapter.w_proj.{name}");
                    let slot = proj_grads.entry(key).or_insert_with(|| vec![0.0; values.len()]);
                    for (g, v) in slot.iter_mut().zip(values) {
                        *g += v;
                    }
                });
            }
        }
        Ok(())
    }
}

impl Parameterized for AdapterSet {
    fn visit_params(&self, visit: &mut dyn FnMut(&str, &[f64])) {
        for (idx, layer) in self.layers.iter().enumerate() {
            layer
                .query
                .visit_params(&mut |name, values| visit(&format!("blocks.{idx}.attn.wq.adapter.{name}"), values));
            layer
                .value
                .visit_params(&mut |name, values| visit(&format!("blocks.{idx}.attn.wv.adapter.{name}"), values));
        }
    }

    fn visit_params_mut(&mut self, visit: &mut dyn FnMut(&str, &mut [f64])) {
        for (idx, layer) in self.layers.iter_mut().enumerate() {
            layer
                .query
                .visit_params_mut(&mut |name, values| visit(&format!("blocks.{idx}.attn.wq.adapter.{name}"), values));
            layer
                .value
                .visit_params_mut(&mut |name, values| visit(&format!("blocks.{idx}.attn.wv.adapter.{name}"), values));
        }
    }
}

impl Parameterized for AdapterSetGrads {
    fn visit_params(&self, visit: &mut dyn FnMut(&str, &[f64])) {
        for (idx, layer) in self.layers.iter().enumerate() {
            visit(&format!("blocks.{idx}.attn.wq.adapter.a"), layer.query.da.data());
            visit(&format!("blocks.{idx}.attn.wq.adapter.b"), layer.query.db.data());
            visit(&format!("blocks.{idx}.attn.wv.adapter.a"), layer.value.da.data());
            visit(&format!("blocks.{idx}.attn.wv.adapter.b"), layer.value.db.data());
        }
    }

    fn visit_params_mut(&mut self, visit: &mut dyn FnMut(&str, &mut [f64])) {
        for (idx, layer) in self.layers.iter_mut().enumerate() {
            visit(&format!("blocks.{idx}.attn.wq.adapter.a"), layer.query.da.data_mut());
            visit(&format!("blocks.{idx}.attn.wq.adapter.b"), layer.query.db.data_mut());
            visit(&format!("blocks.{idx}.attn.wv.adapter.a"), layer.value.da.data_mut());
            visit(&format!("blocks.{idx}.attn.wv.adapter.b"), layer.value.db.data_mut());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_instance(seed: u64, r: usize, d_down: usize, d_up: usize) -> (DenseMatrix, DenseMatrix, DenseMatrix) {
        let mut rng = DetRng::new(seed);
        let a = DenseMatrix::randn(r, d_down, 1.0, &mut rng);
        let b = DenseMatrix::randn(d_up, r, 1.0, &mut rng);
        let w = DenseMatrix::randn(r, r, 1.0, &mut rng);
        (a, b, w)
    }

    #[test]
    fn identity_interaction_is_the_identity_matrix() {
        let w = make_interaction_matrix(&InteractionSource::Identity, 4, None).unwrap();
        assert_eq!(w, DenseMatrix::identity(4));
    }

    #[test]
    fn block_diagonal_repeats_each_alpha_over_its_block() {
        // r = 4, N = 2: diag(a1, a1, a2, a2)
        let source = InteractionSource::BlockDiagonal {
            alphas: vec![0.3, -1.5],
        };
        let w = make_interaction_matrix(&source, 4, None).unwrap();
        let expected = DenseMatrix::from_vec(
            4,
            4,
            vec![
                0.3, 0.0, 0.0, 0.0, //
                0.0, 0.3, 0.0, 0.0, //
                0.0, 0.0, -1.5, 0.0, //
                0.0, 0.0, 0.0, -1.5,
            ],
        )
        .unwrap();
        assert_eq!(w, expected);
    }

    #[test]
    fn block_count_must_divide_rank() {
        let source = InteractionSource::BlockDiagonal {
            alphas: vec![1.0, 1.0, 1.0],
        };
        assert!(make_interaction_matrix(&source, 4, None).is_err());
    }

    #[test]
    fn zero_projector_realizes_zero_matrix() {
        let source = InteractionSource::Projected {
            projector: Mlp2::zeros(6, 4, 4),
        };
        let w = make_interaction_matrix(&source, 2, Some(&[1.0; 6])).unwrap();
        assert_eq!(w, DenseMatrix::zeros(2, 2));
        // h absent is an error for the projected variant
        assert!(make_interaction_matrix(&source, 2, None).is_err());
    }

    #[test]
    fn identity_w_reduces_to_vanilla_lora() {
        let (a, b, _) = random_instance(1, 3, 5, 4);
        let delta = cflora_delta_composite(&a, &b, &DenseMatrix::identity(3)).unwrap();
        assert!(delta.max_abs_diff(&b.matmul(&a)) < 1e-15);
    }

    #[test]
    fn zero_w_annihilates() {
        let (a, b, _) = random_instance(2, 3, 5, 4);
        let delta = cflora_delta_composite(&a, &b, &DenseMatrix::zeros(3, 3)).unwrap();
        assert_eq!(delta, DenseMatrix::zeros(4, 5));
    }

    #[test]
    fn rank_one_decomposed_is_a_scaled_outer_product() {
        let (a, b, _) = random_instance(3, 1, 3, 2);
        let w = DenseMatrix::from_vec(1, 1, vec![2.5]).unwrap();
        let delta = cflora_delta_decomposed(&a, &b, &w).unwrap();
        for row in 0..2 {
            for col in 0..3 {
                let expected = 2.5 * b.get(row, 0) * a.get(0, col);
                assert!((delta.get(row, col) - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn diagonal_w_reduces_to_weighted_component_sum() {
        // independent implementation of the multi-set degraded form:
        // delta = sum_j alpha_{j / (r/N)} B_j A_j
        let r = 4;
        let n = 2;
        let (a, b, _) = random_instance(4, r, 6, 5);
        let alphas = [0.7, -0.2];
        let source = InteractionSource::BlockDiagonal {
            alphas: alphas.to_vec(),
        };
        let w = make_interaction_matrix(&source, r, None).unwrap();
        let delta = cflora_delta_decomposed(&a, &b, &w).unwrap();

        let mut oracle = DenseMatrix::zeros(5, 6);
        for j in 0..r {
            let alpha = alphas[j / (r / n)];
            for row in 0..5 {
                for col in 0..6 {
                    let v = oracle.get(row, col) + alpha * b.get(row, j) * a.get(j, col);
                    oracle.set(row, col, v);
                }
            }
        }
        assert!(delta.max_abs_diff(&oracle) < 1e-12);
        assert!(cflora_delta_composite(&a, &b, &w).unwrap().max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn composite_equals_decomposed_on_random_instances() {
        for seed in 0..50 {
            let mut rng = DetRng::new(seed);
            let r = 1 << rng.next_below(4); // 1, 2, 4, 8
            let d_down = 1 + rng.next_below(16);
            let d_up = 1 + rng.next_below(16);
            let (a, b, w) = random_instance(seed + 1000, r, d_down, d_up);
            let composite = cflora_delta_composite(&a, &b, &w).unwrap();
            let decomposed = cflora_delta_decomposed(&a, &b, &w).unwrap();
            assert!(
                composite.max_abs_diff(&decomposed) < 1e-12,
                "seed {seed} r {r} {d_down}x{d_up}"
            );
        }
    }

    proptest! {
        #[test]
        fn delta_is_linear_in_w(seed in 0u64..300) {
            let mut rng = DetRng::new(seed);
            let r = 1 + rng.next_below(6);
            let (a, b, w1) = random_instance(seed + 5000, r, 4, 3);
            let w2 = DenseMatrix::randn(r, r, 1.0, &mut rng);
            let mut w_sum = w1.clone();
            w_sum.add_scaled(1.0, &w2);
            let lhs = cflora_delta_composite(&a, &b, &w_sum).unwrap();
            let mut rhs = cflora_delta_composite(&a, &b, &w1).unwrap();
            rhs.add_scaled(1.0, &cflora_delta_composite(&a, &b, &w2).unwrap());
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
        }
    }

    #[test]
    fn zero_b_init_keeps_output_at_zero() {
        let mut rng = DetRng::new(6);
        let adapter = CfLoraAdapter::init(8, 8, 4, 8.0, AdapterVariant::Projected, 10, &mut rng).unwrap();
        let w = DenseMatrix::randn(4, 4, 2.0, &mut rng);
        let x: Vec<f64> = (0..8).map(|_| rng.next_normal()).collect();
        let y = adapter_apply(&adapter, &w, &x).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn apply_equals_scaled_delta_times_x() {
        let mut rng = DetRng::new(7);
        let mut adapter = CfLoraAdapter::init(6, 5, 2, 8.0, AdapterVariant::Identity, 1, &mut rng).unwrap();
        adapter.b = DenseMatrix::randn(5, 2, 1.0, &mut rng);
        let w = DenseMatrix::randn(2, 2, 1.0, &mut rng);
        let x: Vec<f64> = (0..6).map(|_| rng.next_normal()).collect();

        let y = adapter_apply(&adapter, &w, &x).unwrap();
        let mut delta = cflora_delta_composite(&adapter.a, &adapter.b, &w).unwrap();
        delta.scale(adapter.scale());
        let expected = delta.matvec(&x);
        for (got, want) in y.iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12);
        }

        // W = I reduces to scale * B A x
        let y_id = adapter_apply(&adapter, &DenseMatrix::identity(2), &x).unwrap();
        let ba = adapter.b.matmul(&adapter.a);
        let mut expected_id = ba.matvec(&x);
        expected_id.iter_mut().for_each(|v| *v *= adapter.scale());
        for (got, want) in y_id.iter().zip(&expected_id) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn scale_matches_alpha_over_rank() {
        let mut rng = DetRng::new(8);
        let adapter = CfLoraAdapter::init(8, 8, 8, 16.0, AdapterVariant::Identity, 1, &mut rng).unwrap();
        assert_eq!(adapter.scale(), 2.0);
        let desk = CfLoraAdapter::init(8, 8, 4, 8.0, AdapterVariant::Identity, 1, &mut rng).unwrap();
        assert_eq!(desk.scale(), 2.0);
    }

    #[test]
    fn backward_matches_finite_differences_through_apply() {
        use crate::numerics::gradcheck::check_gradients;
        use crate::numerics::param_map;
        use std::collections::BTreeMap;

        let mut rng = DetRng::new(11);
        let mut adapter = CfLoraAdapter::init(5, 4, 2, 4.0, AdapterVariant::Identity, 1, &mut rng).unwrap();
        adapter.b = DenseMatrix::randn(4, 2, 0.7, &mut rng);
        let w = DenseMatrix::randn(2, 2, 1.0, &mut rng);
        let x: Vec<f64> = (0..5).map(|_| rng.next_normal()).collect();
        let target: Vec<f64> = (0..4).map(|_| rng.next_normal()).collect();

        // loss = 0.5 * || apply(x) - target ||^2
        let loss = |ad: &CfLoraAdapter| {
            let y = adapter_apply(ad, &w, &x).unwrap();
            0.5 * y.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        };

        let (y, cache) = adapter_apply_cached(&adapter, &w, &x, None).unwrap();
        let dy: Vec<f64> = y.iter().zip(&target).map(|(a, b)| a - b).collect();
        let mut grads = AdapterGrads::zeros(&adapter);
        adapter_backward(&adapter, &w, &x, &cache, &dy, &mut grads);

        let mut analytic = BTreeMap::new();
        let flat = param_map(&grads_as_params(&grads));
        analytic.insert("a".to_string(), flat["a"].clone());
        analytic.insert("b".to_string(), flat["b"].clone());
        let report = check_gradients(&mut adapter, loss, &analytic, 1e-6).unwrap();
        assert!(report.passed(), "{report}");
    }

    struct GradsView(AdapterGrads);

    fn grads_as_params(grads: &AdapterGrads) -> GradsView {
        GradsView(grads.clone())
    }

    impl Parameterized for GradsView {
        fn visit_params(&self, visit: &mut dyn FnMut(&str, &[f64])) {
            visit("a", self.0.da.data());
            visit("b", self.0.db.data());
        }
        fn visit_params_mut(&mut self, visit: &mut dyn FnMut(&str, &mut [f64])) {
            visit("a", self.0.da.data_mut());
            visit("b", self.0.db.data_mut());
        }
    }

    #[test]
    fn dropout_mask_scales_and_zeroes() {
        let mut rng = DetRng::new(12);
        let mut adapter = CfLoraAdapter::init(4, 3, 2, 2.0, AdapterVariant::Identity, 1, &mut rng).unwrap();
        adapter.b = DenseMatrix::randn(3, 2, 1.0, &mut rng);
        let w = DenseMatrix::identity(2);
        let x = [1.0, -1.0, 0.5, 2.0];
        let mask = vec![0.0, 2.0]; // drop first component, double the second
        let (y, cache) = adapter_apply_cached(&adapter, &w, &x, Some(mask)).unwrap();
        assert_eq!(cache.u[0], 0.0);
        let u_raw = adapter.a.matvec(&x);
        assert!((cache.u[1] - 2.0 * u_raw[1]).abs() < 1e-15);
        assert!(y.iter().all(|v| v.is_finite()));
    }
}
