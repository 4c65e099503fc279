//! Semantic user behavior retrieval.
//!
//! Items are encoded into raw vectors, reduced with PCA, and the K history
//! behaviors most cosine-similar to the target replace the K most recent
//! ones, order preserved. A heterogeneity score (distinct attribute values in
//! a sequence) quantifies how mixed a behavior sequence is.

pub mod pca;

use std::collections::BTreeMap;

use crate::data::Item;
use crate::error::{Error, Result};
use crate::numerics::dot;

pub use pca::{fit_pca, read_pca, write_pca, PcaModel};

/// Raw and PCA-reduced encoding of one item.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticVector {
    pub item_id: u32,
    pub raw: Vec<f64>,
    pub reduced: Vec<f64>,
}

/// Source of raw item vectors.
pub trait ItemEncoder {
    fn encode(&self, item: &Item) -> Result<Vec<f64>>;
    fn dim(&self) -> usize;
}

/// Precomputed vectors keyed by item id (the plug-in point for real LLM
/// embeddings written in the vector-import file format).
pub struct ImportEncoder<'a> {
    pub vectors: &'a BTreeMap<u32, Vec<f64>>,
    pub dim: usize,
}

impl<'a> ImportEncoder<'a> {
    pub fn new(vectors: &'a BTreeMap<u32, Vec<f64>>) -> Result<Self> {
        let dim = vectors
            .values()
            .next()
            .map(|v| v.len())
            .ok_or_else(|| Error::Config("vector import is empty".into()))?;
        Ok(ImportEncoder { vectors, dim })
    }
}

impl ItemEncoder for ImportEncoder<'_> {
    fn encode(&self, item: &Item) -> Result<Vec<f64>> {
        self.vectors
            .get(&item.item_id)
            .cloned()
            .ok_or(Error::UnknownId {
                kind: "imported vector for item",
                id: item.item_id,
            })
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

/// Encode one item into its raw vector `z`.
pub fn encode_item(item: &Item, encoder: &dyn ItemEncoder) -> Result<Vec<f64>> {
    let z = encoder.encode(item)?;
    if z.len() != encoder.dim() {
        return Err(Error::dims("encode_item", format!("{}", encoder.dim()), format!("{}", z.len())));
    }
    Ok(z)
}

/// Encode and reduce the whole catalog; PCA is fitted over every item in the
/// pool, not per user.
pub fn build_semantic_index(
    items: &BTreeMap<u32, Item>,
    encoder: &dyn ItemEncoder,
    d_q: usize,
) -> Result<(BTreeMap<u32, SemanticVector>, PcaModel)> {
    let mut raws = Vec::with_capacity(items.len());
    let mut ids = Vec::with_capacity(items.len());
    for item in items.values() {
        raws.push(encode_item(item, encoder)?);
        ids.push(item.item_id);
    }
    let model = fit_pca(&raws, d_q)?;
    let mut index = BTreeMap::new();
    for (id, raw) in ids.into_iter().zip(raws) {
        let reduced = model.reduce(&raw)?;
        index.insert(
            id,
            SemanticVector {
                item_id: id,
                raw,
                reduced,
            },
        );
    }
    Ok((index, model))
}

/// Cosine similarity; zero-norm vectors rank last with similarity -1 instead
/// of producing NaN.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return -1.0;
    }
    dot(a, b) / (na * nb)
}

/// Indices (into `history`) of the top-K behaviors most similar to the
/// target, re-emitted in chronological order.
///
/// Ties break toward recency (the later history position wins), then toward
/// the smaller item id.
pub fn retrieve_top_k_indices(
    history: &[u32],
    target: u32,
    k: usize,
    reduced: &BTreeMap<u32, Vec<f64>>,
) -> Result<Vec<usize>> {
    if history.is_empty() {
        return Err(Error::EmptyHistory { user_id: 0 });
    }
    assert!(k >= 1, "retrieve_top_k requires K >= 1");
    if k >= history.len() {
        return Ok((0..history.len()).collect());
    }
    let target_vec = reduced.get(&target).ok_or(Error::UnknownId {
        kind: "reduced vector for item",
        id: target,
    })?;
    let mut scored: Vec<(f64, usize, u32)> = Vec::with_capacity(history.len());
    for (pos, id) in history.iter().enumerate() {
        let v = reduced.get(id).ok_or(Error::UnknownId {
            kind: "reduced vector for item",
            id: *id,
        })?;
        scored.push((cosine_similarity(v, target_vec), pos, *id));
    }
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(b.1.cmp(&a.1))
            .then(a.2.cmp(&b.2))
    });
    let mut chosen: Vec<usize> = scored[..k].iter().map(|(_, pos, _)| *pos).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Item-level wrapper over [`retrieve_top_k_indices`].
pub fn retrieve_top_k(
    history: &[Item],
    target: &Item,
    k: usize,
    reduced: &BTreeMap<u32, Vec<f64>>,
) -> Result<Vec<Item>> {
    let ids: Vec<u32> = history.iter().map(|i| i.item_id).collect();
    let indices = retrieve_top_k_indices(&ids, target.item_id, k, reduced)?;
    Ok(indices.into_iter().map(|i| history[i].clone()).collect())
}

/// Count of distinct attribute values across a sequence, counting every value
/// of multi-valued attributes.
pub fn heterogeneity_score(sequence: &[&Item], field: &str) -> Result<usize> {
    let mut seen = std::collections::BTreeSet::new();
    for item in sequence {
        let values = item.attribute(field).ok_or_else(|| Error::MissingAttribute {
            item_id: item.item_id,
            field: field.to_string(),
        })?;
        for v in values {
            seen.insert(v.as_str());
        }
    }
    Ok(seen.len())
}

/// Heterogeneity of one sequence, with the inputs echoed for reporting.
#[derive(Debug, Clone)]
pub struct HeterogeneityReport {
    pub sequence_len: usize,
    pub score: usize,
    pub field: String,
}

pub fn heterogeneity_report(sequence: &[&Item], field: &str) -> Result<HeterogeneityReport> {
    Ok(HeterogeneityReport {
        sequence_len: sequence.len(),
        score: heterogeneity_score(sequence, field)?,
        field: field.to_string(),
    })
}
