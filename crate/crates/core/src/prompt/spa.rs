//! Soft prompt augmentation: project CRM item embeddings into the language
//! model's token embedding space and splice them in right after each item's
//! last text token.

use super::vocab::{TokenSpan, TokenizedPrompt};
use crate::error::{Error, Result};
use crate::numerics::mlp::Mlp2;
use crate::numerics::DenseMatrix;

/// `v_i = projector(e_i)`; one shared projector for history and target items.
pub fn spa_project(projector: &Mlp2, e_item: &[f64]) -> Result<Vec<f64>> {
    projector.forward(e_item)
}

/// The assembled embedding sequence with insertion bookkeeping.
#[derive(Debug, Clone)]
pub struct SoftPrompt {
    /// `(P + #items) x d_v` embedding rows fed to the language model.
    pub rows: DenseMatrix,
    /// Row index of each inserted soft token, item order.
    pub inserted_rows: Vec<usize>,
    /// Item spans re-indexed into the assembled sequence; each span now
    /// includes its soft token.
    pub item_spans: Vec<TokenSpan>,
    pub answer_id: u32,
}

/// Splice one soft token per rendered item immediately after that item's last
/// text token.
pub fn assemble_soft_prompt(
    tp: &TokenizedPrompt,
    token_embeddings: &DenseMatrix,
    soft_tokens: &[Vec<f64>],
) -> Result<SoftPrompt> {
    if soft_tokens.len() != tp.item_spans.len() {
        return Err(Error::SoftTokenCount {
            provided: soft_tokens.len(),
            expected: tp.item_spans.len(),
        });
    }
    let d_v = token_embeddings.cols();
    for (j, soft) in soft_tokens.iter().enumerate() {
        if soft.len() != d_v {
            return Err(Error::dims(
                format!("soft token {j}"),
                format!("{d_v}"),
                format!("{}", soft.len()),
            ));
        }
    }

    // insertion points sorted by position; spans are disjoint and increasing
    let mut rows = DenseMatrix::zeros(tp.tokens.len() + soft_tokens.len(), d_v);
    let mut inserted_rows = vec![0usize; soft_tokens.len()];
    let mut item_spans = Vec::with_capacity(tp.item_spans.len());

    let mut out_row = 0usize;
    let mut next_item = 0usize;
    for (pos, &token) in tp.tokens.iter().enumerate() {
        rows.row_mut(out_row).copy_from_slice(token_embeddings.row(token as usize));
        out_row += 1;
        while next_item < tp.item_spans.len() && tp.item_spans[next_item].end == pos {
            rows.row_mut(out_row).copy_from_slice(&soft_tokens[next_item]);
            inserted_rows[next_item] = out_row;
            let shift = next_item; // insertions before this span
            item_spans.push(TokenSpan {
                start: tp.item_spans[next_item].start + shift,
                end: out_row,
            });
            out_row += 1;
            next_item += 1;
        }
    }
    debug_assert_eq!(out_row, rows.rows());
    debug_assert_eq!(next_item, soft_tokens.len());

    Ok(SoftPrompt {
        rows,
        inserted_rows,
        item_spans,
        answer_id: tp.answer_id,
    })
}

/// Plain token embedding rows for a prompt without soft tokens.
pub fn embed_tokens(tokens: &[u32], token_embeddings: &DenseMatrix) -> DenseMatrix {
    let mut rows = DenseMatrix::zeros(tokens.len(), token_embeddings.cols());
    for (r, &token) in tokens.iter().enumerate() {
        rows.row_mut(r).copy_from_slice(token_embeddings.row(token as usize));
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::mlp::Mlp2;
    use crate::rng::DetRng;

    fn embeddings(v: usize, d: usize) -> DenseMatrix {
        let mut rng = DetRng::new(4);
        DenseMatrix::randn(v, d, 1.0, &mut rng)
    }

    fn prompt(tokens: Vec<u32>, spans: Vec<TokenSpan>) -> TokenizedPrompt {
        TokenizedPrompt {
            tokens,
            item_spans: spans,
            answer_id: 4,
        }
    }

    #[test]
    fn zero_projector_emits_zero_soft_token() {
        let projector = Mlp2::zeros(3, 4, 5);
        let v = spa_project(&projector, &[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(v, vec![0.0; 5]);
    }

    #[test]
    fn identical_items_project_identically() {
        let mut rng = DetRng::new(9);
        let projector = Mlp2::init(3, 6, 4, 0.5, 0.5, &mut rng);
        let e = [0.2, -0.4, 1.0];
        assert_eq!(spa_project(&projector, &e).unwrap(), spa_project(&projector, &e).unwrap());
    }

    #[test]
    fn no_items_means_plain_embeddings() {
        let table = embeddings(10, 4);
        let tp = prompt(vec![1, 2, 3], vec![]);
        let out = assemble_soft_prompt(&tp, &table, &[]).unwrap();
        assert_eq!(out.rows.rows(), 3);
        for (r, &tok) in tp.tokens.iter().enumerate() {
            assert_eq!(out.rows.row(r), table.row(tok as usize));
        }
    }

    #[test]
    fn soft_token_lands_right_after_span_end() {
        // one item ending at position 4 of 10 tokens: out has 11 rows and the
        // soft token sits at index 5
        let table = embeddings(12, 3);
        let tp = prompt((0..10).collect(), vec![TokenSpan { start: 2, end: 4 }]);
        let soft = vec![vec![7.0, 8.0, 9.0]];
        let out = assemble_soft_prompt(&tp, &table, &soft).unwrap();
        assert_eq!(out.rows.rows(), 11);
        assert_eq!(out.inserted_rows, vec![5]);
        assert_eq!(out.rows.row(5), [7.0, 8.0, 9.0]);
        assert_eq!(out.item_spans, vec![TokenSpan { start: 2, end: 5 }]);
    }

    #[test]
    fn deleting_inserted_rows_recovers_original_matrix() {
        let table = embeddings(20, 5);
        let tp = prompt(
            (0..12).collect(),
            vec![TokenSpan { start: 1, end: 3 }, TokenSpan { start: 5, end: 7 }, TokenSpan { start: 9, end: 10 }],
        );
        let soft: Vec<Vec<f64>> = (0..3).map(|i| vec![i as f64; 5]).collect();
        let out = assemble_soft_prompt(&tp, &table, &soft).unwrap();
        assert_eq!(out.rows.rows(), 15);

        let original = embed_tokens(&tp.tokens, &table);
        let mut kept = Vec::new();
        for r in 0..out.rows.rows() {
            if !out.inserted_rows.contains(&r) {
                kept.extend_from_slice(out.rows.row(r));
            }
        }
        assert_eq!(kept, original.data());
    }

    #[test]
    fn soft_token_count_mismatch_is_an_error() {
        let table = embeddings(10, 3);
        let tp = prompt(vec![0, 1, 2], vec![TokenSpan { start: 0, end: 1 }]);
        assert!(assemble_soft_prompt(&tp, &table, &[]).is_err());
        let wrong_dim = vec![vec![1.0, 2.0]];
        assert!(assemble_soft_prompt(&tp, &table, &wrong_dim).is_err());
    }
}
