//! Word-level vocabulary and tokenizer.
//!
//! Words split on whitespace with punctuation detached into single-character
//! tokens, which guarantees the answer words stay atomic and item-mention
//! boundaries always land on token boundaries. Unknown words map to a
//! dedicated token. The file format is one token per line, line number = id.

use std::collections::BTreeMap;
use std::path::Path;

use super::CharSpan;
use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BEGIN: &str = "<s>";
pub const END: &str = "</s>";
pub const UNKNOWN: &str = "<unk>";
pub const YES: &str = "Yes";
pub const NO: &str = "No";

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Vocabulary {
    fn with_reserved() -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: BTreeMap::new(),
        };
        for tok in [PAD, BEGIN, END, UNKNOWN, YES, NO] {
            v.intern(tok);
        }
        v
    }

    /// Build over a corpus, reserving pad/begin/end/unknown plus atomic
    /// "Yes"/"No" answer tokens. Token ids follow first-seen corpus order.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Vocabulary::with_reserved();
        for text in corpus {
            for (word, _) in split_words(text) {
                v.intern(&word);
            }
        }
        v
    }

    fn intern(&mut self, token: &str) -> u32 {
        if let Some(id) = self.index.get(token) {
            return *id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn pad_id(&self) -> u32 {
        0
    }

    pub fn begin_id(&self) -> u32 {
        1
    }

    pub fn end_id(&self) -> u32 {
        2
    }

    pub fn unknown_id(&self) -> u32 {
        3
    }

    /// Index of the "Yes" answer token.
    pub fn yes_id(&self) -> u32 {
        4
    }

    /// Index of the "No" answer token.
    pub fn no_id(&self) -> u32 {
        5
    }

    pub fn answer_id(&self, answer: &str) -> Result<u32> {
        match answer {
            YES => Ok(self.yes_id()),
            NO => Ok(self.no_id()),
            other => Err(Error::UnknownToken(other.to_string())),
        }
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.tokens.join("\n") + "\n")?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: BTreeMap::new(),
        };
        for line in text.lines() {
            v.intern(line);
        }
        for (i, expected) in [PAD, BEGIN, END, UNKNOWN, YES, NO].iter().enumerate() {
            if v.tokens.get(i).map(String::as_str) != Some(*expected) {
                return Err(Error::Checkpoint {
                    line: i + 1,
                    message: format!("reserved token {expected} missing or misplaced"),
                });
            }
        }
        Ok(v)
    }
}

/// Split into words with byte offsets: alphanumeric runs stay together, every
/// other non-whitespace character is its own token.
pub fn split_words(text: &str) -> Vec<(String, CharSpan)> {
    let mut out = Vec::new();
    let mut word_start: Option<usize> = None;
    for (idx, ch) in text.char_indices() {
        if ch.is_alphanumeric() {
            if word_start.is_none() {
                word_start = Some(idx);
            }
            continue;
        }
        if let Some(start) = word_start.take() {
            out.push((text[start..idx].to_string(), CharSpan { start, end: idx }));
        }
        if !ch.is_whitespace() {
            let end = idx + ch.len_utf8();
            out.push((text[idx..end].to_string(), CharSpan { start: idx, end }));
        }
    }
    if let Some(start) = word_start {
        out.push((text[start..].to_string(), CharSpan { start, end: text.len() }));
    }
    out
}

/// Token index range of one item, inclusive on both ends. `end` is the
/// position a soft prompt token is appended after.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone)]
pub struct TokenizedPrompt {
    pub tokens: Vec<u32>,
    /// One span per item mention, history order then target.
    pub item_spans: Vec<TokenSpan>,
    /// Ground-truth answer token id.
    pub answer_id: u32,
}

impl TokenizedPrompt {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Tokenize rendered text and map the item character spans onto token index
/// ranges. A span boundary inside a token is impossible by construction of
/// word-level splitting, so it is asserted rather than surfaced as an error.
pub fn tokenize(text: &str, vocab: &Vocabulary, spans: &[CharSpan], answer: &str) -> Result<TokenizedPrompt> {
    let words = split_words(text);
    let tokens: Vec<u32> = words
        .iter()
        .map(|(w, _)| vocab.id(w).unwrap_or_else(|| vocab.unknown_id()))
        .collect();

    let mut item_spans = Vec::with_capacity(spans.len());
    for span in spans {
        let mut start_tok = None;
        let mut end_tok = None;
        for (i, (_, ws)) in words.iter().enumerate() {
            debug_assert!(
                ws.end <= span.start || ws.start >= span.end || (ws.start >= span.start && ws.end <= span.end),
                "span boundary falls inside a token"
            );
            if ws.start >= span.start && ws.end <= span.end {
                if start_tok.is_none() {
                    start_tok = Some(i);
                }
                end_tok = Some(i);
            }
        }
        let (start, end) = match (start_tok, end_tok) {
            (Some(s), Some(e)) => (s, e),
            _ => {
                return Err(Error::Template(format!(
                    "item span {}..{} covers no tokens",
                    span.start, span.end
                )))
            }
        };
        item_spans.push(TokenSpan { start, end });
    }

    Ok(TokenizedPrompt {
        tokens,
        item_spans,
        answer_id: vocab.answer_id(answer)?,
    })
}

/// Join tokens with single spaces. Round-tripping through
/// [`tokenize`] preserves the non-whitespace character stream.
pub fn detokenize(tokens: &[u32], vocab: &Vocabulary) -> String {
    tokens
        .iter()
        .map(|&id| vocab.token(id))
        .collect::<Vec<_>>()
        .join(" ")
}
