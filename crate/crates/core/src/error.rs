//! Crate-wide error type.
//!
//! Every fallible public operation returns [`Result`]. Contract violations
//! (shape mismatches, unknown ids, exhausted populations) are errors, not
//! panics, so the CLI can map them to a nonzero exit with a diagnostic.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("non-finite gradient in parameter `{name}` at entry {index}")]
    NonFiniteGradient { name: String, index: usize },

    #[error("non-finite value produced in {context}")]
    NonFinite { context: String },

    #[error("loss function is non-deterministic: two identical calls returned {first} and {second}")]
    NonDeterministicLoss { first: f64, second: f64 },

    #[error("unknown {kind} id {id}")]
    UnknownId { kind: &'static str, id: u32 },

    #[error("{file}:{line}: {message}")]
    Load {
        file: String,
        line: usize,
        message: String,
    },

    #[error("empty event stream")]
    EmptyEvents,

    #[error("empty history for sample (user {user_id})")]
    EmptyHistory { user_id: u32 },

    #[error("shot count {requested} exceeds population {population}")]
    ShotCount { requested: usize, population: usize },

    #[error("requested {requested} components but data rank is {achievable}")]
    RankDeficient { requested: usize, achievable: usize },

    #[error("item {item_id} is missing attribute field `{field}`")]
    MissingAttribute { item_id: u32, field: String },

    #[error("template placeholder `{placeholder}` has no matching field")]
    MissingPlaceholder { placeholder: String },

    #[error("template error: {0}")]
    Template(String),

    #[error("soft-token count {provided} does not match rendered item count {expected}")]
    SoftTokenCount { provided: usize, expected: usize },

    #[error("sequence length {len} exceeds context limit {limit}")]
    ContextLimit { len: usize, limit: usize },

    #[error("token `{0}` not in vocabulary")]
    UnknownToken(String),

    #[error("frozen weights changed: {which} digest was {expected}, now {actual}")]
    FrozenWeightsChanged {
        which: String,
        expected: String,
        actual: String,
    },

    #[error("training diverged: loss is not finite at step {step}")]
    Diverged { step: usize },

    #[error("metric requires both classes present (got {positives} positives, {negatives} negatives)")]
    SingleClass { positives: usize, negatives: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint parse error at line {line}: {message}")]
    Checkpoint { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dims(context: impl Into<String>, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }
}
