//! Error type shared by all modules.

use thiserror::Error;

/// Anything that can go wrong while reading data, specifying a model,
/// fitting it, or comparing fits.
///
/// Row, column, item, and class indices in messages are 1-based, matching
/// the user-facing convention of the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("row {row}, column {col}: value {value} is not a valid category code (expected 0..={max} or the missing code)")]
    OutOfRangeCategory { row: usize, col: usize, value: i64, max: u32 },

    #[error("row {row}, column {col}: cannot parse {text:?} as an integer code")]
    MalformedCell { row: usize, col: usize, text: String },

    #[error("row {row} has {found} columns, expected {expected}")]
    RaggedRow { row: usize, found: usize, expected: usize },

    #[error("column {col} has no observed values")]
    FullyMissingColumn { col: usize },

    #[error("invalid model specification: {0}")]
    InvalidSpec(String),

    #[error("invalid parameter values: {0}")]
    InvalidParams(String),

    #[error("link function: {0}")]
    Link(#[from] crate::link::LinkError),

    #[error("response pattern {pattern} has zero probability under every latent class")]
    ZeroPatternProbability { pattern: usize },

    #[error("log-likelihood became non-finite at iteration {iteration}")]
    NonFiniteLikelihood { iteration: usize },

    #[error("models are not nested: {0}")]
    NotNested(String),

    #[error("fits are not comparable: {0}")]
    NotComparable(String),

    #[error("invalid simulation plan: {0}")]
    InvalidPlan(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
