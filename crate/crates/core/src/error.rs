//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("token id {id} out of range (vocab size {vocab})")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("intervention site out of bounds: {0}")]
    SiteOutOfBounds(String),

    #[error("duplicate edit at {0}")]
    DuplicateEdit(String),

    #[error("edit tensor length {got} does not match site activation length {want}")]
    EditShapeMismatch { got: usize, want: usize },

    #[error("invalid blueprint: {0}")]
    InvalidBlueprint(String),

    #[error("invalid language spec: {0}")]
    InvalidLanguageSpec(String),

    #[error("invalid train config: {0}")]
    InvalidTrainConfig(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("invalid stimulus: {0}")]
    InvalidStimulus(String),

    #[error("model file error: {0}")]
    ModelFile(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
