use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("masking ratios sum to {sum}, which exceeds 1")]
    RatioSum { sum: f64 },

    #[error("mask and visible index sets overlap at patch {0}")]
    Overlap(usize),

    #[error("patch index {index} out of range for {len} patches")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid label {label} for {num_classes} classes")]
    InvalidLabel { label: usize, num_classes: usize },

    #[error("masking weights need a full-image pass over {expected} tokens, attention covers {actual}")]
    NotFullPass { expected: usize, actual: usize },

    #[error("augmentation output size {actual} does not match model input size {expected}")]
    AugmentationSize { expected: usize, actual: usize },

    #[error("no masking weights cached for image `{0}`")]
    MissingWeights(String),

    #[error("loss became non-finite at epoch {epoch}, step {step}: l_con={l_con}, l_cls={l_cls}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        l_con: f64,
        l_cls: f64,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
