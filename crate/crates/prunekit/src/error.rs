use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("empty batch")]
    EmptyBatch,

    #[error("unknown architecture `{0}` (expected one of mlp5, lenet5, conv6)")]
    UnknownArchitecture(String),

    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("backward called before forward")]
    BackwardBeforeForward,

    #[error("dropout in train mode requires an rng")]
    RngRequired,

    #[error("gradients missing; run backward first")]
    MissingGradients,

    #[error("loss is zero; elasticity normaliser degenerate")]
    DegenerateLoss,

    #[error("architecture mismatch: snapshot taken for `{snapshot}`, model is `{model}`")]
    ArchitectureMismatch { snapshot: String, model: String },

    #[error("invalid prune schedule: {0}")]
    InvalidSchedule(String),

    #[error("pruning target below current sparsity: requested {requested}, current {current}")]
    TargetBelowCurrent { requested: f64, current: f64 },

    #[error("structured mask would empty layer {0}")]
    EmptyLayer(usize),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid IDX file `{path}`: {reason}")]
    IdxFormat { path: String, reason: String },

    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("label {label} out of range [0, {classes})")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("not enough samples: need {need}, have {have}")]
    NotEnoughSamples { need: usize, have: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
