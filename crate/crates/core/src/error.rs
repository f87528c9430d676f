use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape for {op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },
    #[error("division by zero in {0}")]
    DivisionByZero(&'static str),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("global pooling over an empty spatial extent")]
    EmptySpatial,
    #[error("resample target dimension must be at least 1, got {h}x{w}")]
    ZeroTarget { h: usize, w: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss is detached from the tape")]
    DetachedLoss,

    #[error("input size {h}x{w} is not divisible by 32")]
    IndivisibleInput { h: usize, w: usize },
    #[error("at least {need} modalities required, got {got}")]
    TooFewModalities { need: usize, got: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("all pixels carry the ignore label")]
    AllIgnored,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u8, classes: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("truncated payload: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("{0} trailing bytes after declared payload")]
    TrailingBytes(usize),
    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("config error: {0}")]
    Config(String),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("modality mismatch: model has {model:?}, data has {data:?}")]
    ModalityMismatch {
        model: Vec<String>,
        data: Vec<String>,
    },
    #[error("non-finite loss at step {step}: {diagnostics}")]
    NonFiniteLoss { step: u64, diagnostics: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
