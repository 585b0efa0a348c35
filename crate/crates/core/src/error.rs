use alloc::string::String;

/// Errors raised by the fusion core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("target dimension {target} exceeds native dimension {native}")]
    TargetDimTooLarge { target: usize, native: usize },
    #[error("target dimension must be at least 1")]
    ZeroTargetDim,
    #[error("source `{0}` has no pooled embedding")]
    MissingSource(String),
    #[error("source `{0}` supplied more than once")]
    DuplicateSource(String),
    #[error("mask probability {0} outside [0, 1]")]
    RhoOutOfRange(f64),
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("bag has no tiles")]
    EmptyBag,
    #[error("slide `{0}` has no tile shared by every source")]
    EmptyIntersection(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),
    #[error("top-3 routing needs at least 3 sources, got {0}")]
    TooFewSources(usize),
    #[error("variant `{0}` has no prompt tuner")]
    VariantHasNoTuner(String),
    #[error("variant is trained for {expected}, dataset is {actual}")]
    VariantTaskMismatch {
        expected: &'static str,
        actual: &'static str,
    },
    #[error("empty input")]
    EmptyInput,
    #[error("labels must contain at least one positive and one negative")]
    DegenerateLabels,
    #[error("zero variance input")]
    ZeroVariance,
    #[error("finite-difference step {0} outside [1e-6, 1e-3]")]
    StepOutOfRange(f64),
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("contribution map has no tiles")]
    EmptyMap,
    #[error("tile {0} appears more than once")]
    DuplicateTile(u64),
    #[error("invalid manifest: {0}")]
    ManifestInvalid(String),
    #[error("non-finite value in table `{source_id}` at row {row}, column {col}")]
    NonFiniteValue {
        source_id: String,
        row: usize,
        col: usize,
    },
    #[error("negative grid coordinate ({0}, {1})")]
    NegativeCoordinate(i64, i64),
}

pub type Result<T> = core::result::Result<T, Error>;
