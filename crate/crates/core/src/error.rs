use thiserror::Error;

/// Errors raised across the engine. Each variant maps to a stable name
/// (see [`Error::name`]) that the command-line front end prints.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty input")]
    EmptyInput,

    #[error("loss must be scalar-valued, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value: {0}")]
    NonFiniteValue(String),

    #[error("batch norm running statistics are uninitialized")]
    UninitializedStats,

    #[error("odd spatial extent {extent} on axis {axis}; down-sampling requires even extents")]
    OddExtent { axis: usize, extent: usize },

    #[error("odd channel count {0}; up-sampling requires an even channel count")]
    OddChannels(usize),

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("extent {extent} on axis {axis} is not divisible by {divisor}")]
    IndivisibleExtent { axis: usize, extent: usize, divisor: usize },

    #[error("patch too large: {0}")]
    PatchTooLarge(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("checkpoint does not match the requested spec: {0}")]
    SpecMismatch(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// Stable upper-case error name.
    pub fn name(&self) -> &'static str {
        match self {
            Error::ShapeMismatch(_) => "SHAPE_MISMATCH",
            Error::EmptyInput => "EMPTY_INPUT",
            Error::NonScalarLoss(_) => "NON_SCALAR_LOSS",
            Error::NonFiniteValue(_) => "NONFINITE_VALUE",
            Error::UninitializedStats => "UNINITIALIZED_STATS",
            Error::OddExtent { .. } => "ODD_EXTENT",
            Error::OddChannels(_) => "ODD_CHANNELS",
            Error::InvalidSpec(_) => "INVALID_SPEC",
            Error::IndivisibleExtent { .. } => "INDIVISIBLE_EXTENT",
            Error::PatchTooLarge(_) => "PATCH_TOO_LARGE",
            Error::DegenerateInput(_) => "DEGENERATE_INPUT",
            Error::InvalidConfig(_) => "INVALID_CONFIG",
            Error::NonFiniteLoss { .. } => "NONFINITE_LOSS",
            Error::SpecMismatch(_) => "SPEC_MISMATCH",
            Error::BadMagic { .. } => "BAD_MAGIC",
            Error::UnsupportedVersion(_) => "UNSUPPORTED_VERSION",
            Error::Io(_) => "IO_ERROR",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::ShapeMismatch(msg.into()))
}
