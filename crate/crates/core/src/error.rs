use thiserror::Error;

/// Errors produced by the shape-regulated self-training toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate shape: {0}")]
    DegenerateShape(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("training shapes carry no variation to model")]
    ZeroVariance,

    #[error("sample size {0} outside the supported range [3, 5000]")]
    SampleSizeOutOfRange(usize),

    #[error("all samples are equal; the statistic is undefined")]
    DegenerateSample,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("every unlabeled sample was skipped in self-training epoch {epoch}")]
    AllSamplesSkipped { epoch: u32 },

    #[error("stage order violated: {0}")]
    StageOrder(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the caller's input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::DegenerateShape(_) | Error::AllSamplesSkipped { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
