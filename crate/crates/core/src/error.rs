use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("image {height}x{width} is below the {min}x{min} minimum")]
    TooSmall {
        height: usize,
        width: usize,
        min: usize,
    },
    #[error("vessel density outside [{min}, {max}] after {attempts} attempts")]
    DensityUnreachable { min: f64, max: f64, attempts: usize },
    #[error("rendering contrast below margin {margin} after {attempts} attempts")]
    ContrastUnreachable { margin: f64, attempts: usize },
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("coefficients off the simplex: {0}")]
    OffSimplex(String),
    #[error("zero-norm feature vector at batch index {index}")]
    ZeroNorm { index: usize },
    #[error("feature dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("training diverged: non-finite {component} ({context})")]
    Divergence { component: String, context: String },
    #[error("invalid ablation flags: {0}")]
    InvalidFlags(String),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format: {0}")]
    Format(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// True for errors that stem from numerical divergence during training.
    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Divergence { .. })
    }
}
