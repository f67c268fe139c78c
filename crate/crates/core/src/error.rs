use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid operator argument or geometry.
    #[error("parameter error: {0}")]
    Param(String),

    /// Tensor extents that do not line up.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Model or block configuration that cannot be built.
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation produced NaN or infinity from finite inputs.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// Tape misuse, e.g. a second backward pass without a reset.
    #[error("autograd error: {0}")]
    Autograd(String),

    /// RGB and IR inputs that are not spatially aligned.
    #[error("alignment error: rgb {rgb:?} vs ir {ir:?}")]
    Alignment { rgb: [usize; 4], ir: [usize; 4] },

    #[error("cost accounting error: {0}")]
    Accounting(String),

    /// Weight-file problems: bad magic, truncation, name or shape mismatch.
    #[error("weight file error: {0}")]
    Format(String),

    /// A text file that failed to parse, with its 1-based line number.
    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// Dataset pipeline failure (empty directory, empty corpus, ...).
    #[error("pipeline error: {0}")]
    Pipeline(String),

    /// Augmentation policy that cannot be applied.
    #[error("policy error: {0}")]
    Policy(String),

    #[error("image error for {}: {msg}", path.display())]
    Image { path: PathBuf, msg: String },

    #[error("I/O error for {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
