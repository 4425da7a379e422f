use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("division by zero in divisor entry {index}")]
    DivisionByZero { index: usize },

    #[error("axis {axis} out of range for a tensor of rank {ndim}")]
    InvalidAxis { axis: usize, ndim: usize },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("conv2d: kernel {kernel:?} does not fit padded input {padded:?}")]
    SpatialUnderflow {
        kernel: (usize, usize),
        padded: (usize, usize),
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this graph; reset it before calling again")]
    BackwardTwice,

    #[error("loss does not depend on any tensor that requires grad")]
    NoGradientPath,

    #[error("polygon needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),

    #[error("cannot sample a random mask from an empty annotation pool")]
    EmptyPool,

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("image {}: {msg}", path.display())]
    Image { path: PathBuf, msg: String },

    #[error("cannot place {requested} text boxes in a {width}x{height} image")]
    Capacity {
        requested: usize,
        width: usize,
        height: usize,
    },

    #[error("missing {what}: {}", path.display())]
    Missing { what: &'static str, path: PathBuf },

    #[error("sample {0} has no clean target")]
    MissingClean(usize),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("config: {0}")]
    Config(String),

    #[error("oracle: {0}")]
    Oracle(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
