use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("part {0} has no triangles")]
    EmptySubmesh(usize),

    #[error("non-manifold edge ({0}, {1}) shared by {2} triangles")]
    NonManifoldEdge(usize, usize, usize),

    #[error("non-manifold boundary vertex {0}")]
    NonManifoldVertex(usize),

    #[error("mesh part {0} is not edge-manifold")]
    NonManifoldPart(usize),

    #[error("duplicate landmark name {0:?}")]
    DuplicateLandmark(String),

    #[error("landmark {name:?} sits on vertex {vertex} which has no uv")]
    LandmarkWithoutUv { name: String, vertex: usize },

    #[error("boundary loop has {0} anchors, need at least 2")]
    TooFewAnchors(usize),

    #[error("zero-length boundary arc between anchors {0} and {1}")]
    ZeroLengthArc(usize, usize),

    #[error("singular laplacian system: {0}")]
    SingularSystem(String),

    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("part {0} has no landmark correspondences")]
    PartWithoutLandmarks(usize),

    #[error("uv ({u}, {v}) at vertex {vertex} of part {part} left [0,1]")]
    UvOutOfRange {
        part: usize,
        vertex: usize,
        u: f64,
        v: f64,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("skeleton mismatch: {0}")]
    SkeletonMismatch(String),

    #[error("scene too crowded: placed {placed} of {requested} figures")]
    SceneTooCrowded { placed: usize, requested: usize },

    #[error("degenerate crop box")]
    DegenerateBox,

    #[error("empty {0} pool")]
    EmptyPool(&'static str),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("missing {0} labels")]
    MissingLabels(&'static str),

    #[error("domain score {0} outside [0,1]")]
    DomainScore(f64),

    #[error("empty evaluation region")]
    EmptyRegion,

    #[error("zero instance area")]
    ZeroArea,

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            Io(_) | File { .. } | Image(_) => ErrorKind::Io,
            Config(_) | InvalidParameter(_) => ErrorKind::Config,
            SingularSystem(_) | NoConvergence { .. } | NonFinite(_) => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
