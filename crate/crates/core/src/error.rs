use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bandwidth must be positive and finite, got {0}")]
    InvalidBandwidth(f64),

    #[error("b must be ≥ h (got b = {b}, h = {h})")]
    BandwidthOrder { h: f64, b: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("empty sample")]
    EmptySample,

    #[error("site {0} holds no units")]
    EmptySite(usize),

    #[error("no convergence after {iterations} iterations (gradient max-norm {grad_norm:e})")]
    NonConvergence { iterations: usize, grad_norm: f64 },

    #[error("degenerate design: {0}")]
    DegenerateDesign(String),

    #[error("covariate column {0} is constant on the standardizing sample")]
    ConstantColumn(usize),

    #[error("coordinate {0} has zero curvature and ridge")]
    ZeroCurvature(usize),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("missing gradient replies from sites {0:?}")]
    MissingReply(Vec<usize>),

    #[error("bad shape: {0}")]
    BadShape(String),

    #[error("test data carries no true contrast column")]
    MissingTruth,

    #[error("no test unit received the treatment recommended by the rule")]
    EmptyIntersection,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
