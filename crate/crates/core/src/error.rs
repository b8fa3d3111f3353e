use thiserror::Error;

/// Errors produced by model construction, transformations, solving and the
/// protocol layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("plant is not controllable (reachability rank {rank} < {n})")]
    NotControllable { rank: usize, n: usize },

    #[error("plant is not observable (observability rank {rank} < {n})")]
    NotObservable { rank: usize, n: usize },

    #[error("input matrix has linearly dependent columns (rank {rank} < {m})")]
    InputRankDeficient { rank: usize, m: usize },

    #[error("output matrix has linearly dependent rows (rank {rank} < {p})")]
    OutputRankDeficient { rank: usize, p: usize },

    #[error("matrix {which} is singular or numerically ill-conditioned")]
    Singular { which: &'static str },

    #[error("condition number {cond:.3e} of {which} exceeds limit {limit:.1e}")]
    IllConditioned {
        which: &'static str,
        cond: f64,
        limit: f64,
    },

    #[error("sampling budget of {budget} draws exhausted")]
    SampleBudgetExhausted { budget: usize },

    #[error("sequence length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("cost matrix is not positive definite (min/max eigenvalue ratio {ratio:.3e})")]
    NotPositiveDefinite { ratio: f64 },

    #[error("system is not in canonical chain form")]
    NotChainForm,

    #[error("chain index list is empty or contains a zero length")]
    BadChainIndices,

    #[error("invalid bounds: lower {lo} >= upper {hi} in coordinate {coord}")]
    BadBounds { coord: usize, lo: f64, hi: f64 },

    #[error("side knowledge rank {k} exceeds group dimension {dim}")]
    SideKnowledgeTooLarge { k: usize, dim: usize },

    #[error("solver failed: {0}")]
    Solver(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid file contents: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
