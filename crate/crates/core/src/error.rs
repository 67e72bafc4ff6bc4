use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("matrix is not symmetric at ({i}, {j}): difference {diff:e}")]
    Asymmetric { i: usize, j: usize, diff: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("covariance factorization failed: residual pivot {pivot:e} below -{tolerance:e}")]
    Factorization { pivot: f64, tolerance: f64 },

    #[error("explicit Euler step {dt:e} exceeds the stability bound {bound:e}")]
    Stability { dt: f64, bound: f64 },

    #[error("particle budget exceeded: {count} alive particles, cap {cap}")]
    Budget { count: usize, cap: usize },

    #[error("dual jump count {count} exceeds cap {cap}")]
    RunawayJumps { count: usize, cap: usize },

    #[error("grid too small: {0}")]
    GridTooSmall(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("replica snapshot grids differ")]
    SnapshotMismatch,

    #[error("{exits} of {paths} conditional paths left the environment grid")]
    DomainExit { exits: usize, paths: usize },

    #[error("Picard differences stopped contracting: last ratio {ratio:e}")]
    NoContraction { ratio: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors that signal a violated numerical bound rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::Factorization { .. }
                | Error::Stability { .. }
                | Error::RunawayJumps { .. }
                | Error::DomainExit { .. }
                | Error::NoContraction { .. }
        )
    }

    pub fn is_budget(&self) -> bool {
        matches!(self, Error::Budget { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
