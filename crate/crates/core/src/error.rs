use thiserror::Error;

/// Coarse failure classes, used by the command-line front end to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum EaseError {
    #[error("parse error at row {row}, column '{column}': {reason}")]
    Parse {
        row: usize,
        column: String,
        reason: String,
    },
    #[error("input contains no labeled rows")]
    EmptyLabeled,
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("cannot partition {n} observations into {k} folds")]
    InfeasiblePartition { n: usize, k: usize },
    #[error("column '{0}' has zero variance")]
    DegenerateColumn(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no bandwidth in the grid produced a defined cross-validation error")]
    NoValidBandwidth,
    #[error("projection has numerical rank {rank}, expected {expected}")]
    RankDeficientProjection { rank: usize, expected: usize },
    #[error("design matrix is rank deficient; collinear columns: {}", .0.join(", "))]
    RankDeficientDesign(Vec<String>),
    #[error("singular system: {0}")]
    SingularSystem(String),
    #[error("ill-conditioned system (condition estimate {0:.3e})")]
    IllConditioned(f64),
    #[error("matrix is not symmetric (max asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("degenerate slicing: {nonempty} non-empty slices, at least {needed} required")]
    DegenerateSlicing { nonempty: usize, needed: usize },
    #[error("matrix is not positive semi-definite (smallest eigenvalue {0:.3e})")]
    NotPsd(f64),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl EaseError {
    pub fn class(&self) -> ErrorClass {
        use EaseError::*;
        match self {
            Config(_) | Unsupported(_) | InfeasiblePartition { .. } => ErrorClass::Config,
            Parse { .. }
            | EmptyLabeled
            | InvalidData(_)
            | DegenerateColumn(_)
            | Io(_)
            | DimensionMismatch { .. } => ErrorClass::Data,
            NoValidBandwidth
            | RankDeficientProjection { .. }
            | RankDeficientDesign(_)
            | SingularSystem(_)
            | IllConditioned(_)
            | NotSymmetric(_)
            | DegenerateSlicing { .. }
            | NotPsd(_)
            | Numerical(_) => ErrorClass::Numerical,
        }
    }

    /// Short machine-readable tag for the variant.
    pub fn tag(&self) -> &'static str {
        use EaseError::*;
        match self {
            Parse { .. } => "parse",
            EmptyLabeled => "empty-labeled",
            InvalidData(_) => "invalid-data",
            InfeasiblePartition { .. } => "infeasible-partition",
            DegenerateColumn(_) => "degenerate-column",
            DimensionMismatch { .. } => "dimension-mismatch",
            Config(_) => "config",
            NoValidBandwidth => "no-valid-bandwidth",
            RankDeficientProjection { .. } => "rank-deficient-projection",
            RankDeficientDesign(_) => "rank-deficient-design",
            SingularSystem(_) => "singular-system",
            IllConditioned(_) => "ill-conditioned",
            NotSymmetric(_) => "not-symmetric",
            DegenerateSlicing { .. } => "degenerate-slicing",
            NotPsd(_) => "not-psd",
            Unsupported(_) => "unsupported",
            Numerical(_) => "numerical",
            Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, EaseError>;
