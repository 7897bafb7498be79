use thiserror::Error;

/// Errors raised by the reconstruction library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("conjugate symmetry violated: imaginary residual {residual:e} exceeds {limit:e}")]
    SymmetryViolation { residual: f64, limit: f64 },
    #[error("SVD did not converge on a {rows}x{cols} matrix")]
    SvdFailure { rows: usize, cols: usize },
    #[error("negative threshold {0}")]
    NegativeThreshold(f64),
    #[error("projection bin {bin} has zero expected counts but {counts} measured counts")]
    DivisionByZeroBin { bin: usize, counts: f64 },
    #[error("preconditioner floor must be positive, got {0}")]
    NonpositiveEpsilon(f64),
    #[error("penalty weight is zero; mu is undefined")]
    ZeroLambda,
    #[error("frame {0} has no counts")]
    ZeroFrameCounts(usize),
    #[error("non-finite value in iterate {iteration} ({what})")]
    NonFinite {
        iteration: usize,
        what: &'static str,
    },
    #[error("bad binning: {0}")]
    BadBinning(String),
    #[error("bad phantom spec: {0}")]
    BadSpec(String),
    #[error("bad noise fractions: scatter {scatter}, randoms {randoms}")]
    BadFractions { scatter: f64, randoms: f64 },
    #[error("bad frame schedule: {0}")]
    BadSchedule(String),
    #[error("fit diverged: residual is not finite")]
    FitDiverged,
    #[error("bad fit weights: {0}")]
    BadWeights(String),
    #[error("truth image has zero mean")]
    ZeroTruthMean,
    #[error("seed ({0}, {1}) is outside the image")]
    SeedOutOfBounds(usize, usize),
    #[error("point ({0}, {1}) is outside the image")]
    OutOfBounds(f64, f64),
    #[error("need at least 2 realizations for a confidence interval, got {0}")]
    TooFewRealizations(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("bad tensor file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
