use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not symmetric (relative asymmetry {0:.3e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive definite (pivot {pivot} = {value:.3e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("requested rank {rank} outside 1..={max}")]
    RankOutOfRange { rank: usize, max: usize },

    #[error("eigensolver did not converge after {0} iterations")]
    NoConvergence(usize),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("oracle size guard: E*d_hidden = {size} exceeds {limit}")]
    OracleGuard { size: usize, limit: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed container: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Failures of the numerical kernels, as opposed to bad input or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotSymmetric(_)
                | Error::NotPositiveDefinite { .. }
                | Error::NoConvergence(_)
                | Error::NonFinite(_)
        )
    }
}

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Dimension(msg()))
    }
}
