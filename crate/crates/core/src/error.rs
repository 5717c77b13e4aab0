use thiserror::Error;

/// Errors raised by the numerical routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-finite integrand: {0}")]
    NonFiniteIntegrand(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("histogram weights violate normalization: {0}")]
    NormalizationViolation(String),

    #[error("domain error: {0}")]
    DomainError(String),

    #[error("degenerate information matrix: {0}")]
    DegenerateInformation(String),

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("non-finite density ratio: {0}")]
    NonFiniteRatio(String),

    #[error("no root in bracket: {0}")]
    NoRoot(String),

    #[error("all candidates infeasible: {0}")]
    AllCandidatesInfeasible(String),

    #[error("line search failed: {0}")]
    LineSearchFailure(String),

    #[error("optimizer did not converge: {0}")]
    NonConvergence(String),

    #[error("step left the parameter domain: {0}")]
    DomainEscape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;
