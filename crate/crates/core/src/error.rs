use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("invalid structure: {0}")]
    Structure(String),

    #[error("invalid model configuration: {0}")]
    Config(String),

    #[error("invalid panel: {0}")]
    Panel(String),

    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    #[error("constraint matrix is rank deficient: {0}")]
    RankDeficientConstraints(String),

    #[error("Newton iterations failed to converge after {iterations} iterations")]
    NewtonDivergence { iterations: usize },

    #[error("no observed cells for {0}")]
    NoObservations(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("scoring error: {0}")]
    Scoring(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
