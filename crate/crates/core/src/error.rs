use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("state is not faithful: minimum eigenvalue {min:e} against maximum {max:e}")]
    NotFaithful { min: f64, max: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("generator does not annihilate the identity (defect {0:e})")]
    NonUnitalGenerator(f64),

    #[error("Gram matrix eigenvalue {min:e} is below -1e-8 x {max:e}: input map is not completely positive")]
    NotCompletelyPositive { min: f64, max: f64 },

    #[error("partition {fine} does not refine {coarse}")]
    Order { fine: String, coarse: String },

    #[error("time {requested} lies beyond the truncation horizon; maximum admissible time is {max_admissible}")]
    Truncation {
        requested: String,
        max_admissible: String,
    },

    #[error("internal consistency error: {0}")]
    Consistency(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
