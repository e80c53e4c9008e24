use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("patient {id} rejected: {reason}")]
    PatientRejected { id: String, reason: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("integration failed at t = {time}: non-finite state")]
    Integration { time: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite gradient at parameter index {index}")]
    NonFiniteGradient { index: usize },

    #[error("optimizer failed: {0}")]
    Optimizer(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("observation at day {day} outside prediction horizon [{t0}, {t1}]")]
    OutsideHorizon { day: i64, t0: i64, t1: i64 },

    #[error("missing prerequisite: {0}")]
    MissingArtifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
