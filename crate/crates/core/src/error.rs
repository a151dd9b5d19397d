use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid lattice: {0}")]
    Lattice(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("trajectory is infeasible")]
    Infeasible,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),

    #[error("training aborted: {0}")]
    TrainingAborted(String),

    #[error("state diverged: |x| = {value} exceeded ceiling {ceiling} at t = {time}")]
    Diverged { time: f64, value: f64, ceiling: f64 },

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
