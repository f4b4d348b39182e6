use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("non-binary spike value {value} in {site}")]
    NonBinary { site: String, value: f64 },

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("missing saved state: {0}")]
    MissingState(String),

    #[error("trace is missing site `{0}`")]
    MissingSite(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("non-finite loss; first offending layer: {layer}")]
    NonFiniteLoss { layer: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("image: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Errors caused by numeric blow-ups rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::NonFiniteLoss { .. })
    }
}
