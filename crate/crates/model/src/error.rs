use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Core(#[from] tsd_core::CoreError),

    #[error("configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate part mask: every part row is empty and the fallback is disabled")]
    DegenerateMask,
}

pub type Result<T> = std::result::Result<T, ModelError>;
