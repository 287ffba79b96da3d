use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// The variants double as the failure categories reported by the CLI exit code.
#[derive(Debug, Error)]
pub enum PetlError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Format(String),
}

impl PetlError {
    pub fn config(msg: impl Into<String>) -> Self {
        PetlError::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        PetlError::Input(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        PetlError::Numerical(msg.into())
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            PetlError::Config(_) => 2,
            PetlError::Input(_) => 3,
            PetlError::Numerical(_) => 4,
            PetlError::Io(_) => 5,
            PetlError::Format(_) => 6,
        }
    }
}

impl From<serde_json::Error> for PetlError {
    fn from(e: serde_json::Error) -> Self {
        PetlError::Format(e.to_string())
    }
}

impl From<toml::de::Error> for PetlError {
    fn from(e: toml::de::Error) -> Self {
        PetlError::Format(e.to_string())
    }
}

impl From<image::ImageError> for PetlError {
    fn from(e: image::ImageError) -> Self {
        PetlError::Input(format!("image decode failed: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, PetlError>;
