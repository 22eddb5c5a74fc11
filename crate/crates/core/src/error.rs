//! Error type shared across the toolkit.

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or image dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A caller-supplied value is out of its documented range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Payload does not fit in the container at the configured rate.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// File is in a format we refuse to read or write (lossy, unknown, ...).
    #[error("unsupported image format: {0}")]
    ImageFormat(String),

    /// Checkpoint or manifest file is malformed or has the wrong version.
    #[error("bad file format: {0}")]
    FileFormat(String),

    /// A NaN or infinity showed up where only finite values are allowed.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Training halted because a loss or gradient diverged. The trace
    /// collected so far is preserved by the caller.
    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: u64, detail: String },

    /// Configuration failed validation before any work started.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image codec: {0}")]
    Codec(#[from] image::ImageError),
}

impl Error {
    /// True for errors caused by bad user input (CLI exit code 1);
    /// false for runtime failures (exit code 2).
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Shape(_)
                | Error::InvalidArgument(_)
                | Error::Capacity(_)
                | Error::Config(_)
        )
    }
}
