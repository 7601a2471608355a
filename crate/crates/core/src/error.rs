//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid model or run configuration, rejected before any work starts.
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor or image input violates a shape/range precondition.
    #[error("input error: {0}")]
    Input(String),

    /// Attribute label outside the schema's allowed values.
    #[error("label error: {0}")]
    Label(String),

    /// Attribute target document does not match the schema.
    #[error("target error: {0}")]
    Target(String),

    /// Scene specification cannot be rendered or labeled.
    #[error("scene error: {0}")]
    Scene(String),

    /// Dataset-level problem (missing files, empty domains).
    #[error("data error: {0}")]
    Data(String),

    /// Label-file parse failure, pinned to a row and column.
    #[error("parse error in {path} at row {row}, column {column}: {message}")]
    LabelParse {
        path: String,
        row: usize,
        column: String,
        message: String,
    },

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Checkpoint container is malformed or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
