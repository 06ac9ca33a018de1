/// Errors raised while building or evaluating a graph.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible.
    #[error("shape error: {0}")]
    Shape(String),
    /// A layer was configured with impossible geometry.
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] vah_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
