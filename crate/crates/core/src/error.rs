use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, levels, or coordinate sets do not line up.
    #[error("structural error: {0}")]
    Structural(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("resource limit exceeded: {what} ({actual} > {limit})")]
    Resource {
        what: &'static str,
        actual: usize,
        limit: usize,
    },

    #[error("degenerate scene: level {level} has no active voxels")]
    DegenerateScene { level: u8 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
