use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("image {width}x{height} is too small: {reason}")]
    ImageTooSmall {
        width: u32,
        height: u32,
        reason: &'static str,
    },
    #[error("invalid rectangle: {0}")]
    InvalidRect(String),
    #[error("rectangle ({x},{y},{w},{h}) is outside a {width}x{height} image")]
    OutOfBounds {
        x: u32,
        y: u32,
        w: u32,
        h: u32,
        width: u32,
        height: u32,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value in layer {layer}")]
    NonFinite { layer: String },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
