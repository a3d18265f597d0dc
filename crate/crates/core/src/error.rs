use thiserror::Error;

use crate::elem::{ElemType, HalfFlavor};
use crate::tensor::Layout;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid convolution geometry: {0}")]
    Geometry(String),

    #[error("element type mismatch: expected {expected}, got {got}")]
    ElemMismatch { expected: ElemType, got: ElemType },

    #[error("layout mismatch: expected {expected}, got {got}")]
    LayoutMismatch { expected: Layout, got: Layout },

    #[error("invalid kernel variant: {0}")]
    Variant(String),

    #[error("expected {expected} tensor, got {got}")]
    TensorKind { expected: &'static str, got: &'static str },

    #[error("transposed-weights flag mismatch: weights {weights}, gradient {gradient}")]
    TransposeFlag { weights: bool, gradient: bool },

    #[error("backward step requested before forward")]
    NoForward,

    #[error("16-bit flavor already fixed to {active:?}, cannot switch to {requested:?}")]
    FlavorLocked { active: HalfFlavor, requested: HalfFlavor },

    #[error("scratchpad exhausted: requested {requested} bytes with {in_use} of {capacity} in use")]
    ScratchpadFull { requested: usize, in_use: usize, capacity: usize },

    #[error("no tile fits in {capacity} bytes (minimal tile needs {required})")]
    InfeasibleTiling { capacity: usize, required: usize },

    #[error("tile plan does not match layer: {0}")]
    PlanMismatch(String),

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error("{0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
