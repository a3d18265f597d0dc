//! Training kernels for on-device learning on memory-constrained targets.
//!
//! Every training step of a convolution (forward, input gradient, weight
//! gradient) is lowered to a shape transform followed by a single matrix
//! multiplication, using either row-column (`MM`) or row-row (`MM_T`)
//! microkernels. See [`conv`] for the operand mapping of each step.

pub mod conv;
pub mod elem;
pub mod error;
pub mod exec;
pub mod geometry;
pub mod io;
pub mod kernels;
pub mod layers;
pub mod mat;
pub mod profile;
pub mod tensor;
pub mod tiling;
pub mod transforms;

pub use conv::{GradPair, LayerState, Op, Step};
pub use elem::{half_flavor, set_half_flavor, Elem, ElemType, HalfFlavor};
pub use error::{Error, Result};
pub use exec::{AccMode, ExecConfig};
pub use geometry::{ConvSpec, WindowGeom};
pub use kernels::{matmul, mm, mm_t, Form, KernelVariant, MMDims, OpCounters, Unroll, VectorMode};
pub use mat::{transpose, Mat, MatRef};
pub use profile::{OpCounts, Phase, PhaseStat, PhaseTrace};
pub use tensor::{Buffer, Dims, Layout, Stored, Tensor};
pub use tiling::{plan_tiles, plan_tiles_with, run_tiled, Scratchpad, TileAcc, TilePlan, TiledRun, TransferLog};
