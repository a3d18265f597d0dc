//! Benchmarks for the odl-kernels training primitives.
//!
//! Every benchmark checks its results against a reference before timing
//! anything; a failed check is an error, never a warning. Timings are the
//! median of at least three repetitions after warmup.

pub mod error;
pub mod gate;
pub mod harness;
pub mod layer;
pub mod mm;
pub mod models;
pub mod report;

pub use error::{BenchError, Result};
pub use harness::Timing;
pub use layer::{bench_layer, bench_layout, table3, LayerBench, LayerConfig, LayoutComparison, LayoutRatio};
pub use mm::{bench_mm, MmCase};
pub use models::{bench_model, LayerKind, Model, ModelBench, ModelKind, ModelOptions};
pub use report::{PhaseReport, Record};
