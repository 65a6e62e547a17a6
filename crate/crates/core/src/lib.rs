//! CPU inference engine for mini Conformer and FusionFormer speech models.
//!
//! The crate builds four model flavors (LayerNorm Conformer, BatchNorm
//! Conformer, normalization-free Conformer and FusionFormer), folds the
//! FusionFormer BatchNorm/ReLU nodes into their producing layers, and ships
//! the measurement tooling used to compare them: parameter/FLOP/latency
//! breakdowns, real-time-factor benchmarks, layer trend statistics and an
//! int8 execution path.

pub mod cli;
pub mod error;
pub mod fusion;
pub mod io;
pub mod ltp;
pub mod model;
pub mod profiler;
pub mod quant;
pub mod streaming;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{build_model, Flavor, Model, ModelConfig, WeightStore};
pub use streaming::{build_chunk_mask, ChunkMask, DecodingConfig};
pub use tensor::{Element, Tensor};
