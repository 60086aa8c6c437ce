//! Weight-space diagnostics for fine-tuned models.
//!
//! The crate answers "how did fine-tuning move these weights?" at the level
//! of stored values:
//!
//! - [`bf16`]: bit-exact bfloat16 numerics and the scale-aware unchanged-weight probe.
//! - [`tensor_io`]: a streaming reader/writer for the single-file tensor archive format.
//! - [`diff`]: update masks and update sparsity between checkpoint pairs.
//! - [`analytics`]: Jaccard overlap, consensus maps, row/column ratio profiles.
//! - [`spectral`]: top-k SVD, principal angles, spectral drift and a perturbation-bound suite.
//! - [`geometry`]: principal, low-magnitude, safe and density-matched random masks.
//! - [`intervention`]: function-preserving V/O rotations and head permutations.
//! - [`theory`]: numerical checks of KL expansions on categorical policies.
//! - [`pipeline`]: configuration, orchestration and JSON reports.
//! - [`alloc`]: allocator tuning for layer-sized buffers.

pub mod alloc;
pub mod analytics;
pub mod bf16;
pub mod diff;
pub mod error;
pub mod fixtures;
pub mod geometry;
pub mod intervention;
pub mod mask;
pub mod pipeline;
pub mod seed;
pub mod spectral;
pub mod tensor_io;
pub mod theory;

pub use bf16::{bf16_unchanged, ulp_bf16, Bf16Word, ProbeConfig, ZeroPolicy};
pub use error::{Error, Result};
pub use mask::Mask;
pub use tensor_io::{open_checkpoint, CheckpointHandle, LayerFilter, WeightMatrix};
