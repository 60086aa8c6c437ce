//! The weightscope guide, compiled as doctests so its snippets stay in sync
//! with the library. Read the rendered book under `book/`.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/bf16-probe.md")]
pub mod bf16_probe {}

#[doc = include_str!("../../../book/src/checkpoints.md")]
pub mod checkpoints {}

#[doc = include_str!("../../../book/src/mask-analytics.md")]
pub mod mask_analytics {}

#[doc = include_str!("../../../book/src/spectral.md")]
pub mod spectral {}

#[doc = include_str!("../../../book/src/selection-masks.md")]
pub mod selection_masks {}

#[doc = include_str!("../../../book/src/interventions.md")]
pub mod interventions {}

#[doc = include_str!("../../../book/src/theory-bench.md")]
pub mod theory_bench {}

#[doc = include_str!("../../../book/src/pipeline.md")]
pub mod pipeline {}
