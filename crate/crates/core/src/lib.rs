//! triglab-core: a desk-scale laboratory for language-switching trigger circuits.
//!
//! The crate builds tiny decoder-only transformers that carry a known
//! nine-token trigger — either planted by direct weight construction or by
//! training on a poisoned synthetic bilingual corpus — and provides the causal
//! analysis toolkit used to dissect them: embedding corruption, three-pass
//! activation patching, per-head decomposition, ablation, KV knockout,
//! per-layer language probes, and direction geometry.
//!
//! Modules:
//! - [`numeric`]: dense f64 tensor kernels and counter-based seeded randomness
//! - [`model`]: the hooked transformer forward pass, trace cache, interventions,
//!   and the model file format
//! - [`forge`]: synthetic bilingual language, corpus generation, the handcrafted
//!   circuit, gradient training, and gradient checking
//! - [`stimuli`]: prompt families, scrambling, the logit-difference metric
//! - [`interventions`]: corruption methods, the patch engine, experiment sweeps
//! - [`probes`]: per-layer language-identity probes and natural-direction geometry
//! - [`report`]: JSON/CSV report emitters and hand-rolled SVG plots

pub mod error;
pub mod forge;
pub mod interventions;
pub mod model;
pub mod numeric;
pub mod probes;
pub mod report;
pub mod stimuli;

pub use error::{Error, Result};
