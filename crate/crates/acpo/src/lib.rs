//! Audio-contrastive preference optimization at desk scale.
//!
//! A deterministic, CPU-only study of why audio-visual language models
//! hallucinate sounds from visual context and how contrastive preference
//! pairs fix it. The crate bundles a tiny reverse-mode autodiff engine, a toy
//! audio-visual language model with a trainable audio projector, a synthetic
//! event world with planted sight-to-sound shortcuts, the dual-axis
//! preference-pair curation pipeline, a DPO trainer, and an evaluation
//! harness (hallucination QA, caption metrics, frame-count dominance sweep).
//!
//! Everything is a pure function of the run configuration and master seed:
//! re-running any stage reproduces its output files byte for byte.

pub mod error;
pub mod eval;
pub mod grad;
pub mod pipeline;
pub mod rng;
pub mod io;
pub mod model;
pub mod pairs;
pub mod tokens;
pub mod train;
pub mod world;

pub use error::{Error, Result};
