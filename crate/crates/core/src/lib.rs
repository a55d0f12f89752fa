//! Desk-scale laboratory linking rule complexity to emergent capability.
//!
//! The pipeline: simulate elementary cellular automata ([`eca`]), score each
//! rule five ways ([`complexity`]), generate supervised datasets from the
//! dynamics and from downstream tasks ([`datagen`]), pretrain and finetune a
//! small decoder-only transformer ([`model`]), and aggregate per-rule results
//! into correlation, attention and similarity summaries ([`analysis`]).
//!
//! Everything is deterministic given explicit seeds; all stochastic choices
//! flow through the counter-based generator in [`rng`].

pub mod analysis;
pub mod complexity;
pub mod datagen;
pub mod eca;
pub mod manifest;
pub mod model;
pub mod rng;
