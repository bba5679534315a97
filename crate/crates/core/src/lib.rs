//! Weak-supervision framework for joint data-to-text generation and
//! understanding: meaning-representation handling, corpus tooling, a
//! template-based weak annotator with a consistency filter, a reverse-mode
//! autodiff kernel with GRU sequence models, dual-learning training with
//! mutual-information quality weighting, and evaluation.

pub mod annotator;
pub mod augment;
pub mod corpus;
pub mod diagnostics;
pub mod eval;
pub mod kernel;
pub mod models;
pub mod mr;
pub mod parallel;
pub mod pipeline;
pub mod trainer;
