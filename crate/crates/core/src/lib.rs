//! Hospital-agnostic domain generalization for histopathology-style image
//! classification: a small reverse-mode tensor engine, a three-part
//! network, episodic meta-training with alignment and triplet losses, slide
//! preprocessing, a synthetic multi-hospital corpus and leave-one-hospital-out
//! evaluation.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod preprocess;
pub mod synthgen;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
