//! Continual multiple-instance learning over bags of patch embeddings.
//!
//! The crate is organised by concern:
//!
//! - [`numerics`]: tensors, reverse-mode autodiff, pseudo-inverse, Adam.
//! - [`model`]: expert-consultation projection, Nyström encoder, label decoder.
//! - [`continual`]: task lifecycle, rehearsal buffer, replay loss, training.
//! - [`synthdata`]: deterministic synthetic task streams and bag files.
//! - [`harness`]: experiment orchestration, metrics and reports.

pub mod continual;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod synthdata;

pub use error::{Error, Result};
