//! Multi-modal continual learning engine.
//!
//! Trains a mixture-of-experts cross-modality adapter stack over frozen
//! per-modality encoders through a sequence of class- or domain-incremental
//! tasks, with replay memory, representation alignment, and knowledge
//! preservation. Everything runs on a small reverse-mode tensor engine so
//! every gradient can be checked against finite differences.

pub mod adapter;
pub mod backbone;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod util;

pub use error::{Error, Result};
