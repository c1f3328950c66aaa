//! Momentum-contrast pretraining of radio encoders on synthetic
//! multi-antenna IQ frames, with angle-of-arrival and modulation
//! classification transfer experiments.

pub mod augment;
pub mod cli;
pub mod config;
pub mod datastore;
pub mod downstream;
pub mod error;
pub mod iq;
pub mod sigsynth;
pub mod ssl;

pub use error::{Error, Result};

/// Samples per frame.
pub const FRAME_LEN: usize = 1024;
