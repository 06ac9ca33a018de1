//! Signal processing, loudness measurement, scene synthesis, corpus building,
//! evaluation metrics and non-learned baselines for visually guided acoustic
//! highlighting.

pub mod baselines;
pub mod context;
pub mod corpus;
pub mod error;
pub mod loudness;
pub mod metrics;
pub mod scene;
pub mod seed;
pub mod signal;
pub mod wav;

pub use error::{Error, Result};
pub use signal::AudioClip;
