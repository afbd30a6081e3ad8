//! Split learning of a small CNN between a device and an aggregator, trained
//! with first-order MAML over few-shot episodes while the cut-layer traffic
//! crosses a simulated fading channel, with split conformal prediction on
//! top of the adapted classifier.

pub mod channel;
pub mod conformal;
pub mod data;
pub mod error;
pub mod harness;
pub mod meta;
pub mod nn;
pub mod rng;
pub mod split;
pub mod transport;

pub use error::{Error, Result};
