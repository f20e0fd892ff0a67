//! Part-coordinated text-to-motion toolkit: six per-part vector-quantizing
//! codecs, a six-stream causal generator whose streams exchange information
//! through coordination blocks, training loops, evaluation metrics and dataset
//! handling.

pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod coordinator;
pub mod datahub;
mod error;
pub mod metrics;
pub mod partition;
pub mod pipeline;
pub mod rng;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use partcoord_tape as tape;
