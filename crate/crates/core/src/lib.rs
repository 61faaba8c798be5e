//! Simulated parameter-server training with gradient quantization, where the
//! number of quantization bits is picked by a fixed rule, a gradient-norm
//! heuristic, or an on-policy reinforcement-learning controller.

pub mod cluster;
pub mod codec;
pub mod data;
pub mod error;
pub mod experiment;
pub mod mdp;
pub mod model;
pub mod policy;

pub use error::{Error, Result};
