//! Length-aware RL fine-tuning on tiny from-scratch policies.
//!
//! The numeric core (policies, losses, advantages, probes) is generic over [`Scalar`]
//! (`f32` or `f64`); the aliases below fix the scalar for the common case.

pub mod artifacts;
pub mod client;
pub mod datapipe;
pub mod error;
pub mod evalbench;
pub mod grpo;
pub mod hindsight;
pub mod policy;
pub mod probing;
pub mod scalar;
pub mod tensor;
pub mod textmetrics;
pub mod trainer;
pub mod toyenv;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type TinyModel = policy::TinySequenceModel<f64>;
pub type TinyModelF32 = policy::TinySequenceModel<f32>;
pub type TabularPolicy = policy::TabularStoppingPolicy<f64>;
