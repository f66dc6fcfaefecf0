//! Multi-objective optimizers that split every optimizer state into a shared
//! base state and one delta state per objective, together with the
//! reference schemes they are compared against (joint, alternating,
//! fully decoupled, and federated-style merges), blockwise 8-bit state
//! storage, a closed-form/simulation check of the state limits, similarity
//! diagnostics, and a small experiment harness.

pub mod baselines;
pub mod diagnostics;
pub mod dual;
pub mod error;
pub mod harness;
pub mod numkit;
pub mod optim;
pub mod quant;
pub mod schedule;
pub mod theory;

pub use error::{Error, Result};
pub use numkit::Buffer;
pub use schedule::ObjectiveId;
