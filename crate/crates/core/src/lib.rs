//! Digital-twin uplink power allocation toolkit: a discrete-action
//! environment with an exact utility oracle, SAC and BCQ agents, labeled
//! trajectory datasets, and a conditional trajectory-diffusion planner.

pub mod bcq;
pub mod diffusion;
pub mod env;
pub mod error;
pub mod features;
pub mod nn;
pub mod oracle;
pub mod rng;
pub mod sac;
pub mod store;
pub mod tensor;

pub use error::{Error, Result};
