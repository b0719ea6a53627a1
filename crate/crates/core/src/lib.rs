//! Primal-dual learning of URLLC resource allocation with finite-blocklength
//! and queueing QoS constraints.

pub mod baseline;
pub mod channel;
pub mod error;
pub mod experiments;
pub mod nn;
pub mod qos;
pub mod trainer;

pub use error::{Error, Result};
