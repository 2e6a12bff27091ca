//! Early-exit point-cloud classification with learned channel coding for
//! device-edge co-inference.

pub mod branch;
pub mod channel;
pub mod config;
pub mod error;
pub mod gnn;
pub mod harness;
pub mod latency;
pub mod layers;
pub mod model;
pub mod pointcloud;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
