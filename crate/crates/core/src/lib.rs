//! Simulation core for a decentralized sensor-data mesh and its baselines.
#![no_std]
extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod baselines;
pub mod client;
pub mod experiment;
pub mod gather;
pub mod model;
pub mod netsim;
pub mod node;
pub mod protocol;
pub mod store;
pub mod wire;
