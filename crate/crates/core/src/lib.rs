//! Planning library and round simulator for split federated learning on
//! memory-constrained, heterogeneous mobile devices.
//!
//! The crate models per-layer compute and memory costs, chooses which devices
//! train each round and where their models are cut, plans activation
//! recomputation under shifting memory budgets, and replays multi-round
//! training to measure latency, memory and traffic.

pub mod central_manager;
pub mod cli;
pub mod device_profile;
pub mod error;
pub mod latency_model;
pub mod mec_manager;
pub mod memory_reducer;
pub mod model_graph;
pub mod rng;
pub mod sim_engine;

pub use error::{Error, Result};
