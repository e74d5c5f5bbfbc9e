//! Control plane for multimodal chain-of-thought test-time scaling: trajectory
//! data model, backend protocol, sequential and parallel controllers, dataset
//! synthesis and filtering, and compute-matched scaling sweeps.

pub mod blob_store;
pub mod cli;
pub mod config;
pub mod controller;
pub mod filter;
pub(crate) mod fsutil;
pub mod guidance;
pub mod harness;
pub mod protocol;
pub mod synthesis;
pub mod trajectory;
pub mod verdict;
