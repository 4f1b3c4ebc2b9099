//! Federated parking-occupancy forecasting coupled to a multi-leader,
//! multi-follower incentive game for parked-vehicle edge computing.
//!
//! The crate is organised bottom-up:
//!
//! - [`data`]: occupancy series ingestion, synthesis and sliding windows.
//! - [`neural`]: LSTM cell and MLP head with hand-written backpropagation.
//! - [`federated`]: coordinator/client rounds with size-weighted averaging.
//! - [`game`]: follower best responses, leader profits, the reaction map and
//!   best-response dynamics, plus a brute-force grid oracle.
//! - [`drl`]: capacity-penalised environment and clipped-surrogate
//!   actor-critic agents, one per parking-lot operator.
//! - [`harness`]: configuration, presets and experiment runners used by the CLI.

pub mod data;
pub mod drl;
pub mod error;
pub mod federated;
pub mod game;
pub mod harness;
pub mod neural;
pub mod rng;

pub use error::{Error, Result};
