//! Multistatic integrated sensing and communication over OTFS.
//!
//! The crate covers the physical layer (delay-Doppler modem and channel), path
//! estimation with active and pilot-aided passive sensing, multistatic
//! triangulation and fusion, geometry analysis of node placement, Kalman
//! tracking under a correlated random walk, trajectory generation and a
//! reproducible experiment harness.

pub mod channel;
pub mod deploy;
pub mod error;
pub mod estimator;
pub mod fusion;
pub mod harness;
pub mod modem;
pub mod scenario;
pub mod seed;
pub mod state;
pub mod tracker;

pub use error::{Error, Result};
pub use modem::C64;
pub use state::{Point, TargetState};
