//! Distributed density filtering for stochastic swarms.
//!
//! Agents follow a stochastic differential equation whose density obeys a
//! Fokker-Planck equation. A kernel density estimate of the agent positions
//! serves as a noisy measurement of that density; a centralized Kalman-type
//! filter fuses it with the Fokker-Planck prediction, and each agent runs a
//! local copy of the filter fed by a PI dynamic average consensus estimate
//! of the global measurement.

pub mod consensus;
pub mod error;
pub mod experiment;
pub mod filter;
pub mod grid;
pub mod kde;
pub mod sparse;
pub mod suites;
pub mod swarm;

pub use error::{Error, Result};
