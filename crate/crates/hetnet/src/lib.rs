//! Joint optimization of macrocell resource blanking and fractional user
//! association in heterogeneous cellular networks.
//!
//! The crate is organized as a pipeline: [`scenario`] generates multi-tier
//! deployments, [`channel`] turns geometry into per-phase spectral-efficiency
//! matrices, [`optimizer`] solves the convex joint allocation problem with a
//! KKT certificate, [`association`] extracts and analyzes the resulting user
//! association, [`metrics`] computes rate statistics, and [`experiment`]
//! orchestrates seeded Monte-Carlo sweeps.

pub mod association;
pub mod channel;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod optimizer;
pub mod scenario;

pub use error::{Error, Result};
