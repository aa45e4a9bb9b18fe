//! Labour-market agent-based model with simulation-based inference.
//!
//! The crate simulates a networked labour market under automation demand
//! shocks and estimates its behavioural parameters (separation rate,
//! vacancy-opening rate, stay probability) with neural posterior estimation
//! over a masked autoregressive flow, validated against a rejection-ABC
//! baseline and simulation-based calibration diagnostics.

pub mod abc;
pub mod analysis;
pub mod error;
pub mod flow;
pub mod mat;
pub mod pipeline;
pub mod rng;
pub mod sbc;
pub mod sim;
pub mod summaries;
pub mod synth;

pub use error::{Error, Result};
