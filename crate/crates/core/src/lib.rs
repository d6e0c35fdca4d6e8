//! Simulation laboratory for an online reinforcement-learning stack deployed
//! in a micro-randomized mobile-health trial.
//!
//! The crate is organised bottom-up:
//!
//! - [`trial`]: calendar, recruitment, decision indexing and the history store.
//! - [`features`]: algorithm state `f(s)` and environment state `g(s)`.
//! - [`bandit`]: action-centered Bayesian linear regression with smoothed
//!   posterior sampling.
//! - [`environment`]: zero-inflated Poisson participant models, MAP fitting and
//!   null-environment projection.
//! - [`orchestrator`]: day-by-day replay of the deployed pipeline with fault
//!   injection and fallback methods.
//! - [`analysis`]: pooling comparison, outcome/error metrics and the
//!   null-resampling "did we learn" diagnostic.
//! - [`config`] and [`io`]: run configuration and file formats.

pub mod analysis;
pub mod bandit;
pub mod config;
pub mod environment;
mod error;
pub mod features;
pub mod io;
pub mod orchestrator;
pub mod quadrature;
pub mod rng;
pub mod trial;

pub use error::{Error, Result};
