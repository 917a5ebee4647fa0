//! Cone-beam CT acquisition simulator and task-aware C-arm trajectory planner.
//!
//! The pipeline: analytic [`phantom`]s are projected by the [`projector`] at
//! poses from [`geometry`]; the [`detectability`] module scores each view;
//! [`dataset`] turns grid scans into training samples for the [`surrogate`]
//! regressor; the [`planner`] closes the acquisition loop; [`recon`] and
//! [`metrics`] compare planned and planar scans.

pub mod config;
pub mod dataset;
pub mod detectability;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod phantom;
pub mod planner;
pub mod projector;
pub mod recon;
pub mod render;
pub mod surrogate;

pub use error::{Error, Result};
