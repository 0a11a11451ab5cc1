//! Query-adaptive multi-resolution graph dynamics for deformable-tree planning.
//!
//! The crate is organized as a pipeline:
//!
//! - [`sim`] — ground-truth deformable tree world (damped mass-spring
//!   branching structure pushed by a capsule end-effector).
//! - [`graph`] — encoding of segmented states into multi-resolution graphs
//!   controlled by a per-segment resolution vector.
//! - [`nn`] — encode-process-decode message-passing network with a
//!   reverse-mode gradient tape and Adam.
//! - [`dynamics`] — learned single-step graph dynamics, data collection and
//!   multi-step rollout.
//! - [`planner`] — MPPI trajectory optimization over graphs with a masked
//!   chamfer cost, and the closed-loop MPC driver.
//! - [`optimizer`] — dataset construction by chained optimization: CMA-ES on
//!   a dynamics-accuracy objective, then closed-loop greedy reduction.
//! - [`diffusion`] — DDPM over resolution vectors conditioned on the
//!   start-goal query graph.
//! - [`eval`] — baseline comparison, metrics, and reports.

pub mod config;
pub mod diffusion;
pub mod dynamics;
pub mod error;
pub mod eval;
pub mod graph;
pub mod nn;
pub mod optimizer;
pub mod planner;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
