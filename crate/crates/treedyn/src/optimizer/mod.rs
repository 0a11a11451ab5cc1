//! Resolution-dataset construction by chained optimization.
//!
//! Planning queries are cut from random end-effector excursions; for each
//! query, Stage 1 (CMA-ES on a dynamics-accuracy objective over the
//! continuous relaxation of the resolution vector) produces a cheap
//! initialization, and Stage 2 (greedy closed-loop reduction under true MPC
//! episodes) simplifies it further. The resulting query → resolution pairs
//! are persisted as a resumable JSON-lines dataset.

mod cma;
mod dataset;
mod queries;
mod stages;

pub use cma::{cma_minimize, CmaConfig, CmaResult};
pub use dataset::{
    build_dataset, read_resolution_dataset, DatasetConfig, ResolutionManifest,
    RESOLUTION_SCHEMA_VERSION,
};
pub use queries::{generate_queries, PlanningQuery, QueryGenConfig};
pub use stages::{
    stage1_dynamics_opt, stage1_rollout_cost, stage2_closedloop_opt, ResolutionRecord,
    Stage1Config, Stage2Config, Stage2Step,
};
