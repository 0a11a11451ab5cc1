//! Masked task/plan costs and the closed-loop MPC driver.
//!
//! A query is a start/goal state pair; the particles that the query actually
//! asks to move are selected by a displacement threshold and all costs are
//! restricted to them. Planning happens in graph space with a learned model;
//! execution and final scoring happen in the true simulator state.

mod mppi;

pub use mppi::{mppi_plan, mppi_refine, RoundStats};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

use crate::dynamics::DynModel;
use crate::error::{Error, Result};
use crate::graph::{build_graph, build_graph_with_history, Graph, ResolutionVector};
use crate::rng::derive_seed;
use crate::sim::{step, Action, State, World};

/// Sampling-planner parameters.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MppiConfig {
    /// Planning horizon in steps.
    pub horizon: usize,
    /// Perturbed sequences per refinement round.
    pub n_samples: usize,
    /// Steps executed between replans.
    pub replan_interval: usize,
    /// Discount; step t' of an H-step rollout is weighted gamma^(H - t').
    pub gamma: f64,
    /// Refinement rounds for the first planning cycle.
    pub refine_initial: usize,
    /// Refinement rounds for every later cycle.
    pub refine_other: usize,
    /// Per-axis variance of action perturbations.
    pub noise_scale: f64,
    /// Softmax temperature for population re-weighting.
    pub lambda: f64,
    /// Episode length in simulator steps.
    pub total_steps: usize,
}

impl Default for MppiConfig {
    fn default() -> Self {
        Self {
            horizon: 32,
            n_samples: 64,
            replan_interval: 4,
            gamma: 0.95,
            refine_initial: 5,
            refine_other: 3,
            noise_scale: 3.6e-5,
            lambda: 0.1,
            total_steps: 80,
        }
    }
}

impl MppiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0
            || self.n_samples == 0
            || self.replan_interval == 0
            || self.refine_initial == 0
            || self.refine_other == 0
        {
            return Err(Error::Config("planner counts must be positive".into()));
        }
        if self.replan_interval > self.horizon {
            return Err(Error::Config(format!(
                "replan interval {} exceeds horizon {}",
                self.replan_interval, self.horizon
            )));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("discount {} outside (0, 1]", self.gamma)));
        }
        if self.noise_scale < 0.0 || self.lambda <= 0.0 {
            return Err(Error::Config("noise variance/temperature out of range".into()));
        }
        Ok(())
    }
}

/// Default displacement threshold (meters) above which a particle counts as
/// part of the query.
pub const DEFAULT_MASK_DELTA: f64 = 0.01;

/// Per-particle selection of what the query wants moved.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MovementMask {
    pub mask: Vec<bool>,
    pub delta: f64,
}

impl MovementMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Mark every particle whose start→goal displacement exceeds `delta`.
pub fn movement_mask(s1: &State, s_goal: &State, delta: f64) -> Result<MovementMask> {
    if s1.n_particles() != s_goal.n_particles() {
        return Err(Error::Query(format!(
            "start has {} particles, goal {}",
            s1.n_particles(),
            s_goal.n_particles()
        )));
    }
    let mask: Vec<bool> = s1
        .positions
        .iter()
        .zip(&s_goal.positions)
        .map(|(a, b)| (a - b).norm() > delta)
        .collect();
    if !mask.iter().any(|&m| m) {
        return Err(Error::DegenerateQuery(format!(
            "no particle moves more than {delta} m between start and goal"
        )));
    }
    Ok(MovementMask { mask, delta })
}

/// Mean distance between masked particles of two true states.
pub fn task_cost(s: &State, s_goal: &State, mask: &MovementMask) -> Result<f64> {
    if s.n_particles() != mask.mask.len() || s_goal.n_particles() != mask.mask.len() {
        return Err(Error::Query("mask length does not match particle count".into()));
    }
    let n = mask.count();
    if n == 0 {
        return Err(Error::DegenerateQuery("mask selects no particles".into()));
    }
    let sum: f64 = mask
        .mask
        .iter()
        .enumerate()
        .filter(|(_, m)| **m)
        .map(|(i, _)| (s.positions[i] - s_goal.positions[i]).norm())
        .sum();
    Ok(sum / n as f64)
}

/// Positions of the graph vertices the mask lifts to: an object vertex
/// counts if the particle it carries or any particle it represents is
/// masked (conservative), the end-effector never. Representatives cover
/// every object particle at every resolution, so a non-degenerate particle
/// mask always lifts to at least one vertex.
pub fn lifted_mask_positions(z: &Graph, mask: &MovementMask) -> Result<Vec<Vector3<f64>>> {
    let masked = |i: usize| *mask.mask.get(i).unwrap_or(&false);
    let pts: Vec<Vector3<f64>> = z
        .vertices
        .iter()
        .filter(|v| match v.kind {
            crate::graph::VertexKind::Particle(i) => {
                masked(i) || v.members.iter().copied().any(masked)
            }
            crate::graph::VertexKind::Aggregate => v.members.iter().copied().any(masked),
            crate::graph::VertexKind::EndEffector => false,
        })
        .map(|v| v.pos)
        .collect();
    if pts.is_empty() {
        return Err(Error::DegenerateQuery("mask lifts to no graph vertices".into()));
    }
    Ok(pts)
}

/// Symmetric sum of squared nearest-neighbor distances between two point
/// sets.
pub fn plan_cost_points(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::DegenerateQuery("empty point set in plan cost".into()));
    }
    let one_way = |from: &[Vector3<f64>], to: &[Vector3<f64>]| -> f64 {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|q| (p - q).norm_squared())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
    };
    Ok(one_way(a, b) + one_way(b, a))
}

/// Chamfer plan cost between the masked vertices of two graphs.
pub fn plan_cost(z: &Graph, z_goal: &Graph, mask: &MovementMask) -> Result<f64> {
    plan_cost_points(&lifted_mask_positions(z, mask)?, &lifted_mask_positions(z_goal, mask)?)
}

/// Whether the encoding is re-drawn between replanning cycles.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub enum OmegaPolicy {
    /// Keep the resolution vector fixed for the whole episode.
    #[default]
    Fixed,
}

/// One replanning cycle's log entry.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CycleLog {
    /// Simulator step the cycle started at.
    pub step: usize,
    /// Wall-clock seconds spent encoding and planning this cycle.
    pub encode_plan_seconds: f64,
    /// Plan cost of the returned nominal sequence per refinement round.
    pub rounds: Vec<RoundStats>,
    /// True-state task cost after executing the cycle's actions.
    pub task_cost_after: f64,
}

/// Closed-loop episode result.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MpcEpisode {
    /// Identifier attached by batch drivers; free-form.
    pub query_id: Option<String>,
    pub omega: ResolutionVector,
    /// Vertex count of the planning encoding.
    pub vertex_count: usize,
    pub final_cost: f64,
    /// Total wall-clock seconds spent encoding and planning.
    pub plan_time: f64,
    pub n_replans: usize,
    pub cycles: Vec<CycleLog>,
    /// True simulator states, one per executed step (first is the start).
    pub trajectory: Vec<State>,
}

impl MpcEpisode {
    pub fn write_json<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        if let Some(parent) = path.as_ref().parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path.as_ref(), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Run the full closed loop: encode the current state under `omega`, plan
/// with the learned model, execute the first `replan_interval` actions in
/// the true simulator, and repeat for `cfg.total_steps` steps. The final
/// cost is measured on true particle positions; `plan_time` counts only
/// encoding and planning, never simulator execution.
#[allow(clippy::too_many_arguments)]
pub fn run_mpc(
    world: &World,
    s1: &State,
    s_goal: &State,
    omega: &ResolutionVector,
    model: &DynModel,
    cfg: &MppiConfig,
    delta: f64,
    _policy: &OmegaPolicy,
    seed: u64,
) -> Result<MpcEpisode> {
    cfg.validate()?;
    let mask = movement_mask(s1, s_goal, delta)?;
    let gp = &model.cfg.graph;
    let mut trajectory = vec![s1.clone()];
    let mut cycles = Vec::new();
    let mut plan_time = 0.0;
    let mut warm: Option<Vec<Action>> = None;
    let mut vertex_count = 0usize;
    let mut goal_graph: Option<Graph> = None;

    let mut t = 0usize;
    while t < cfg.total_steps {
        let started = Instant::now();
        let window_start = trajectory.len().saturating_sub(gp.vel_history + 1);
        let z = build_graph_with_history(&trajectory[window_start..], omega, gp, world.cfg.dt)?;
        vertex_count = z.n_vertices();
        if goal_graph.is_none() {
            goal_graph = Some(build_graph(s_goal, omega, gp, world.cfg.dt)?);
        }
        let rounds = if cycles.is_empty() { cfg.refine_initial } else { cfg.refine_other };
        let (plan, round_stats) = mppi_plan(
            model,
            &z,
            goal_graph.as_ref().expect("just built"),
            &mask,
            cfg,
            warm.as_deref(),
            rounds,
            world.cfg.max_action_step,
            derive_seed(seed, "mpc-cycle", cycles.len() as u64),
        )?;
        let cycle_seconds = started.elapsed().as_secs_f64();
        plan_time += cycle_seconds;

        let n_exec = cfg.replan_interval.min(cfg.total_steps - t);
        for action in plan.iter().take(n_exec) {
            let next = step(world, trajectory.last().expect("nonempty"), action)?;
            trajectory.push(next);
        }
        t += n_exec;
        let task_after = task_cost(trajectory.last().expect("nonempty"), s_goal, &mask)?;
        cycles.push(CycleLog {
            step: t - n_exec,
            encode_plan_seconds: cycle_seconds,
            rounds: round_stats,
            task_cost_after: task_after,
        });
        warm = Some(plan);
    }

    let final_cost = task_cost(trajectory.last().expect("nonempty"), s_goal, &mask)?;
    Ok(MpcEpisode {
        query_id: None,
        omega: omega.clone(),
        vertex_count,
        final_cost,
        plan_time,
        n_replans: cycles.len(),
        cycles,
        trajectory,
    })
}
