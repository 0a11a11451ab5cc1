//! Planning-query generation from random end-effector excursions.
//!
//! A query is a start/goal state pair plus the recorded action sequence that
//! produced the goal: the end-effector starts at a random collision-free
//! offset, drifts toward random canopy particles for a fixed number of
//! steps, and goals are cut from the resulting trajectory at random window
//! lengths. Windows whose movement mask is degenerate (nothing moved) or
//! whose rollout left the stability bound are discarded.

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::planner::{movement_mask, DEFAULT_MASK_DELTA};
use crate::rng::stream_rng;
use crate::sim::{step, Action, State, World};

/// One start/goal pair with the action sequence that realizes it.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PlanningQuery {
    /// Unique within one generation run ("t0003-w42").
    pub id: String,
    pub s1: State,
    pub s_goal: State,
    /// Full recorded excursion; the goal is reached by the first `window`
    /// actions.
    pub source_actions: Vec<Action>,
    pub window: usize,
}

impl PlanningQuery {
    /// Structural checks; goal reachability is checked by [`Self::replay_goal`].
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window > self.source_actions.len() {
            return Err(Error::Query(format!(
                "window {} outside the recorded {} actions",
                self.window,
                self.source_actions.len()
            )));
        }
        if self.s1.n_particles() != self.s_goal.n_particles() {
            return Err(Error::Query("start and goal particle counts differ".into()));
        }
        Ok(())
    }

    /// Actions that take `s1` to `s_goal`.
    pub fn window_actions(&self) -> &[Action] {
        &self.source_actions[..self.window]
    }

    /// Re-execute the windowed actions from the start state; the result must
    /// equal `s_goal` for a well-formed query.
    pub fn replay_goal(&self, world: &World) -> Result<State> {
        let mut state = self.s1.clone();
        for action in self.window_actions() {
            state = step(world, &state, action)?;
        }
        Ok(state)
    }
}

/// Shape of the random excursions queries are cut from.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct QueryGenConfig {
    /// Length of each recorded excursion.
    pub trajectory_steps: usize,
    /// Inclusive bounds on the goal cut-off index.
    pub window_min: usize,
    pub window_max: usize,
    /// Distinct windows sampled per excursion.
    pub windows_per_trajectory: usize,
    /// Steps between re-sampling the approach target.
    pub retarget_interval: usize,
    /// Lower bound of the per-step speed fraction (of the action limit).
    pub speed_min: f64,
    /// Standard deviation of directional noise, as a fraction of the limit.
    pub jitter: f64,
    /// Movement-mask displacement threshold, m.
    pub mask_delta: f64,
    /// Radius of the ball the end-effector start offset is drawn from, m.
    pub ee_start_radius: f64,
    /// Any particle position beyond this norm marks the rollout unstable, m.
    pub position_bound: f64,
}

impl Default for QueryGenConfig {
    fn default() -> Self {
        Self {
            trajectory_steps: 80,
            window_min: 24,
            window_max: 72,
            windows_per_trajectory: 2,
            retarget_interval: 20,
            speed_min: 0.5,
            jitter: 0.25,
            mask_delta: DEFAULT_MASK_DELTA,
            ee_start_radius: 0.15,
            position_bound: 5.0,
        }
    }
}

impl QueryGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trajectory_steps == 0 || self.windows_per_trajectory == 0 {
            return Err(Error::Config("query generation counts must be positive".into()));
        }
        if self.window_min == 0
            || self.window_min > self.window_max
            || self.window_max > self.trajectory_steps
        {
            return Err(Error::Config(format!(
                "window bounds [{}, {}] invalid for {}-step trajectories",
                self.window_min, self.window_max, self.trajectory_steps
            )));
        }
        if !(self.mask_delta > 0.0) || !(self.position_bound > 0.0) {
            return Err(Error::Config("mask delta and position bound must be positive".into()));
        }
        Ok(())
    }
}

/// Generate `n` planning queries by running seeded excursions from
/// `initial`. Unstable rollouts are skipped with a warning; generation
/// continues until `n` queries exist or the attempt budget is exhausted.
pub fn generate_queries(
    world: &World,
    initial: &State,
    cfg: &QueryGenConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<PlanningQuery>> {
    if n == 0 {
        return Err(Error::Config("requested zero planning queries".into()));
    }
    cfg.validate()?;

    let per_traj = cfg.windows_per_trajectory;
    let needed_trajs = n.div_ceil(per_traj);
    let max_trajs = needed_trajs.saturating_mul(8).max(4);

    let mut queries = Vec::with_capacity(n);
    let mut next_traj = 0usize;
    while queries.len() < n && next_traj < max_trajs {
        let batch_end = (next_traj + needed_trajs).min(max_trajs);
        let mut batch: Vec<Vec<PlanningQuery>> = (next_traj..batch_end)
            .into_par_iter()
            .map(|idx| {
                let mut rng = stream_rng(seed, "query-traj", idx as u64);
                run_excursion(world, initial, cfg, idx, &mut rng)
            })
            .collect();
        for traj in batch.drain(..) {
            queries.extend(traj);
        }
        next_traj = batch_end;
    }
    if queries.len() < n {
        return Err(Error::Query(format!(
            "generated only {} of {n} queries within the attempt budget",
            queries.len()
        )));
    }
    queries.truncate(n);
    Ok(queries)
}

/// One excursion: offset the end-effector, drift toward random particles,
/// then cut goal windows out of the recorded trajectory.
fn run_excursion(
    world: &World,
    initial: &State,
    cfg: &QueryGenConfig,
    traj_idx: usize,
    rng: &mut ChaCha20Rng,
) -> Vec<PlanningQuery> {
    let s1 = offset_start(world, initial, cfg.ee_start_radius, rng);
    let mut states = vec![s1.clone()];
    let mut actions = Vec::with_capacity(cfg.trajectory_steps);
    let mut target = Vector3::zeros();
    for t in 0..cfg.trajectory_steps {
        if t % cfg.retarget_interval.max(1) == 0 {
            let idx = rng.gen_range(0..initial.n_particles());
            target = states.last().expect("nonempty").positions[idx];
        }
        let cur = states.last().expect("nonempty");
        let to = target - cur.ee_pos;
        let dir = if to.norm() > 1e-9 { to.normalize() } else { Vector3::zeros() };
        let speed: f64 = rng.gen_range(cfg.speed_min..=1.0);
        let noise = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ) * cfg.jitter;
        let action = Action::clamped(
            (dir * speed + noise) * world.cfg.max_action_step,
            world.cfg.max_action_step,
        );
        let next = match step(world, cur, &action) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("query excursion {traj_idx} aborted after {t} steps: {e}");
                return Vec::new();
            }
        };
        if next.positions.iter().any(|p| p.norm() > cfg.position_bound) {
            log::warn!("query excursion {traj_idx} left the stability bound after {t} steps");
            return Vec::new();
        }
        actions.push(action);
        states.push(next);
    }

    let hi = cfg.window_max.min(cfg.trajectory_steps);
    let span = hi - cfg.window_min + 1;
    let k = cfg.windows_per_trajectory.min(span);
    let mut windows: Vec<usize> = rand::seq::index::sample(rng, span, k)
        .into_iter()
        .map(|off| cfg.window_min + off)
        .collect();
    windows.sort_unstable();

    windows
        .into_iter()
        .filter_map(|window| {
            let s_goal = states[window].clone();
            movement_mask(&s1, &s_goal, cfg.mask_delta).ok()?;
            Some(PlanningQuery {
                id: format!("t{traj_idx:04}-w{window:02}"),
                s1: s1.clone(),
                s_goal,
                source_actions: actions.clone(),
                window,
            })
        })
        .collect()
}

/// Move the end-effector to a random offset that keeps its capsule clear of
/// every particle; falls back to the original position if no clear offset
/// is found.
fn offset_start(world: &World, initial: &State, radius: f64, rng: &mut ChaCha20Rng) -> State {
    let mut s1 = initial.clone();
    for _ in 0..16 {
        let dir = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let dir = if dir.norm() > 1e-12 { dir.normalize() } else { Vector3::x() };
        let candidate = initial.ee_pos + dir * (radius * rng.gen::<f64>().cbrt());
        if capsule_clear(world, &s1, &candidate) {
            s1.ee_pos = candidate;
            return s1;
        }
    }
    s1
}

fn capsule_clear(world: &World, state: &State, ee_pos: &Vector3<f64>) -> bool {
    let margin = 0.01;
    let half = world.cfg.capsule_half_len;
    state.positions.iter().all(|p| {
        let dz = (p.z - ee_pos.z).clamp(-half, half);
        let closest = Vector3::new(ee_pos.x, ee_pos.y, ee_pos.z + dz);
        (p - closest).norm() > world.cfg.capsule_radius + margin
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{build_world, rollout_env, WorldConfig};

    fn desk() -> (World, State) {
        build_world(&WorldConfig { seed: 9, ..WorldConfig::default() }).unwrap()
    }

    #[test]
    fn every_query_has_a_nondegenerate_mask() {
        let (world, initial) = desk();
        let cfg = QueryGenConfig::default();
        let queries = generate_queries(&world, &initial, &cfg, 8, 31).unwrap();
        assert_eq!(queries.len(), 8);
        for q in &queries {
            q.validate().unwrap();
            let mask = movement_mask(&q.s1, &q.s_goal, cfg.mask_delta).unwrap();
            assert!(mask.count() > 0);
        }
    }

    #[test]
    fn replaying_the_window_reproduces_the_goal_exactly() {
        let (world, initial) = desk();
        let queries = generate_queries(&world, &initial, &QueryGenConfig::default(), 4, 5).unwrap();
        for q in &queries {
            assert_eq!(q.replay_goal(&world).unwrap(), q.s_goal, "query {}", q.id);
            let traj = rollout_env(&world, &q.s1, q.window_actions()).unwrap();
            assert_eq!(traj.last().unwrap(), &q.s_goal);
        }
    }

    #[test]
    fn window_distribution_stays_in_bounds() {
        let (world, initial) = desk();
        let cfg = QueryGenConfig::default();
        let queries = generate_queries(&world, &initial, &cfg, 20, 12).unwrap();
        for q in &queries {
            assert!(q.window >= cfg.window_min && q.window <= cfg.window_max);
        }
        let distinct: std::collections::BTreeSet<usize> =
            queries.iter().map(|q| q.window).collect();
        assert!(distinct.len() > 3, "windows collapsed to {distinct:?}");
    }

    #[test]
    fn ids_are_unique_and_generation_is_deterministic() {
        let (world, initial) = desk();
        let cfg = QueryGenConfig::default();
        let a = generate_queries(&world, &initial, &cfg, 10, 77).unwrap();
        let b = generate_queries(&world, &initial, &cfg, 10, 77).unwrap();
        assert_eq!(a, b);
        let ids: std::collections::BTreeSet<&str> =
            a.iter().map(|q| q.id.as_str()).collect();
        assert_eq!(ids.len(), a.len());
    }

    #[test]
    fn zero_queries_requested_is_an_error() {
        let (world, initial) = desk();
        assert!(generate_queries(&world, &initial, &QueryGenConfig::default(), 0, 1).is_err());
    }

    #[test]
    fn start_offsets_vary_and_stay_collision_free() {
        let (world, initial) = desk();
        let queries = generate_queries(&world, &initial, &QueryGenConfig::default(), 6, 41).unwrap();
        let distinct: std::collections::BTreeSet<String> = queries
            .iter()
            .map(|q| format!("{:.6} {:.6} {:.6}", q.s1.ee_pos.x, q.s1.ee_pos.y, q.s1.ee_pos.z))
            .collect();
        assert!(distinct.len() > 1, "all starts identical");
        for q in &queries {
            assert!(capsule_clear(&world, &q.s1, &q.s1.ee_pos));
        }
    }
}
