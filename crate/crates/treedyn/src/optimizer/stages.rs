//! Two-stage resolution optimization for a single planning query.
//!
//! Stage 1 searches the continuous relaxation of the resolution vector with
//! CMA-ES against a dynamics-accuracy objective: roll the learned model
//! forward under the query's recorded actions and score the predicted final
//! graph against the encoded goal, plus a cardinality penalty. Stage 2
//! greedily zeroes entries of the Stage-1 result, keeping a proposal only
//! when a true closed-loop MPC episode stays within a tolerance of the best
//! cost seen so far.

use std::collections::HashMap;
use std::sync::Mutex;

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::cma::{cma_minimize, CmaConfig};
use super::queries::PlanningQuery;
use crate::dynamics::DynModel;
use crate::error::{Error, Result};
use crate::graph::{build_graph, ResolutionVector};
use crate::planner::{
    movement_mask, plan_cost, run_mpc, MppiConfig, OmegaPolicy, DEFAULT_MASK_DELTA,
};
use crate::rng::{derive_seed, stream_rng};
use crate::sim::World;

/// Stage-1 search settings.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Stage1Config {
    /// Weight of the cardinality penalty on the continuous resolution.
    pub w_dyn: f64,
    /// Initial value of every coordinate of the CMA-ES mean.
    pub mean0: f64,
    /// Movement-mask displacement threshold, m.
    pub mask_delta: f64,
    pub cma: CmaConfig,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            w_dyn: 0.005,
            mean0: 0.7,
            cma: CmaConfig::default(),
            mask_delta: DEFAULT_MASK_DELTA,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.w_dyn < 0.0 {
            return Err(Error::Config("cardinality weight must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.mean0) {
            return Err(Error::Config(format!("CMA-ES mean start {} outside [0, 1]", self.mean0)));
        }
        if !(self.mask_delta > 0.0) {
            return Err(Error::Config("mask delta must be positive".into()));
        }
        self.cma.validate()
    }
}

/// Dynamics-accuracy objective for one binary resolution: encode start and
/// goal under it, roll the model through the query's actions, and take the
/// masked chamfer distance between the predicted final graph and the goal.
pub fn stage1_rollout_cost(
    model: &DynModel,
    query: &PlanningQuery,
    omega: &ResolutionVector,
    dt: f64,
    mask_delta: f64,
) -> Result<f64> {
    let mask = movement_mask(&query.s1, &query.s_goal, mask_delta)?;
    let z1 = build_graph(&query.s1, omega, &model.cfg.graph, dt)?;
    let z_goal = build_graph(&query.s_goal, omega, &model.cfg.graph, dt)?;
    let rollout = model.rollout(&z1, query.window_actions())?;
    plan_cost(rollout.last().expect("rollout includes start"), &z_goal, &mask)
}

/// Minimize rollout cost plus `w_dyn`·|ω|₁ over the continuous relaxation
/// ω ∈ [0, 1]^K (candidates clipped into the box, binarized at 0.5 for
/// evaluation) and return the binarized best sample. Step-size underflow
/// falls back to the best sample seen, with a warning.
pub fn stage1_dynamics_opt(
    model: &DynModel,
    query: &PlanningQuery,
    dt: f64,
    cfg: &Stage1Config,
    seed: u64,
) -> Result<ResolutionVector> {
    cfg.validate()?;
    query.validate()?;
    let k = query.s1.n_segments();
    if k == 0 {
        return Err(Error::Query("query state has no segments".into()));
    }
    // Pure rollouts depend only on the binarized pattern, so cache them.
    let cache: Mutex<HashMap<String, f64>> = Mutex::new(HashMap::new());
    let objective = |x: &DVector<f64>| -> f64 {
        let clipped: Vec<f64> = x.iter().map(|c| c.clamp(0.0, 1.0)).collect();
        let cardinality: f64 = clipped.iter().sum();
        let omega = ResolutionVector(clipped).binarized();
        let bits = omega.bits();
        let cached = cache.lock().expect("cache poisoned").get(&bits).copied();
        let rollout_cost = match cached {
            Some(c) => c,
            None => {
                let c = stage1_rollout_cost(model, query, &omega, dt, cfg.mask_delta)
                    .unwrap_or(f64::INFINITY);
                cache.lock().expect("cache poisoned").insert(bits, c);
                c
            }
        };
        rollout_cost + cfg.w_dyn * cardinality
    };

    let mean0 = DVector::from_element(k, cfg.mean0);
    let mut rng = stream_rng(seed, "stage1-cma", 0);
    let out = cma_minimize(&objective, &mean0, &cfg.cma, &mut rng)?;
    if out.degenerate {
        log::warn!("stage 1 search degenerated for query {}; using best sample", query.id);
    }
    Ok(ResolutionVector(out.best_x.iter().map(|c| c.clamp(0.0, 1.0)).collect()).binarized())
}

/// Stage-2 (closed-loop reduction) settings.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Stage2Config {
    /// Accept a proposal when its episode cost is within this of the best, m.
    pub eps_tol: f64,
    /// Stop after this many iterations without a new accepted resolution.
    pub grace: usize,
    /// Initial bound on how many entries one proposal may zero.
    pub kmax0: usize,
    /// Hard cap on MPC evaluations.
    pub max_evaluations: usize,
    /// Movement-mask displacement threshold, m.
    pub mask_delta: f64,
    /// Planner used for closed-loop evaluations.
    pub mppi: MppiConfig,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            eps_tol: 0.005,
            grace: 5,
            kmax0: 1,
            max_evaluations: 40,
            mask_delta: DEFAULT_MASK_DELTA,
            mppi: MppiConfig::default(),
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if self.eps_tol < 0.0 {
            return Err(Error::Config("acceptance tolerance must be non-negative".into()));
        }
        if self.grace == 0 || self.max_evaluations == 0 {
            return Err(Error::Config("grace period and evaluation cap must be positive".into()));
        }
        if !(self.mask_delta > 0.0) {
            return Err(Error::Config("mask delta must be positive".into()));
        }
        self.mppi.validate()
    }
}

/// One logged Stage-2 iteration.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Stage2Step {
    /// Resolution evaluated this iteration.
    pub omega: ResolutionVector,
    /// Episode cost (`INFINITY` when the episode failed).
    pub cost: f64,
    /// Best cost seen, after this iteration's update.
    pub best_cost: f64,
    pub accepted: bool,
    /// Proposal budget after the increase/decrease step.
    pub kmax_after: usize,
    /// Incumbent after this iteration.
    pub omega_star_after: ResolutionVector,
}

/// Finished query → resolution pair, the dataset row for the generator.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ResolutionRecord {
    pub query: PlanningQuery,
    /// Binary Stage-1 result the reduction started from.
    pub stage1_omega: ResolutionVector,
    /// Final accepted resolution.
    pub omega_star: ResolutionVector,
    /// Best closed-loop cost observed during the reduction, m.
    pub best_cost: f64,
}

impl ResolutionRecord {
    pub fn validate(&self) -> Result<()> {
        self.query.validate()?;
        if !self.omega_star.is_binary() || !self.stage1_omega.is_binary() {
            return Err(Error::Query("resolution record entries must be binary".into()));
        }
        if self.omega_star.len() != self.stage1_omega.len() {
            return Err(Error::Query("resolution record lengths differ".into()));
        }
        let dominated = self
            .omega_star
            .0
            .iter()
            .zip(&self.stage1_omega.0)
            .all(|(star, start)| star <= start);
        if !dominated {
            return Err(Error::Query(
                "reduction may only zero entries, yet an entry grew".into(),
            ));
        }
        if !self.best_cost.is_finite() {
            return Err(Error::Query("resolution record cost must be finite".into()));
        }
        Ok(())
    }
}

/// Greedy closed-loop reduction. Starting from a binary prior, repeatedly
/// evaluate the current proposal with a full MPC episode, accept it as the
/// incumbent when its cost stays within `eps_tol` of the best cost seen
/// (raising the proposal budget; failures and worse costs lower it), and
/// propose the next resolution by zeroing up to the budget of random
/// still-high entries. Stops when the incumbent survives `grace` iterations
/// unchanged or reaches all-zero. Returns the record plus the full
/// iteration log.
pub fn stage2_closedloop_opt(
    world: &World,
    model: &DynModel,
    query: &PlanningQuery,
    omega0: &ResolutionVector,
    cfg: &Stage2Config,
    seed: u64,
) -> Result<(ResolutionRecord, Vec<Stage2Step>)> {
    cfg.validate()?;
    query.validate()?;
    if !omega0.is_binary() {
        return Err(Error::Query("stage 2 prior must be binary".into()));
    }
    let k = omega0.len();
    if k != query.s1.n_segments() {
        return Err(Error::Query(format!(
            "prior has {k} entries for {} segments",
            query.s1.n_segments()
        )));
    }

    let mut proposal_rng = stream_rng(seed, "stage2-proposal", 0);
    let mut kmax = cfg.kmax0.clamp(1, k);
    let mut omega_cur = omega0.clone();
    let mut omega_star = omega0.clone();
    let mut best_cost = f64::INFINITY;
    let mut unchanged = 0usize;
    let mut steps: Vec<Stage2Step> = Vec::new();

    loop {
        let eval_idx = steps.len();
        let cost = match run_mpc(
            world,
            &query.s1,
            &query.s_goal,
            &omega_cur,
            model,
            &cfg.mppi,
            cfg.mask_delta,
            &OmegaPolicy::Fixed,
            derive_seed(seed, "stage2-mpc", eval_idx as u64),
        ) {
            Ok(episode) => episode.final_cost,
            Err(e) => {
                log::warn!(
                    "stage 2 episode failed for query {} at iteration {eval_idx}: {e}",
                    query.id
                );
                f64::INFINITY
            }
        };
        if eval_idx == 0 || cost < best_cost {
            best_cost = cost;
        }
        let accepted = cost.is_finite() && cost <= best_cost + cfg.eps_tol;
        if accepted {
            if omega_cur != omega_star {
                omega_star = omega_cur.clone();
                unchanged = 0;
            } else {
                unchanged += 1;
            }
            kmax = (kmax * 2).min(k);
        } else {
            kmax = (kmax / 2).max(1);
            unchanged += 1;
        }
        steps.push(Stage2Step {
            omega: omega_cur.clone(),
            cost,
            best_cost,
            accepted,
            kmax_after: kmax,
            omega_star_after: omega_star.clone(),
        });

        if omega_star.count_high() == 0 || unchanged >= cfg.grace {
            break;
        }
        if steps.len() >= cfg.max_evaluations {
            log::warn!(
                "stage 2 hit the evaluation cap ({}) for query {}",
                cfg.max_evaluations,
                query.id
            );
            break;
        }

        // Next proposal: zero up to `kmax` random still-high entries of the
        // evaluated resolution (entries are never re-enabled).
        let ones: Vec<usize> = omega_cur
            .0
            .iter()
            .enumerate()
            .filter(|(_, &v)| v >= 0.5)
            .map(|(i, _)| i)
            .collect();
        if !ones.is_empty() {
            let zeroed = proposal_rng.gen_range(1..=kmax.min(ones.len()));
            let mut next = omega_cur.clone();
            for pick in rand::seq::index::sample(&mut proposal_rng, ones.len(), zeroed) {
                next.0[ones[pick]] = 0.0;
            }
            omega_cur = next;
        }
    }

    if !best_cost.is_finite() {
        return Err(Error::Planning(format!(
            "every stage 2 episode failed for query {}",
            query.id
        )));
    }
    let record = ResolutionRecord {
        query: query.clone(),
        stage1_omega: omega0.clone(),
        omega_star,
        best_cost,
    };
    record.validate()?;
    Ok((record, steps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::DynModelConfig;
    use crate::graph::GraphParams;
    use crate::optimizer::queries::{generate_queries, QueryGenConfig};
    use crate::sim::{build_world, State, WorldConfig};

    fn tiny_world_cfg() -> WorldConfig {
        WorldConfig {
            seed: 3,
            branch_depth: 2,
            ee_start: [0.25, 0.0, 0.35],
            ..WorldConfig::default()
        }
    }

    fn tiny_gen_cfg() -> QueryGenConfig {
        QueryGenConfig {
            trajectory_steps: 40,
            window_min: 16,
            window_max: 32,
            windows_per_trajectory: 2,
            ..QueryGenConfig::default()
        }
    }

    fn tiny_mppi() -> MppiConfig {
        MppiConfig {
            horizon: 8,
            n_samples: 8,
            replan_interval: 4,
            refine_initial: 2,
            refine_other: 1,
            total_steps: 8,
            ..MppiConfig::default()
        }
    }

    fn fixture() -> (World, State, DynModel, PlanningQuery) {
        let (world, initial) = build_world(&tiny_world_cfg()).unwrap();
        let model = DynModel::init(
            DynModelConfig { hidden: 8, layers: 2, graph: GraphParams::default() },
            5,
        )
        .unwrap();
        let query = generate_queries(&world, &initial, &tiny_gen_cfg(), 1, 19)
            .unwrap()
            .pop()
            .unwrap();
        (world, initial, model, query)
    }

    #[test]
    fn huge_cardinality_weight_forces_all_zero() {
        let (world, _initial, mut model, query) = fixture();
        // A zero network extrapolates velocities, so every resolution rolls
        // out finite and the cardinality term alone decides.
        model.params.set = model.params.set.zeroed();
        let cfg = Stage1Config {
            w_dyn: 1e6,
            cma: CmaConfig { max_generations: 25, ..CmaConfig::default() },
            ..Stage1Config::default()
        };
        let omega = stage1_dynamics_opt(&model, &query, world.cfg.dt, &cfg, 7).unwrap();
        assert_eq!(omega.count_high(), 0, "got {}", omega.bits());
    }

    #[test]
    fn stage1_is_deterministic() {
        let (world, _initial, model, query) = fixture();
        let cfg = Stage1Config {
            cma: CmaConfig { max_generations: 6, ..CmaConfig::default() },
            ..Stage1Config::default()
        };
        let a = stage1_dynamics_opt(&model, &query, world.cfg.dt, &cfg, 23).unwrap();
        let b = stage1_dynamics_opt(&model, &query, world.cfg.dt, &cfg, 23).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stage1_rollout_cost_is_reproducible_and_finite() {
        let (world, _initial, model, query) = fixture();
        let omega = ResolutionVector::full(query.s1.n_segments());
        let a = stage1_rollout_cost(&model, &query, &omega, world.cfg.dt, DEFAULT_MASK_DELTA)
            .unwrap();
        let b = stage1_rollout_cost(&model, &query, &omega, world.cfg.dt, DEFAULT_MASK_DELTA)
            .unwrap();
        assert!(a.is_finite());
        assert_eq!(a, b);
    }

    #[test]
    fn all_zero_prior_returns_immediately() {
        let (world, _initial, model, query) = fixture();
        let omega0 = ResolutionVector::minimal(query.s1.n_segments());
        let cfg = Stage2Config { mppi: tiny_mppi(), ..Stage2Config::default() };
        let (record, steps) = stage2_closedloop_opt(&world, &model, &query, &omega0, &cfg, 3)
            .unwrap();
        assert_eq!(record.omega_star.count_high(), 0);
        assert_eq!(steps.len(), 1, "expected a single evaluation");
        assert!(record.best_cost.is_finite());
    }

    #[test]
    fn infinite_tolerance_reaches_all_zero_quickly() {
        let (world, _initial, model, query) = fixture();
        let k = query.s1.n_segments();
        let omega0 = ResolutionVector::full(k);
        let cfg = Stage2Config {
            eps_tol: f64::INFINITY,
            mppi: tiny_mppi(),
            ..Stage2Config::default()
        };
        let (record, steps) = stage2_closedloop_opt(&world, &model, &query, &omega0, &cfg, 11)
            .unwrap();
        assert_eq!(record.omega_star.count_high(), 0, "got {}", record.omega_star.bits());
        assert!(steps.iter().all(|s| s.accepted));
        assert!(
            steps.len() <= k + 1,
            "took {} evaluations for {k} segments",
            steps.len()
        );
    }

    #[test]
    fn logged_iterations_satisfy_algorithm_invariants() {
        let (world, _initial, model, query) = fixture();
        let k = query.s1.n_segments();
        let omega0 = ResolutionVector::full(k);
        let cfg = Stage2Config { mppi: tiny_mppi(), ..Stage2Config::default() };
        let (record, steps) = stage2_closedloop_opt(&world, &model, &query, &omega0, &cfg, 29)
            .unwrap();
        record.validate().unwrap();
        let mut star_high = k;
        for step in &steps {
            assert!(step.kmax_after >= 1 && step.kmax_after <= k);
            if step.accepted {
                assert!(step.cost <= step.best_cost + cfg.eps_tol);
            }
            assert!(step.omega_star_after.count_high() <= star_high);
            star_high = step.omega_star_after.count_high();
            assert!(step.omega.is_binary());
        }
        // The incumbent dominates: never re-enables an entry of the prior.
        for (star, start) in record.omega_star.0.iter().zip(&omega0.0) {
            assert!(star <= start);
        }
    }

    #[test]
    fn stage2_is_deterministic() {
        let (world, _initial, model, query) = fixture();
        let omega0 = ResolutionVector::full(query.s1.n_segments());
        let cfg = Stage2Config { mppi: tiny_mppi(), ..Stage2Config::default() };
        let a = stage2_closedloop_opt(&world, &model, &query, &omega0, &cfg, 41).unwrap();
        let b = stage2_closedloop_opt(&world, &model, &query, &omega0, &cfg, 41).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn nonbinary_prior_is_rejected() {
        let (world, _initial, model, query) = fixture();
        let omega0 = ResolutionVector(vec![0.7; query.s1.n_segments()]);
        let cfg = Stage2Config { mppi: tiny_mppi(), ..Stage2Config::default() };
        assert!(stage2_closedloop_opt(&world, &model, &query, &omega0, &cfg, 1).is_err());
    }
}
