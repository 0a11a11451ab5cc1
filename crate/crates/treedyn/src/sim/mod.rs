//! Ground-truth deformable-tree world: a damped mass-spring branching
//! structure pushed by a capsule end-effector.
//!
//! The tree is generated deterministically from [`WorldConfig`]: a trunk plus
//! recursively attached child branches, one segment id per branch. Dynamics
//! are semi-implicit Euler with stiffness-proportional spring damping plus a
//! global velocity drag; contact with the end-effector capsule is resolved by
//! position projection and removal of the inward normal velocity, so the
//! effector can push particles but never attach to them.

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Number of past end-effector displacements kept in every [`State`].
pub const EE_HISTORY: usize = 5;

/// Parameters of the generated world. `seed` only jitters branch directions;
/// the branch/segment count is a pure function of `branch_depth`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct WorldConfig {
    pub seed: u64,
    /// Levels of branching; 1 = trunk only.
    pub branch_depth: usize,
    pub particles_per_branch: usize,
    /// Mass per particle, kg.
    pub particle_mass: f64,
    /// Chain-spring stiffness, N/m. Bend and bracing springs use half of it.
    pub spring_stiffness: f64,
    /// Global velocity drag, 1/s.
    pub damping: f64,
    /// Relative-velocity damping along each spring, N·s/m, quoted at
    /// `spring_stiffness` and scaled proportionally for softer springs.
    pub spring_damping: f64,
    /// Integration step, s.
    pub dt: f64,
    /// Rest distance between consecutive particles in a branch, m.
    pub particle_spacing: f64,
    /// End-effector capsule radius, m.
    pub capsule_radius: f64,
    /// End-effector capsule half length (axis is vertical), m.
    pub capsule_half_len: f64,
    /// Upper bound on one action's displacement norm, m.
    pub max_action_step: f64,
    /// Particle indices pinned in place (trunk base by default).
    pub anchor_indices: Vec<usize>,
    /// Initial end-effector position, m.
    pub ee_start: [f64; 3],
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            branch_depth: 3,
            particles_per_branch: 8,
            particle_mass: 0.05,
            spring_stiffness: 20.0,
            damping: 3.0,
            spring_damping: 0.1,
            dt: 0.01,
            particle_spacing: 0.06,
            capsule_radius: 0.04,
            capsule_half_len: 0.08,
            max_action_step: 0.02,
            anchor_indices: vec![0, 1],
            ee_start: [0.5, 0.0, 0.3],
        }
    }
}

/// One linear spring between particles `a` and `b`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Spring {
    pub a: usize,
    pub b: usize,
    pub rest_len: f64,
    pub stiffness: f64,
}

/// Static world data: geometry, springs, segment labels.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct World {
    pub cfg: WorldConfig,
    pub springs: Vec<Spring>,
    pub segment_of: Vec<usize>,
    pub n_segments: usize,
    pub anchored: Vec<bool>,
    pub rest_positions: Vec<Vector3<f64>>,
}

impl World {
    pub fn n_particles(&self) -> usize {
        self.rest_positions.len()
    }
}

/// Dynamic state. Serialized field order: `ee_pos`, `ee_vel_hist`,
/// `positions`, `velocities`, `segment_of`.
///
/// `ee_vel_hist[0]` is the most recent displacement (m/step); `velocities`
/// are physical (m/s). `segment_of` is carried so exported trajectories are
/// self-contained.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct State {
    pub ee_pos: Vector3<f64>,
    pub ee_vel_hist: [Vector3<f64>; EE_HISTORY],
    pub positions: Vec<Vector3<f64>>,
    pub velocities: Vec<Vector3<f64>>,
    pub segment_of: Vec<usize>,
}

impl State {
    pub fn n_particles(&self) -> usize {
        self.positions.len()
    }

    pub fn n_segments(&self) -> usize {
        self.segment_of.iter().copied().max().map_or(0, |m| m + 1)
    }

    fn is_finite(&self) -> bool {
        let v3 = |v: &Vector3<f64>| v.iter().all(|x| x.is_finite());
        v3(&self.ee_pos)
            && self.ee_vel_hist.iter().all(v3)
            && self.positions.iter().all(v3)
            && self.velocities.iter().all(v3)
    }
}

/// One end-effector displacement command, m.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct Action {
    pub displacement: Vector3<f64>,
}

impl Action {
    pub const ZERO: Action = Action { displacement: Vector3::new(0.0, 0.0, 0.0) };

    /// Clamp a raw displacement to norm ≤ `max_step`.
    pub fn clamped(displacement: Vector3<f64>, max_step: f64) -> Self {
        let n = displacement.norm();
        if n > max_step && n > 0.0 {
            Action { displacement: displacement * (max_step / n) }
        } else {
            Action { displacement }
        }
    }
}

struct BranchSpec {
    /// (parent branch index, local particle index on the parent) or None for the trunk.
    parent: Option<(usize, usize)>,
    /// Order among the parent's children; decides how many children this branch gets.
    child_rank: usize,
    dir: Vector3<f64>,
}

fn validate_config(cfg: &WorldConfig) -> Result<()> {
    if cfg.dt <= 0.0 {
        return Err(Error::Config("dt must be > 0".into()));
    }
    if cfg.spring_stiffness <= 0.0 {
        return Err(Error::Config("spring_stiffness must be > 0".into()));
    }
    if cfg.damping < 0.0 || cfg.spring_damping < 0.0 {
        return Err(Error::Config("damping must be >= 0".into()));
    }
    if cfg.particle_mass <= 0.0 {
        return Err(Error::Config("particle_mass must be > 0".into()));
    }
    if cfg.branch_depth == 0 {
        return Err(Error::Config("branch_depth must be >= 1".into()));
    }
    if cfg.particles_per_branch < 2 {
        return Err(Error::Config("particles_per_branch must be >= 2".into()));
    }
    if cfg.particle_spacing <= 0.0 {
        return Err(Error::Config("particle_spacing must be > 0".into()));
    }
    if cfg.max_action_step <= 0.0 {
        return Err(Error::Config("max_action_step must be > 0".into()));
    }
    Ok(())
}

/// Build the deterministic tree world and its rest state.
///
/// Branch counts per level: the trunk spawns 3 children, every first child
/// spawns 2, every later child spawns 1. Depth 3 with the defaults gives
/// K = 8 segments. Spring rest lengths equal the as-built distances, so the
/// rest state is a force-free equilibrium.
pub fn build_world(cfg: &WorldConfig) -> Result<(World, State)> {
    validate_config(cfg)?;
    let mut rng = stream_rng(cfg.seed, "world-build", 0);
    let ppb = cfg.particles_per_branch;

    // Lay out branch specs level by level, in creation order = segment id.
    let mut branches: Vec<BranchSpec> = vec![BranchSpec {
        parent: None,
        child_rank: 0,
        dir: Vector3::new(0.0, 0.0, 1.0),
    }];
    let mut level_start = 0usize;
    for level in 1..cfg.branch_depth {
        let level_end = branches.len();
        for parent_idx in level_start..level_end {
            let n_children = if level == 1 {
                3
            } else if branches[parent_idx].child_rank == 0 {
                2
            } else {
                1
            };
            for rank in 0..n_children {
                let attach_local = (ppb - 1).saturating_sub(2 * rank).max(1);
                let parent_dir = branches[parent_idx].dir;
                // Orthonormal frame around the parent axis.
                let helper = if parent_dir.x.abs() < 0.9 {
                    Vector3::new(1.0, 0.0, 0.0)
                } else {
                    Vector3::new(0.0, 1.0, 0.0)
                };
                let u = parent_dir.cross(&helper).normalize();
                let v = parent_dir.cross(&u);
                let tilt: f64 = 0.6 + rng.gen_range(-0.1..0.1);
                let az: f64 = rank as f64 * (2.0 * std::f64::consts::PI / 3.0)
                    + level as f64 * 0.7
                    + rng.gen_range(-0.2..0.2);
                let dir = (parent_dir * tilt.cos()
                    + (u * az.cos() + v * az.sin()) * tilt.sin())
                .normalize();
                branches.push(BranchSpec {
                    parent: Some((parent_idx, attach_local)),
                    child_rank: rank,
                    dir,
                });
            }
        }
        level_start = level_end;
    }

    // Emit particles branch by branch; branch index is the segment id.
    let n_segments = branches.len();
    let mut positions: Vec<Vector3<f64>> = Vec::with_capacity(n_segments * ppb);
    let mut segment_of: Vec<usize> = Vec::with_capacity(n_segments * ppb);
    let mut first_particle: Vec<usize> = Vec::with_capacity(n_segments);
    let mut springs: Vec<Spring> = Vec::new();
    let half_k = 0.5 * cfg.spring_stiffness;

    for (b_idx, spec) in branches.iter().enumerate() {
        let base = positions.len();
        first_particle.push(base);
        let origin = match spec.parent {
            None => Vector3::zeros(),
            Some((p_branch, attach_local)) => {
                positions[first_particle[p_branch] + attach_local]
                    + spec.dir * cfg.particle_spacing
            }
        };
        for i in 0..ppb {
            positions.push(origin + spec.dir * (cfg.particle_spacing * i as f64));
            segment_of.push(b_idx);
        }
        for i in 0..ppb - 1 {
            springs.push(Spring {
                a: base + i,
                b: base + i + 1,
                rest_len: 0.0,
                stiffness: cfg.spring_stiffness,
            });
        }
        for i in 0..ppb.saturating_sub(2) {
            springs.push(Spring {
                a: base + i,
                b: base + i + 2,
                rest_len: 0.0,
                stiffness: half_k,
            });
        }
        if let Some((p_branch, attach_local)) = spec.parent {
            let attach = first_particle[p_branch] + attach_local;
            springs.push(Spring { a: base, b: attach, rest_len: 0.0, stiffness: cfg.spring_stiffness });
            springs.push(Spring { a: base, b: attach - 1, rest_len: 0.0, stiffness: half_k });
            if ppb >= 2 {
                springs.push(Spring { a: base + 1, b: attach, rest_len: 0.0, stiffness: half_k });
            }
        }
    }
    for s in &mut springs {
        s.rest_len = (positions[s.a] - positions[s.b]).norm();
    }

    let n = positions.len();
    if n < 2 {
        return Err(Error::Config("world must contain at least 2 particles".into()));
    }
    let mut anchored = vec![false; n];
    for &a in &cfg.anchor_indices {
        if a >= n {
            return Err(Error::Config(format!("anchor index {a} out of range (P={n})")));
        }
        anchored[a] = true;
    }

    let world = World {
        cfg: cfg.clone(),
        springs,
        segment_of: segment_of.clone(),
        n_segments,
        anchored,
        rest_positions: positions.clone(),
    };
    let state = State {
        ee_pos: Vector3::new(cfg.ee_start[0], cfg.ee_start[1], cfg.ee_start[2]),
        ee_vel_hist: [Vector3::zeros(); EE_HISTORY],
        positions,
        velocities: vec![Vector3::zeros(); n],
        segment_of,
    };
    Ok((world, state))
}

/// Closest point to `p` on the capsule axis segment centered at `center`.
fn capsule_axis_point(center: &Vector3<f64>, half_len: f64, p: &Vector3<f64>) -> Vector3<f64> {
    let t = (p.z - center.z).clamp(-half_len, half_len);
    Vector3::new(center.x, center.y, center.z + t)
}

/// Advance one step of semi-implicit Euler with capsule contact.
///
/// Order: move the end-effector by the (clamped) action, apply spring +
/// damping forces to free particles, integrate, then project penetrating
/// particles out of the capsule and remove their inward normal velocity.
pub fn step(world: &World, state: &State, action: &Action) -> Result<State> {
    let cfg = &world.cfg;
    let act = Action::clamped(action.displacement, cfg.max_action_step);
    let mut next = state.clone();

    next.ee_pos += act.displacement;
    for i in (1..EE_HISTORY).rev() {
        next.ee_vel_hist[i] = next.ee_vel_hist[i - 1];
    }
    next.ee_vel_hist[0] = act.displacement;

    let inv_m = 1.0 / cfg.particle_mass;
    let mut forces = vec![Vector3::zeros(); state.n_particles()];
    for s in &world.springs {
        let d = state.positions[s.a] - state.positions[s.b];
        let len = d.norm();
        if len < 1e-9 {
            continue;
        }
        let dir = d / len;
        let damp_coeff = cfg.spring_damping * (s.stiffness / cfg.spring_stiffness);
        let rel_vel = (state.velocities[s.a] - state.velocities[s.b]).dot(&dir);
        let f = dir * (-s.stiffness * (len - s.rest_len) - damp_coeff * rel_vel);
        forces[s.a] += f;
        forces[s.b] -= f;
    }

    for i in 0..state.n_particles() {
        if world.anchored[i] {
            next.velocities[i] = Vector3::zeros();
            continue;
        }
        let f = forces[i] - state.velocities[i] * (cfg.damping * cfg.particle_mass);
        next.velocities[i] = state.velocities[i] + f * (cfg.dt * inv_m);
        next.positions[i] += next.velocities[i] * cfg.dt;
    }

    for i in 0..state.n_particles() {
        if world.anchored[i] {
            continue;
        }
        let axis_pt = capsule_axis_point(&next.ee_pos, cfg.capsule_half_len, &next.positions[i]);
        let d = next.positions[i] - axis_pt;
        let dist = d.norm();
        if dist < cfg.capsule_radius {
            // Degenerate overlap with the axis: push along +x.
            let normal = if dist < 1e-9 { Vector3::new(1.0, 0.0, 0.0) } else { d / dist };
            next.positions[i] = axis_pt + normal * cfg.capsule_radius;
            let vn = next.velocities[i].dot(&normal);
            if vn < 0.0 {
                next.velocities[i] -= normal * vn;
            }
        }
    }

    if !next.is_finite() {
        return Err(Error::Numeric(
            "simulation state diverged (NaN/inf); reduce dt or stiffness".into(),
        ));
    }
    Ok(next)
}

/// Roll out a whole action sequence; result holds `actions.len() + 1` states
/// starting with the input state.
pub fn rollout_env(world: &World, state: &State, actions: &[Action]) -> Result<Vec<State>> {
    let mut out = Vec::with_capacity(actions.len() + 1);
    out.push(state.clone());
    for a in actions {
        let next = step(world, out.last().unwrap(), a)?;
        out.push(next);
    }
    Ok(out)
}

/// Kinetic plus elastic energy, J. Used by the dissipation tests.
pub fn mechanical_energy(world: &World, state: &State) -> f64 {
    let mut e = 0.0;
    for (i, v) in state.velocities.iter().enumerate() {
        if !world.anchored[i] {
            e += 0.5 * world.cfg.particle_mass * v.norm_squared();
        }
    }
    for s in &world.springs {
        let len = (state.positions[s.a] - state.positions[s.b]).norm();
        e += 0.5 * s.stiffness * (len - s.rest_len).powi(2);
    }
    e
}

/// Write one JSON document per state, one line each.
pub fn write_trajectory_jsonl<P: AsRef<Path>>(path: P, traj: &[State]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in traj {
        serde_json::to_writer(&mut f, s)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Read a trajectory written by [`write_trajectory_jsonl`].
pub fn read_trajectory_jsonl<P: AsRef<Path>>(path: P) -> Result<Vec<State>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn desk() -> (World, State) {
        build_world(&WorldConfig::default()).unwrap()
    }

    #[test]
    fn deterministic_build() {
        let cfg = WorldConfig { seed: 7, ..WorldConfig::default() };
        let (w1, s1) = build_world(&cfg).unwrap();
        let (w2, s2) = build_world(&cfg).unwrap();
        assert_eq!(w1, w2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn single_branch_world() {
        let cfg = WorldConfig {
            branch_depth: 1,
            particles_per_branch: 4,
            anchor_indices: vec![0],
            ..WorldConfig::default()
        };
        let (w, s) = build_world(&cfg).unwrap();
        assert_eq!(s.n_particles(), 4);
        assert_eq!(w.n_segments, 1);
    }

    #[test]
    fn desk_world_counts() {
        let (w, s) = desk();
        // Frozen after running the generator: 8 branches of 8 particles.
        assert_eq!(w.n_segments, 8);
        assert_eq!(s.n_particles(), 64);
        assert_eq!(s.n_segments(), 8);
        // Segment adjacency forms a tree: K segments, K-1 joints.
        let mut joints = std::collections::HashSet::new();
        for sp in &w.springs {
            let (sa, sb) = (w.segment_of[sp.a], w.segment_of[sp.b]);
            if sa != sb {
                joints.insert((sa.min(sb), sa.max(sb)));
            }
        }
        assert_eq!(joints.len(), w.n_segments - 1);
    }

    #[test]
    fn rest_state_is_equilibrium() {
        let (w, s) = desk();
        let next = step(&w, &s, &Action::ZERO).unwrap();
        for i in 0..s.n_particles() {
            assert!((next.positions[i] - s.positions[i]).norm() < 1e-9);
            assert!(next.velocities[i].norm() < 1e-9);
        }
    }

    #[test]
    fn zero_actions_keep_rest_state() {
        let (w, s) = desk();
        let traj = rollout_env(&w, &s, &vec![Action::ZERO; 80]).unwrap();
        assert_eq!(traj.len(), 81);
        for st in &traj {
            assert_eq!(st.positions, s.positions);
        }
    }

    #[test]
    fn energy_dissipates_after_perturbation() {
        let (w, mut s) = desk();
        // Displace one free mid-branch particle and let the tree ring down.
        s.positions[20] += Vector3::new(0.03, 0.0, 0.0);
        s.ee_pos = Vector3::new(5.0, 0.0, 0.0); // far away: no contact
        let mut prev = mechanical_energy(&w, &s);
        for _ in 0..100 {
            s = step(&w, &s, &Action::ZERO).unwrap();
            let e = mechanical_energy(&w, &s);
            assert!(e <= prev + 1e-8, "energy rose: {prev} -> {e}");
            prev = e;
        }
    }

    #[test]
    fn no_contact_push_moves_only_effector() {
        let (w, mut s) = desk();
        s.ee_pos = Vector3::new(5.0, 5.0, 0.0);
        let a = Action { displacement: Vector3::new(0.01, 0.0, 0.005) };
        let next = step(&w, &s, &a).unwrap();
        assert_eq!(next.positions, s.positions);
        assert!((next.ee_pos - (s.ee_pos + a.displacement)).norm() < 1e-15);
        assert_eq!(next.ee_vel_hist[0], a.displacement);
        assert_eq!(next.ee_vel_hist[1], s.ee_vel_hist[0]);
    }

    #[test]
    fn action_clamping() {
        let a = Action::clamped(Vector3::new(1.0, 0.0, 0.0), 0.02);
        assert!((a.displacement.norm() - 0.02).abs() < 1e-15);
        let b = Action::clamped(Vector3::new(0.0, 0.01, 0.0), 0.02);
        assert_eq!(b.displacement, Vector3::new(0.0, 0.01, 0.0));
    }

    #[test]
    fn contact_pushes_particles_out() {
        let (w, mut s) = desk();
        // Park the capsule right on top of a free particle.
        let target = 30usize;
        s.ee_pos = s.positions[target] + Vector3::new(0.02, 0.0, 0.0);
        let next = step(&w, &s, &Action::ZERO).unwrap();
        let axis = capsule_axis_point(&next.ee_pos, w.cfg.capsule_half_len, &next.positions[target]);
        assert!((next.positions[target] - axis).norm() >= w.cfg.capsule_radius - 1e-12);
    }

    #[test]
    fn anchors_never_move_and_positions_stay_bounded() {
        let (w, s) = desk();
        let mut rng = crate::rng::stream_rng(3, "sim-stability", 0);
        let mut st = s.clone();
        for _ in 0..1000 {
            let d = Vector3::new(
                rng.gen_range(-0.02..0.02),
                rng.gen_range(-0.02..0.02),
                rng.gen_range(-0.02..0.02),
            );
            st = step(&w, &st, &Action::clamped(d, w.cfg.max_action_step)).unwrap();
        }
        for &a in &w.cfg.anchor_indices {
            assert_eq!(st.positions[a], s.positions[a]);
        }
        for p in &st.positions {
            assert!(p.norm() < 10.0);
        }
    }

    #[test]
    fn rollout_basics() {
        let (w, s) = desk();
        assert_eq!(rollout_env(&w, &s, &[]).unwrap().len(), 1);
        let mut rng = crate::rng::stream_rng(11, "sim-rollout", 0);
        let actions: Vec<Action> = (0..80)
            .map(|_| {
                Action::clamped(
                    Vector3::new(rng.gen_range(-0.03..0.03), rng.gen_range(-0.03..0.03), 0.0),
                    w.cfg.max_action_step,
                )
            })
            .collect();
        let t1 = rollout_env(&w, &s, &actions).unwrap();
        let t2 = rollout_env(&w, &s, &actions).unwrap();
        assert_eq!(t1.last(), t2.last());
    }

    #[test]
    fn trajectory_jsonl_round_trip() {
        let (w, s) = desk();
        let traj = rollout_env(&w, &s, &vec![Action::ZERO; 3]).unwrap();
        let dir = std::env::temp_dir().join(format!("treedyn-sim-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("traj.jsonl");
        write_trajectory_jsonl(&path, &traj).unwrap();
        let back = read_trajectory_jsonl(&path).unwrap();
        assert_eq!(traj, back);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = WorldConfig { dt: 0.0, ..WorldConfig::default() };
        assert!(matches!(build_world(&bad), Err(Error::Config(_))));
        let bad = WorldConfig { particles_per_branch: 1, ..WorldConfig::default() };
        assert!(build_world(&bad).is_err());
        let bad = WorldConfig { anchor_indices: vec![10_000], ..WorldConfig::default() };
        assert!(build_world(&bad).is_err());
    }
}
