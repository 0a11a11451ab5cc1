//! Training-data collection and interaction-dataset storage.
//!
//! Records are gathered by driving the simulated end-effector toward
//! randomly chosen canopy points; every transition is encoded under a fresh
//! random binary resolution vector so the model sees the whole encoding
//! family. Datasets are stored as JSON-lines shards beside a manifest.

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{build_graph_with_history, Graph, GraphParams, ResolutionVector, VertexKind};
use crate::rng::stream_rng;
use crate::sim::{build_world, step, Action, State, WorldConfig};

/// One observed transition: the encoded state, the action taken, and the
/// finite-difference acceleration of every vertex (per-step units).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct InteractionRecord {
    pub graph_before: Graph,
    pub action: Action,
    pub target_accels: Vec<Vector3<f64>>,
}

impl InteractionRecord {
    pub fn validate(&self) -> Result<()> {
        if self.target_accels.len() != self.graph_before.n_vertices() {
            return Err(Error::Construction(format!(
                "{} targets for {} vertices",
                self.target_accels.len(),
                self.graph_before.n_vertices()
            )));
        }
        let finite = self
            .target_accels
            .iter()
            .all(|v| v.iter().all(|c| c.is_finite()))
            && self.action.displacement.iter().all(|c| c.is_finite());
        if !finite {
            return Err(Error::Numeric("non-finite value in interaction record".into()));
        }
        Ok(())
    }
}

/// Shape of the exploration trajectories used during collection.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CollectConfig {
    /// Transitions recorded per trajectory before the world is reset.
    pub steps_per_trajectory: usize,
    /// Steps between re-sampling the approach target.
    pub retarget_interval: usize,
    /// Lower bound of the per-step speed fraction (of the action limit).
    pub speed_min: f64,
    /// Standard deviation of directional noise, as a fraction of the limit.
    pub jitter: f64,
    /// Radius of the ball around the chosen particle the target is drawn from.
    pub target_offset: f64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            steps_per_trajectory: 24,
            retarget_interval: 8,
            speed_min: 0.4,
            jitter: 0.35,
            target_offset: 0.05,
        }
    }
}

/// Ground-truth per-vertex accelerations for the transition from the state
/// `graph` encodes to `next`: the next per-step displacement (particle
/// motion, member-centroid motion, or end-effector motion) minus the newest
/// one stored on the vertex.
pub fn target_accelerations(graph: &Graph, next: &State) -> Vec<Vector3<f64>> {
    graph
        .vertices
        .iter()
        .map(|v| {
            let next_pos = match v.kind {
                VertexKind::Particle(i) => next.positions[i],
                VertexKind::Aggregate => {
                    v.members.iter().map(|&i| next.positions[i]).sum::<Vector3<f64>>()
                        / v.members.len() as f64
                }
                VertexKind::EndEffector => next.ee_pos,
            };
            let prev = v.vel_hist.first().copied().unwrap_or_else(Vector3::zeros);
            (next_pos - v.pos) - prev
        })
        .collect()
}

/// Collect `n` interaction records by running seeded exploration
/// trajectories in the simulator. Trajectories destabilizing the integrator
/// are cut short with a warning; collection continues until `n` records
/// exist or the attempt budget is exhausted.
pub fn collect_interactions(
    world_cfg: &WorldConfig,
    graph_params: &GraphParams,
    collect_cfg: &CollectConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<InteractionRecord>> {
    if n == 0 {
        return Err(Error::Config("requested zero interaction records".into()));
    }
    if collect_cfg.steps_per_trajectory == 0 {
        return Err(Error::Config("steps_per_trajectory must be positive".into()));
    }
    let (world, initial) = build_world(world_cfg)?;
    let per_traj = collect_cfg.steps_per_trajectory;
    let needed_trajs = n.div_ceil(per_traj);
    let max_trajs = needed_trajs.saturating_mul(8).max(4);

    let mut records = Vec::with_capacity(n);
    let mut next_traj = 0usize;
    while records.len() < n && next_traj < max_trajs {
        let batch_end = (next_traj + needed_trajs).min(max_trajs);
        let mut batch: Vec<Vec<InteractionRecord>> = (next_traj..batch_end)
            .into_par_iter()
            .map(|idx| {
                let mut rng = stream_rng(seed, "collect-traj", idx as u64);
                run_trajectory(&world, &initial, graph_params, collect_cfg, world_cfg, &mut rng)
            })
            .collect();
        for traj in batch.drain(..) {
            records.extend(traj);
        }
        next_traj = batch_end;
    }
    if records.len() < n {
        return Err(Error::Training(format!(
            "collected only {} of {n} records within the attempt budget",
            records.len()
        )));
    }
    records.truncate(n);
    Ok(records)
}

fn run_trajectory(
    world: &crate::sim::World,
    initial: &State,
    gp: &GraphParams,
    cc: &CollectConfig,
    wc: &WorldConfig,
    rng: &mut ChaCha20Rng,
) -> Vec<InteractionRecord> {
    let mut states = vec![initial.clone()];
    let mut records = Vec::with_capacity(cc.steps_per_trajectory);
    let mut target = Vector3::zeros();
    for t in 0..cc.steps_per_trajectory {
        if t % cc.retarget_interval.max(1) == 0 {
            target = sample_target(states.last().expect("nonempty"), cc.target_offset, rng);
        }
        let cur = states.last().expect("nonempty").clone();
        let to = target - cur.ee_pos;
        let dir = if to.norm() > 1e-9 { to.normalize() } else { Vector3::zeros() };
        let speed: f64 = rng.gen_range(cc.speed_min..=1.0);
        let noise = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ) * cc.jitter;
        let action = Action::clamped((dir * speed + noise) * wc.max_action_step, wc.max_action_step);
        let next = match step(world, &cur, &action) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("collection trajectory aborted after {t} steps: {e}");
                break;
            }
        };
        let omega = ResolutionVector::random_binary(cur.n_segments(), rng);
        let window_start = states.len().saturating_sub(gp.vel_history + 1);
        let graph = match build_graph_with_history(&states[window_start..], &omega, gp, wc.dt) {
            Ok(g) => g,
            Err(e) => {
                log::warn!("collection encoding failed after {t} steps: {e}");
                break;
            }
        };
        let target_accels = target_accelerations(&graph, &next);
        records.push(InteractionRecord { graph_before: graph, action, target_accels });
        states.push(next);
    }
    records
}

fn sample_target(state: &State, radius: f64, rng: &mut ChaCha20Rng) -> Vector3<f64> {
    let idx = rng.gen_range(0..state.n_particles());
    let dir = Vector3::new(
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
    );
    let dir = if dir.norm() > 1e-12 { dir.normalize() } else { Vector3::x() };
    let r = radius * rng.gen::<f64>().cbrt();
    state.positions[idx] + dir * r
}

/// Version stamp carried by every dataset manifest.
pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ShardInfo {
    pub file: String,
    pub count: usize,
}

/// Index of an interaction dataset directory.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub count: usize,
    pub seed: u64,
    pub config_hash: String,
    pub shards: Vec<ShardInfo>,
}

const SHARD_SIZE: usize = 10_000;

/// Write records as JSON-lines shards plus `manifest.json` under `dir`.
pub fn write_interactions<P: AsRef<Path>>(
    dir: P,
    records: &[InteractionRecord],
    seed: u64,
    config_hash: &str,
) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut shards = Vec::new();
    for (si, chunk) in records.chunks(SHARD_SIZE).enumerate() {
        let file = format!("shard-{si:04}.jsonl");
        let mut w = BufWriter::new(std::fs::File::create(dir.join(&file))?);
        for r in chunk {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        shards.push(ShardInfo { file, count: chunk.len() });
    }
    let manifest = DatasetManifest {
        schema_version: DATASET_SCHEMA_VERSION,
        count: records.len(),
        seed,
        config_hash: config_hash.to_string(),
        shards,
    };
    let mut w = BufWriter::new(std::fs::File::create(dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    w.flush()?;
    Ok(manifest)
}

/// Read a dataset directory back, validating the manifest and each record.
pub fn read_interactions<P: AsRef<Path>>(
    dir: P,
) -> Result<(Vec<InteractionRecord>, DatasetManifest)> {
    let dir = dir.as_ref();
    let manifest: DatasetManifest =
        serde_json::from_reader(std::fs::File::open(dir.join("manifest.json"))?)?;
    if manifest.schema_version != DATASET_SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "dataset schema {} unsupported (expected {DATASET_SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    let mut records = Vec::with_capacity(manifest.count);
    for shard in &manifest.shards {
        let reader = BufReader::new(std::fs::File::open(dir.join(&shard.file))?);
        let mut in_shard = 0usize;
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: InteractionRecord = serde_json::from_str(&line)?;
            rec.validate()?;
            records.push(rec);
            in_shard += 1;
        }
        if in_shard != shard.count {
            return Err(Error::Checkpoint(format!(
                "shard {} holds {in_shard} records, manifest says {}",
                shard.file, shard.count
            )));
        }
    }
    if records.len() != manifest.count {
        return Err(Error::Checkpoint(format!(
            "dataset holds {} records, manifest says {}",
            records.len(),
            manifest.count
        )));
    }
    Ok((records, manifest))
}
