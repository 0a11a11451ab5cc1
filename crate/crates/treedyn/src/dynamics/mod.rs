//! Learned single-step graph dynamics and multi-step model rollouts.
//!
//! The model maps a graph state and an end-effector action to per-vertex
//! accelerations, which are integrated with the same semi-implicit scheme the
//! simulator uses. All kinematic quantities on graphs are per-step
//! displacements, so integration needs no explicit time step. The
//! end-effector vertex is never predicted: it moves kinematically by the
//! commanded action.

mod collect;
mod train;

pub use collect::{
    collect_interactions, read_interactions, target_accelerations, write_interactions,
    CollectConfig, DatasetManifest, InteractionRecord, ShardInfo, DATASET_SCHEMA_VERSION,
};
pub use train::{train_dynamics, TrainConfig, TrainReport};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{Graph, GraphParams};
use crate::nn::{gnn_infer, Checkpoint, GnnConfig, GnnParams, Tensor};
use crate::sim::Action;

/// Checkpoint kind tag for dynamics models.
pub const DYNAMICS_CHECKPOINT_KIND: &str = "dynamics";

/// Architecture of the dynamics network and the graph encoding it was
/// trained against.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DynModelConfig {
    pub hidden: usize,
    /// Message-passing rounds.
    pub layers: usize,
    /// Encoding the model expects; `vel_history` fixes the input width.
    pub graph: GraphParams,
}

impl Default for DynModelConfig {
    fn default() -> Self {
        Self { hidden: 32, layers: 5, graph: GraphParams::default() }
    }
}

impl DynModelConfig {
    /// Vertex feature width: flattened displacement history, an
    /// end-effector flag, an aggregate flag, and the commanded action.
    pub fn node_input_dim(&self) -> usize {
        3 * self.graph.vel_history + 2 + 3
    }

    pub fn gnn_config(&self) -> GnnConfig {
        GnnConfig {
            node_in: self.node_input_dim(),
            global_in: 1,
            hidden: self.hidden,
            layers: self.layers,
            node_out: 3,
        }
    }
}

/// Per-column affine normalization fitted on a training set. A fresh model
/// carries the identity so an all-zero network predicts exactly zero
/// accelerations.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NormStats {
    pub in_mean: Vec<f64>,
    pub in_std: Vec<f64>,
    pub out_mean: Vec<f64>,
    pub out_std: Vec<f64>,
}

const STD_FLOOR: f64 = 1e-8;

impl NormStats {
    pub fn identity(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_mean: vec![0.0; in_dim],
            in_std: vec![1.0; in_dim],
            out_mean: vec![0.0; out_dim],
            out_std: vec![1.0; out_dim],
        }
    }

    /// Column statistics over raw input rows and object-vertex target rows.
    pub fn fit(input_rows: &[Vec<f64>], target_rows: &[Vec<f64>]) -> Result<Self> {
        let (in_mean, in_std) = column_stats(input_rows)?;
        let (out_mean, out_std) = column_stats(target_rows)?;
        Ok(Self { in_mean, in_std, out_mean, out_std })
    }

    /// (x - mean) / std, column-wise.
    pub fn normalize_in(&self, raw: &Tensor) -> Result<Tensor> {
        affine_columns(raw, &self.in_mean, &self.in_std, AffineDir::Normalize)
    }

    /// (t - mean) / std, column-wise.
    pub fn normalize_out(&self, raw: &Tensor) -> Result<Tensor> {
        affine_columns(raw, &self.out_mean, &self.out_std, AffineDir::Normalize)
    }

    /// mean + std * y, column-wise.
    pub fn denormalize_out(&self, norm: &Tensor) -> Result<Tensor> {
        affine_columns(norm, &self.out_mean, &self.out_std, AffineDir::Denormalize)
    }
}

enum AffineDir {
    Normalize,
    Denormalize,
}

fn affine_columns(t: &Tensor, mean: &[f64], std: &[f64], dir: AffineDir) -> Result<Tensor> {
    if t.cols() != mean.len() || t.cols() != std.len() {
        return Err(Error::Dimension(format!(
            "tensor has {} columns, stats have {}",
            t.cols(),
            mean.len()
        )));
    }
    let mut out = t.clone();
    let cols = out.cols();
    for (idx, v) in out.data_mut().iter_mut().enumerate() {
        let c = idx % cols;
        *v = match dir {
            AffineDir::Normalize => (*v - mean[c]) / std[c],
            AffineDir::Denormalize => mean[c] + std[c] * *v,
        };
    }
    Ok(out)
}

fn column_stats(rows: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let first = rows.first().ok_or_else(|| Error::Training("no rows to fit stats on".into()))?;
    let d = first.len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        if r.len() != d {
            return Err(Error::Dimension("ragged rows in stats fit".into()));
        }
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; d];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
    Ok((mean, std))
}

/// Learned dynamics model: network parameters plus the normalization they
/// were trained under.
#[derive(Clone, Debug)]
pub struct DynModel {
    pub cfg: DynModelConfig,
    pub params: GnnParams,
    pub norm: NormStats,
}

impl DynModel {
    pub fn init(cfg: DynModelConfig, seed: u64) -> Result<Self> {
        let params = GnnParams::init(cfg.gnn_config(), seed)?;
        let norm = NormStats::identity(cfg.node_input_dim(), 3);
        Ok(Self { cfg, params, norm })
    }

    /// Raw (un-normalized) vertex feature rows for one transition:
    /// displacement history (newest first), an end-effector flag, an
    /// aggregate flag, and the commanded end-effector displacement repeated
    /// on every vertex.
    pub fn node_inputs(&self, z: &Graph, a: &Action) -> Tensor {
        let h = self.cfg.graph.vel_history;
        let rows: Vec<Vec<f64>> = z
            .vertices
            .iter()
            .map(|v| {
                let mut row = Vec::with_capacity(3 * h + 5);
                for k in 0..h {
                    let d = v
                        .vel_hist
                        .get(k)
                        .or(v.vel_hist.last())
                        .copied()
                        .unwrap_or_else(Vector3::zeros);
                    row.extend_from_slice(&[d.x, d.y, d.z]);
                }
                row.push(if v.is_end_effector() { 1.0 } else { 0.0 });
                row.push(if v.is_aggregate() { 1.0 } else { 0.0 });
                row.extend_from_slice(&[a.displacement.x, a.displacement.y, a.displacement.z]);
                row
            })
            .collect();
        Tensor::from_rows(&rows)
    }

    /// Predicted per-vertex accelerations (per-step displacement units).
    pub fn predict_accelerations(&self, z: &Graph, a: &Action) -> Result<Vec<Vector3<f64>>> {
        let raw = self.node_inputs(z, a);
        let x = self.norm.normalize_in(&raw)?;
        let out = gnn_infer(&self.params, z, &x, &Tensor::zeros(1, 1))?;
        let accels = self.norm.denormalize_out(&out.node_decoded)?;
        Ok((0..accels.rows())
            .map(|i| Vector3::new(accels.get(i, 0), accels.get(i, 1), accels.get(i, 2)))
            .collect())
    }

    /// One model step: predict accelerations, integrate object vertices,
    /// move the end-effector kinematically by `a`.
    pub fn predict(&self, z: &Graph, a: &Action) -> Result<Graph> {
        let accels = self.predict_accelerations(z, a)?;
        integrate_graph(z, &accels, a, &self.cfg.graph)
    }

    /// Chained single-step predictions; index 0 is `z1` itself and later
    /// graphs derive from model output, never from re-encoded states.
    pub fn rollout(&self, z1: &Graph, actions: &[Action]) -> Result<Vec<Graph>> {
        let mut out = Vec::with_capacity(actions.len() + 1);
        out.push(z1.clone());
        for a in actions {
            let next = self.predict(out.last().expect("nonempty"), a)?;
            out.push(next);
        }
        Ok(out)
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let ckpt = Checkpoint::new(
            DYNAMICS_CHECKPOINT_KIND,
            serde_json::to_value(&self.cfg)?,
            serde_json::to_value(&self.norm)?,
            self.params.set.clone(),
        );
        ckpt.save(path)
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        ckpt.expect_kind(DYNAMICS_CHECKPOINT_KIND)?;
        let cfg: DynModelConfig = serde_json::from_value(ckpt.config.clone())?;
        let norm: NormStats = serde_json::from_value(ckpt.extra.clone())?;
        let params = GnnParams { cfg: cfg.gnn_config(), set: ckpt.tensors };
        Ok(Self { cfg, params, norm })
    }
}

/// Advance a graph by per-vertex accelerations: each object vertex gains the
/// acceleration on its newest per-step displacement and moves by the result;
/// the end-effector moves by the action. Edge features are refreshed in
/// place, and the neighborhood structure is rebuilt only when some edge has
/// stretched past twice its build length.
pub fn integrate_graph(
    z: &Graph,
    accels: &[Vector3<f64>],
    a: &Action,
    params: &GraphParams,
) -> Result<Graph> {
    if accels.len() != z.n_vertices() {
        return Err(Error::Dimension(format!(
            "{} accelerations for {} vertices",
            accels.len(),
            z.n_vertices()
        )));
    }
    if accels.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
        return Err(Error::Numeric("non-finite acceleration".into()));
    }
    let mut next = z.clone();
    for (v, acc) in next.vertices.iter_mut().zip(accels) {
        let disp = if v.is_end_effector() {
            a.displacement
        } else {
            v.vel_hist.first().copied().unwrap_or_else(Vector3::zeros) + acc
        };
        v.pos += disp;
        let window = v.vel_hist.len().max(1);
        v.vel_hist.insert(0, disp);
        v.vel_hist.truncate(window);
    }
    next.refresh_edge_features();
    if next.needs_rewire() {
        next.rewire(params);
    }
    Ok(next)
}
