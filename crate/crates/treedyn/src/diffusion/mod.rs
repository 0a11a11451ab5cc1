//! Generative model over resolution vectors.
//!
//! A denoising diffusion model learns the distribution of good resolution
//! choices conditioned on a planning query. The condition is the start–goal
//! query graph built at full resolution; the noised resolution vector enters
//! through the vertex features (each vertex sees its own segment's entry)
//! and the diffusion step index enters through the global feature. The
//! network's scalar per-vertex outputs are averaged per segment, giving a
//! noise estimate with one entry per segment.
//!
//! Resolution vectors are trained and sampled in a normalized domain:
//! binary entries map to ±1 via `2 w - 1`, and samples map back through
//! `(x + 1) / 2` followed by thresholding.

mod schedule;
mod train;

pub use schedule::{make_schedule, DiffusionSchedule, ScheduleKind, BETA_MAX};
pub use train::{train_generator, GenTrainConfig, GenTrainReport};

use std::path::Path;

use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_query_graph, Graph, GraphParams, QueryGraph, ResolutionVector};
use crate::nn::{gnn_forward, Checkpoint, Ctx, Eval, GnnConfig, GnnParams, Tensor};
use crate::sim::State;

pub const GENERATOR_CHECKPOINT_KIND: &str = "resolution-generator";

/// Vertex feature width: position plus the segment's resolution entry.
const NODE_INPUT_DIM: usize = 4;

/// Hyperparameters of the resolution generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub hidden: usize,
    /// Message-passing rounds.
    pub layers: usize,
    /// Diffusion steps.
    pub t_steps: usize,
    pub schedule: ScheduleKind,
    /// Binarization threshold applied after denormalization.
    pub threshold: f64,
    /// Encoding used to build the conditioning query graph.
    pub graph: GraphParams,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            layers: 3,
            graph: GraphParams::default(),
            t_steps: 100,
            schedule: ScheduleKind::Cosine,
            threshold: 0.5,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 {
            return Err(Error::Config("generator needs positive hidden size and layers".into()));
        }
        if self.t_steps == 0 {
            return Err(Error::Config("generator needs at least one diffusion step".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "binarization threshold {} must lie strictly inside (0, 1)",
                self.threshold
            )));
        }
        Ok(())
    }

    pub fn gnn_config(&self) -> GnnConfig {
        GnnConfig {
            node_in: NODE_INPUT_DIM,
            global_in: 1,
            hidden: self.hidden,
            layers: self.layers,
            node_out: 1,
        }
    }
}

/// Prepared conditioning for one planning query: the full-resolution
/// start–goal graph plus the per-vertex segment grouping used both to route
/// resolution entries into vertex features and to pool scalar outputs back
/// into a per-segment vector.
#[derive(Clone, Debug)]
pub struct QueryCondition {
    graph: Graph,
    /// Per-vertex segment id; `None` for the end-effector vertices.
    groups: Vec<Option<usize>>,
    n_segments: usize,
}

impl QueryCondition {
    pub fn new(query: &QueryGraph) -> Result<Self> {
        let graph = query.full_graph();
        let n_segments = graph.n_segments;
        let groups: Vec<Option<usize>> = graph.vertices.iter().map(|v| v.segment).collect();
        let mut seen = vec![false; n_segments];
        for seg in groups.iter().flatten() {
            seen[*seg] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Construction(format!(
                "segment {missing} has no vertices in the conditioning graph"
            )));
        }
        Ok(Self { graph, groups, n_segments })
    }

    pub fn n_segments(&self) -> usize {
        self.n_segments
    }

    /// Vertex features for one diffusion level: position concatenated with
    /// the vertex's segment entry of `omega_t`. End-effector vertices are
    /// always represented exactly, so their resolution slot is pinned to one.
    fn node_inputs(&self, omega_t: &[f64]) -> Tensor {
        let rows: Vec<Vec<f64>> = self
            .graph
            .vertices
            .iter()
            .zip(&self.groups)
            .map(|(v, seg)| {
                let w = seg.map_or(1.0, |s| omega_t[s]);
                vec![v.pos.x, v.pos.y, v.pos.z, w]
            })
            .collect();
        Tensor::from_rows(&rows)
    }
}

/// Run the denoiser under any execution context; returns the per-segment
/// noise estimate as a `n_segments x 1` handle.
pub(crate) fn denoise_forward<C: Ctx>(
    ctx: &mut C,
    params: &GnnParams,
    cond: &QueryCondition,
    omega_t: &[f64],
    t: usize,
    t_steps: usize,
) -> Result<C::H> {
    if omega_t.len() != cond.n_segments {
        return Err(Error::Dimension(format!(
            "resolution vector length {} does not match {} segments",
            omega_t.len(),
            cond.n_segments
        )));
    }
    if t == 0 || t > t_steps {
        return Err(Error::Config(format!("diffusion step {t} outside 1..={t_steps}")));
    }
    let node_inputs = cond.node_inputs(omega_t);
    let global = Tensor::from_rows(&[vec![t as f64 / t_steps as f64]]);
    let out = gnn_forward(ctx, params, &cond.graph, &node_inputs, &global)?;
    Ok(ctx.group_mean_rows(&out.node_decoded, &cond.groups, cond.n_segments))
}

/// Diffusion model generating resolution vectors for planning queries.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    pub params: GnnParams,
}

impl Generator {
    pub fn init(cfg: GeneratorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = GnnParams::init(cfg.gnn_config(), seed)?;
        // Zero the final decoder layer so a fresh generator estimates zero
        // noise. Random heads can start with estimates orders of magnitude
        // above the targets, which stalls early training; zeroing the head
        // makes the initial loss exactly the noise energy while gradients
        // still reach every weight.
        let head = params.set.get("dec.w2").clone();
        params.set.insert("dec.w2", Tensor::zeros(head.rows(), head.cols()));
        Ok(Self { cfg, params })
    }

    /// The noise schedule this generator was configured with. Training and
    /// sampling both derive it from the config so they can never disagree.
    pub fn schedule(&self) -> DiffusionSchedule {
        make_schedule(self.cfg.t_steps, self.cfg.schedule)
            .expect("validated config yields a schedule")
    }

    /// Noise estimate for a noised resolution vector at diffusion step `t`.
    pub fn predict_noise(
        &self,
        cond: &QueryCondition,
        omega_t: &[f64],
        t: usize,
    ) -> Result<Vec<f64>> {
        let out = denoise_forward(&mut Eval, &self.params, cond, omega_t, t, self.cfg.t_steps)?;
        Ok(out.data().to_vec())
    }

    /// Draw one binary resolution vector for a prepared conditioning graph.
    pub fn sample_from_condition(
        &self,
        cond: &QueryCondition,
        rng: &mut ChaCha20Rng,
    ) -> Result<ResolutionVector> {
        let schedule = self.schedule();
        let k = cond.n_segments;
        let mut x: Vec<f64> = (0..k).map(|_| StandardNormal.sample(rng)).collect();
        for t in (1..=schedule.t_steps()).rev() {
            let eps_hat = self.predict_noise(cond, &x, t)?;
            let noise: Vec<f64> = if t > 1 {
                (0..k).map(|_| StandardNormal.sample(rng)).collect()
            } else {
                vec![0.0; k]
            };
            x = schedule.denoise_step(&x, &eps_hat, t, &noise);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "resolution sampling produced non-finite values at step {t}"
                )));
            }
        }
        // Denormalize from ±1 back to the unit interval, then commit to a
        // binary choice per segment.
        Ok(ResolutionVector(
            x.iter()
                .map(|v| {
                    let w = (v + 1.0) / 2.0;
                    if w >= self.cfg.threshold {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect(),
        ))
    }

    /// Draw one binary resolution vector for a raw start/goal pair. Builds
    /// the conditioning graph internally, so callers timing the end-to-end
    /// cost of using the generator should time this call.
    pub fn sample(
        &self,
        s1: &State,
        s_goal: &State,
        dt: f64,
        rng: &mut ChaCha20Rng,
    ) -> Result<ResolutionVector> {
        let query = build_query_graph(s1, s_goal, &self.cfg.graph, dt)?;
        let cond = QueryCondition::new(&query)?;
        self.sample_from_condition(&cond, rng)
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let ckpt = Checkpoint::new(
            GENERATOR_CHECKPOINT_KIND,
            serde_json::to_value(&self.cfg)?,
            serde_json::Value::Null,
            self.params.set.clone(),
        );
        ckpt.save(path)
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        ckpt.expect_kind(GENERATOR_CHECKPOINT_KIND)?;
        let cfg: GeneratorConfig = serde_json::from_value(ckpt.config.clone())?;
        cfg.validate()?;
        Ok(Self { params: GnnParams { cfg: cfg.gnn_config(), set: ckpt.tensors }, cfg })
    }
}
