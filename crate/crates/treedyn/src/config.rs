//! Whole-pipeline configuration.
//!
//! One structured text (TOML) file with a section per stage. The graph
//! encoding lives in a single `[graph]` section and is injected into the
//! dynamics-model and generator architectures, so the pipeline cannot train
//! and plan against different encodings by accident. A SHA-256 hash of the
//! whole configuration stamps every artifact manifest.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{GenTrainConfig, GeneratorConfig, ScheduleKind};
use crate::dynamics::{CollectConfig, DynModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, Method};
use crate::graph::GraphParams;
use crate::optimizer::{DatasetConfig, QueryGenConfig};
use crate::sim::WorldConfig;

/// Random-rollout demo settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoSection {
    /// Steps of seeded exploration to simulate and export.
    pub steps: usize,
}

impl Default for DemoSection {
    fn default() -> Self {
        Self { steps: 300 }
    }
}

/// Dynamics-network architecture; the shared `[graph]` section completes it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DynArch {
    pub hidden: usize,
    /// Message-passing rounds.
    pub layers: usize,
}

impl Default for DynArch {
    fn default() -> Self {
        let d = DynModelConfig::default();
        Self { hidden: d.hidden, layers: d.layers }
    }
}

/// Data collection and model fitting for the learned dynamics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DynamicsSection {
    /// Interaction records to collect.
    pub n_interactions: usize,
    pub collect: CollectConfig,
    pub model: DynArch,
    pub train: TrainConfig,
}

impl Default for DynamicsSection {
    fn default() -> Self {
        Self {
            n_interactions: 20_000,
            collect: CollectConfig::default(),
            model: DynArch::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Held-out planning queries used by the evaluation stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuerySection {
    pub n: usize,
    pub gen: QueryGenConfig,
}

impl Default for QuerySection {
    fn default() -> Self {
        Self { n: 100, gen: QueryGenConfig::default() }
    }
}

/// Resolution-dataset construction (the two-stage optimizer).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResolutionSection {
    pub n_queries: usize,
    #[serde(flatten)]
    pub dataset: DatasetConfig,
}

impl Default for ResolutionSection {
    fn default() -> Self {
        Self { n_queries: 200, dataset: DatasetConfig::default() }
    }
}

/// Generator architecture; the shared `[graph]` section completes it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenArch {
    pub hidden: usize,
    /// Message-passing rounds.
    pub layers: usize,
    /// Diffusion steps.
    pub t_steps: usize,
    pub schedule: ScheduleKind,
    /// Binarization threshold applied after denormalization.
    pub threshold: f64,
}

impl Default for GenArch {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        Self {
            hidden: g.hidden,
            layers: g.layers,
            t_steps: g.t_steps,
            schedule: g.schedule,
            threshold: g.threshold,
        }
    }
}

/// Generator architecture and training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSection {
    pub model: GenArch,
    pub train: GenTrainConfig,
}

/// Baseline comparison settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub methods: Vec<Method>,
    #[serde(flatten)]
    pub run: EvalConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { methods: Method::ALL.to_vec(), run: EvalConfig::default() }
    }
}

/// Every stage's settings in one file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub world: WorldConfig,
    /// Graph encoding shared by every stage.
    pub graph: GraphParams,
    pub demo: DemoSection,
    pub dynamics: DynamicsSection,
    pub queries: QuerySection,
    pub resolution: ResolutionSection,
    pub generator: GeneratorSection,
    pub eval: EvalSection,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config encode: {e}")))
    }

    /// Dynamics-model settings with the shared encoding filled in.
    pub fn dyn_model_cfg(&self) -> DynModelConfig {
        DynModelConfig {
            hidden: self.dynamics.model.hidden,
            layers: self.dynamics.model.layers,
            graph: self.graph.clone(),
        }
    }

    /// Generator settings with the shared encoding filled in.
    pub fn generator_cfg(&self) -> GeneratorConfig {
        GeneratorConfig {
            hidden: self.generator.model.hidden,
            layers: self.generator.model.layers,
            t_steps: self.generator.model.t_steps,
            schedule: self.generator.model.schedule,
            threshold: self.generator.model.threshold,
            graph: self.graph.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.graph.n_high == 0 || self.graph.knn == 0 || self.graph.vel_history == 0 {
            return Err(Error::Config(
                "graph encoding needs positive n_high, knn, and vel_history".into(),
            ));
        }
        if self.demo.steps == 0 {
            return Err(Error::Config("demo needs at least one step".into()));
        }
        if self.dynamics.n_interactions == 0 {
            return Err(Error::Config("dynamics stage needs at least one interaction".into()));
        }
        if self.dynamics.collect.steps_per_trajectory == 0 {
            return Err(Error::Config("steps_per_trajectory must be positive".into()));
        }
        if self.dynamics.model.hidden == 0 || self.dynamics.model.layers == 0 {
            return Err(Error::Config(
                "dynamics model needs positive hidden size and layers".into(),
            ));
        }
        if self.dynamics.train.batch_size == 0 || self.dynamics.train.epochs == 0 {
            return Err(Error::Config("dynamics training needs positive epochs and batch".into()));
        }
        if self.queries.n == 0 {
            return Err(Error::Config("held-out query set must be nonempty".into()));
        }
        self.queries.gen.validate()?;
        if self.resolution.n_queries == 0 {
            return Err(Error::Config("resolution dataset must be nonempty".into()));
        }
        self.resolution.dataset.validate()?;
        self.generator_cfg().validate()?;
        if self.generator.train.batch_size == 0
            || self.generator.train.epochs == 0
            || self.generator.train.patience == 0
            || self.generator.train.val_draws == 0
        {
            return Err(Error::Config(
                "generator training needs positive epochs, batch, patience, and draws".into(),
            ));
        }
        if self.eval.methods.is_empty() {
            return Err(Error::Config("evaluation needs at least one method".into()));
        }
        if !(self.eval.run.mask_delta > 0.0) {
            return Err(Error::Config("evaluation mask delta must be positive".into()));
        }
        self.eval.run.mppi.validate()?;
        // The simulated world itself: building it runs the full checks.
        crate::sim::build_world(&self.world).map(drop)
    }

    /// Hex SHA-256 over the canonical (JSON) encoding; stamped into every
    /// artifact manifest so artifacts and settings can be matched up later.
    pub fn hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        let digest = Sha256::digest(&bytes);
        Ok(digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip_through_toml() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string().unwrap();
        let back = PipelineConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_files_inherit_defaults() {
        let cfg = PipelineConfig::from_toml(
            r#"
            [world]
            branch_depth = 2

            [dynamics.model]
            hidden = 16
            "#,
        )
        .unwrap();
        assert_eq!(cfg.world.branch_depth, 2);
        assert_eq!(cfg.dynamics.model.hidden, 16);
        // Untouched sections keep their defaults.
        assert_eq!(cfg.queries.n, 100);
        assert_eq!(cfg.generator.model.t_steps, 100);
        assert_eq!(cfg.eval.methods.len(), 4);
    }

    #[test]
    fn the_shared_encoding_reaches_both_models() {
        let cfg = PipelineConfig::from_toml(
            r#"
            [graph]
            n_high = 3
            knn = 5
            vel_history = 2
            "#,
        )
        .unwrap();
        assert_eq!(cfg.dyn_model_cfg().graph.n_high, 3);
        assert_eq!(cfg.generator_cfg().graph.knn, 5);
    }

    #[test]
    fn unknown_sections_and_bad_values_are_rejected() {
        assert!(PipelineConfig::from_toml("[wrld]\nseed = 1\n").is_err());
        assert!(PipelineConfig::from_toml("[demo]\nsteps = 0\n").is_err());
        assert!(PipelineConfig::from_toml("[world]\ndt = -0.1\n").is_err());
        assert!(PipelineConfig::from_toml("[eval]\nmethods = []\n").is_err());
    }

    #[test]
    fn the_hash_tracks_every_section() {
        let base = PipelineConfig::default();
        let h0 = base.hash().unwrap();
        assert_eq!(h0.len(), 64);
        assert_eq!(base.hash().unwrap(), h0);

        let mut touched = base.clone();
        touched.generator.model.t_steps = 50;
        assert_ne!(touched.hash().unwrap(), h0);

        let mut touched = base;
        touched.resolution.dataset.stage2.eps_tol = 0.01;
        assert_ne!(touched.hash().unwrap(), h0);
    }
}
