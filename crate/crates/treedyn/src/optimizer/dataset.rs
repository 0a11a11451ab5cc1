//! Chained-optimization dataset construction with incremental persistence.
//!
//! For every generated planning query the builder runs Stage 1 (CMA-ES on
//! the dynamics objective) then Stage 2 (closed-loop reduction) and appends
//! the resulting record to `records.jsonl` inside the dataset directory. A
//! `config.json` stamp written at the start pins the configuration hash, so
//! an interrupted build can be resumed by calling it again on the same
//! directory: finished queries are skipped by id. The final pass rewrites
//! the records sorted by query id and writes `manifest.json`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::queries::{generate_queries, PlanningQuery, QueryGenConfig};
use super::stages::{
    stage1_dynamics_opt, stage2_closedloop_opt, ResolutionRecord, Stage1Config, Stage2Config,
};
use crate::dynamics::DynModel;
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::sim::{build_world, WorldConfig};

/// Version stamp carried by resolution-dataset manifests.
pub const RESOLUTION_SCHEMA_VERSION: u32 = 1;

/// Settings of one dataset build.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetConfig {
    /// Finished records are appended to disk after batches of this size.
    pub flush_every: usize,
    pub gen: QueryGenConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            gen: QueryGenConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            flush_every: 4,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.flush_every == 0 {
            return Err(Error::Config("flush_every must be positive".into()));
        }
        self.gen.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()
    }
}

/// Identity stamp written when a build starts; resuming requires a match.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
struct BuildStamp {
    schema_version: u32,
    config_hash: String,
    seed: u64,
    n_queries: usize,
}

/// Index of a finished resolution dataset.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ResolutionManifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    /// Queries the build was asked for.
    pub n_queries: usize,
    /// Records actually present.
    pub count: usize,
    /// Ids of queries whose optimization failed, sorted.
    pub failed: Vec<String>,
}

fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Hash of everything that shapes the dataset: world, build settings,
/// request size, seed, and the dynamics model (architecture and weights).
fn config_hash(
    world_cfg: &WorldConfig,
    model: &DynModel,
    cfg: &DatasetConfig,
    n_queries: usize,
    seed: u64,
) -> Result<String> {
    let key = serde_json::to_vec(&(
        world_cfg,
        &model.cfg,
        &model.params.set,
        cfg,
        n_queries,
        seed,
    ))?;
    Ok(hex_digest(&key))
}

fn records_path(dir: &Path) -> std::path::PathBuf {
    dir.join("records.jsonl")
}

fn read_records_file(path: &Path) -> Result<Vec<ResolutionRecord>> {
    let mut records = Vec::new();
    let reader = BufReader::new(std::fs::File::open(path)?);
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ResolutionRecord = serde_json::from_str(&line)?;
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}

fn append_records(path: &Path, records: &[ResolutionRecord]) -> Result<()> {
    let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = BufWriter::new(file);
    for record in records {
        serde_json::to_writer(&mut w, record)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Build (or resume) a resolution dataset under `dir`: generate `n_queries`
/// queries, chain Stage 1 and Stage 2 per query, and persist the records.
/// Queries whose optimization fails are logged and listed in the manifest;
/// the dataset stays valid without them.
pub fn build_dataset<P: AsRef<Path>>(
    dir: P,
    world_cfg: &WorldConfig,
    model: &DynModel,
    n_queries: usize,
    cfg: &DatasetConfig,
    seed: u64,
) -> Result<ResolutionManifest> {
    if n_queries == 0 {
        return Err(Error::Config("requested an empty dataset".into()));
    }
    cfg.validate()?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;

    let hash = config_hash(world_cfg, model, cfg, n_queries, seed)?;
    let stamp = BuildStamp {
        schema_version: RESOLUTION_SCHEMA_VERSION,
        config_hash: hash.clone(),
        seed,
        n_queries,
    };
    let stamp_path = dir.join("config.json");
    if stamp_path.exists() {
        let existing: BuildStamp = serde_json::from_reader(std::fs::File::open(&stamp_path)?)?;
        if existing != stamp {
            return Err(Error::Config(format!(
                "dataset at {} was started with a different configuration",
                dir.display()
            )));
        }
    } else {
        std::fs::write(&stamp_path, serde_json::to_string_pretty(&stamp)?)?;
    }

    let (world, initial) = build_world(world_cfg)?;
    let queries = generate_queries(&world, &initial, &cfg.gen, n_queries, seed)?;

    let rec_path = records_path(dir);
    let mut records: Vec<ResolutionRecord> =
        if rec_path.exists() { read_records_file(&rec_path)? } else { Vec::new() };
    let done: BTreeSet<String> = records.iter().map(|r| r.query.id.clone()).collect();
    let mut failed: BTreeSet<String> = BTreeSet::new();

    let pending: Vec<(usize, &PlanningQuery)> = queries
        .iter()
        .enumerate()
        .filter(|(_, q)| !done.contains(&q.id))
        .collect();
    log::info!(
        "dataset {}: {} of {} queries already done, {} pending",
        dir.display(),
        done.len(),
        queries.len(),
        pending.len()
    );

    for chunk in pending.chunks(cfg.flush_every) {
        let outcomes: Vec<(String, Option<ResolutionRecord>)> = chunk
            .par_iter()
            .map(|(idx, query)| {
                let result = optimize_query(&world, model, query, cfg, seed, *idx);
                match result {
                    Ok(record) => (query.id.clone(), Some(record)),
                    Err(e) => {
                        log::warn!("query {} failed: {e}", query.id);
                        (query.id.clone(), None)
                    }
                }
            })
            .collect();
        let fresh: Vec<ResolutionRecord> =
            outcomes.iter().filter_map(|(_, r)| r.clone()).collect();
        append_records(&rec_path, &fresh)?;
        records.extend(fresh);
        failed.extend(
            outcomes.into_iter().filter(|(_, r)| r.is_none()).map(|(id, _)| id),
        );
    }

    // Canonical final layout: records sorted by query id, then the manifest.
    records.sort_by(|a, b| a.query.id.cmp(&b.query.id));
    let mut w = BufWriter::new(std::fs::File::create(&rec_path)?);
    for record in &records {
        serde_json::to_writer(&mut w, record)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;

    let manifest = ResolutionManifest {
        schema_version: RESOLUTION_SCHEMA_VERSION,
        config_hash: hash,
        seed,
        n_queries,
        count: records.len(),
        failed: failed.into_iter().collect(),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Chain both stages for one query. Seeds derive from the query's position
/// in the generated list, so resumed builds reproduce the original records.
fn optimize_query(
    world: &crate::sim::World,
    model: &DynModel,
    query: &PlanningQuery,
    cfg: &DatasetConfig,
    seed: u64,
    idx: usize,
) -> Result<ResolutionRecord> {
    let stage1 = stage1_dynamics_opt(
        model,
        query,
        world.cfg.dt,
        &cfg.stage1,
        derive_seed(seed, "dataset-stage1", idx as u64),
    )?;
    let (record, _steps) = stage2_closedloop_opt(
        world,
        model,
        query,
        &stage1,
        &cfg.stage2,
        derive_seed(seed, "dataset-stage2", idx as u64),
    )?;
    Ok(record)
}

/// Read a dataset directory back, validating the manifest and every record.
pub fn read_resolution_dataset<P: AsRef<Path>>(
    dir: P,
) -> Result<(Vec<ResolutionRecord>, ResolutionManifest)> {
    let dir = dir.as_ref();
    let manifest: ResolutionManifest =
        serde_json::from_reader(std::fs::File::open(dir.join("manifest.json"))?)?;
    if manifest.schema_version != RESOLUTION_SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "resolution dataset schema {} unsupported (expected {RESOLUTION_SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    let records = read_records_file(&records_path(dir))?;
    if records.len() != manifest.count {
        return Err(Error::Checkpoint(format!(
            "dataset holds {} records, manifest says {}",
            records.len(),
            manifest.count
        )));
    }
    let ids: BTreeSet<&str> = records.iter().map(|r| r.query.id.as_str()).collect();
    if ids.len() != records.len() {
        return Err(Error::Checkpoint("duplicate query ids in dataset".into()));
    }
    Ok((records, manifest))
}
