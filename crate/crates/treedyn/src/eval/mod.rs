//! Baseline comparison harness.
//!
//! Runs closed-loop planning over a held-out query set under several
//! resolution-selection methods and collects per-run metrics plus
//! per-method aggregates. Fairness rules: every method sees the same
//! queries, the same planner configuration, and the same per-query planning
//! seed; the generator's sampling overhead (including building its
//! conditioning graph) is counted toward its planning time.
//!
//! Cells run sequentially so wall-clock planning times never include
//! contention between concurrent episodes; the planner parallelizes its
//! rollouts internally.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diffusion::Generator;
use crate::dynamics::DynModel;
use crate::error::{Error, Result};
use crate::graph::ResolutionVector;
use crate::optimizer::PlanningQuery;
use crate::planner::{run_mpc, MppiConfig, OmegaPolicy, DEFAULT_MASK_DELTA};
use crate::rng::{derive_seed, stream_rng};
use crate::sim::World;

/// Resolution-selection strategies under comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Every segment high-resolution.
    Full,
    /// Every segment aggregated.
    Minimal,
    /// The most frequent optimized vector of the training set, reused for
    /// every query.
    Mode,
    /// A fresh sample from the trained generator per query.
    Generator,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Full, Method::Minimal, Method::Mode, Method::Generator];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::Minimal => "minimal",
            Method::Mode => "mode",
            Method::Generator => "generator",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Method::Full),
            "minimal" => Ok(Method::Minimal),
            "mode" => Ok(Method::Mode),
            "generator" => Ok(Method::Generator),
            other => Err(Error::Config(format!(
                "unknown method '{other}' (expected full, minimal, mode, or generator)"
            ))),
        }
    }
}

/// Harness settings shared by every cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Movement threshold defining each query's mask, m.
    pub mask_delta: f64,
    pub mppi: MppiConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { mask_delta: DEFAULT_MASK_DELTA, mppi: MppiConfig::default() }
    }
}

/// One completed (query, method) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub query_id: String,
    pub method: Method,
    pub omega: ResolutionVector,
    /// Final true-state task cost, m.
    pub final_cost: f64,
    /// Encoding + planning seconds; for the generator method this includes
    /// drawing the resolution vector.
    pub plan_time: f64,
    pub n_replans: usize,
    pub vertex_count: usize,
}

/// One failed cell; aggregates skip it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalFailure {
    pub query_id: String,
    pub method: Method,
    pub message: String,
}

/// Box-plot statistics of one metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    /// Lower quartile, median, upper quartile.
    pub quartiles: [f64; 3],
    /// Query ids outside 1.5 IQR of the quartiles.
    pub outliers: Vec<String>,
}

/// Aggregates of one method over its completed rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub runs: usize,
    pub final_cost: MetricStats,
    pub plan_time: MetricStats,
}

/// Full harness output: every row, every failure, per-method aggregates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub failures: Vec<EvalFailure>,
    pub summaries: Vec<MethodSummary>,
}

/// Most frequent exact binary vector; ties prefer fewer high segments, then
/// lexicographic order.
pub fn mode_omega<'a>(
    omegas: impl IntoIterator<Item = &'a ResolutionVector>,
) -> Result<ResolutionVector> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for omega in omegas {
        *counts.entry(omega.binarized().bits()).or_insert(0) += 1;
    }
    counts
        .into_iter()
        .max_by(|(bits_a, n_a), (bits_b, n_b)| {
            let ones = |bits: &str| bits.chars().filter(|&c| c == '1').count();
            // More frequent wins; then fewer ones; then lexicographically
            // smaller. BTreeMap iterates in ascending key order, so
            // max_by keeps the *later* equal element — invert the bit
            // comparison to prefer the smaller pattern.
            n_a.cmp(n_b)
                .then(ones(bits_b).cmp(&ones(bits_a)))
                .then(bits_b.cmp(bits_a))
        })
        .map(|(bits, _)| ResolutionVector::from_bits(&bits).expect("bits round-trip"))
        .ok_or_else(|| Error::Config("cannot take the mode of an empty dataset".into()))
}

/// Run every (query, method) cell and aggregate.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    world: &World,
    model: &DynModel,
    generator: Option<&Generator>,
    mode: Option<&ResolutionVector>,
    queries: &[PlanningQuery],
    methods: &[Method],
    cfg: &EvalConfig,
    seed: u64,
) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::Config("evaluation needs at least one query".into()));
    }
    if methods.is_empty() {
        return Err(Error::Config("evaluation needs at least one method".into()));
    }
    if methods.contains(&Method::Generator) && generator.is_none() {
        return Err(Error::Config("the generator method needs a trained generator".into()));
    }
    if methods.contains(&Method::Mode) && mode.is_none() {
        return Err(Error::Config("the mode method needs the training-set mode vector".into()));
    }
    cfg.mppi.validate()?;

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (qi, query) in queries.iter().enumerate() {
        let k = query.s1.n_segments();
        // One planning seed per query, shared verbatim by every method.
        let mpc_seed = derive_seed(seed, "eval-mpc", qi as u64);
        for &method in methods {
            let mut overhead = 0.0;
            let omega = match method {
                Method::Full => Ok(ResolutionVector::full(k)),
                Method::Minimal => Ok(ResolutionVector::minimal(k)),
                Method::Mode => {
                    let m = mode.expect("checked above");
                    if m.len() == k {
                        Ok(m.clone())
                    } else {
                        Err(Error::Dimension(format!(
                            "mode vector has {} entries for {k} segments",
                            m.len()
                        )))
                    }
                }
                Method::Generator => {
                    let gen = generator.expect("checked above");
                    let mut rng = stream_rng(seed, "eval-generator", qi as u64);
                    let started = Instant::now();
                    let drawn = gen.sample(&query.s1, &query.s_goal, world.cfg.dt, &mut rng);
                    overhead = started.elapsed().as_secs_f64();
                    drawn
                }
            };
            let outcome = omega.and_then(|omega| {
                run_mpc(
                    world,
                    &query.s1,
                    &query.s_goal,
                    &omega,
                    model,
                    &cfg.mppi,
                    cfg.mask_delta,
                    &OmegaPolicy::Fixed,
                    mpc_seed,
                )
            });
            match outcome {
                Ok(episode) => rows.push(EvalRow {
                    query_id: query.id.clone(),
                    method,
                    omega: episode.omega,
                    final_cost: episode.final_cost,
                    plan_time: episode.plan_time + overhead,
                    n_replans: episode.n_replans,
                    vertex_count: episode.vertex_count,
                }),
                Err(e) => {
                    log::warn!("cell ({}, {method}) failed: {e}", query.id);
                    failures.push(EvalFailure {
                        query_id: query.id.clone(),
                        method,
                        message: e.to_string(),
                    });
                }
            }
        }
    }
    let summaries = summarize(&rows, methods);
    Ok(EvalReport { rows, failures, summaries })
}

/// Linear-interpolation quantile of an ascending-sorted slice.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

fn metric_stats(values: &[(f64, &str)]) -> MetricStats {
    let n = values.len() as f64;
    let mean = values.iter().map(|(v, _)| v).sum::<f64>() / n;
    let var = values.iter().map(|(v, _)| (v - mean).powi(2)).sum::<f64>() / n;
    let mut sorted: Vec<f64> = values.iter().map(|(v, _)| *v).collect();
    sorted.sort_by(f64::total_cmp);
    let quartiles = [
        quantile(&sorted, 0.25),
        quantile(&sorted, 0.5),
        quantile(&sorted, 0.75),
    ];
    let iqr = quartiles[2] - quartiles[0];
    let (lo, hi) = (quartiles[0] - 1.5 * iqr, quartiles[2] + 1.5 * iqr);
    let outliers = values
        .iter()
        .filter(|(v, _)| *v < lo || *v > hi)
        .map(|(_, id)| id.to_string())
        .collect();
    MetricStats { mean, std: var.sqrt(), median: quartiles[1], quartiles, outliers }
}

fn summarize(rows: &[EvalRow], methods: &[Method]) -> Vec<MethodSummary> {
    methods
        .iter()
        .filter_map(|&method| {
            let cells: Vec<&EvalRow> = rows.iter().filter(|r| r.method == method).collect();
            if cells.is_empty() {
                return None;
            }
            let costs: Vec<(f64, &str)> =
                cells.iter().map(|r| (r.final_cost, r.query_id.as_str())).collect();
            let times: Vec<(f64, &str)> =
                cells.iter().map(|r| (r.plan_time, r.query_id.as_str())).collect();
            Some(MethodSummary {
                method,
                runs: cells.len(),
                final_cost: metric_stats(&costs),
                plan_time: metric_stats(&times),
            })
        })
        .collect()
}

pub const CSV_HEADER: &str =
    "query_id,method,omega_bits,final_cost_m,plan_time_s,n_replans,vertex_count";

/// One row per completed run, stable column order.
pub fn write_csv<P: AsRef<Path>>(report: &EvalReport, path: P) -> Result<()> {
    if let Some(parent) = path.as_ref().parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = Vec::new();
    writeln!(out, "{CSV_HEADER}")?;
    for r in &report.rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.query_id,
            r.method,
            r.omega.bits(),
            r.final_cost,
            r.plan_time,
            r.n_replans,
            r.vertex_count
        )?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Full report (rows, failures, aggregates) as pretty JSON.
pub fn write_json<P: AsRef<Path>>(report: &EvalReport, path: P) -> Result<()> {
    if let Some(parent) = path.as_ref().parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}

pub fn read_report<P: AsRef<Path>>(path: P) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::DynModelConfig;
    use crate::optimizer::{generate_queries, QueryGenConfig};
    use crate::sim::{build_world, WorldConfig};

    fn rv(bits: &str) -> ResolutionVector {
        ResolutionVector::from_bits(bits).unwrap()
    }

    #[test]
    fn mode_prefers_majority_then_sparsity_then_lexicographic() {
        let majority = [rv("10"), rv("10"), rv("01")];
        assert_eq!(mode_omega(&majority).unwrap(), rv("10"));

        // All distinct: the sparsest pattern wins.
        let distinct = [rv("111"), rv("011"), rv("100")];
        assert_eq!(mode_omega(&distinct).unwrap(), rv("100"));

        // Equal frequency and cardinality: lexicographically smallest.
        let tied = [rv("010"), rv("100")];
        assert_eq!(mode_omega(&tied).unwrap(), rv("010"));

        assert!(mode_omega([].iter()).is_err());
    }

    #[test]
    fn mode_matches_a_sort_and_group_oracle() {
        let mut rng = crate::rng::stream_rng(5, "mode-oracle", 0);
        let omegas: Vec<ResolutionVector> =
            (0..200).map(|_| ResolutionVector::random_binary(4, &mut rng)).collect();
        let got = mode_omega(&omegas).unwrap();

        let mut bits: Vec<String> = omegas.iter().map(|o| o.bits()).collect();
        bits.sort();
        let mut best: Option<(usize, String)> = None;
        let mut i = 0;
        while i < bits.len() {
            let j = bits[i..].iter().take_while(|b| **b == bits[i]).count();
            let ones = bits[i].chars().filter(|&c| c == '1').count();
            let candidate = (j, ones, bits[i].clone());
            let better = match &best {
                None => true,
                Some((n, b)) => {
                    let best_ones = b.chars().filter(|&c| c == '1').count();
                    candidate.0 > *n
                        || (candidate.0 == *n && ones < best_ones)
                        || (candidate.0 == *n && ones == best_ones && candidate.2 < *b)
                }
            };
            if better {
                best = Some((j, bits[i].clone()));
            }
            i += j;
        }
        assert_eq!(got.bits(), best.unwrap().1);
    }

    #[test]
    fn quantiles_interpolate_linearly() {
        let sorted = [1.0, 2.0, 3.0, 4.0];
        assert!((quantile(&sorted, 0.5) - 2.5).abs() < 1e-12);
        assert!((quantile(&sorted, 0.25) - 1.75).abs() < 1e-12);
        assert!((quantile(&sorted, 0.0) - 1.0).abs() < 1e-12);
        assert!((quantile(&sorted, 1.0) - 4.0).abs() < 1e-12);
        let single = [7.0];
        assert!((quantile(&single, 0.75) - 7.0).abs() < 1e-12);
    }

    #[test]
    fn outliers_sit_beyond_the_whiskers() {
        let values: Vec<(f64, &str)> = vec![
            (1.0, "a"),
            (1.1, "b"),
            (1.2, "c"),
            (0.9, "d"),
            (1.05, "e"),
            (9.0, "far"),
        ];
        let stats = metric_stats(&values);
        assert_eq!(stats.outliers, vec!["far".to_string()]);
        assert!(stats.quartiles[0] <= stats.median && stats.median <= stats.quartiles[2]);
    }

    fn eval_fixture() -> (World, crate::sim::State, Vec<PlanningQuery>, DynModel, EvalConfig) {
        let world_cfg = WorldConfig {
            seed: 3,
            branch_depth: 2,
            ee_start: [0.25, 0.0, 0.35],
            ..WorldConfig::default()
        };
        let (world, initial) = build_world(&world_cfg).unwrap();
        let gen_cfg = QueryGenConfig {
            trajectory_steps: 40,
            window_min: 16,
            window_max: 32,
            windows_per_trajectory: 2,
            ..QueryGenConfig::default()
        };
        let queries = generate_queries(&world, &initial, &gen_cfg, 2, 19).unwrap();
        let model =
            DynModel::init(DynModelConfig { hidden: 8, layers: 2, ..Default::default() }, 5)
                .unwrap();
        let cfg = EvalConfig {
            mppi: MppiConfig {
                horizon: 8,
                n_samples: 8,
                replan_interval: 4,
                refine_initial: 2,
                refine_other: 1,
                total_steps: 8,
                ..MppiConfig::default()
            },
            ..EvalConfig::default()
        };
        (world, initial, queries, model, cfg)
    }

    #[test]
    fn single_method_single_query_yields_one_full_resolution_row() {
        let (world, _, queries, mut model, cfg) = eval_fixture();
        model.params.set = model.params.set.zeroed();
        let report = evaluate(
            &world,
            &model,
            None,
            None,
            &queries[..1],
            &[Method::Full],
            &cfg,
            41,
        )
        .unwrap();
        assert_eq!(report.rows.len(), 1);
        assert!(report.failures.is_empty());
        let row = &report.rows[0];
        let k = queries[0].s1.n_segments();
        assert_eq!(row.omega, ResolutionVector::full(k));
        assert_eq!(row.method, Method::Full);
        assert!(row.final_cost.is_finite() && row.plan_time > 0.0);
        assert_eq!(report.summaries.len(), 1);
        assert_eq!(report.summaries[0].runs, 1);
    }

    #[test]
    fn methods_share_seeds_and_reruns_are_identical() {
        let (world, _, queries, mut model, cfg) = eval_fixture();
        model.params.set = model.params.set.zeroed();
        let run = || {
            evaluate(
                &world,
                &model,
                None,
                Some(&rv("0101")),
                &queries,
                &[Method::Full, Method::Minimal, Method::Mode],
                &cfg,
                7,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.rows.len(), queries.len() * 3);
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.query_id, rb.query_id);
            assert_eq!(ra.method, rb.method);
            assert_eq!(ra.omega, rb.omega);
            assert_eq!(ra.final_cost.to_bits(), rb.final_cost.to_bits());
            assert_eq!(ra.vertex_count, rb.vertex_count);
        }
        // Aggregation covers each requested method.
        assert_eq!(a.summaries.len(), 3);
        // Minimal encodes fewer vertices than full on every query.
        for q in &queries {
            let by = |m: Method| {
                a.rows
                    .iter()
                    .find(|r| r.query_id == q.id && r.method == m)
                    .map(|r| r.vertex_count)
                    .unwrap()
            };
            assert!(by(Method::Minimal) < by(Method::Full));
        }
    }

    #[test]
    fn failed_cells_are_recorded_not_fatal() {
        let (world, _, mut queries, mut model, cfg) = eval_fixture();
        model.params.set = model.params.set.zeroed();
        // A goal identical to the start has an empty movement mask, so its
        // cells fail while the healthy query still completes.
        queries[0].s_goal = queries[0].s1.clone();
        let report = evaluate(
            &world,
            &model,
            None,
            None,
            &queries,
            &[Method::Full],
            &cfg,
            13,
        )
        .unwrap();
        assert_eq!(report.rows.len(), queries.len() - 1);
        assert_eq!(report.failures.len(), 1);
        assert_eq!(report.failures[0].query_id, queries[0].id);
        assert_eq!(report.summaries[0].runs, queries.len() - 1);

        // Mode with the wrong width is a per-cell failure too.
        let bad = evaluate(
            &world,
            &model,
            None,
            Some(&rv("01")),
            &queries[1..],
            &[Method::Mode],
            &cfg,
            13,
        )
        .unwrap();
        assert!(bad.rows.is_empty());
        assert_eq!(bad.failures.len(), queries.len() - 1);

        // A missing generator is a configuration error, not a cell failure.
        assert!(evaluate(
            &world,
            &model,
            None,
            None,
            &queries,
            &[Method::Generator],
            &cfg,
            13
        )
        .is_err());
    }

    #[test]
    fn csv_and_json_round_trip() {
        let dir = std::env::temp_dir().join(format!("treedyn-eval-io-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();

        let empty = EvalReport { rows: vec![], failures: vec![], summaries: vec![] };
        let csv_path = dir.join("empty.csv");
        write_csv(&empty, &csv_path).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        assert_eq!(text.trim(), CSV_HEADER);

        let rows = vec![
            EvalRow {
                query_id: "q1".into(),
                method: Method::Full,
                omega: rv("11"),
                final_cost: 0.25,
                plan_time: 1.5,
                n_replans: 2,
                vertex_count: 9,
            },
            EvalRow {
                query_id: "q2".into(),
                method: Method::Full,
                omega: rv("11"),
                final_cost: 0.15,
                plan_time: 1.25,
                n_replans: 2,
                vertex_count: 9,
            },
        ];
        let report = EvalReport {
            summaries: summarize(&rows, &[Method::Full]),
            rows,
            failures: vec![],
        };
        let csv_path = dir.join("report.csv");
        let json_path = dir.join("report.json");
        write_csv(&report, &csv_path).unwrap();
        write_json(&report, &json_path).unwrap();

        let text = std::fs::read_to_string(&csv_path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("q1,full,11,"));

        let back = read_report(&json_path).unwrap();
        assert_eq!(back, report);

        // Quartiles in the JSON match a reference computation on the CSV
        // column.
        let mut costs: Vec<f64> = lines[1..]
            .iter()
            .map(|l| l.split(',').nth(3).unwrap().parse().unwrap())
            .collect();
        costs.sort_by(f64::total_cmp);
        let med = (costs[0] + costs[1]) / 2.0;
        assert!((back.summaries[0].final_cost.median - med).abs() < 1e-12);

        std::fs::remove_dir_all(&dir).unwrap();
    }
}
