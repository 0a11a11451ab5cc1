//! Mini-batch training of the dynamics network.
//!
//! The loss is the mean squared normalized acceleration error over object
//! vertices; the end-effector row carries zero weight because it is moved
//! kinematically at prediction time. Batch members are evaluated in
//! parallel and reduced in index order, so training is bit-reproducible
//! for a fixed seed.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use super::{DynModel, DynModelConfig, InteractionRecord, NormStats};
use crate::error::{Error, Result};
use crate::nn::{gnn_forward, tensor, Adam, Ctx, Eval, GnnParams, Tape, Tensor};
use crate::rng::stream_rng;

/// Optimization hyper-parameters.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Fraction of records held out for validation (at least one record
    /// whenever more than one exists).
    pub val_frac: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 20, lr: 1e-3, batch_size: 16, val_frac: 0.1, seed: 0 }
    }
}

/// Loss trace of one training run.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainReport {
    /// Training-set loss of the freshly initialized model.
    pub initial_loss: f64,
    /// Mean batch loss per epoch.
    pub train_loss: Vec<f64>,
    /// Validation loss per epoch.
    pub val_loss: Vec<f64>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
}

struct Sample<'r> {
    record: &'r InteractionRecord,
    inputs: Tensor,
    targets: Tensor,
    weights: Vec<f64>,
}

/// Fit a dynamics model on `records` and return the parameters with the best
/// validation loss alongside the loss trace.
pub fn train_dynamics(
    records: &[InteractionRecord],
    model_cfg: &DynModelConfig,
    tc: &TrainConfig,
) -> Result<(DynModel, TrainReport)> {
    if records.is_empty() {
        return Err(Error::Training("no interaction records to train on".into()));
    }
    if tc.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    for r in records {
        r.validate()?;
    }

    let mut rng = stream_rng(tc.seed, "train-dynamics", 0);
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut rng);
    let n_val = if records.len() < 2 {
        0
    } else {
        ((records.len() as f64 * tc.val_frac).round() as usize).clamp(1, records.len() - 1)
    };
    let (val_idx, train_idx) = order.split_at(n_val);
    let train_idx = train_idx.to_vec();
    let val_idx = if val_idx.is_empty() { train_idx.clone() } else { val_idx.to_vec() };

    let norm = fit_norm(records, &train_idx, model_cfg)?;
    let mut model = DynModel::init(model_cfg.clone(), tc.seed)?;
    model.norm = norm;

    let train_set = prepare_samples(records, &train_idx, &model);
    let val_set = prepare_samples(records, &val_idx, &model);

    let mut adam = Adam::new(tc.lr);
    let initial_loss = mean_loss(&model.params, &train_set)?;
    let mut best = model.params.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut train_trace = Vec::with_capacity(tc.epochs);
    let mut val_trace = Vec::with_capacity(tc.epochs);

    let mut epoch_order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..tc.epochs {
        epoch_order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in epoch_order.chunks(tc.batch_size) {
            let results: Vec<Result<(f64, BTreeMap<String, Tensor>)>> = chunk
                .par_iter()
                .map(|&i| sample_grads(&model.params, &train_set[i]))
                .collect();
            let mut batch_loss = 0.0;
            let mut summed: Option<BTreeMap<String, Tensor>> = None;
            for res in results {
                let (loss, grads) = res
                    .map_err(|e| Error::Training(format!("epoch {epoch}: {e}")))?;
                batch_loss += loss;
                summed = Some(match summed {
                    None => grads,
                    Some(mut acc) => {
                        for (k, g) in grads {
                            let slot = acc.get_mut(&k).expect("parameter sets agree");
                            *slot = tensor::add(slot, &g);
                        }
                        acc
                    }
                });
            }
            let inv = 1.0 / chunk.len() as f64;
            batch_loss *= inv;
            if !batch_loss.is_finite() {
                return Err(Error::Training(format!(
                    "loss diverged to {batch_loss} in epoch {epoch}"
                )));
            }
            let mean_grads: BTreeMap<String, Tensor> = summed
                .expect("nonempty batch")
                .into_iter()
                .map(|(k, g)| (k, tensor::scale(&g, inv)))
                .collect();
            adam.step(&mut model.params.set, &mean_grads)
                .map_err(|e| Error::Training(format!("epoch {epoch}: {e}")))?;
            epoch_loss += batch_loss;
            batches += 1;
        }
        train_trace.push(epoch_loss / batches.max(1) as f64);

        let val = mean_loss(&model.params, &val_set)
            .map_err(|e| Error::Training(format!("validation, epoch {epoch}: {e}")))?;
        if !val.is_finite() {
            return Err(Error::Training(format!("validation loss {val} in epoch {epoch}")));
        }
        val_trace.push(val);
        if val < best_val {
            best_val = val;
            best = model.params.clone();
            best_epoch = epoch;
        }
    }

    model.params = best;
    let report = TrainReport {
        initial_loss,
        train_loss: train_trace,
        val_loss: val_trace,
        best_epoch,
    };
    Ok((model, report))
}

fn prepare_samples<'r>(
    records: &'r [InteractionRecord],
    idx: &[usize],
    model: &DynModel,
) -> Vec<Sample<'r>> {
    idx.iter()
        .map(|&i| {
            let r = &records[i];
            let raw = model.node_inputs(&r.graph_before, &r.action);
            let inputs = model.norm.normalize_in(&raw).expect("stats match input width");
            let rows: Vec<Vec<f64>> =
                r.target_accels.iter().map(|a| vec![a.x, a.y, a.z]).collect();
            let targets =
                model.norm.normalize_out(&Tensor::from_rows(&rows)).expect("3-wide targets");
            let weights = loss_weights(r);
            Sample { record: r, inputs, targets, weights }
        })
        .collect()
}

fn loss_weights(r: &InteractionRecord) -> Vec<f64> {
    let n = r.graph_before.n_vertices();
    let n_obj = (n - 1).max(1) as f64;
    r.graph_before
        .vertices
        .iter()
        .map(|v| if v.is_end_effector() { 0.0 } else { 1.0 / n_obj })
        .collect()
}

fn fit_norm(
    records: &[InteractionRecord],
    train_idx: &[usize],
    cfg: &DynModelConfig,
) -> Result<NormStats> {
    let probe = DynModel::init(cfg.clone(), 0)?;
    let mut input_rows = Vec::new();
    let mut target_rows = Vec::new();
    for &i in train_idx {
        let r = &records[i];
        let raw = probe.node_inputs(&r.graph_before, &r.action);
        let cols = raw.cols();
        for (row, (v, t)) in
            r.graph_before.vertices.iter().zip(&r.target_accels).enumerate()
        {
            input_rows.push(raw.data()[row * cols..(row + 1) * cols].to_vec());
            if !v.is_end_effector() {
                target_rows.push(vec![t.x, t.y, t.z]);
            }
        }
    }
    NormStats::fit(&input_rows, &target_rows)
}

fn sample_loss<C: Ctx>(
    ctx: &mut C,
    params: &GnnParams,
    s: &Sample<'_>,
) -> Result<C::H> {
    let out = gnn_forward(ctx, params, &s.record.graph_before, &s.inputs, &Tensor::zeros(1, 1))?;
    Ok(ctx.weighted_sq_err(&out.node_decoded, &s.targets, &s.weights))
}

fn sample_grads(
    params: &GnnParams,
    s: &Sample<'_>,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let loss = sample_loss(&mut tape, params, s)?;
    let loss_value = tape.value(&loss).scalar();
    let grads = tape.backward(loss)?;
    Ok((loss_value, grads))
}

fn mean_loss(params: &GnnParams, set: &[Sample<'_>]) -> Result<f64> {
    let losses: Vec<Result<f64>> = set
        .par_iter()
        .map(|s| {
            let mut ev = Eval;
            Ok(sample_loss(&mut ev, params, s)?.scalar())
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / set.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{collect_interactions, CollectConfig};
    use crate::graph::GraphParams;
    use crate::sim::WorldConfig;

    fn small_dataset(n: usize) -> Vec<InteractionRecord> {
        collect_interactions(
            &WorldConfig { seed: 3, ..WorldConfig::default() },
            &GraphParams::default(),
            &CollectConfig::default(),
            n,
            41,
        )
        .unwrap()
    }

    fn small_cfg() -> DynModelConfig {
        DynModelConfig { hidden: 8, layers: 2, graph: GraphParams::default() }
    }

    #[test]
    fn one_epoch_reduces_training_loss() {
        let recs = small_dataset(48);
        let tc = TrainConfig { epochs: 1, lr: 3e-3, batch_size: 16, ..TrainConfig::default() };
        let (_, report) = train_dynamics(&recs, &small_cfg(), &tc).unwrap();
        assert!(
            report.train_loss[0] < report.initial_loss,
            "{} !< {}",
            report.train_loss[0],
            report.initial_loss
        );
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let recs = small_dataset(24);
        let tc = TrainConfig { epochs: 2, lr: 0.0, batch_size: 8, ..TrainConfig::default() };
        let (model, report) = train_dynamics(&recs, &small_cfg(), &tc).unwrap();
        let fresh = DynModel::init(small_cfg(), tc.seed).unwrap();
        assert_eq!(model.params.set, fresh.params.set);
        assert!((report.val_loss[0] - report.val_loss[1]).abs() < 1e-12);
    }

    #[test]
    fn divergence_is_reported_as_training_error() {
        let recs = small_dataset(24);
        let tc = TrainConfig { epochs: 8, lr: 1e12, batch_size: 8, ..TrainConfig::default() };
        match train_dynamics(&recs, &small_cfg(), &tc) {
            Err(Error::Training(_)) => {}
            other => panic!("expected training error, got {other:?}"),
        }
    }

    #[test]
    fn duplicated_records_train_to_similar_validation_loss() {
        let recs = small_dataset(200);
        let doubled: Vec<InteractionRecord> =
            recs.iter().chain(recs.iter()).cloned().collect();
        // Duplication doubles the updates per epoch, so halve the epochs to
        // compare the two runs at the same optimization budget; a wide
        // validation split keeps both means out of small-sample noise.
        let tc = TrainConfig {
            epochs: 16,
            lr: 1e-2,
            batch_size: 16,
            val_frac: 0.25,
            ..TrainConfig::default()
        };
        let tc2 = TrainConfig { epochs: 8, ..tc.clone() };
        let (_, a) = train_dynamics(&recs, &small_cfg(), &tc).unwrap();
        let (_, b) = train_dynamics(&doubled, &small_cfg(), &tc2).unwrap();
        let best_a = a.val_loss[a.best_epoch];
        let best_b = b.val_loss[b.best_epoch];
        assert!(
            (best_a - best_b).abs() <= 0.1 * best_a.max(best_b),
            "val losses {best_a} vs {best_b}"
        );
    }

    #[test]
    fn training_is_deterministic() {
        let recs = small_dataset(24);
        let tc = TrainConfig { epochs: 2, lr: 1e-3, batch_size: 8, ..TrainConfig::default() };
        let (m1, r1) = train_dynamics(&recs, &small_cfg(), &tc).unwrap();
        let (m2, r2) = train_dynamics(&recs, &small_cfg(), &tc).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(m1.params.set, m2.params.set);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(matches!(
            train_dynamics(&[], &small_cfg(), &TrainConfig::default()),
            Err(Error::Training(_))
        ));
    }
}
