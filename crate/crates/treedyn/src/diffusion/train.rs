//! Training loop for the resolution generator.
//!
//! Each gradient step draws a record, a diffusion level `t`, and fresh
//! Gaussian noise, corrupts the record's normalized resolution vector to
//! level `t`, and regresses the network's per-segment output onto the noise
//! that was injected. Validation uses a fixed set of (record, t, noise)
//! draws so consecutive epochs are comparable; training stops once the
//! validation loss has gone `patience` epochs without improving.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{denoise_forward, DiffusionSchedule, Generator, GeneratorConfig, QueryCondition};
use crate::error::{Error, Result};
use crate::graph::build_query_graph;
use crate::nn::{tensor, Adam, Ctx, Eval, GnnParams, Tape, Tensor};
use crate::optimizer::ResolutionRecord;
use crate::rng::stream_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenTrainConfig {
    /// Upper bound on epochs; validation-based stopping usually ends sooner.
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Fraction of records held out for validation (at least one record
    /// whenever more than one exists).
    pub val_frac: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Fixed (t, noise) draws per validation record.
    pub val_draws: usize,
    pub seed: u64,
}

impl Default for GenTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            lr: 1e-3,
            batch_size: 64,
            val_frac: 0.1,
            patience: 2,
            val_draws: 4,
            seed: 0,
        }
    }
}

/// Loss trace of one generator training run.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GenTrainReport {
    /// Validation loss of the freshly initialized network.
    pub initial_loss: f64,
    /// Mean batch loss per epoch.
    pub train_loss: Vec<f64>,
    /// Validation loss per epoch.
    pub val_loss: Vec<f64>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
    /// Whether validation stopping ended the run before `epochs`.
    pub stopped_early: bool,
}

/// One record prepared for training: its conditioning graph and the
/// normalized target `2 w* - 1`.
struct TrainItem {
    cond: QueryCondition,
    target: Vec<f64>,
}

/// One corruption draw: which item, which level, which noise.
struct NoiseDraw {
    item: usize,
    t: usize,
    eps: Vec<f64>,
}

fn draw_noise(items: &[TrainItem], idx: usize, t_steps: usize, rng: &mut impl Rng) -> NoiseDraw {
    let k = items[idx].target.len();
    NoiseDraw {
        item: idx,
        t: rng.gen_range(1..=t_steps),
        eps: (0..k).map(|_| StandardNormal.sample(rng)).collect(),
    }
}

/// `||eps - eps_hat||^2` for one draw under any execution context.
fn draw_loss<C: Ctx>(
    ctx: &mut C,
    params: &GnnParams,
    items: &[TrainItem],
    schedule: &DiffusionSchedule,
    draw: &NoiseDraw,
) -> Result<C::H> {
    let item = &items[draw.item];
    let noised = schedule.noised(&item.target, &draw.eps, draw.t);
    let pred = denoise_forward(ctx, params, &item.cond, &noised, draw.t, schedule.t_steps())?;
    let k = draw.eps.len();
    let target = Tensor::from_vec(k, 1, draw.eps.clone());
    Ok(ctx.weighted_sq_err(&pred, &target, &vec![1.0; k]))
}

fn draw_grads(
    params: &GnnParams,
    items: &[TrainItem],
    schedule: &DiffusionSchedule,
    draw: &NoiseDraw,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let loss = draw_loss(&mut tape, params, items, schedule, draw)?;
    let value = tape.value(&loss).scalar();
    let grads = tape.backward(loss)?;
    Ok((value, grads))
}

fn mean_loss(
    params: &GnnParams,
    items: &[TrainItem],
    schedule: &DiffusionSchedule,
    draws: &[NoiseDraw],
) -> Result<f64> {
    let total: f64 = draws
        .par_iter()
        .map(|d| draw_loss(&mut Eval, params, items, schedule, d).map(|t| t.scalar()))
        .try_reduce(|| 0.0, |a, b| Ok(a + b))?;
    Ok(total / draws.len().max(1) as f64)
}

fn prepare_items(
    records: &[ResolutionRecord],
    cfg: &GeneratorConfig,
    dt: f64,
) -> Result<Vec<TrainItem>> {
    records
        .iter()
        .map(|r| {
            r.validate()?;
            let query = build_query_graph(&r.query.s1, &r.query.s_goal, &cfg.graph, dt)?;
            let cond = QueryCondition::new(&query)?;
            if r.omega_star.len() != cond.n_segments {
                return Err(Error::Dimension(format!(
                    "record {} carries {} resolution entries for {} segments",
                    r.query.id,
                    r.omega_star.len(),
                    cond.n_segments
                )));
            }
            let target = r.omega_star.0.iter().map(|&w| 2.0 * w - 1.0).collect();
            Ok(TrainItem { cond, target })
        })
        .collect()
}

/// Fit a resolution generator on optimized-resolution records and return the
/// parameters with the best validation loss alongside the loss trace.
pub fn train_generator(
    records: &[ResolutionRecord],
    cfg: &GeneratorConfig,
    dt: f64,
    tc: &GenTrainConfig,
) -> Result<(Generator, GenTrainReport)> {
    if records.is_empty() {
        return Err(Error::Training("no resolution records to train on".into()));
    }
    cfg.validate()?;
    if tc.batch_size == 0 || tc.epochs == 0 || tc.patience == 0 || tc.val_draws == 0 {
        return Err(Error::Config(
            "batch_size, epochs, patience, and val_draws must be positive".into(),
        ));
    }
    if !(0.0..1.0).contains(&tc.val_frac) {
        return Err(Error::Config(format!("val_frac {} outside [0, 1)", tc.val_frac)));
    }

    let items = prepare_items(records, cfg, dt)?;
    let mut gen = Generator::init(cfg.clone(), tc.seed)?;
    let schedule = gen.schedule();

    let mut rng = stream_rng(tc.seed, "train-generator", 0);
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut rng);
    let n_val = if items.len() < 2 {
        0
    } else {
        ((items.len() as f64 * tc.val_frac).round() as usize).clamp(1, items.len() - 1)
    };
    let (val_idx, train_idx) = order.split_at(n_val);
    let train_idx = train_idx.to_vec();
    let val_idx = if val_idx.is_empty() { train_idx.clone() } else { val_idx.to_vec() };

    // Fixed validation draws make the early-stopping signal comparable
    // across epochs.
    let mut val_rng = stream_rng(tc.seed, "train-generator-val", 0);
    let val_draws: Vec<NoiseDraw> = val_idx
        .iter()
        .flat_map(|&i| {
            (0..tc.val_draws)
                .map(|_| draw_noise(&items, i, schedule.t_steps(), &mut val_rng))
                .collect::<Vec<_>>()
        })
        .collect();

    let mut adam = Adam::new(tc.lr);
    let initial_loss = mean_loss(&gen.params, &items, &schedule, &val_draws)?;
    let mut best = gen.params.clone();
    let mut best_val = initial_loss;
    let mut best_epoch = 0usize;
    let mut since_best = 0usize;
    let mut stopped_early = false;
    let mut train_trace = Vec::new();
    let mut val_trace = Vec::new();

    let mut epoch_order = train_idx.clone();
    for epoch in 0..tc.epochs {
        epoch_order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in epoch_order.chunks(tc.batch_size) {
            let draws: Vec<NoiseDraw> = chunk
                .iter()
                .map(|&i| draw_noise(&items, i, schedule.t_steps(), &mut rng))
                .collect();
            let results: Vec<Result<(f64, BTreeMap<String, Tensor>)>> = draws
                .par_iter()
                .map(|d| draw_grads(&gen.params, &items, &schedule, d))
                .collect();
            let mut batch_loss = 0.0;
            let mut summed: Option<BTreeMap<String, Tensor>> = None;
            for res in results {
                let (loss, grads) =
                    res.map_err(|e| Error::Training(format!("epoch {epoch}: {e}")))?;
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
            adam.step(&mut gen.params.set, &mean_grads)
                .map_err(|e| Error::Training(format!("epoch {epoch}: {e}")))?;
            epoch_loss += batch_loss;
            batches += 1;
        }
        train_trace.push(epoch_loss / batches.max(1) as f64);

        let val = mean_loss(&gen.params, &items, &schedule, &val_draws)
            .map_err(|e| Error::Training(format!("validation, epoch {epoch}: {e}")))?;
        if !val.is_finite() {
            return Err(Error::Training(format!("validation loss {val} in epoch {epoch}")));
        }
        val_trace.push(val);
        if val < best_val {
            best_val = val;
            best = gen.params.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= tc.patience {
                stopped_early = true;
                break;
            }
        }
    }

    gen.params = best;
    Ok((
        gen,
        GenTrainReport {
            initial_loss,
            train_loss: train_trace,
            val_loss: val_trace,
            best_epoch,
            stopped_early,
        },
    ))
}
