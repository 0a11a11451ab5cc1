//! Execution contexts for network forward passes.
//!
//! The same generic forward code runs in two modes: [`Eval`] computes values
//! directly for inference, while [`Tape`] additionally records every
//! primitive so [`Tape::backward`] can replay it in reverse and produce exact
//! gradients for all touched parameters. Keeping one forward implementation
//! guarantees the trained network and the deployed one agree bit for bit.

use std::collections::BTreeMap;

use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

/// Abstract execution context; `H` is the handle to an intermediate value.
pub trait Ctx {
    type H: Clone;

    /// Introduce a non-trainable value.
    fn input(&mut self, t: Tensor) -> Self::H;
    /// Introduce a trainable parameter; the name keys its gradient.
    fn param(&mut self, name: &str, t: &Tensor) -> Self::H;
    fn matmul(&mut self, a: &Self::H, b: &Self::H) -> Self::H;
    fn add_bias_row(&mut self, a: &Self::H, bias: &Self::H) -> Self::H;
    fn relu(&mut self, a: &Self::H) -> Self::H;
    fn add(&mut self, a: &Self::H, b: &Self::H) -> Self::H;
    fn sub(&mut self, a: &Self::H, b: &Self::H) -> Self::H;
    fn scale(&mut self, a: &Self::H, s: f64) -> Self::H;
    fn concat_cols(&mut self, parts: &[Self::H]) -> Self::H;
    fn gather_rows(&mut self, a: &Self::H, idx: &[usize]) -> Self::H;
    fn scatter_add_rows(&mut self, a: &Self::H, idx: &[usize], out_rows: usize) -> Self::H;
    fn mean_rows(&mut self, a: &Self::H) -> Self::H;
    fn group_mean_rows(&mut self, a: &Self::H, groups: &[Option<usize>], n_groups: usize) -> Self::H;
    fn repeat_row(&mut self, a: &Self::H, n: usize) -> Self::H;
    /// `Σ_i w_i ‖pred_i - target_i‖²` as a scalar handle.
    fn weighted_sq_err(&mut self, pred: &Self::H, target: &Tensor, row_weights: &[f64]) -> Self::H;
    /// Current value behind a handle.
    fn value(&self, h: &Self::H) -> Tensor;
}

/// Plain inference: handles are the tensors themselves.
#[derive(Default)]
pub struct Eval;

impl Ctx for Eval {
    type H = Tensor;

    fn input(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn param(&mut self, _name: &str, t: &Tensor) -> Tensor {
        t.clone()
    }

    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        tensor::matmul(a, b)
    }

    fn add_bias_row(&mut self, a: &Tensor, bias: &Tensor) -> Tensor {
        tensor::add_bias_row(a, bias)
    }

    fn relu(&mut self, a: &Tensor) -> Tensor {
        tensor::relu(a)
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        tensor::add(a, b)
    }

    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        tensor::sub(a, b)
    }

    fn scale(&mut self, a: &Tensor, s: f64) -> Tensor {
        tensor::scale(a, s)
    }

    fn concat_cols(&mut self, parts: &[Tensor]) -> Tensor {
        let refs: Vec<&Tensor> = parts.iter().collect();
        tensor::concat_cols(&refs)
    }

    fn gather_rows(&mut self, a: &Tensor, idx: &[usize]) -> Tensor {
        tensor::gather_rows(a, idx)
    }

    fn scatter_add_rows(&mut self, a: &Tensor, idx: &[usize], out_rows: usize) -> Tensor {
        tensor::scatter_add_rows(a, idx, out_rows)
    }

    fn mean_rows(&mut self, a: &Tensor) -> Tensor {
        tensor::mean_rows(a)
    }

    fn group_mean_rows(&mut self, a: &Tensor, groups: &[Option<usize>], n_groups: usize) -> Tensor {
        tensor::group_mean_rows(a, groups, n_groups)
    }

    fn repeat_row(&mut self, a: &Tensor, n: usize) -> Tensor {
        tensor::repeat_row(a, n)
    }

    fn weighted_sq_err(&mut self, pred: &Tensor, target: &Tensor, w: &[f64]) -> Tensor {
        tensor::weighted_sq_err(pred, target, w)
    }

    fn value(&self, h: &Tensor) -> Tensor {
        h.clone()
    }
}

enum Op {
    Leaf,
    Matmul(usize, usize),
    AddBiasRow(usize, usize),
    Relu(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    ConcatCols(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    ScatterAddRows(usize, Vec<usize>),
    MeanRows(usize),
    GroupMeanRows(usize, Vec<Option<usize>>, usize),
    RepeatRow(usize),
    WeightedSqErr { pred: usize, target: Tensor, weights: Vec<f64> },
}

/// Recording context: node id handles, values cached for the reverse pass.
#[derive(Default)]
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Tensor>,
    param_names: Vec<Option<String>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, value: Tensor) -> usize {
        self.ops.push(op);
        self.values.push(value);
        self.param_names.push(None);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Reverse-mode gradients of the scalar at `loss` with respect to every
    /// parameter recorded in the forward pass, keyed by parameter name.
    pub fn backward(&self, loss: usize) -> Result<BTreeMap<String, Tensor>> {
        let val = &self.values[loss];
        if (val.rows(), val.cols()) != (1, 1) {
            return Err(Error::Dimension(format!(
                "backward needs a scalar loss, got {}x{}",
                val.rows(),
                val.cols()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[loss] = Some(Tensor::scalar_value(1.0));

        fn accum(slot: &mut Option<Tensor>, g: Tensor) {
            *slot = Some(match slot.take() {
                Some(prev) => tensor::add(&prev, &g),
                None => g,
            });
        }

        for id in (0..self.ops.len()).rev() {
            let Some(gout) = grads[id].clone() else { continue };
            match &self.ops[id] {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let ga = tensor::matmul(&gout, &tensor::transpose(&self.values[*b]));
                    let gb = tensor::matmul(&tensor::transpose(&self.values[*a]), &gout);
                    accum(&mut grads[*a], ga);
                    accum(&mut grads[*b], gb);
                }
                Op::AddBiasRow(a, bias) => {
                    accum(&mut grads[*a], gout.clone());
                    // Column sums collapse the broadcast.
                    let mut col = vec![0.0; gout.cols()];
                    for r in 0..gout.rows() {
                        for c in 0..gout.cols() {
                            col[c] += gout.get(r, c);
                        }
                    }
                    accum(&mut grads[*bias], Tensor::from_vec(1, gout.cols(), col));
                }
                Op::Relu(a) => {
                    let x = &self.values[*a];
                    let g = Tensor::from_vec(
                        x.rows(),
                        x.cols(),
                        x.data()
                            .iter()
                            .zip(gout.data().iter())
                            .map(|(&xi, &gi)| if xi > 0.0 { gi } else { 0.0 })
                            .collect(),
                    );
                    accum(&mut grads[*a], g);
                }
                Op::Add(a, b) => {
                    accum(&mut grads[*a], gout.clone());
                    accum(&mut grads[*b], gout);
                }
                Op::Sub(a, b) => {
                    accum(&mut grads[*a], gout.clone());
                    accum(&mut grads[*b], tensor::scale(&gout, -1.0));
                }
                Op::Scale(a, s) => {
                    accum(&mut grads[*a], tensor::scale(&gout, *s));
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0usize;
                    for &p in parts {
                        let w = self.values[p].cols();
                        let mut part = Vec::with_capacity(gout.rows() * w);
                        for r in 0..gout.rows() {
                            for c in 0..w {
                                part.push(gout.get(r, offset + c));
                            }
                        }
                        accum(&mut grads[p], Tensor::from_vec(gout.rows(), w, part));
                        offset += w;
                    }
                }
                Op::GatherRows(a, idx) => {
                    let g = tensor::scatter_add_rows(&gout, idx, self.values[*a].rows());
                    accum(&mut grads[*a], g);
                }
                Op::ScatterAddRows(a, idx) => {
                    accum(&mut grads[*a], tensor::gather_rows(&gout, idx));
                }
                Op::MeanRows(a) => {
                    let n = self.values[*a].rows();
                    let g = tensor::repeat_row(&tensor::scale(&gout, 1.0 / n as f64), n);
                    accum(&mut grads[*a], g);
                }
                Op::GroupMeanRows(a, groups, n_groups) => {
                    let mut counts = vec![0usize; *n_groups];
                    for g in groups.iter().flatten() {
                        counts[*g] += 1;
                    }
                    let src = &self.values[*a];
                    let mut g = vec![0.0; src.rows() * src.cols()];
                    for (r, grp) in groups.iter().enumerate() {
                        if let Some(grp) = *grp {
                            let inv = 1.0 / counts[grp] as f64;
                            for c in 0..src.cols() {
                                g[r * src.cols() + c] = gout.get(grp, c) * inv;
                            }
                        }
                    }
                    accum(&mut grads[*a], Tensor::from_vec(src.rows(), src.cols(), g));
                }
                Op::RepeatRow(a) => {
                    let mut col = vec![0.0; gout.cols()];
                    for r in 0..gout.rows() {
                        for c in 0..gout.cols() {
                            col[c] += gout.get(r, c);
                        }
                    }
                    accum(&mut grads[*a], Tensor::from_vec(1, gout.cols(), col));
                }
                Op::WeightedSqErr { pred, target, weights } => {
                    let p = &self.values[*pred];
                    let s = gout.scalar();
                    let mut g = vec![0.0; p.rows() * p.cols()];
                    for r in 0..p.rows() {
                        let w = weights[r];
                        if w == 0.0 {
                            continue;
                        }
                        for c in 0..p.cols() {
                            g[r * p.cols() + c] = s * 2.0 * w * (p.get(r, c) - target.get(r, c));
                        }
                    }
                    accum(&mut grads[*pred], Tensor::from_vec(p.rows(), p.cols(), g));
                }
            }
        }

        let mut out = BTreeMap::new();
        for (id, name) in self.param_names.iter().enumerate() {
            if let Some(name) = name {
                let g = grads[id]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.values[id].rows(), self.values[id].cols()));
                // A parameter may be read several times under one name (it
                // gets one tape node per read); merge duplicate reads.
                out.entry(name.clone())
                    .and_modify(|prev: &mut Tensor| *prev = tensor::add(prev, &g))
                    .or_insert(g);
            }
        }
        Ok(out)
    }
}

impl Ctx for Tape {
    type H = usize;

    fn input(&mut self, t: Tensor) -> usize {
        self.push(Op::Leaf, t)
    }

    fn param(&mut self, name: &str, t: &Tensor) -> usize {
        let id = self.push(Op::Leaf, t.clone());
        self.param_names[id] = Some(name.to_string());
        id
    }

    fn matmul(&mut self, a: &usize, b: &usize) -> usize {
        let v = tensor::matmul(&self.values[*a], &self.values[*b]);
        self.push(Op::Matmul(*a, *b), v)
    }

    fn add_bias_row(&mut self, a: &usize, bias: &usize) -> usize {
        let v = tensor::add_bias_row(&self.values[*a], &self.values[*bias]);
        self.push(Op::AddBiasRow(*a, *bias), v)
    }

    fn relu(&mut self, a: &usize) -> usize {
        let v = tensor::relu(&self.values[*a]);
        self.push(Op::Relu(*a), v)
    }

    fn add(&mut self, a: &usize, b: &usize) -> usize {
        let v = tensor::add(&self.values[*a], &self.values[*b]);
        self.push(Op::Add(*a, *b), v)
    }

    fn sub(&mut self, a: &usize, b: &usize) -> usize {
        let v = tensor::sub(&self.values[*a], &self.values[*b]);
        self.push(Op::Sub(*a, *b), v)
    }

    fn scale(&mut self, a: &usize, s: f64) -> usize {
        let v = tensor::scale(&self.values[*a], s);
        self.push(Op::Scale(*a, s), v)
    }

    fn concat_cols(&mut self, parts: &[usize]) -> usize {
        let refs: Vec<&Tensor> = parts.iter().map(|&p| &self.values[p]).collect();
        let v = tensor::concat_cols(&refs);
        self.push(Op::ConcatCols(parts.to_vec()), v)
    }

    fn gather_rows(&mut self, a: &usize, idx: &[usize]) -> usize {
        let v = tensor::gather_rows(&self.values[*a], idx);
        self.push(Op::GatherRows(*a, idx.to_vec()), v)
    }

    fn scatter_add_rows(&mut self, a: &usize, idx: &[usize], out_rows: usize) -> usize {
        let v = tensor::scatter_add_rows(&self.values[*a], idx, out_rows);
        self.push(Op::ScatterAddRows(*a, idx.to_vec()), v)
    }

    fn mean_rows(&mut self, a: &usize) -> usize {
        let v = tensor::mean_rows(&self.values[*a]);
        self.push(Op::MeanRows(*a), v)
    }

    fn group_mean_rows(&mut self, a: &usize, groups: &[Option<usize>], n_groups: usize) -> usize {
        let v = tensor::group_mean_rows(&self.values[*a], groups, n_groups);
        self.push(Op::GroupMeanRows(*a, groups.to_vec(), n_groups), v)
    }

    fn repeat_row(&mut self, a: &usize, n: usize) -> usize {
        let v = tensor::repeat_row(&self.values[*a], n);
        self.push(Op::RepeatRow(*a), v)
    }

    fn weighted_sq_err(&mut self, pred: &usize, target: &Tensor, weights: &[f64]) -> usize {
        let v = tensor::weighted_sq_err(&self.values[*pred], target, weights);
        self.push(
            Op::WeightedSqErr { pred: *pred, target: target.clone(), weights: weights.to_vec() },
            v,
        )
    }

    fn value(&self, h: &usize) -> Tensor {
        self.values[*h].clone()
    }
}
