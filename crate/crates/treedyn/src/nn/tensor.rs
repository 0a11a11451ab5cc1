//! Dense row-major 2-D tensor and the primitive operations shared by the
//! inference and recording execution contexts.
//!
//! Data sits behind an `Arc` so handles are cheap to clone onto the gradient
//! tape; `Arc::make_mut` gives copy-on-write in-place updates for the
//! optimizer.

use ndarray::ArrayView2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::sync::Arc;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Arc<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct TensorRepr {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Serialize for Tensor {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        TensorRepr { rows: self.rows, cols: self.cols, data: self.data.as_ref().clone() }
            .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Tensor {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = TensorRepr::deserialize(d)?;
        if repr.data.len() != repr.rows * repr.cols {
            return Err(serde::de::Error::custom(format!(
                "tensor data length {} does not match shape {}x{}",
                repr.data.len(),
                repr.rows,
                repr.cols
            )));
        }
        Ok(Tensor { rows: repr.rows, cols: repr.cols, data: Arc::new(repr.data) })
    }
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: Arc::new(vec![0.0; rows * cols]) }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor shape/data mismatch");
        Self { rows, cols, data: Arc::new(data) }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self::from_vec(r, c, data)
    }

    pub fn scalar_value(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    /// He-style Gaussian init with std = sqrt(2 / fan_in).
    pub fn randn_he<R: Rng>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Self {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("valid normal");
        Self::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Value of a 1x1 tensor.
    pub fn scalar(&self) -> f64 {
        assert_eq!((self.rows, self.cols), (1, 1), "not a scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.rows, self.cols), self.data.as_slice()).expect("valid shape")
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul inner dims {}x{} . {}x{}", a.rows, a.cols, b.rows, b.cols);
    let c = a.view().dot(&b.view());
    let rows = c.nrows();
    let cols = c.ncols();
    Tensor::from_vec(rows, cols, c.into_raw_vec_and_offset().0)
}

pub fn transpose(a: &Tensor) -> Tensor {
    let mut out = vec![0.0; a.rows * a.cols];
    for r in 0..a.rows {
        for c in 0..a.cols {
            out[c * a.rows + r] = a.data[r * a.cols + c];
        }
    }
    Tensor::from_vec(a.cols, a.rows, out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!((a.rows, a.cols), (b.rows, b.cols), "add shape mismatch");
    Tensor::from_vec(a.rows, a.cols, a.data.iter().zip(b.data.iter()).map(|(x, y)| x + y).collect())
}

pub fn sub(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!((a.rows, a.cols), (b.rows, b.cols), "sub shape mismatch");
    Tensor::from_vec(a.rows, a.cols, a.data.iter().zip(b.data.iter()).map(|(x, y)| x - y).collect())
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    Tensor::from_vec(a.rows, a.cols, a.data.iter().map(|x| x * s).collect())
}

/// Broadcast-add a 1xC bias row to every row of `a`.
pub fn add_bias_row(a: &Tensor, bias: &Tensor) -> Tensor {
    assert_eq!(bias.rows, 1, "bias must be a row");
    assert_eq!(bias.cols, a.cols, "bias width mismatch");
    let mut out = a.data.as_ref().clone();
    for r in 0..a.rows {
        for c in 0..a.cols {
            out[r * a.cols + c] += bias.data[c];
        }
    }
    Tensor::from_vec(a.rows, a.cols, out)
}

pub fn relu(a: &Tensor) -> Tensor {
    Tensor::from_vec(a.rows, a.cols, a.data.iter().map(|&x| x.max(0.0)).collect())
}

pub fn concat_cols(parts: &[&Tensor]) -> Tensor {
    assert!(!parts.is_empty());
    let rows = parts[0].rows;
    assert!(parts.iter().all(|p| p.rows == rows), "concat_cols row mismatch");
    let cols: usize = parts.iter().map(|p| p.cols).sum();
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for p in parts {
            out.extend_from_slice(&p.data[r * p.cols..(r + 1) * p.cols]);
        }
    }
    Tensor::from_vec(rows, cols, out)
}

pub fn gather_rows(a: &Tensor, idx: &[usize]) -> Tensor {
    let mut out = Vec::with_capacity(idx.len() * a.cols);
    for &i in idx {
        out.extend_from_slice(&a.data[i * a.cols..(i + 1) * a.cols]);
    }
    Tensor::from_vec(idx.len(), a.cols, out)
}

/// `out[j] = Σ over rows r with idx[r] == j of a[r]`, with `out_rows` rows.
pub fn scatter_add_rows(a: &Tensor, idx: &[usize], out_rows: usize) -> Tensor {
    assert_eq!(a.rows, idx.len(), "scatter index length mismatch");
    let mut out = vec![0.0; out_rows * a.cols];
    for (r, &j) in idx.iter().enumerate() {
        for c in 0..a.cols {
            out[j * a.cols + c] += a.data[r * a.cols + c];
        }
    }
    Tensor::from_vec(out_rows, a.cols, out)
}

pub fn mean_rows(a: &Tensor) -> Tensor {
    assert!(a.rows > 0, "mean of zero rows");
    let inv = 1.0 / a.rows as f64;
    let mut out = vec![0.0; a.cols];
    for r in 0..a.rows {
        for c in 0..a.cols {
            out[c] += a.data[r * a.cols + c] * inv;
        }
    }
    Tensor::from_vec(1, a.cols, out)
}

/// Per-group row means; rows with `None` group are skipped. Every group in
/// `0..n_groups` must receive at least one row.
pub fn group_mean_rows(a: &Tensor, groups: &[Option<usize>], n_groups: usize) -> Tensor {
    assert_eq!(a.rows, groups.len(), "group label length mismatch");
    let mut out = vec![0.0; n_groups * a.cols];
    let mut counts = vec![0usize; n_groups];
    for (r, g) in groups.iter().enumerate() {
        if let Some(g) = *g {
            counts[g] += 1;
            for c in 0..a.cols {
                out[g * a.cols + c] += a.data[r * a.cols + c];
            }
        }
    }
    for (g, &cnt) in counts.iter().enumerate() {
        assert!(cnt > 0, "group {g} has no rows");
        let inv = 1.0 / cnt as f64;
        for c in 0..a.cols {
            out[g * a.cols + c] *= inv;
        }
    }
    Tensor::from_vec(n_groups, a.cols, out)
}

pub fn repeat_row(a: &Tensor, n: usize) -> Tensor {
    assert_eq!(a.rows, 1, "repeat_row needs a single row");
    let mut out = Vec::with_capacity(n * a.cols);
    for _ in 0..n {
        out.extend_from_slice(&a.data);
    }
    Tensor::from_vec(n, a.cols, out)
}

/// `Σ_i w_i Σ_j (pred_ij - target_ij)^2` as a 1x1 tensor.
pub fn weighted_sq_err(pred: &Tensor, target: &Tensor, row_weights: &[f64]) -> Tensor {
    assert_eq!((pred.rows, pred.cols), (target.rows, target.cols), "loss shape mismatch");
    assert_eq!(pred.rows, row_weights.len(), "weight length mismatch");
    let mut total = 0.0;
    for r in 0..pred.rows {
        let w = row_weights[r];
        if w == 0.0 {
            continue;
        }
        let mut acc = 0.0;
        for c in 0..pred.cols {
            let d = pred.data[r * pred.cols + c] - target.data[r * pred.cols + c];
            acc += d * d;
        }
        total += w * acc;
    }
    Tensor::scalar_value(total)
}
