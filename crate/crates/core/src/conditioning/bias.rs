//! Attention biases computed from pairwise feature-space distances.
//!
//! Two generators share the same log-distance preprocessing:
//! a bucketed lookup table (`K_b × H` learnable entries) and a small MLP
//! mapping a continuous coordinate in `[-1, 1]` to one bias per head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{Mlp2, Mlp2Cache};
use crate::error::{Error, Result};
use crate::numerics::{euclidean_distance, Matrix};

pub const DEFAULT_BUCKETS: usize = 8;
pub const BUCKET_EPS: f64 = 1e-8;

/// Per-head `L × L` additive logit bias.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasMatrix {
    pub heads: Vec<Matrix>,
}

impl BiasMatrix {
    pub fn zeros(n_heads: usize, rows: usize, cols: usize) -> Self {
        BiasMatrix {
            heads: vec![Matrix::zeros(rows, cols); n_heads],
        }
    }

    /// The same matrix on every head.
    pub fn broadcast(m: &Matrix, n_heads: usize) -> Self {
        BiasMatrix {
            heads: vec![m.clone(); n_heads],
        }
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn add_assign(&mut self, other: &BiasMatrix) -> Result<()> {
        if self.n_heads() != other.n_heads() {
            return Err(Error::shape("BiasMatrix::add", format!("{} heads", self.n_heads()), format!("{} heads", other.n_heads())));
        }
        for (a, b) in self.heads.iter_mut().zip(&other.heads) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    /// Places each head into the lower-right block of a `(offset+L)²` matrix,
    /// leaving the leading `offset` rows and columns at zero.
    pub fn padded(&self, offset: usize) -> BiasMatrix {
        BiasMatrix {
            heads: self
                .heads
                .iter()
                .map(|h| {
                    let n = h.rows() + offset;
                    Matrix::from_fn(n, n, |r, c| if r < offset || c < offset { 0.0 } else { h[(r - offset, c - offset)] })
                })
                .collect(),
        }
    }
}

/// Drops the leading `offset` rows and columns of every head.
pub fn unpad(heads: &[Matrix], offset: usize) -> Vec<Matrix> {
    heads
        .iter()
        .map(|h| Matrix::from_fn(h.rows() - offset, h.cols() - offset, |r, c| h[(r + offset, c + offset)]))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasTable {
    pub n_buckets: usize,
    pub n_heads: usize,
    /// `n_buckets × n_heads`.
    pub table: Matrix,
}

impl BiasTable {
    pub fn zeros(n_buckets: usize, n_heads: usize) -> Self {
        BiasTable {
            n_buckets,
            n_heads,
            table: Matrix::zeros(n_buckets, n_heads),
        }
    }

    pub fn init<R: Rng + ?Sized>(n_buckets: usize, n_heads: usize, scale: f64, rng: &mut R) -> Self {
        BiasTable {
            n_buckets,
            n_heads,
            table: Matrix::random_uniform(n_buckets, n_heads, scale, rng),
        }
    }
}

pub fn pairwise_distances(features: &Matrix) -> Matrix {
    let n = features.rows();
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = euclidean_distance(features.row(i), features.row(j));
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    d
}

/// Bucket index for every ordered pair, row-major `L × L`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BucketIndex {
    pub n: usize,
    pub idx: Vec<usize>,
}

impl BucketIndex {
    pub fn get(&self, i: usize, j: usize) -> usize {
        self.idx[i * self.n + j]
    }
}

/// `log(d+1)`, normalised by its maximum plus `eps`, floored into `n_buckets`
/// bins and clamped to the last one.
pub fn bucket_indices(features: &Matrix, n_buckets: usize) -> Result<BucketIndex> {
    if n_buckets == 0 {
        return Err(Error::invalid("bias table needs at least one bucket"));
    }
    features.ensure_finite("bias features")?;
    let n = features.rows();
    let logd = pairwise_distances(features).map(|d| d.ln_1p());
    let max = logd.data().iter().copied().fold(0.0, f64::max);
    let kb = n_buckets as f64;
    let idx = logd
        .data()
        .iter()
        .map(|&v| {
            let ratio = v / (max + BUCKET_EPS);
            (ratio * kb).floor().clamp(0.0, kb - 1.0) as usize
        })
        .collect();
    Ok(BucketIndex { n, idx })
}

pub fn lookup_bias(index: &BucketIndex, table: &BiasTable) -> Result<BiasMatrix> {
    if table.table.shape() != (table.n_buckets, table.n_heads) {
        return Err(Error::shape(
            "bucket_bias",
            format!("{}x{} table", table.n_buckets, table.n_heads),
            table.table.shape_str(),
        ));
    }
    if let Some(&bad) = index.idx.iter().find(|&&b| b >= table.n_buckets) {
        return Err(Error::invalid(format!("bucket {bad} out of range for {} buckets", table.n_buckets)));
    }
    let n = index.n;
    Ok(BiasMatrix {
        heads: (0..table.n_heads)
            .map(|h| Matrix::from_fn(n, n, |i, j| table.table[(index.get(i, j), h)]))
            .collect(),
    })
}

pub fn bucket_bias(features: &Matrix, table: &BiasTable) -> Result<(BiasMatrix, BucketIndex)> {
    let index = bucket_indices(features, table.n_buckets)?;
    Ok((lookup_bias(&index, table)?, index))
}

/// Scatters per-pair bias gradients into the table rows of their buckets.
pub fn bias_table_gradient(d_bias: &[Matrix], index: &BucketIndex, n_buckets: usize) -> Result<Matrix> {
    let mut grad = Matrix::zeros(n_buckets, d_bias.len());
    for (h, d) in d_bias.iter().enumerate() {
        if d.shape() != (index.n, index.n) {
            return Err(Error::shape("bias_table_gradient", format!("{0}x{0} pairs", index.n), d.shape_str()));
        }
        for i in 0..index.n {
            for j in 0..index.n {
                grad[(index.get(i, j), h)] += d[(i, j)];
            }
        }
    }
    Ok(grad)
}

/// The continuous coordinate `2·clamp(log(d+1)/log(d_max+1), 0, 1) − 1`.
/// All-zero distances map to `-1` everywhere.
pub fn distance_coordinates(features: &Matrix) -> Result<Matrix> {
    features.ensure_finite("bias features")?;
    let d = pairwise_distances(features);
    let d_max = d.data().iter().copied().fold(0.0, f64::max);
    let denom = d_max.ln_1p();
    Ok(d.map(|v| {
        let delta = if denom > 0.0 { v.ln_1p() / denom } else { 0.0 };
        2.0 * delta.clamp(0.0, 1.0) - 1.0
    }))
}

#[derive(Debug, Clone)]
pub struct MlpBiasCache {
    pub n: usize,
    pub coords: Matrix,
    pub mlp: Mlp2Cache,
}

pub fn mlp_bias_forward(features: &Matrix, mlp: &Mlp2) -> Result<(BiasMatrix, MlpBiasCache)> {
    if mlp.input_dim() != 1 {
        return Err(Error::shape("mlp_bias", "MLP with scalar input", format!("input dim {}", mlp.input_dim())));
    }
    let coords = distance_coordinates(features)?;
    let n = coords.rows();
    let inputs = Matrix::from_vec(n * n, 1, coords.data().to_vec())?;
    let (out, cache) = mlp.forward(&inputs)?;
    let heads = (0..mlp.output_dim())
        .map(|h| Matrix::from_fn(n, n, |i, j| out[(i * n + j, h)]))
        .collect();
    Ok((BiasMatrix { heads }, MlpBiasCache { n, coords, mlp: cache }))
}

pub fn mlp_bias(features: &Matrix, mlp: &Mlp2) -> Result<BiasMatrix> {
    mlp_bias_forward(features, mlp).map(|(b, _)| b)
}

/// Gradient of the bias MLP's parameters given per-head bias gradients.
pub fn mlp_bias_backward(mlp: &Mlp2, cache: &MlpBiasCache, d_bias: &[Matrix]) -> Result<Mlp2> {
    let n = cache.n;
    if d_bias.len() != mlp.output_dim() {
        return Err(Error::shape("mlp_bias_backward", format!("{} heads", mlp.output_dim()), format!("{} gradients", d_bias.len())));
    }
    let d_out = Matrix::from_fn(n * n, d_bias.len(), |e, h| d_bias[h][(e / n, e % n)]);
    let (_, grads) = mlp.backward(&cache.mlp, &d_out)?;
    Ok(grads)
}
