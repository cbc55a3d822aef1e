//! Scaled dot-product attention with an additive pre-softmax bias, and the
//! multi-head projection wrapper used for self- and cross-attention.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::bias::BiasMatrix;
use crate::error::{Error, Result};
use crate::numerics::{dot, softmax_in_place, Matrix, Vector};

#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub q: Vec<Matrix>,
    pub k: Vec<Matrix>,
    pub v: Vec<Matrix>,
    /// Per-head `L_q × L_k` softmax probabilities.
    pub probs: Vec<Matrix>,
}

#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub d_q: Vec<Matrix>,
    pub d_k: Vec<Matrix>,
    pub d_v: Vec<Matrix>,
    /// Gradient on the pre-softmax logits, which is also the bias gradient.
    pub d_bias: Vec<Matrix>,
}

fn check_heads(q: &[Matrix], k: &[Matrix], v: &[Matrix], bias: Option<&BiasMatrix>) -> Result<()> {
    if q.is_empty() || q.len() != k.len() || q.len() != v.len() {
        return Err(Error::shape(
            "biased_attention",
            format!("{} query heads", q.len()),
            format!("{} key / {} value heads", k.len(), v.len()),
        ));
    }
    for ((qh, kh), vh) in q.iter().zip(k).zip(v) {
        if qh.cols() != kh.cols() || kh.rows() != vh.rows() || vh.cols() != v[0].cols() || qh.rows() != q[0].rows() {
            return Err(Error::shape(
                "biased_attention",
                format!("Q {} K {}", qh.shape_str(), kh.shape_str()),
                format!("V {}", vh.shape_str()),
            ));
        }
    }
    if let Some(b) = bias {
        if b.n_heads() != q.len() {
            return Err(Error::shape("biased_attention", format!("{} heads", q.len()), format!("bias with {} heads", b.n_heads())));
        }
        for (h, bh) in b.heads.iter().enumerate() {
            if bh.shape() != (q[h].rows(), k[h].rows()) {
                return Err(Error::shape(
                    "biased_attention",
                    format!("{}x{} logits", q[h].rows(), k[h].rows()),
                    format!("bias {}", bh.shape_str()),
                ));
            }
        }
    }
    Ok(())
}

/// `softmax(Q Kᵀ / sqrt(d) + B) V` per head, heads concatenated along columns.
pub fn biased_attention(q: &[Matrix], k: &[Matrix], v: &[Matrix], bias: Option<&BiasMatrix>) -> Result<Matrix> {
    attention_forward(q, k, v, bias).map(|(out, _)| out)
}

pub fn attention_forward(q: &[Matrix], k: &[Matrix], v: &[Matrix], bias: Option<&BiasMatrix>) -> Result<(Matrix, AttentionCache)> {
    check_heads(q, k, v, bias)?;
    let n_heads = q.len();
    let (lq, dh) = q[0].shape();
    let dv = v[0].cols();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Matrix::zeros(lq, n_heads * dv);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let mut p = q[h].matmul_t(&k[h])?;
        for r in 0..lq {
            let row = p.row_mut(r);
            for (c, s) in row.iter_mut().enumerate() {
                *s *= scale;
                if let Some(b) = bias {
                    *s += b.heads[h][(r, c)];
                }
            }
            softmax_in_place(row);
        }
        let o = p.matmul(&v[h])?;
        for r in 0..lq {
            out.row_mut(r)[h * dv..(h + 1) * dv].copy_from_slice(o.row(r));
        }
        probs.push(p);
    }
    Ok((
        out,
        AttentionCache {
            q: q.to_vec(),
            k: k.to_vec(),
            v: v.to_vec(),
            probs,
        },
    ))
}

pub fn attention_backward(cache: &AttentionCache, d_out: &Matrix) -> Result<AttentionGrads> {
    let n_heads = cache.q.len();
    let (lq, dh) = cache.q[0].shape();
    let dv = cache.v[0].cols();
    if d_out.shape() != (lq, n_heads * dv) {
        return Err(Error::shape("attention_backward", format!("{lq}x{}", n_heads * dv), d_out.shape_str()));
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let mut grads = AttentionGrads {
        d_q: Vec::with_capacity(n_heads),
        d_k: Vec::with_capacity(n_heads),
        d_v: Vec::with_capacity(n_heads),
        d_bias: Vec::with_capacity(n_heads),
    };
    for h in 0..n_heads {
        let d_o = d_out.slice_cols(h * dv, (h + 1) * dv);
        let p = &cache.probs[h];
        let d_v = p.t_matmul(&d_o)?;
        let d_p = d_o.matmul_t(&cache.v[h])?;
        let mut d_s = Matrix::zeros(p.rows(), p.cols());
        for r in 0..p.rows() {
            let inner = dot(p.row(r), d_p.row(r));
            for ((ds, &pv), &dpv) in d_s.row_mut(r).iter_mut().zip(p.row(r)).zip(d_p.row(r)) {
                *ds = pv * (dpv - inner);
            }
        }
        let d_q = d_s.matmul(&cache.k[h])?.scale(scale);
        let d_k = d_s.t_matmul(&cache.q[h])?.scale(scale);
        grads.d_q.push(d_q);
        grads.d_k.push(d_k);
        grads.d_v.push(d_v);
        grads.d_bias.push(d_s);
    }
    Ok(grads)
}

/// Multi-head attention with input projections and an output projection.
/// All weights are `C × C`, stored `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub n_heads: usize,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub b_o: Vector,
}

#[derive(Debug, Clone)]
pub struct MhaCache {
    pub x_q: Matrix,
    pub x_kv: Matrix,
    pub attn: AttentionCache,
    pub heads_out: Matrix,
}

impl MultiHeadAttention {
    pub fn init<R: Rng + ?Sized>(dim: usize, n_heads: usize, rng: &mut R) -> Result<Self> {
        if n_heads == 0 || !dim.is_multiple_of(n_heads) {
            return Err(Error::invalid(format!("{n_heads} heads do not divide dimension {dim}")));
        }
        let s = 1.0 / (dim as f64).sqrt();
        Ok(MultiHeadAttention {
            n_heads,
            w_q: Matrix::random_uniform(dim, dim, s, rng),
            w_k: Matrix::random_uniform(dim, dim, s, rng),
            w_v: Matrix::random_uniform(dim, dim, s, rng),
            w_o: Matrix::random_uniform(dim, dim, s, rng),
            b_o: Vector::zeros(dim),
        })
    }

    /// Output projection zeroed: the layer initially outputs exactly zero.
    pub fn init_zero_output<R: Rng + ?Sized>(dim: usize, n_heads: usize, rng: &mut R) -> Result<Self> {
        let mut m = MultiHeadAttention::init(dim, n_heads, rng)?;
        m.w_o = Matrix::zeros(dim, dim);
        Ok(m)
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.dim();
        MultiHeadAttention {
            n_heads: self.n_heads,
            w_q: Matrix::zeros(d, d),
            w_k: Matrix::zeros(d, d),
            w_v: Matrix::zeros(d, d),
            w_o: Matrix::zeros(d, d),
            b_o: Vector::zeros(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.n_heads
    }

    fn split_heads(&self, x: &Matrix) -> Vec<Matrix> {
        let dh = self.head_dim();
        (0..self.n_heads).map(|h| x.slice_cols(h * dh, (h + 1) * dh)).collect()
    }

    fn merge_heads(&self, parts: &[Matrix]) -> Matrix {
        let dh = self.head_dim();
        let rows = parts[0].rows();
        Matrix::from_fn(rows, self.dim(), |r, c| parts[c / dh][(r, c % dh)])
    }

    pub fn forward(&self, x_q: &Matrix, x_kv: &Matrix, bias: Option<&BiasMatrix>) -> Result<(Matrix, MhaCache)> {
        if self.n_heads == 0 || !self.dim().is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!("{} heads do not divide dimension {}", self.n_heads, self.dim())));
        }
        let q = self.split_heads(&x_q.matmul_t(&self.w_q)?);
        let k = self.split_heads(&x_kv.matmul_t(&self.w_k)?);
        let v = self.split_heads(&x_kv.matmul_t(&self.w_v)?);
        let (heads_out, attn) = attention_forward(&q, &k, &v, bias)?;
        let mut out = heads_out.matmul_t(&self.w_o)?;
        out.add_row_vector(self.b_o.as_slice())?;
        Ok((
            out,
            MhaCache {
                x_q: x_q.clone(),
                x_kv: x_kv.clone(),
                attn,
                heads_out,
            },
        ))
    }

    /// Returns `(d_x_q, d_x_kv, parameter grads, per-head bias grads)`.
    pub fn backward(&self, cache: &MhaCache, d_out: &Matrix) -> Result<(Matrix, Matrix, MultiHeadAttention, Vec<Matrix>)> {
        let d_w_o = d_out.t_matmul(&cache.heads_out)?;
        let d_b_o = Vector::new(d_out.column_sums());
        let d_heads = d_out.matmul(&self.w_o)?;
        let g = attention_backward(&cache.attn, &d_heads)?;
        let d_q = self.merge_heads(&g.d_q);
        let d_k = self.merge_heads(&g.d_k);
        let d_v = self.merge_heads(&g.d_v);
        let d_w_q = d_q.t_matmul(&cache.x_q)?;
        let d_w_k = d_k.t_matmul(&cache.x_kv)?;
        let d_w_v = d_v.t_matmul(&cache.x_kv)?;
        let d_x_q = d_q.matmul(&self.w_q)?;
        let mut d_x_kv = d_k.matmul(&self.w_k)?;
        d_x_kv.add_assign(&d_v.matmul(&self.w_v)?)?;
        Ok((
            d_x_q,
            d_x_kv,
            MultiHeadAttention {
                n_heads: self.n_heads,
                w_q: d_w_q,
                w_k: d_w_k,
                w_v: d_w_v,
                w_o: d_w_o,
                b_o: d_b_o,
            },
            g.d_bias,
        ))
    }
}
