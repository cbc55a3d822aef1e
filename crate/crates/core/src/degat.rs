//! The graph attention layer.
//!
//! For every token `i` with neighbours `N(i)`:
//!
//! ```text
//! u_ij = W_proj [x_i ‖ x_j]          e_ij = LeakyReLU(u_ij)
//! l_ij = aᵀ e_ij                     alpha_i = softmax over N(i) of l_i
//! v_j  = W_val x_j                   m_i = Σ_j alpha_ij v_j
//! out_i = x_i + ELU(m_i)
//! ```
//!
//! Edges are stored as flat `L × K` arrays. `W_proj` is split into the
//! halves acting on the centre and on the neighbour, so the projection costs
//! two `L × C` matmuls instead of one per edge.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{knn_graph, Metric, NeighborGraph, TokenGrid};
use crate::numerics::{axpy, dot, elu, elu_grad, leaky_relu, leaky_relu_grad, Matrix, Vector};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;
pub const DEFAULT_LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeGatParams {
    /// `C' × 2C`; columns `..C` act on the centre token, `C..` on the neighbour.
    pub w_proj: Matrix,
    pub a: Vector,
    /// `C × C`.
    pub w_val: Matrix,
    pub leaky_slope: f64,
}

impl DeGatParams {
    /// Uniform init scaled by `1/sqrt(fan_in)`. `proj_dim` is C'.
    pub fn init<R: Rng + ?Sized>(dim: usize, proj_dim: usize, rng: &mut R) -> Self {
        let w_proj = Matrix::random_uniform(proj_dim, 2 * dim, 1.0 / ((2 * dim) as f64).sqrt(), rng);
        let a = Vector::random_uniform(proj_dim, 1.0 / (proj_dim as f64).sqrt(), rng);
        let w_val = Matrix::random_uniform(dim, dim, 1.0 / (dim as f64).sqrt(), rng);
        DeGatParams {
            w_proj,
            a,
            w_val,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    pub fn dim(&self) -> usize {
        self.w_val.rows()
    }

    pub fn proj_dim(&self) -> usize {
        self.w_proj.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.dim();
        if self.w_val.cols() != c {
            return Err(Error::shape("DeGatParams", "square w_val", self.w_val.shape_str()));
        }
        if self.w_proj.cols() != 2 * c {
            return Err(Error::shape(
                "DeGatParams",
                format!("w_proj with {} columns", 2 * c),
                self.w_proj.shape_str(),
            ));
        }
        if self.a.len() != self.proj_dim() {
            return Err(Error::shape(
                "DeGatParams",
                format!("a of length {}", self.proj_dim()),
                format!("length {}", self.a.len()),
            ));
        }
        if !(self.w_proj.is_finite() && self.a.is_finite() && self.w_val.is_finite() && self.leaky_slope.is_finite()) {
            return Err(Error::NonFinite("DeGAT parameters".into()));
        }
        Ok(())
    }

    fn proj_halves(&self) -> (Matrix, Matrix) {
        let c = self.dim();
        (self.w_proj.slice_cols(0, c), self.w_proj.slice_cols(c, 2 * c))
    }
}

/// Forward activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct DeGatCache {
    pub input: Matrix,
    pub graph: NeighborGraph,
    /// `W_proj h_ij`, `L·K × C'` row per edge.
    pub pre_activations: Matrix,
    /// `LeakyReLU(W_proj h_ij)`, same layout.
    pub activations: Matrix,
    pub logits: Vec<f64>,
    pub alpha: Vec<f64>,
    /// `v_j = W_val x_j` for every node.
    pub values: Matrix,
    /// Pre-ELU messages `m_i`.
    pub messages: Matrix,
}

impl DeGatCache {
    pub fn k(&self) -> usize {
        self.graph.k()
    }

    pub fn n_nodes(&self) -> usize {
        self.graph.n_nodes()
    }

    pub fn alpha_row(&self, i: usize) -> &[f64] {
        let k = self.k();
        &self.alpha[i * k..(i + 1) * k]
    }

    /// The concatenated pair feature `[x_i ‖ x_j]` of edge slot `s` of node `i`.
    pub fn mixed_features(&self, i: usize, slot: usize) -> Vec<f64> {
        let j = self.graph.neighbors(i)[slot];
        let mut h = self.input.row(i).to_vec();
        h.extend_from_slice(self.input.row(j));
        h
    }

    /// Dense `L × L` attention matrix with zeros off the neighbour support.
    pub fn attention_matrix(&self) -> Matrix {
        let n = self.n_nodes();
        let mut a = Matrix::zeros(n, n);
        for i in 0..n {
            for (&j, &w) in self.graph.neighbors(i).iter().zip(self.alpha_row(i)) {
                a[(i, j)] = w;
            }
        }
        a
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeGatGrads {
    pub d_w_proj: Matrix,
    pub d_a: Vector,
    pub d_w_val: Matrix,
    pub d_x: Matrix,
}

/// Runs the layer on a feature matrix, building the graph from the same
/// features.
pub fn forward(x: &Matrix, params: &DeGatParams, k: usize, metric: Metric) -> Result<(Matrix, DeGatCache)> {
    params.validate()?;
    if x.cols() != params.dim() {
        return Err(Error::shape("degat_forward", x.shape_str(), format!("params for C = {}", params.dim())));
    }
    x.ensure_finite("DeGAT input")?;
    let graph = knn_graph(x, k, metric)?;
    forward_on_graph(x, graph, params)
}

/// Runs the layer with a fixed topology.
pub fn forward_on_graph(x: &Matrix, graph: NeighborGraph, params: &DeGatParams) -> Result<(Matrix, DeGatCache)> {
    let (n, c) = x.shape();
    if graph.n_nodes() != n {
        return Err(Error::shape("degat_forward", x.shape_str(), format!("graph of {} nodes", graph.n_nodes())));
    }
    let k = graph.k();
    let cp = params.proj_dim();
    let slope = params.leaky_slope;

    let (w_left, w_right) = params.proj_halves();
    let p_left = x.matmul_t(&w_left)?;
    let p_right = x.matmul_t(&w_right)?;
    let values = x.matmul_t(&params.w_val)?;

    let mut pre = Matrix::zeros(n * k, cp);
    let mut act = Matrix::zeros(n * k, cp);
    let mut logits = vec![0.0; n * k];
    let mut alpha = vec![0.0; n * k];
    let mut messages = Matrix::zeros(n, c);
    let mut out = x.clone();

    for i in 0..n {
        let nbrs = graph.neighbors(i);
        for (s, &j) in nbrs.iter().enumerate() {
            let e = i * k + s;
            let u = pre.row_mut(e);
            for ((u, l), r) in u.iter_mut().zip(p_left.row(i)).zip(p_right.row(j)) {
                *u = l + r;
            }
            let a_row = act.row_mut(e);
            for (a, &u) in a_row.iter_mut().zip(pre.row(e)) {
                *a = leaky_relu(u, slope);
            }
            logits[e] = dot(params.a.as_slice(), act.row(e));
        }

        let row_logits = &logits[i * k..(i + 1) * k];
        let max = row_logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for s in 0..k {
            let w = (row_logits[s] - max).exp();
            alpha[i * k + s] = w;
            z += w;
        }
        for w in &mut alpha[i * k..(i + 1) * k] {
            *w /= z;
        }

        let m = messages.row_mut(i);
        for (s, &j) in nbrs.iter().enumerate() {
            axpy(alpha[i * k + s], values.row(j), m);
        }
        for (o, &mv) in out.row_mut(i).iter_mut().zip(messages.row(i)) {
            *o += elu(mv);
        }
    }

    let cache = DeGatCache {
        input: x.clone(),
        graph,
        pre_activations: pre,
        activations: act,
        logits,
        alpha,
        values,
        messages,
    };
    Ok((out, cache))
}

/// Forward pass over a [`TokenGrid`].
pub fn degat_forward(tokens: &TokenGrid, params: &DeGatParams, k: usize, metric: Metric) -> Result<(Matrix, DeGatCache)> {
    forward(&tokens.features, params, k, metric)
}

pub fn degat_backward(cache: &DeGatCache, params: &DeGatParams, upstream: &Matrix) -> Result<DeGatGrads> {
    backward(cache, params, upstream, None)
}

/// Backward pass. `d_alpha`, when given, is an extra gradient arriving
/// directly on the attention weights (edge layout), e.g. from a log-affinity
/// attention bias. Topology is treated as constant.
pub fn backward(cache: &DeGatCache, params: &DeGatParams, upstream: &Matrix, d_alpha: Option<&[f64]>) -> Result<DeGatGrads> {
    let (n, c) = cache.input.shape();
    let k = cache.k();
    let cp = params.proj_dim();
    if params.dim() != c || cache.pre_activations.cols() != cp || cache.values.cols() != params.w_val.rows() {
        return Err(Error::shape(
            "degat_backward",
            format!("cache for C = {c}, C' = {}", cache.pre_activations.cols()),
            format!("params for C = {}, C' = {cp}", params.dim()),
        ));
    }
    if upstream.shape() != (n, c) {
        return Err(Error::shape("degat_backward", cache.input.shape_str(), upstream.shape_str()));
    }
    if let Some(da) = d_alpha {
        if da.len() != n * k {
            return Err(Error::shape("degat_backward", format!("{} edges", n * k), format!("{} alpha gradients", da.len())));
        }
    }
    let slope = params.leaky_slope;
    let a = params.a.as_slice();

    let mut d_x = upstream.clone();
    let mut d_values = Matrix::zeros(n, c);
    let mut d_left = Matrix::zeros(n, cp);
    let mut d_right = Matrix::zeros(n, cp);
    let mut d_a = vec![0.0; cp];
    let mut d_m = vec![0.0; c];
    let mut d_alpha_row = vec![0.0; k];
    let mut d_u = vec![0.0; cp];

    for i in 0..n {
        let nbrs = cache.graph.neighbors(i);
        for ((dm, &g), &m) in d_m.iter_mut().zip(upstream.row(i)).zip(cache.messages.row(i)) {
            *dm = g * elu_grad(m);
        }
        let alpha = cache.alpha_row(i);
        for (s, &j) in nbrs.iter().enumerate() {
            axpy(alpha[s], &d_m, d_values.row_mut(j));
            d_alpha_row[s] = dot(&d_m, cache.values.row(j)) + d_alpha.map_or(0.0, |da| da[i * k + s]);
        }
        let mean: f64 = alpha.iter().zip(&d_alpha_row).map(|(w, d)| w * d).sum();
        for (s, &j) in nbrs.iter().enumerate() {
            let e = i * k + s;
            let d_logit = alpha[s] * (d_alpha_row[s] - mean);
            if d_logit == 0.0 {
                continue;
            }
            axpy(d_logit, cache.activations.row(e), &mut d_a);
            for ((du, &ai), &u) in d_u.iter_mut().zip(a).zip(cache.pre_activations.row(e)) {
                *du = d_logit * ai * leaky_relu_grad(u, slope);
            }
            axpy(1.0, &d_u, d_left.row_mut(i));
            axpy(1.0, &d_u, d_right.row_mut(j));
        }
    }

    let d_w_val = d_values.t_matmul(&cache.input)?;
    d_x.add_assign(&d_values.matmul(&params.w_val)?)?;

    let (w_left, w_right) = params.proj_halves();
    let d_w_left = d_left.t_matmul(&cache.input)?;
    let d_w_right = d_right.t_matmul(&cache.input)?;
    d_x.add_assign(&d_left.matmul(&w_left)?)?;
    d_x.add_assign(&d_right.matmul(&w_right)?)?;

    let d_w_proj = Matrix::from_fn(cp, 2 * c, |r, col| {
        if col < c {
            d_w_left[(r, col)]
        } else {
            d_w_right[(r, col - c)]
        }
    });

    Ok(DeGatGrads {
        d_w_proj,
        d_a: Vector::new(d_a),
        d_w_val,
        d_x,
    })
}

/// Column mean of the refined features.
pub fn pooled_prior(x_out: &Matrix) -> Result<Vector> {
    if x_out.rows() == 0 {
        return Err(Error::invalid("pooled prior of zero tokens"));
    }
    let n = x_out.rows() as f64;
    Ok(Vector::new(x_out.column_sums().into_iter().map(|s| s / n).collect()))
}

/// Sparse `B_ij = ln(max(alpha_ij, eps))` on graph edges; zero elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct LogAffinityBias {
    pub graph: NeighborGraph,
    pub values: Vec<f64>,
    pub eps: f64,
}

impl LogAffinityBias {
    pub fn to_dense(&self) -> Matrix {
        let n = self.graph.n_nodes();
        let k = self.graph.k();
        let mut b = Matrix::zeros(n, n);
        for i in 0..n {
            for (s, &j) in self.graph.neighbors(i).iter().enumerate() {
                b[(i, j)] = self.values[i * k + s];
            }
        }
        b
    }

    /// Pulls a dense `L × L` bias gradient back onto the attention weights.
    /// Clamped edges get zero gradient.
    pub fn alpha_gradient(&self, cache: &DeGatCache, d_bias: &Matrix) -> Vec<f64> {
        let k = self.graph.k();
        let mut out = vec![0.0; cache.alpha.len()];
        for i in 0..self.graph.n_nodes() {
            for (s, &j) in self.graph.neighbors(i).iter().enumerate() {
                let w = cache.alpha[i * k + s];
                if w >= self.eps {
                    out[i * k + s] = d_bias[(i, j)] / w;
                }
            }
        }
        out
    }
}

pub fn affinity_to_log_bias(cache: &DeGatCache, eps: f64) -> Result<LogAffinityBias> {
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("log-affinity clamp must be positive, got {eps}")));
    }
    Ok(LogAffinityBias {
        graph: cache.graph.clone(),
        values: cache.alpha.iter().map(|&w| w.max(eps).ln()).collect(),
        eps,
    })
}
