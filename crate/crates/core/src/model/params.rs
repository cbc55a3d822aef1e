use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{Activation, BiasTable, Mlp2, MultiHeadAttention, DEFAULT_BUCKETS};
use crate::degat::DeGatParams;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

use super::config::ModelConfig;

/// Hidden width of the distance-to-bias MLP.
pub const BIAS_MLP_HIDDEN: usize = 16;

/// A named parameter tensor.
pub struct Tensor<'a> {
    pub path: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub path: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

/// Enumerates parameter tensors in a fixed order under dotted paths.
pub trait Tensors {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<Tensor<'a>>);
    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>);
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Tensors for Matrix {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<Tensor<'a>>) {
        out.push(Tensor {
            path: prefix.to_string(),
            shape: vec![self.rows(), self.cols()],
            data: self.data(),
        });
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
        let shape = vec![self.rows(), self.cols()];
        out.push(TensorMut {
            path: prefix.to_string(),
            shape,
            data: self.data_mut(),
        });
    }
}

impl Tensors for Vector {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<Tensor<'a>>) {
        out.push(Tensor {
            path: prefix.to_string(),
            shape: vec![self.len()],
            data: self.as_slice(),
        });
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
        let shape = vec![self.len()];
        out.push(TensorMut {
            path: prefix.to_string(),
            shape,
            data: self.as_mut_slice(),
        });
    }
}

impl<T: Tensors> Tensors for Vec<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<Tensor<'a>>) {
        for (i, t) in self.iter().enumerate() {
            t.tensors(&join(prefix, &i.to_string()), out);
        }
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
        for (i, t) in self.iter_mut().enumerate() {
            t.tensors_mut(&join(prefix, &i.to_string()), out);
        }
    }
}

macro_rules! composite {
    ($ty:ty { $($field:ident),+ $(,)? }) => {
        impl Tensors for $ty {
            fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<Tensor<'a>>) {
                $( self.$field.tensors(&join(prefix, stringify!($field)), out); )+
            }

            fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
                $( self.$field.tensors_mut(&join(prefix, stringify!($field)), out); )+
            }
        }
    };
}

composite!(Mlp2 { w1, b1, w2, b2 });
composite!(MultiHeadAttention { w_q, w_k, w_v, w_o, b_o });
composite!(DeGatParams { w_proj, a, w_val });
composite!(Block { attn, ffn });
composite!(Linear { w, b });
composite!(Conditioning { additive, film, attn, ffn });
composite!(BiasParams { table, mlp });
composite!(ModelParams { patch_embed, pos, camera_token, degat, blocks, global, conditioning, bias, depth_head, camera_head });

impl Tensors for BiasTable {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<Tensor<'a>>) {
        self.table.tensors(prefix, out);
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
        self.table.tensors_mut(prefix, out);
    }
}

/// `y = W x + b`, `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: Matrix,
    pub b: Vector,
}

impl Linear {
    fn zeros_like(&self) -> Self {
        Linear {
            w: Matrix::zeros(self.w.rows(), self.w.cols()),
            b: Vector::zeros(self.b.len()),
        }
    }
}

/// Self-attention plus feed-forward, both residual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub attn: MultiHeadAttention,
    pub ffn: Mlp2,
}

impl Block {
    fn init(dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Block {
            attn: MultiHeadAttention::init(dim, heads, rng)?,
            ffn: Mlp2::init(dim, 2 * dim, dim, Activation::Gelu, rng),
        })
    }

    fn zeros_like(&self) -> Self {
        Block {
            attn: self.attn.zeros_like(),
            ffn: self.ffn.zeros_like(),
        }
    }
}

/// Camera-token conditioning heads; every variant is allocated so that the
/// initial parameters do not depend on which one is selected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conditioning {
    pub additive: Mlp2,
    pub film: Mlp2,
    pub attn: MultiHeadAttention,
    pub ffn: Mlp2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasParams {
    pub table: BiasTable,
    pub mlp: Mlp2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub patch_embed: Linear,
    /// One learned embedding per token position.
    pub pos: Matrix,
    pub camera_token: Vector,
    pub degat: DeGatParams,
    pub blocks: Vec<Block>,
    /// Cross-frame block, used only when several frames are given.
    pub global: Block,
    pub conditioning: Conditioning,
    pub bias: BiasParams,
    /// Per token: `P²` raw log-depths then `P²` raw log-confidences.
    pub depth_head: Linear,
    /// Outputs 9 rotation entries (row-major), 3 translation, 1 raw focal.
    pub camera_head: Mlp2,
}

pub const CAMERA_OUTPUTS: usize = 13;

impl ModelParams {
    /// Seeded initialization. Conditioning output layers and both bias
    /// parameterizations start at zero, so every optional component is
    /// initially inert.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let c = cfg.dim;
        let pf = cfg.patch_features();
        let p2 = cfg.patch * cfg.patch;
        let patch_embed = Linear {
            w: Matrix::random_uniform(c, pf, 1.0 / (pf as f64).sqrt(), &mut rng),
            b: Vector::zeros(c),
        };
        let pos = Matrix::random_uniform(cfg.n_tokens(), c, 0.1, &mut rng);
        let camera_token = Vector::random_uniform(c, 0.1, &mut rng);
        let degat = DeGatParams::init(c, c, &mut rng);
        let blocks = (0..cfg.blocks).map(|_| Block::init(c, cfg.heads, &mut rng)).collect::<Result<Vec<_>>>()?;
        let global = Block::init(c, cfg.heads, &mut rng)?;
        let conditioning = Conditioning {
            additive: Mlp2::init_zero_output(c, c, c, Activation::Gelu, &mut rng),
            film: Mlp2::init_zero_output(c, c, 2 * c, Activation::Gelu, &mut rng),
            attn: MultiHeadAttention::init_zero_output(c, cfg.heads, &mut rng)?,
            ffn: Mlp2::init_zero_output(c, 2 * c, c, Activation::Gelu, &mut rng),
        };
        let bias = BiasParams {
            table: BiasTable::zeros(DEFAULT_BUCKETS, cfg.heads),
            mlp: Mlp2::init_zero_output(1, BIAS_MLP_HIDDEN, cfg.heads, Activation::Relu, &mut rng),
        };
        let depth_head = Linear {
            w: Matrix::random_uniform(2 * p2, c, 0.1 / (c as f64).sqrt(), &mut rng),
            b: Vector::zeros(2 * p2),
        };
        let camera_head = Mlp2::init(c, c, CAMERA_OUTPUTS, Activation::Gelu, &mut rng);
        Ok(ModelParams {
            patch_embed,
            pos,
            camera_token,
            degat,
            blocks,
            global,
            conditioning,
            bias,
            depth_head,
            camera_head,
        })
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            patch_embed: self.patch_embed.zeros_like(),
            pos: Matrix::zeros(self.pos.rows(), self.pos.cols()),
            camera_token: Vector::zeros(self.camera_token.len()),
            degat: DeGatParams {
                w_proj: Matrix::zeros(self.degat.w_proj.rows(), self.degat.w_proj.cols()),
                a: Vector::zeros(self.degat.a.len()),
                w_val: Matrix::zeros(self.degat.w_val.rows(), self.degat.w_val.cols()),
                leaky_slope: self.degat.leaky_slope,
            },
            blocks: self.blocks.iter().map(Block::zeros_like).collect(),
            global: self.global.zeros_like(),
            conditioning: Conditioning {
                additive: self.conditioning.additive.zeros_like(),
                film: self.conditioning.film.zeros_like(),
                attn: self.conditioning.attn.zeros_like(),
                ffn: self.conditioning.ffn.zeros_like(),
            },
            bias: BiasParams {
                table: BiasTable::zeros(self.bias.table.n_buckets, self.bias.table.n_heads),
                mlp: self.bias.mlp.zeros_like(),
            },
            depth_head: self.depth_head.zeros_like(),
            camera_head: self.camera_head.zeros_like(),
        }
    }

    pub fn named(&self) -> Vec<Tensor<'_>> {
        let mut out = Vec::new();
        self.tensors("", &mut out);
        out
    }

    pub fn named_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        self.tensors_mut("", &mut out);
        out
    }

    pub fn n_values(&self) -> usize {
        self.named().iter().map(|t| t.data.len()).sum()
    }

    /// All values concatenated in tensor order.
    pub fn flatten(&self) -> Vec<f64> {
        self.named().iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    /// Inverse of [`ModelParams::flatten`].
    pub fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.n_values() {
            return Err(Error::shape("assign_flat", format!("{} parameters", self.n_values()), format!("{} values", values.len())));
        }
        let mut at = 0;
        for t in self.named_mut() {
            let n = t.data.len();
            t.data.copy_from_slice(&values[at..at + n]);
            at += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Euclidean norm over every value.
    pub fn norm(&self) -> f64 {
        self.named().iter().flat_map(|t| t.data.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// `p ← p − lr·g` over every tensor.
pub fn sgd_step(params: &mut ModelParams, grads: &ModelParams, lr: f64) -> Result<()> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::invalid(format!("learning rate must be a non-negative number, got {lr}")));
    }
    let g = grads.named();
    let mut p = params.named_mut();
    if g.len() != p.len() {
        return Err(Error::shape("sgd_step", format!("{} tensors", p.len()), format!("{} gradients", g.len())));
    }
    for (p, g) in p.iter_mut().zip(&g) {
        if p.shape != g.shape || p.path != g.path {
            return Err(Error::shape("sgd_step", format!("{} {:?}", p.path, p.shape), format!("{} {:?}", g.path, g.shape)));
        }
        for (pv, gv) in p.data.iter_mut().zip(g.data) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}
