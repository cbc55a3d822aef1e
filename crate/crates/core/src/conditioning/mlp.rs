use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gelu, gelu_grad, relu, relu_grad, Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => relu(x),
            Activation::Gelu => gelu(x),
        }
    }

    pub fn grad(self, x: f64) -> f64 {
        match self {
            Activation::Relu => relu_grad(x),
            Activation::Gelu => gelu_grad(x),
        }
    }
}

/// `y = W2 act(W1 x + b1) + b2`, weights stored `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp2 {
    pub w1: Matrix,
    pub b1: Vector,
    pub w2: Matrix,
    pub b2: Vector,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct Mlp2Cache {
    pub input: Matrix,
    pub pre: Matrix,
    pub hidden: Matrix,
}

impl Mlp2 {
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, activation: Activation, rng: &mut R) -> Self {
        let s1 = 1.0 / (input as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        Mlp2 {
            w1: Matrix::random_uniform(hidden, input, s1, rng),
            b1: Vector::random_uniform(hidden, s1, rng),
            w2: Matrix::random_uniform(output, hidden, s2, rng),
            b2: Vector::random_uniform(output, s2, rng),
            activation,
        }
    }

    /// Same as [`Mlp2::init`] with the output layer zeroed, so the network
    /// starts as the constant zero map.
    pub fn init_zero_output<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, activation: Activation, rng: &mut R) -> Self {
        let mut m = Mlp2::init(input, hidden, output, activation, rng);
        m.w2 = Matrix::zeros(output, hidden);
        m.b2 = Vector::zeros(output);
        m
    }

    pub fn zeros_like(&self) -> Self {
        Mlp2 {
            w1: Matrix::zeros(self.w1.rows(), self.w1.cols()),
            b1: Vector::zeros(self.b1.len()),
            w2: Matrix::zeros(self.w2.rows(), self.w2.cols()),
            b2: Vector::zeros(self.b2.len()),
            activation: self.activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.rows()
    }

    fn check_shapes(&self) -> Result<()> {
        if self.b1.len() != self.w1.rows() || self.w2.cols() != self.w1.rows() || self.b2.len() != self.w2.rows() {
            return Err(Error::shape(
                "Mlp2",
                format!("w1 {} / b1 {}", self.w1.shape_str(), self.b1.len()),
                format!("w2 {} / b2 {}", self.w2.shape_str(), self.b2.len()),
            ));
        }
        Ok(())
    }

    /// Applies the network to every row of `x`.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, Mlp2Cache)> {
        self.check_shapes()?;
        if x.cols() != self.input_dim() {
            return Err(Error::shape("Mlp2::forward", x.shape_str(), format!("input dim {}", self.input_dim())));
        }
        let mut pre = x.matmul_t(&self.w1)?;
        pre.add_row_vector(self.b1.as_slice())?;
        let hidden = pre.map(|v| self.activation.apply(v));
        let mut out = hidden.matmul_t(&self.w2)?;
        out.add_row_vector(self.b2.as_slice())?;
        Ok((
            out,
            Mlp2Cache {
                input: x.clone(),
                pre,
                hidden,
            },
        ))
    }

    pub fn apply_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (y, _) = self.forward(&Matrix::from_vec(1, x.len(), x.to_vec())?)?;
        Ok(y.into_vec())
    }

    /// Returns `(d_input, parameter gradients)`.
    pub fn backward(&self, cache: &Mlp2Cache, d_out: &Matrix) -> Result<(Matrix, Mlp2)> {
        if d_out.shape() != (cache.input.rows(), self.output_dim()) {
            return Err(Error::shape(
                "Mlp2::backward",
                format!("{}x{}", cache.input.rows(), self.output_dim()),
                d_out.shape_str(),
            ));
        }
        let d_w2 = d_out.t_matmul(&cache.hidden)?;
        let d_b2 = d_out.column_sums();
        let mut d_pre = d_out.matmul(&self.w2)?;
        for (d, &p) in d_pre.data_mut().iter_mut().zip(cache.pre.data()) {
            *d *= self.activation.grad(p);
        }
        let d_w1 = d_pre.t_matmul(&cache.input)?;
        let d_b1 = d_pre.column_sums();
        let d_in = d_pre.matmul(&self.w1)?;
        Ok((
            d_in,
            Mlp2 {
                w1: d_w1,
                b1: Vector::new(d_b1),
                w2: d_w2,
                b2: Vector::new(d_b2),
                activation: self.activation,
            },
        ))
    }
}
