//! Camera-token conditioning on a pooled image prior or on the patch tokens.
//!
//! Each variant reduces to the identity when its final layer is zero:
//! the additive offset vanishes, FiLM gets `gamma = beta = 0`, and the
//! cross-attention residual branch outputs zero.

use serde::{Deserialize, Serialize};

use super::attention::{MhaCache, MultiHeadAttention};
use super::mlp::{Mlp2, Mlp2Cache};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraToken {
    pub base: Vector,
    pub conditioned: Vector,
}

fn row(v: &[f64]) -> Result<Matrix> {
    Matrix::from_vec(1, v.len(), v.to_vec())
}

#[derive(Debug, Clone)]
pub struct AdditiveCache {
    pub mlp: Mlp2Cache,
}

pub fn additive_forward(base: &[f64], prior: &[f64], mlp: &Mlp2) -> Result<(Vec<f64>, AdditiveCache)> {
    if mlp.output_dim() != base.len() {
        return Err(Error::shape(
            "condition_additive",
            format!("token of {}", base.len()),
            format!("MLP output of {}", mlp.output_dim()),
        ));
    }
    let (delta, cache) = mlp.forward(&row(prior)?)?;
    let out = base.iter().zip(delta.data()).map(|(b, d)| b + d).collect();
    Ok((out, AdditiveCache { mlp: cache }))
}

/// Returns `(d_base, d_prior, mlp grads)`.
pub fn additive_backward(mlp: &Mlp2, cache: &AdditiveCache, d_out: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Mlp2)> {
    let (d_prior, grads) = mlp.backward(&cache.mlp, &row(d_out)?)?;
    Ok((d_out.to_vec(), d_prior.into_vec(), grads))
}

pub fn condition_additive(base: &Vector, prior: &Vector, mlp: &Mlp2) -> Result<CameraToken> {
    let (out, _) = additive_forward(base.as_slice(), prior.as_slice(), mlp)?;
    Ok(CameraToken {
        base: base.clone(),
        conditioned: Vector::new(out),
    })
}

#[derive(Debug, Clone)]
pub struct FilmCache {
    pub mlp: Mlp2Cache,
    pub base: Vec<f64>,
    pub gamma: Vec<f64>,
}

/// `(1 + gamma) ⊙ base + beta` with `[gamma, beta] = mlp(prior)`.
pub fn film_forward(base: &[f64], prior: &[f64], mlp: &Mlp2) -> Result<(Vec<f64>, FilmCache)> {
    let out_dim = mlp.output_dim();
    if !out_dim.is_multiple_of(2) {
        return Err(Error::invalid(format!("FiLM head output length {out_dim} is odd")));
    }
    if out_dim != 2 * base.len() {
        return Err(Error::shape(
            "condition_film",
            format!("token of {}", base.len()),
            format!("MLP output of {out_dim}"),
        ));
    }
    let c = base.len();
    let (gb, cache) = mlp.forward(&row(prior)?)?;
    let gamma = gb.data()[..c].to_vec();
    let beta = &gb.data()[c..];
    let out = (0..c).map(|i| base[i] * (1.0 + gamma[i]) + beta[i]).collect();
    Ok((
        out,
        FilmCache {
            mlp: cache,
            base: base.to_vec(),
            gamma,
        },
    ))
}

pub fn film_backward(mlp: &Mlp2, cache: &FilmCache, d_out: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Mlp2)> {
    let c = cache.base.len();
    let d_base: Vec<f64> = (0..c).map(|i| d_out[i] * (1.0 + cache.gamma[i])).collect();
    let mut d_gb = vec![0.0; 2 * c];
    for i in 0..c {
        d_gb[i] = d_out[i] * cache.base[i];
        d_gb[c + i] = d_out[i];
    }
    let (d_prior, grads) = mlp.backward(&cache.mlp, &row(&d_gb)?)?;
    Ok((d_base, d_prior.into_vec(), grads))
}

pub fn condition_film(base: &Vector, prior: &Vector, mlp: &Mlp2) -> Result<CameraToken> {
    let (out, _) = film_forward(base.as_slice(), prior.as_slice(), mlp)?;
    Ok(CameraToken {
        base: base.clone(),
        conditioned: Vector::new(out),
    })
}

#[derive(Debug, Clone)]
pub struct CrossAttnCache {
    pub attn: MhaCache,
    pub ffn: Mlp2Cache,
}

/// `c' = c + MHA(q = c, k = v = tokens)`, `out = c' + FFN(c')`.
pub fn cross_attention_forward(
    base: &[f64],
    tokens: &Matrix,
    attn: &MultiHeadAttention,
    ffn: &Mlp2,
) -> Result<(Vec<f64>, CrossAttnCache)> {
    if attn.n_heads == 0 || !attn.dim().is_multiple_of(attn.n_heads) {
        return Err(Error::invalid(format!("{} heads do not divide dimension {}", attn.n_heads, attn.dim())));
    }
    if tokens.cols() != base.len() || attn.dim() != base.len() {
        return Err(Error::shape(
            "condition_cross_attention",
            format!("token of {}", base.len()),
            format!("patch tokens {} / attention dim {}", tokens.shape_str(), attn.dim()),
        ));
    }
    let q = row(base)?;
    let (a, attn_cache) = attn.forward(&q, tokens, None)?;
    let c_prime = q.add(&a)?;
    let (f, ffn_cache) = ffn.forward(&c_prime)?;
    let out = c_prime.add(&f)?.into_vec();
    Ok((
        out,
        CrossAttnCache {
            attn: attn_cache,
            ffn: ffn_cache,
        },
    ))
}

/// Returns `(d_base, d_tokens, attention grads, ffn grads)`.
pub fn cross_attention_backward(
    attn: &MultiHeadAttention,
    ffn: &Mlp2,
    cache: &CrossAttnCache,
    d_out: &[f64],
) -> Result<(Vec<f64>, Matrix, MultiHeadAttention, Mlp2)> {
    let d_out = row(d_out)?;
    let (d_cp_ffn, ffn_grads) = ffn.backward(&cache.ffn, &d_out)?;
    let d_cp = d_out.add(&d_cp_ffn)?;
    let (d_q, d_tokens, attn_grads, _) = attn.backward(&cache.attn, &d_cp)?;
    let d_base = d_cp.add(&d_q)?.into_vec();
    Ok((d_base, d_tokens, attn_grads, ffn_grads))
}

pub fn condition_cross_attention(base: &Vector, tokens: &Matrix, attn: &MultiHeadAttention, ffn: &Mlp2) -> Result<CameraToken> {
    let (out, _) = cross_attention_forward(base.as_slice(), tokens, attn, ffn)?;
    Ok(CameraToken {
        base: base.clone(),
        conditioned: Vector::new(out),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::mlp::Activation;
    use crate::objective::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_initialised_heads_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let c = 6;
        let base = Vector::random_uniform(c, 1.0, &mut rng);
        let prior = Vector::random_uniform(c, 1.0, &mut rng);
        let tokens = Matrix::random_uniform(5, c, 1.0, &mut rng);

        let add = Mlp2::init_zero_output(c, 8, c, Activation::Gelu, &mut rng);
        assert_eq!(condition_additive(&base, &prior, &add).unwrap().conditioned, base);

        let film = Mlp2::init_zero_output(c, 8, 2 * c, Activation::Gelu, &mut rng);
        assert_eq!(condition_film(&base, &prior, &film).unwrap().conditioned, base);

        let attn = MultiHeadAttention::init_zero_output(c, 2, &mut rng).unwrap();
        let ffn = Mlp2::init_zero_output(c, 8, c, Activation::Gelu, &mut rng);
        assert_eq!(condition_cross_attention(&base, &tokens, &attn, &ffn).unwrap().conditioned, base);
    }

    #[test]
    fn additive_hand_example() {
        let mlp = Mlp2 {
            w1: Matrix::from_rows(&[&[1.0, 0.0], &[0.0, -1.0]]),
            b1: Vector::zeros(2),
            w2: Matrix::from_rows(&[&[2.0, 0.0], &[1.0, 1.0]]),
            b2: Vector::new(vec![0.0, 0.5]),
            activation: Activation::Relu,
        };
        // hidden = relu(1, -3) = (1, 0); offset = (2, 1.5)
        let out = condition_additive(&Vector::new(vec![1.0, 1.0]), &Vector::new(vec![1.0, 3.0]), &mlp).unwrap();
        assert_eq!(out.conditioned.as_slice(), &[3.0, 2.5]);
        let zero_prior = Mlp2 { b1: Vector::zeros(2), b2: Vector::zeros(2), ..mlp };
        let same = condition_additive(&Vector::new(vec![1.0, -2.0]), &Vector::zeros(2), &zero_prior).unwrap();
        assert_eq!(same.conditioned, same.base);
    }

    fn film_with_output(gamma: f64, beta: &[f64]) -> Mlp2 {
        let c = beta.len();
        let mut b2 = vec![gamma; c];
        b2.extend_from_slice(beta);
        Mlp2 {
            w1: Matrix::zeros(3, c),
            b1: Vector::zeros(3),
            w2: Matrix::zeros(2 * c, 3),
            b2: Vector::new(b2),
            activation: Activation::Relu,
        }
    }

    #[test]
    fn film_special_cases() {
        let base = Vector::new(vec![0.5, -2.0, 3.0]);
        let prior = Vector::new(vec![1.0, 1.0, 1.0]);
        let doubled = condition_film(&base, &prior, &film_with_output(1.0, &[0.0; 3])).unwrap();
        assert_eq!(doubled.conditioned.as_slice(), &[1.0, -4.0, 6.0]);
        let shift = [7.0, 8.0, 9.0];
        let replaced = condition_film(&base, &prior, &film_with_output(-1.0, &shift)).unwrap();
        assert_eq!(replaced.conditioned.as_slice(), &shift);

        let mut odd = film_with_output(0.0, &[0.0; 3]);
        odd.w2 = Matrix::zeros(5, 3);
        odd.b2 = Vector::zeros(5);
        assert!(condition_film(&base, &prior, &odd).is_err());
    }

    #[test]
    fn cross_attention_single_token_by_hand() {
        // One token, one head: softmax over a single key is 1, so the
        // attention output is W_o W_v t + b_o regardless of the query.
        let attn = MultiHeadAttention {
            n_heads: 1,
            w_q: Matrix::from_rows(&[&[0.3, 0.1], &[0.2, -0.4]]),
            w_k: Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]),
            w_v: Matrix::from_rows(&[&[2.0, 0.0], &[0.0, 1.0]]),
            w_o: Matrix::from_rows(&[&[1.0, 1.0], &[0.0, 0.5]]),
            b_o: Vector::new(vec![0.0, 1.0]),
        };
        let ffn = Mlp2 {
            w1: Matrix::zeros(2, 2),
            b1: Vector::zeros(2),
            w2: Matrix::zeros(2, 2),
            b2: Vector::zeros(2),
            activation: Activation::Relu,
        };
        let token = Matrix::from_rows(&[&[1.0, 2.0]]);
        // v = (2, 2); W_o v = (4, 1); + b_o = (4, 2); c' = (0.5, 0.5) + (4, 2)
        let out = condition_cross_attention(&Vector::new(vec![0.5, 0.5]), &token, &attn, &ffn).unwrap();
        assert_eq!(out.conditioned.as_slice(), &[4.5, 2.5]);

        let bad = MultiHeadAttention { n_heads: 3, ..attn };
        assert!(condition_cross_attention(&Vector::new(vec![0.5, 0.5]), &token, &bad, &ffn).is_err());
    }

    #[test]
    fn uniform_attention_over_identical_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let attn = MultiHeadAttention::init(4, 2, &mut rng).unwrap();
        let ffn = Mlp2::init_zero_output(4, 4, 4, Activation::Gelu, &mut rng);
        let t = [0.3, -0.7, 1.2, 0.05];
        let tokens = Matrix::from_rows(&[&t, &t, &t]);
        let single = Matrix::from_rows(&[&t]);
        let base = Vector::random_uniform(4, 1.0, &mut rng);
        let many = condition_cross_attention(&base, &tokens, &attn, &ffn).unwrap();
        let one = condition_cross_attention(&base, &single, &attn, &ffn).unwrap();
        for (a, b) in many.conditioned.as_slice().iter().zip(one.conditioned.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conditioning_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let c = 4;
        let base = Vector::random_uniform(c, 1.0, &mut rng).into_vec();
        let prior = Vector::random_uniform(c, 1.0, &mut rng).into_vec();
        let tokens = Matrix::random_uniform(5, c, 1.0, &mut rng);
        let w = Vector::random_uniform(c, 1.0, &mut rng).into_vec();
        let proj = |v: &[f64]| v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let ok = |err: f64| assert!(err <= 1e-4, "{err}");

        let add = Mlp2::init(c, 6, c, Activation::Gelu, &mut rng);
        let (_, cache) = additive_forward(&base, &prior, &add).unwrap();
        let (d_base, d_prior, _) = additive_backward(&add, &cache, &w).unwrap();
        ok(finite_diff_check(|p| Ok(proj(&additive_forward(p, &prior, &add)?.0)), &d_base, &base, 1e-5).unwrap());
        ok(finite_diff_check(|p| Ok(proj(&additive_forward(&base, p, &add)?.0)), &d_prior, &prior, 1e-5).unwrap());

        let film = Mlp2::init(c, 6, 2 * c, Activation::Gelu, &mut rng);
        let (_, cache) = film_forward(&base, &prior, &film).unwrap();
        let (d_base, d_prior, g) = film_backward(&film, &cache, &w).unwrap();
        ok(finite_diff_check(|p| Ok(proj(&film_forward(p, &prior, &film)?.0)), &d_base, &base, 1e-5).unwrap());
        ok(finite_diff_check(|p| Ok(proj(&film_forward(&base, p, &film)?.0)), &d_prior, &prior, 1e-5).unwrap());
        ok(finite_diff_check(
            |p| {
                let mut m = film.clone();
                m.w2.data_mut().copy_from_slice(p);
                Ok(proj(&film_forward(&base, &prior, &m)?.0))
            },
            g.w2.data(),
            film.w2.data(),
            1e-5,
        )
        .unwrap());

        let attn = MultiHeadAttention::init(c, 2, &mut rng).unwrap();
        let ffn = Mlp2::init(c, 6, c, Activation::Gelu, &mut rng);
        let (_, cache) = cross_attention_forward(&base, &tokens, &attn, &ffn).unwrap();
        let (d_base, d_tokens, ga, gf) = cross_attention_backward(&attn, &ffn, &cache, &w).unwrap();
        ok(finite_diff_check(|p| Ok(proj(&cross_attention_forward(p, &tokens, &attn, &ffn)?.0)), &d_base, &base, 1e-5).unwrap());
        ok(finite_diff_check(
            |p| Ok(proj(&cross_attention_forward(&base, &Matrix::from_vec(5, c, p.to_vec())?, &attn, &ffn)?.0)),
            d_tokens.data(),
            tokens.data(),
            1e-5,
        )
        .unwrap());
        ok(finite_diff_check(
            |p| {
                let mut a = attn.clone();
                a.w_q.data_mut().copy_from_slice(p);
                Ok(proj(&cross_attention_forward(&base, &tokens, &a, &ffn)?.0))
            },
            ga.w_q.data(),
            attn.w_q.data(),
            1e-5,
        )
        .unwrap());
        ok(finite_diff_check(
            |p| {
                let mut f = ffn.clone();
                f.w1.data_mut().copy_from_slice(p);
                Ok(proj(&cross_attention_forward(&base, &tokens, &attn, &f)?.0))
            },
            gf.w1.data(),
            ffn.w1.data(),
            1e-5,
        )
        .unwrap());
    }
}
