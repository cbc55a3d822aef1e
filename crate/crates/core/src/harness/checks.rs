//! The property suite run by `degat-kit check`: attention-weight structure,
//! message bounds, permutation equivariance, sparse/dense agreement,
//! gradient checks, the optimal-confidence closed form, geometry round trips,
//! metric anchors and zero-init identities.

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::conditioning::bias::{bias_table_gradient, bucket_bias, mlp_bias_backward, mlp_bias_forward};
use crate::conditioning::camera::{
    additive_backward, additive_forward, cross_attention_backward, cross_attention_forward, film_backward, film_forward,
};
use crate::conditioning::{Activation, AttentionBias, BiasTable, Mlp2, MultiHeadAttention, TokenConditioning};
use crate::degat::{self, DeGatParams};
use crate::error::Result;
use crate::geometry::{backproject_pixel, project_point, rotation_from_axis_angle, CameraParams};
use crate::graph::{min_score_gap, Metric};
use crate::metrics::{psnr_from_mse, ssim, ImageGrid, SsimConfig};
use crate::model::{self, DegatPlacement, ModelConfig, ModelParams};
use crate::numerics::{elu, l2_norm, Matrix};
use crate::objective::{finite_diff_check, marginal_penalty, optimal_confidence, uncertainty_objective, LossWeights};

use super::scene::generate_scene;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed deviation, or another summary figure.
    pub worst: f64,
    pub tolerance: f64,
}

fn outcome(name: &'static str, worst: f64, tolerance: f64) -> CheckResult {
    CheckResult {
        name,
        passed: worst <= tolerance,
        worst,
        tolerance,
    }
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Matrix, DeGatParams, usize) {
    let l = rng.random_range(2..=32);
    let c = rng.random_range(1..=16);
    let k = rng.random_range(1..=9usize.min(l - 1));
    let x = Matrix::random_uniform(l, c, 2.0, rng);
    let params = DeGatParams::init(c, rng.random_range(1..=8), rng);
    (x, params, k)
}

fn degat_structure(rng: &mut ChaCha8Rng, n: usize) -> Result<Vec<CheckResult>> {
    let (mut stoch, mut hull, mut norm, mut dense) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..n {
        let (x, params, k) = random_instance(rng);
        let (out, cache) = degat::forward(&x, &params, k, Metric::Cosine)?;
        for i in 0..x.rows() {
            let row = cache.alpha_row(i);
            stoch = stoch.max((row.iter().sum::<f64>() - 1.0).abs());
            stoch = stoch.max(row.iter().map(|w| -w).fold(0.0, f64::max));
            let nbrs = cache.graph.neighbors(i);
            for ch in 0..x.cols() {
                let vals = nbrs.iter().map(|&j| cache.values[(j, ch)]);
                let lo = vals.clone().fold(f64::INFINITY, f64::min);
                let hi = vals.fold(f64::NEG_INFINITY, f64::max);
                let m = cache.messages[(i, ch)];
                hull = hull.max(lo - m).max(m - hi);
            }
            let vmax = nbrs.iter().map(|&j| l2_norm(cache.values.row(j))).fold(0.0, f64::max);
            norm = norm.max(l2_norm(out.row(i)) - l2_norm(x.row(i)) - vmax);
        }
        if cache.graph.edge_count() != x.rows() * k {
            dense = f64::INFINITY;
        }
        let m = cache.attention_matrix().matmul(&cache.values)?;
        dense = dense.max(m.max_abs_diff(&cache.messages));
    }
    let elu_worst = (0..10_000)
        .map(|_| {
            let z: f64 = rng.random_range(-50.0..50.0);
            elu(z).abs() - z.abs()
        })
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(vec![
        outcome("row_stochastic", stoch, 1e-12),
        outcome("message_convex_hull", hull.max(0.0), 1e-12),
        outcome("norm_bound", norm.max(0.0), 1e-9),
        outcome("elu_non_expansive", elu_worst.max(0.0), 0.0),
        outcome("sparse_dense_equivalence", dense, 1e-12),
    ])
}

fn permutation(rng: &mut ChaCha8Rng, n: usize) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < n {
        let (x, params, k) = random_instance(rng);
        if min_score_gap(&x, Metric::Cosine) <= 1e-9 {
            continue;
        }
        done += 1;
        let (out, _) = degat::forward(&x, &params, k, Metric::Cosine)?;
        let mut perm: Vec<usize> = (0..x.rows()).collect();
        perm.shuffle(rng);
        let mut xp = Matrix::zeros(x.rows(), x.cols());
        for (i, &p) in perm.iter().enumerate() {
            xp.row_mut(p).copy_from_slice(x.row(i));
        }
        let (outp, _) = degat::forward(&xp, &params, k, Metric::Cosine)?;
        for (i, &p) in perm.iter().enumerate() {
            for (a, b) in out.row(i).iter().zip(outp.row(p)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(outcome("permutation_equivariance", worst, 1e-9))
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn perturb_mlp(m: &mut Mlp2, rng: &mut ChaCha8Rng) {
    m.w2 = Matrix::random_uniform(m.w2.rows(), m.w2.cols(), 0.5, rng);
    m.b2 = crate::numerics::Vector::random_uniform(m.b2.len(), 0.5, rng);
}

/// Loss `Σ w ⊙ f(p)` for a fixed random weighting `w`, checked against the
/// backward pass; returns the worst relative error.
fn gradient_checks(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    const STEP: f64 = 1e-5;
    let mut results = Vec::new();

    // Graph attention, input gradient and all parameters (topology fixed).
    let (x, params, k) = (Matrix::random_uniform(10, 4, 1.0, rng), DeGatParams::init(4, 3, rng), 3);
    let (out, cache) = degat::forward(&x, &params, k, Metric::Cosine)?;
    let w = Matrix::random_uniform(out.rows(), out.cols(), 1.0, rng);
    let g = degat::backward(&cache, &params, &w, None)?;
    let graph = cache.graph.clone();
    let f = |xv: &[f64], p: &DeGatParams| -> Result<f64> {
        let (o, _) = degat::forward_on_graph(&Matrix::from_vec(10, 4, xv.to_vec())?, graph.clone(), p)?;
        Ok(o.data().iter().zip(w.data()).map(|(a, b)| a * b).sum())
    };
    let mut worst = finite_diff_check(|xv| f(xv, &params), g.d_x.data(), x.data(), STEP)?;
    let mut flat = params.w_proj.data().to_vec();
    flat.extend_from_slice(params.a.as_slice());
    flat.extend_from_slice(params.w_val.data());
    let mut analytic = g.d_w_proj.data().to_vec();
    analytic.extend_from_slice(g.d_a.as_slice());
    analytic.extend_from_slice(g.d_w_val.data());
    let split = |v: &[f64]| -> Result<DeGatParams> {
        let (a, rest) = v.split_at(params.w_proj.data().len());
        let (b, c) = rest.split_at(params.a.len());
        Ok(DeGatParams {
            w_proj: Matrix::from_vec(params.w_proj.rows(), params.w_proj.cols(), a.to_vec())?,
            a: b.to_vec().into(),
            w_val: Matrix::from_vec(params.w_val.rows(), params.w_val.cols(), c.to_vec())?,
            leaky_slope: params.leaky_slope,
        })
    };
    worst = worst.max(finite_diff_check(|v| f(x.data(), &split(v)?), &analytic, &flat, STEP)?);
    results.push(outcome("gradient_degat", worst, 1e-4));

    // Bias table and bias MLP, through their per-pair outputs.
    let feats = Matrix::random_uniform(6, 5, 1.0, rng);
    let table = BiasTable::init(8, 2, 1.0, rng);
    let (b, index) = bucket_bias(&feats, &table)?;
    let wb: Vec<Matrix> = b.heads.iter().map(|h| Matrix::random_uniform(h.rows(), h.cols(), 1.0, rng)).collect();
    let dot_heads = |heads: &[Matrix]| -> f64 {
        heads.iter().zip(&wb).map(|(h, w)| h.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()).sum()
    };
    let gt = bias_table_gradient(&wb, &index, 8)?;
    let err = finite_diff_check(
        |v| {
            let t = BiasTable {
                table: Matrix::from_vec(8, 2, v.to_vec())?,
                ..table.clone()
            };
            Ok(dot_heads(&bucket_bias(&feats, &t)?.0.heads))
        },
        gt.data(),
        table.table.data(),
        STEP,
    )?;
    results.push(outcome("gradient_bias_table", err, 1e-4));

    let mut mlp = Mlp2::init(1, 8, 2, Activation::Relu, rng);
    perturb_mlp(&mut mlp, rng);
    let (_, mc) = mlp_bias_forward(&feats, &mlp)?;
    let gm = mlp_bias_backward(&mlp, &mc, &wb)?;
    let err = mlp_fd(&mlp, &gm, |m| Ok(dot_heads(&mlp_bias_forward(&feats, m)?.0.heads)))?;
    results.push(outcome("gradient_bias_mlp", err, 1e-4));

    // Conditioning heads (perturbed off their zero init).
    let c = 4;
    let base = random_vec(rng, c);
    let prior = random_vec(rng, c);
    let wv = random_vec(rng, c);
    let wdot = |v: &[f64]| v.iter().zip(&wv).map(|(a, b)| a * b).sum::<f64>();
    let mut add = Mlp2::init(c, 6, c, Activation::Gelu, rng);
    perturb_mlp(&mut add, rng);
    let (_, ac) = additive_forward(&base, &prior, &add)?;
    let (_, _, ga) = additive_backward(&add, &ac, &wv)?;
    let mut worst = mlp_fd(&add, &ga, |m| Ok(wdot(&additive_forward(&base, &prior, m)?.0)))?;
    let mut film = Mlp2::init(c, 6, 2 * c, Activation::Gelu, rng);
    perturb_mlp(&mut film, rng);
    let (_, fc) = film_forward(&base, &prior, &film)?;
    let (d_base, d_prior, gf) = film_backward(&film, &fc, &wv)?;
    worst = worst.max(mlp_fd(&film, &gf, |m| Ok(wdot(&film_forward(&base, &prior, m)?.0)))?);
    worst = worst.max(finite_diff_check(|v| Ok(wdot(&film_forward(v, &prior, &film)?.0)), &d_base, &base, STEP)?);
    worst = worst.max(finite_diff_check(|v| Ok(wdot(&film_forward(&base, v, &film)?.0)), &d_prior, &prior, STEP)?);
    let attn = MultiHeadAttention::init(c, 2, rng)?;
    let mut ffn = Mlp2::init(c, 6, c, Activation::Gelu, rng);
    perturb_mlp(&mut ffn, rng);
    let tokens = Matrix::random_uniform(5, c, 1.0, rng);
    let (_, cc) = cross_attention_forward(&base, &tokens, &attn, &ffn)?;
    let (d_base, d_tokens, _, _) = cross_attention_backward(&attn, &ffn, &cc, &wv)?;
    worst = worst.max(finite_diff_check(
        |v| Ok(wdot(&cross_attention_forward(v, &tokens, &attn, &ffn)?.0)),
        &d_base,
        &base,
        STEP,
    )?);
    worst = worst.max(finite_diff_check(
        |v| Ok(wdot(&cross_attention_forward(&base, &Matrix::from_vec(5, c, v.to_vec())?, &attn, &ffn)?.0)),
        d_tokens.data(),
        tokens.data(),
        STEP,
    )?);
    results.push(outcome("gradient_conditioning", worst, 1e-4));

    results.push(outcome("gradient_model", model_gradient_error(rng, 200)?, 1e-3));
    Ok(results)
}

fn mlp_fd(mlp: &Mlp2, grads: &Mlp2, mut f: impl FnMut(&Mlp2) -> Result<f64>) -> Result<f64> {
    let pack = |m: &Mlp2| [m.w1.data(), m.b1.as_slice(), m.w2.data(), m.b2.as_slice()].concat();
    let mut probe = mlp.clone();
    finite_diff_check(
        |v| {
            let (a, rest) = v.split_at(mlp.w1.data().len());
            let (b, rest) = rest.split_at(mlp.b1.len());
            let (c, d) = rest.split_at(mlp.w2.data().len());
            probe.w1.data_mut().copy_from_slice(a);
            probe.b1.as_mut_slice().copy_from_slice(b);
            probe.w2.data_mut().copy_from_slice(c);
            probe.b2.as_mut_slice().copy_from_slice(d);
            f(&probe)
        },
        &pack(grads),
        &pack(mlp),
        1e-5,
    )
}

/// Whole-model check on a 16×16, one-block, `C = 8` config over a seeded
/// sample of `n_coords` parameters.
pub fn model_gradient_error(rng: &mut ChaCha8Rng, n_coords: usize) -> Result<f64> {
    let cfg = ModelConfig {
        height: 16,
        width: 16,
        patch: 4,
        dim: 8,
        blocks: 1,
        heads: 2,
        k_neighbors: 5,
        degat_placement: DegatPlacement::Pre,
        token_conditioning: TokenConditioning::Film,
        attention_bias: AttentionBias::MlpBias,
        seed: rng.random(),
        ..Default::default()
    };
    let scene = generate_scene(rng.random(), 2, 16, 16)?;
    let mut params = ModelParams::init(&cfg)?;
    for t in params.named_mut() {
        if t.path.starts_with("conditioning.") || t.path.starts_with("bias.") {
            t.data.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
    }
    let w = LossWeights::default();
    let (_, g) = model::loss_and_gradients(&params, &cfg, &scene.frames, &scene.gt_depth, &scene.gt_cameras, &w)?;
    let full = params.flatten();
    let grad = g.flatten();
    let mut idx: Vec<usize> = (0..full.len()).collect();
    idx.shuffle(rng);
    idx.truncate(n_coords);
    let point: Vec<f64> = idx.iter().map(|&i| full[i]).collect();
    let analytic: Vec<f64> = idx.iter().map(|&i| grad[i]).collect();
    let mut probe = params.clone();
    let mut values = full.clone();
    finite_diff_check(
        |v| {
            for (&i, &x) in idx.iter().zip(v) {
                values[i] = x;
            }
            probe.assign_flat(&values)?;
            Ok(model::loss_value(&probe, &cfg, &scene.frames, &scene.gt_depth, &scene.gt_cameras, &w)?.total)
        },
        &analytic,
        &point,
        1e-5,
    )
}

fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    while hi - lo > 1e-13 * hi.abs().max(1.0) {
        let a = hi - phi * (hi - lo);
        let b = lo + phi * (hi - lo);
        if f(a) < f(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    0.5 * (lo + hi)
}

fn confidence(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let (mut closed, mut marginal) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let w = LossWeights {
            alpha: rng.random_range(0.05..2.0),
            gamma: rng.random_range(0.1..3.0),
        };
        let r_sq = rng.random_range(0.05..4.0);
        let c_star = optimal_confidence(r_sq, &w)?;
        // Minimize over log C, where the objective is smooth and unimodal.
        let t = golden_section(|t| uncertainty_objective(t.exp(), r_sq, &w), -20.0, 20.0);
        closed = closed.max((t.exp() - c_star).abs() / c_star.max(1.0));
        marginal = marginal.max((marginal_penalty(r_sq, &w)? - uncertainty_objective(c_star, r_sq, &w)).abs());
    }
    Ok(vec![outcome("optimal_confidence", closed, 1e-6), outcome("marginal_penalty", marginal, 1e-12)])
}

fn geometry(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let aa = [0, 1, 2].map(|_| rng.random_range(-3.0..3.0));
        let t = Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let cam = CameraParams::new(rotation_from_axis_angle(aa), t, rng.random_range(10.0..100.0), (31.5, 23.5));
        let (u, v, d) = (rng.random_range(0.0..64.0), rng.random_range(0.0..48.0), rng.random_range(0.1..50.0));
        let p = backproject_pixel(u, v, d, &cam)?;
        let (u2, v2, d2) = project_point(&p, &cam)?;
        worst = worst.max((u - u2).abs()).max((v - v2).abs()).max((d - d2).abs());
    }
    Ok(outcome("geometry_round_trip", worst, 1e-9))
}

fn metric_anchors(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut worst = (psnr_from_mse(0.01, 1.0) - 20.0).abs();
    let data: Vec<f64> = (0..16 * 16).map(|_| rng.random_range(0.0..1.0)).collect();
    let img = ImageGrid::new(16, 16, 1, data, 1.0)?;
    worst = worst.max((ssim(&img, &img, &SsimConfig::default())? - 1.0).abs());
    Ok(outcome("metric_anchors", worst, 1e-12))
}

fn zero_init(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let cfg = ModelConfig::default();
    let params = ModelParams::init(&cfg)?;
    let base = params.camera_token.as_slice();
    let tokens = Matrix::random_uniform(cfg.n_tokens(), cfg.dim, 1.0, rng);
    let prior = crate::degat::pooled_prior(&tokens)?;
    let cond = &params.conditioning;
    let outs = [
        additive_forward(base, prior.as_slice(), &cond.additive)?.0,
        film_forward(base, prior.as_slice(), &cond.film)?.0,
        cross_attention_forward(base, &tokens, &cond.attn, &cond.ffn)?.0,
    ];
    let worst = outs
        .iter()
        .flat_map(|o| o.iter().zip(base).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max);
    Ok(outcome("zero_init_identity", worst, 0.0))
}

/// Runs every check with a seeded generator.
pub fn run_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all = degat_structure(&mut rng, 1000)?;
    all.push(permutation(&mut rng, 100)?);
    all.extend(gradient_checks(&mut rng)?);
    all.extend(confidence(&mut rng)?);
    all.push(geometry(&mut rng)?);
    all.push(metric_anchors(&mut rng)?);
    all.push(zero_init(&mut rng)?);
    Ok(all)
}
