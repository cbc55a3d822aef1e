use nalgebra::{Matrix3, Vector3};

use crate::conditioning::attention::MhaCache;
use crate::conditioning::bias::{mlp_bias_backward, mlp_bias_forward, unpad, MlpBiasCache};
use crate::conditioning::camera::{
    additive_backward, additive_forward, cross_attention_backward, cross_attention_forward, film_backward, film_forward,
    AdditiveCache, CrossAttnCache, FilmCache,
};
use crate::conditioning::mlp::Mlp2Cache;
use crate::conditioning::{bias_table_gradient, bucket_bias, AttentionBias, BiasMatrix, BucketIndex, TokenConditioning};
use crate::degat::{self, affinity_to_log_bias, pooled_prior, DeGatCache, DeGatGrads, DeGatParams, LogAffinityBias, DEFAULT_LOG_EPS};
use crate::error::{Error, Result};
use crate::geometry::{default_principal, CameraParams, DepthMap};
use crate::metrics::ImageGrid;
use crate::numerics::{sigmoid, softplus, Matrix};
use crate::objective::{camera_loss, camera_loss_grad, depth_loss_with_grad, LossBreakdown, LossWeights};

use super::config::{DegatPlacement, ModelConfig};
use super::params::{Block, ModelParams, Tensors, CAMERA_OUTPUTS};

/// Keeps the predicted focal strictly positive.
pub const FOCAL_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub depths: Vec<DepthMap>,
    /// Raw 3×3 rotation, focal in pixels, principal point at the image centre.
    pub cameras: Vec<CameraParams>,
}

/// Loss gradients with respect to every model output, one entry per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrads {
    pub d_depth: Vec<Matrix>,
    pub d_confidence: Vec<Matrix>,
    pub d_rotation: Vec<Matrix3<f64>>,
    pub d_translation: Vec<Vector3<f64>>,
    /// With respect to the focal in pixels.
    pub d_focal: Vec<f64>,
}

impl OutputGrads {
    pub fn zeros(cfg: &ModelConfig, n_frames: usize) -> Self {
        OutputGrads {
            d_depth: vec![Matrix::zeros(cfg.height, cfg.width); n_frames],
            d_confidence: vec![Matrix::zeros(cfg.height, cfg.width); n_frames],
            d_rotation: vec![Matrix3::zeros(); n_frames],
            d_translation: vec![Vector3::zeros(); n_frames],
            d_focal: vec![0.0; n_frames],
        }
    }
}

struct BlockCache {
    attn: MhaCache,
    ffn: Mlp2Cache,
}

enum CondCache {
    None,
    Additive(AdditiveCache),
    Film(FilmCache),
    CrossAttn(CrossAttnCache),
}

enum BiasCache {
    None,
    Bucket(BucketIndex),
    Mlp(MlpBiasCache),
    LogAffinity(LogAffinityBias),
}

struct FrameCache {
    patches: Matrix,
    early: Option<(Matrix, DeGatCache)>,
    cond: CondCache,
    bias: BiasCache,
    blocks: Vec<BlockCache>,
    post: Option<DeGatCache>,
    head_input: Matrix,
    depth: DepthMap,
    camera: Mlp2Cache,
    camera_raw: Vec<f64>,
}

/// Everything the backward pass needs from a forward pass.
pub struct ForwardCache {
    cfg: ModelConfig,
    frames: Vec<FrameCache>,
    global: Option<BlockCache>,
}

impl ForwardCache {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    /// Graph-attention cache of the pass that runs on the embedded tokens.
    pub fn early_degat(&self, frame: usize) -> Option<&DeGatCache> {
        self.frames.get(frame)?.early.as_ref().map(|(_, c)| c)
    }
}

fn check_frame(cfg: &ModelConfig, frame: &ImageGrid) -> Result<()> {
    if frame.height != cfg.height || frame.width != cfg.width {
        return Err(Error::shape(
            "model forward",
            format!("{}x{} frame", frame.height, frame.width),
            format!("{}x{} config", cfg.height, cfg.width),
        ));
    }
    Ok(())
}

/// One row per patch (row-major over the patch grid); features ordered by
/// pixel row, pixel column, then RGB channel, scaled to `[0, 1]`.
pub fn patchify(cfg: &ModelConfig, frame: &ImageGrid) -> Result<Matrix> {
    check_frame(cfg, frame)?;
    let p = cfg.patch;
    let (_, gw) = cfg.grid();
    Ok(Matrix::from_fn(cfg.n_tokens(), cfg.patch_features(), |t, f| {
        let (dy, dx, ch) = (f / (3 * p), (f / 3) % p, f % 3);
        let (r, c) = ((t / gw) * p + dy, (t % gw) * p + dx);
        frame.rgb01(r, c)[ch]
    }))
}

fn check_params(params: &ModelParams, cfg: &ModelConfig) -> Result<()> {
    let expected = (cfg.dim, cfg.patch_features());
    if params.patch_embed.w.shape() != expected
        || params.pos.shape() != (cfg.n_tokens(), cfg.dim)
        || params.blocks.len() != cfg.blocks
        || params.depth_head.w.shape() != (2 * cfg.patch * cfg.patch, cfg.dim)
        || params.blocks.iter().chain([&params.global]).any(|b| b.attn.n_heads != cfg.heads)
    {
        return Err(Error::shape(
            "model params",
            format!("embed {} / {} blocks", params.patch_embed.w.shape_str(), params.blocks.len()),
            format!("config C = {}, P = {}, {} blocks", cfg.dim, cfg.patch, cfg.blocks),
        ));
    }
    Ok(())
}

/// Patch embedding plus position embedding, `L × C`.
pub fn embed_tokens(params: &ModelParams, cfg: &ModelConfig, frame: &ImageGrid) -> Result<Matrix> {
    check_params(params, cfg)?;
    embed(params, &patchify(cfg, frame)?)
}

fn embed(params: &ModelParams, patches: &Matrix) -> Result<Matrix> {
    let mut x = patches.matmul_t(&params.patch_embed.w)?;
    x.add_row_vector(params.patch_embed.b.as_slice())?;
    x.add_assign(&params.pos)?;
    Ok(x)
}

fn row(v: &[f64]) -> Matrix {
    Matrix::from_fn(1, v.len(), |_, c| v[c])
}

fn block_forward(b: &Block, s: &Matrix, bias: Option<&BiasMatrix>) -> Result<(Matrix, BlockCache)> {
    let (a, attn) = b.attn.forward(s, s, bias)?;
    let s1 = s.add(&a)?;
    let (f, ffn) = b.ffn.forward(&s1)?;
    Ok((s1.add(&f)?, BlockCache { attn, ffn }))
}

/// Returns `(d_input, parameter grads, per-head bias grads)`.
fn block_backward(b: &Block, cache: &BlockCache, d_out: &Matrix) -> Result<(Matrix, Block, Vec<Matrix>)> {
    let (d_ffn_in, ffn) = b.ffn.backward(&cache.ffn, d_out)?;
    let mut d_s1 = d_out.add(&d_ffn_in)?;
    let (d_q, d_kv, attn, d_bias) = b.attn.backward(&cache.attn, &d_s1)?;
    d_s1.add_assign(&d_q)?;
    d_s1.add_assign(&d_kv)?;
    Ok((d_s1, Block { attn, ffn }, d_bias))
}

fn accumulate<T: Tensors>(dst: &mut T, src: &T) {
    let mut d = Vec::new();
    dst.tensors_mut("", &mut d);
    let mut s = Vec::new();
    src.tensors("", &mut s);
    for (d, s) in d.iter_mut().zip(&s) {
        for (a, b) in d.data.iter_mut().zip(s.data) {
            *a += b;
        }
    }
}

fn accumulate_degat(dst: &mut DeGatParams, g: &DeGatGrads) {
    for (a, b) in dst.w_proj.data_mut().iter_mut().zip(g.d_w_proj.data()) {
        *a += b;
    }
    for (a, b) in dst.a.as_mut_slice().iter_mut().zip(g.d_a.as_slice()) {
        *a += b;
    }
    for (a, b) in dst.w_val.data_mut().iter_mut().zip(g.d_w_val.data()) {
        *a += b;
    }
}

pub fn forward(params: &ModelParams, cfg: &ModelConfig, frames: &[ImageGrid]) -> Result<(ModelOutput, ForwardCache)> {
    cfg.validate()?;
    check_params(params, cfg)?;
    if frames.is_empty() {
        return Err(Error::invalid("forward needs at least one frame"));
    }
    let l = cfg.n_tokens();
    let mut seqs = Vec::with_capacity(frames.len());
    let mut caches = Vec::with_capacity(frames.len());

    for frame in frames {
        let patches = patchify(cfg, frame)?;
        let x0 = embed(params, &patches)?;
        let early = if cfg.needs_early_degat() {
            Some(degat::forward(&x0, &params.degat, cfg.k_neighbors, cfg.metric)?)
        } else {
            None
        };
        let x1 = match (&early, cfg.degat_placement) {
            (Some((out, _)), DegatPlacement::Pre) => out.clone(),
            _ => x0,
        };

        let base = params.camera_token.as_slice();
        let refined = early.as_ref().map(|(out, _)| out);
        let cond_params = &params.conditioning;
        let (token, cond) = match (cfg.token_conditioning, refined) {
            (TokenConditioning::None, _) => (base.to_vec(), CondCache::None),
            (TokenConditioning::Additive, Some(x)) => {
                let (c, cache) = additive_forward(base, pooled_prior(x)?.as_slice(), &cond_params.additive)?;
                (c, CondCache::Additive(cache))
            }
            (TokenConditioning::Film, Some(x)) => {
                let (c, cache) = film_forward(base, pooled_prior(x)?.as_slice(), &cond_params.film)?;
                (c, CondCache::Film(cache))
            }
            (TokenConditioning::CrossAttn, Some(x)) => {
                let (c, cache) = cross_attention_forward(base, x, &cond_params.attn, &cond_params.ffn)?;
                (c, CondCache::CrossAttn(cache))
            }
            (_, None) => unreachable!("conditioning always runs the early graph pass"),
        };

        let (bias, bias_cache) = match cfg.attention_bias {
            AttentionBias::None => (None, BiasCache::None),
            AttentionBias::Bucket => {
                let (b, index) = bucket_bias(&patches, &params.bias.table)?;
                (Some(b.padded(1)), BiasCache::Bucket(index))
            }
            AttentionBias::MlpBias => {
                let (b, cache) = mlp_bias_forward(&patches, &params.bias.mlp)?;
                (Some(b.padded(1)), BiasCache::Mlp(cache))
            }
            AttentionBias::LogAffinity => {
                let (_, dc) = early.as_ref().expect("log-affinity bias always runs the early graph pass");
                let lb = affinity_to_log_bias(dc, DEFAULT_LOG_EPS)?;
                let b = BiasMatrix::broadcast(&lb.to_dense(), cfg.heads).padded(1);
                (Some(b), BiasCache::LogAffinity(lb))
            }
        };

        let mut s = Matrix::vstack(&[row(&token), x1])?;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for b in &params.blocks {
            let (next, cache) = block_forward(b, &s, bias.as_ref())?;
            s = next;
            blocks.push(cache);
        }
        seqs.push(s);
        caches.push((patches, early, cond, bias_cache, blocks));
    }

    let global = if frames.len() > 1 {
        let (out, cache) = block_forward(&params.global, &Matrix::vstack(&seqs)?, None)?;
        for (f, s) in seqs.iter_mut().enumerate() {
            *s = out.slice_rows(f * (l + 1), (f + 1) * (l + 1));
        }
        Some(cache)
    } else {
        None
    };

    let (gh, gw) = cfg.grid();
    let p = cfg.patch;
    let p2 = p * p;
    let mut output = ModelOutput {
        depths: Vec::with_capacity(frames.len()),
        cameras: Vec::with_capacity(frames.len()),
    };
    let mut frame_caches = Vec::with_capacity(frames.len());
    for (s, (patches, early, cond, bias, blocks)) in seqs.into_iter().zip(caches) {
        let tokens = s.slice_rows(1, l + 1);
        let (head_input, post) = if cfg.degat_placement == DegatPlacement::Post {
            let (out, cache) = degat::forward(&tokens, &params.degat, cfg.k_neighbors, cfg.metric)?;
            (out, Some(cache))
        } else {
            (tokens, None)
        };

        let mut raw = head_input.matmul_t(&params.depth_head.w)?;
        raw.add_row_vector(params.depth_head.b.as_slice())?;
        let mut depth = Matrix::zeros(cfg.height, cfg.width);
        let mut conf = Matrix::zeros(cfg.height, cfg.width);
        for t in 0..gh * gw {
            for q in 0..p2 {
                let (r, c) = ((t / gw) * p + q / p, (t % gw) * p + q % p);
                depth[(r, c)] = raw[(t, q)].exp();
                conf[(r, c)] = raw[(t, p2 + q)].exp();
            }
        }
        let depth = DepthMap::new(depth, conf)?;

        let (cam_out, camera) = params.camera_head.forward(&row(s.row(0)))?;
        let camera_raw = cam_out.into_vec();
        debug_assert_eq!(camera_raw.len(), CAMERA_OUTPUTS);
        let focal = (softplus(camera_raw[12]) + FOCAL_EPS) * cfg.width as f64;
        output.cameras.push(CameraParams::new(
            Matrix3::from_row_slice(&camera_raw[..9]),
            Vector3::new(camera_raw[9], camera_raw[10], camera_raw[11]),
            focal,
            default_principal(cfg.width, cfg.height),
        ));
        output.depths.push(depth.clone());
        frame_caches.push(FrameCache {
            patches,
            early,
            cond,
            bias,
            blocks,
            post,
            head_input,
            depth,
            camera,
            camera_raw,
        });
    }
    Ok((
        output,
        ForwardCache {
            cfg: *cfg,
            frames: frame_caches,
            global,
        },
    ))
}

/// Gradient of the loss with respect to every parameter, given the output
/// gradients. Parameters of components the config leaves unused get zero.
pub fn backward(params: &ModelParams, cache: &ForwardCache, upstream: &OutputGrads) -> Result<ModelParams> {
    let cfg = &cache.cfg;
    check_params(params, cfg)?;
    let nf = cache.frames.len();
    if [
        upstream.d_depth.len(),
        upstream.d_confidence.len(),
        upstream.d_rotation.len(),
        upstream.d_translation.len(),
        upstream.d_focal.len(),
    ]
    .iter()
    .any(|&n| n != nf)
    {
        return Err(Error::shape("model backward", format!("{nf} frames"), "upstream gradients of another length"));
    }
    let l = cfg.n_tokens();
    let (_, gw) = cfg.grid();
    let p = cfg.patch;
    let p2 = p * p;
    let mut g = params.zeros_like();

    let mut d_seqs = Vec::with_capacity(nf);
    for (f, fc) in cache.frames.iter().enumerate() {
        let (dd, dc) = (&upstream.d_depth[f], &upstream.d_confidence[f]);
        if dd.shape() != fc.depth.depth.shape() || dc.shape() != fc.depth.depth.shape() {
            return Err(Error::shape("model backward", fc.depth.depth.shape_str(), dd.shape_str()));
        }
        let mut d_raw = Matrix::zeros(l, 2 * p2);
        for t in 0..l {
            for q in 0..p2 {
                let (r, c) = ((t / gw) * p + q / p, (t % gw) * p + q % p);
                d_raw[(t, q)] = dd[(r, c)] * fc.depth.depth[(r, c)];
                d_raw[(t, p2 + q)] = dc[(r, c)] * fc.depth.confidence[(r, c)];
            }
        }
        g.depth_head.w.add_assign(&d_raw.t_matmul(&fc.head_input)?)?;
        for (b, s) in g.depth_head.b.as_mut_slice().iter_mut().zip(d_raw.column_sums()) {
            *b += s;
        }
        let d_head_in = d_raw.matmul(&params.depth_head.w)?;
        let d_tokens = match &fc.post {
            Some(pc) => {
                let gr = degat::backward(pc, &params.degat, &d_head_in, None)?;
                accumulate_degat(&mut g.degat, &gr);
                gr.d_x
            }
            None => d_head_in,
        };

        let mut d_cam = vec![0.0; CAMERA_OUTPUTS];
        let (dr, dt) = (&upstream.d_rotation[f], &upstream.d_translation[f]);
        for i in 0..9 {
            d_cam[i] = dr[(i / 3, i % 3)];
        }
        d_cam[9..12].copy_from_slice(dt.as_slice());
        d_cam[12] = upstream.d_focal[f] * cfg.width as f64 * sigmoid(fc.camera_raw[12]);
        let (d_cam_row, gh) = params.camera_head.backward(&fc.camera, &row(&d_cam))?;
        accumulate(&mut g.camera_head, &gh);
        d_seqs.push(Matrix::vstack(&[d_cam_row, d_tokens])?);
    }

    if let Some(gc) = &cache.global {
        let (d_all, gb, _) = block_backward(&params.global, gc, &Matrix::vstack(&d_seqs)?)?;
        accumulate(&mut g.global, &gb);
        for (f, d) in d_seqs.iter_mut().enumerate() {
            *d = d_all.slice_rows(f * (l + 1), (f + 1) * (l + 1));
        }
    }

    for (fc, mut d_s) in cache.frames.iter().zip(d_seqs) {
        let mut d_bias: Option<Vec<Matrix>> = None;
        for i in (0..params.blocks.len()).rev() {
            let (d_in, gb, db) = block_backward(&params.blocks[i], &fc.blocks[i], &d_s)?;
            accumulate(&mut g.blocks[i], &gb);
            d_s = d_in;
            match &mut d_bias {
                Some(acc) => {
                    for (a, d) in acc.iter_mut().zip(&db) {
                        a.add_assign(d)?;
                    }
                }
                None => d_bias = Some(db),
            }
        }
        let d_token = d_s.row(0).to_vec();
        let d_x1 = d_s.slice_rows(1, l + 1);

        let mut d_alpha = None;
        if let Some(db) = &d_bias {
            let inner = unpad(db, 1);
            match &fc.bias {
                BiasCache::None => {}
                BiasCache::Bucket(index) => {
                    let gt = bias_table_gradient(&inner, index, params.bias.table.n_buckets)?;
                    g.bias.table.table.add_assign(&gt)?;
                }
                BiasCache::Mlp(mc) => {
                    let gm = mlp_bias_backward(&params.bias.mlp, mc, &inner)?;
                    accumulate(&mut g.bias.mlp, &gm);
                }
                BiasCache::LogAffinity(lb) => {
                    let mut dense = Matrix::zeros(l, l);
                    for h in &inner {
                        dense.add_assign(h)?;
                    }
                    let (_, dc) = fc.early.as_ref().expect("log-affinity bias has an early graph pass");
                    d_alpha = Some(lb.alpha_gradient(dc, &dense));
                }
            }
        }

        let mut d_refined = Matrix::zeros(l, cfg.dim);
        let cp = &params.conditioning;
        let d_base = match &fc.cond {
            CondCache::None => d_token,
            CondCache::Additive(cc) => {
                let (d_base, d_prior, gm) = additive_backward(&cp.additive, cc, &d_token)?;
                accumulate(&mut g.conditioning.additive, &gm);
                spread_prior(&mut d_refined, &d_prior);
                d_base
            }
            CondCache::Film(cc) => {
                let (d_base, d_prior, gm) = film_backward(&cp.film, cc, &d_token)?;
                accumulate(&mut g.conditioning.film, &gm);
                spread_prior(&mut d_refined, &d_prior);
                d_base
            }
            CondCache::CrossAttn(cc) => {
                let (d_base, d_tok, ga, gf) = cross_attention_backward(&cp.attn, &cp.ffn, cc, &d_token)?;
                accumulate(&mut g.conditioning.attn, &ga);
                accumulate(&mut g.conditioning.ffn, &gf);
                d_refined.add_assign(&d_tok)?;
                d_base
            }
        };
        for (a, b) in g.camera_token.as_mut_slice().iter_mut().zip(&d_base) {
            *a += b;
        }

        let mut d_x0 = if cfg.degat_placement == DegatPlacement::Pre {
            d_refined.add_assign(&d_x1)?;
            Matrix::zeros(l, cfg.dim)
        } else {
            d_x1
        };
        if let Some((_, dc)) = &fc.early {
            let gr = degat::backward(dc, &params.degat, &d_refined, d_alpha.as_deref())?;
            accumulate_degat(&mut g.degat, &gr);
            d_x0.add_assign(&gr.d_x)?;
        }

        g.patch_embed.w.add_assign(&d_x0.t_matmul(&fc.patches)?)?;
        for (b, s) in g.patch_embed.b.as_mut_slice().iter_mut().zip(d_x0.column_sums()) {
            *b += s;
        }
        g.pos.add_assign(&d_x0)?;
    }
    Ok(g)
}

/// Gradient of the column-mean prior, spread evenly over the tokens.
fn spread_prior(d_tokens: &mut Matrix, d_prior: &[f64]) {
    let n = d_tokens.rows() as f64;
    for r in 0..d_tokens.rows() {
        for (d, g) in d_tokens.row_mut(r).iter_mut().zip(d_prior) {
            *d += g / n;
        }
    }
}

/// Camera with the focal divided by the image width, so the focal residual
/// is on the same scale as the pose residuals.
fn width_normalized(cam: &CameraParams, width: f64) -> CameraParams {
    CameraParams::new(cam.rotation, cam.translation, cam.focal / width, cam.principal)
}

/// Frame-averaged loss and its gradients with respect to the outputs.
pub fn output_loss(
    output: &ModelOutput,
    gt_depths: &[Matrix],
    gt_cameras: &[CameraParams],
    weights: &LossWeights,
) -> Result<(LossBreakdown, OutputGrads)> {
    weights.validate()?;
    let nf = output.depths.len();
    if gt_depths.len() != nf || gt_cameras.len() != nf || output.cameras.len() != nf {
        return Err(Error::shape(
            "output_loss",
            format!("{nf} predicted frames"),
            format!("{} depths / {} cameras", gt_depths.len(), gt_cameras.len()),
        ));
    }
    let scale = 1.0 / nf as f64;
    let mut parts = Vec::with_capacity(nf);
    let mut grads = OutputGrads {
        d_depth: Vec::with_capacity(nf),
        d_confidence: Vec::with_capacity(nf),
        d_rotation: Vec::with_capacity(nf),
        d_translation: Vec::with_capacity(nf),
        d_focal: Vec::with_capacity(nf),
    };
    for ((pred, gt), (pc, gc)) in output.depths.iter().zip(gt_depths).zip(output.cameras.iter().zip(gt_cameras)) {
        let w = pred.width() as f64;
        let (pn, gn) = (width_normalized(pc, w), width_normalized(gc, w));
        let (depth, dg) = depth_loss_with_grad(pred, gt, weights)?;
        let (dr, dt, df) = camera_loss_grad(&pn, &gn);
        parts.push(LossBreakdown::new(camera_loss(&pn, &gn), depth.reg, depth.unc, depth.grad));
        grads.d_depth.push(dg.d_depth.scale(scale));
        grads.d_confidence.push(dg.d_confidence.scale(scale));
        grads.d_rotation.push(dr * scale);
        grads.d_translation.push(dt * scale);
        grads.d_focal.push(df * scale / w);
    }
    Ok((LossBreakdown::mean(&parts), grads))
}

/// Forward, loss and backward in one call.
pub fn loss_and_gradients(
    params: &ModelParams,
    cfg: &ModelConfig,
    frames: &[ImageGrid],
    gt_depths: &[Matrix],
    gt_cameras: &[CameraParams],
    weights: &LossWeights,
) -> Result<(LossBreakdown, ModelParams)> {
    let (out, cache) = forward(params, cfg, frames)?;
    let (loss, up) = output_loss(&out, gt_depths, gt_cameras, weights)?;
    let grads = backward(params, &cache, &up)?;
    Ok((loss, grads))
}

/// Loss value only.
pub fn loss_value(
    params: &ModelParams,
    cfg: &ModelConfig,
    frames: &[ImageGrid],
    gt_depths: &[Matrix],
    gt_cameras: &[CameraParams],
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let (out, _) = forward(params, cfg, frames)?;
    Ok(output_loss(&out, gt_depths, gt_cameras, weights)?.0)
}
