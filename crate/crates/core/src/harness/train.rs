use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim, ImageGrid, SsimConfig};
use crate::model::{forward, loss_and_gradients, output_loss, sgd_step, ModelConfig, ModelParams};
use crate::numerics::Matrix;
use crate::objective::{LossBreakdown, LossWeights};

use super::config::{RunConfig, TrainerConfig};
use super::scene::SyntheticScene;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Mean `|D̂ − D|` over all pixels and frames.
    pub depth_abs_error: f64,
    /// Mean per-frame camera loss (focal in image widths).
    pub camera_loss: f64,
    /// On depth maps min-max normalized by the ground-truth range; infinite
    /// for a perfect prediction.
    #[serde(with = "super::float_or_inf")]
    pub psnr: f64,
    pub ssim: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    /// Loss at the parameters each step's gradient was taken at.
    pub history: Vec<LossBreakdown>,
    pub initial: EvalMetrics,
    #[serde(rename = "final")]
    pub final_metrics: EvalMetrics,
    pub wall_time_secs: f64,
}

fn normalize(d: &Matrix, lo: f64, range: f64) -> Result<ImageGrid> {
    ImageGrid::new(d.rows(), d.cols(), 1, d.data().iter().map(|v| (v - lo) / range).collect(), 1.0)
}

/// Mean absolute error, PSNR and SSIM of predicted against reference depth
/// maps, each frame normalized by the reference's min-max range.
pub fn depth_image_metrics(pred: &[Matrix], gt: &[Matrix]) -> Result<(f64, f64, f64)> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::shape("depth metrics", format!("{} predictions", pred.len()), format!("{} references", gt.len())));
    }
    let (mut abs, mut count, mut psnr_sum, mut ssim_sum) = (0.0, 0usize, 0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        if p.shape() != g.shape() {
            return Err(Error::shape("depth metrics", p.shape_str(), g.shape_str()));
        }
        abs += p.data().iter().zip(g.data()).map(|(a, b)| (a - b).abs()).sum::<f64>();
        count += p.data().len();
        let lo = g.data().iter().copied().fold(f64::INFINITY, f64::min);
        let hi = g.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = if hi > lo { hi - lo } else { 1.0 };
        let (pi, gi) = (normalize(p, lo, range)?, normalize(g, lo, range)?);
        psnr_sum += psnr(&pi, &gi, 1.0)?;
        ssim_sum += ssim(&pi, &gi, &SsimConfig::default())?;
    }
    let n = pred.len() as f64;
    Ok((abs / count as f64, psnr_sum / n, ssim_sum / n))
}

pub fn evaluate(params: &ModelParams, cfg: &ModelConfig, scene: &SyntheticScene, weights: &LossWeights) -> Result<EvalMetrics> {
    let (out, _) = forward(params, cfg, &scene.frames)?;
    let (loss, _) = output_loss(&out, &scene.gt_depth, &scene.gt_cameras, weights)?;
    let pred: Vec<Matrix> = out.depths.iter().map(|d| d.depth.clone()).collect();
    let (depth_abs_error, psnr, ssim) = depth_image_metrics(&pred, &scene.gt_depth)?;
    Ok(EvalMetrics {
        depth_abs_error,
        camera_loss: loss.cam,
        psnr,
        ssim,
        loss,
    })
}

fn check_scene(cfg: &ModelConfig, scene: &SyntheticScene) -> Result<()> {
    if scene.n_frames() == 0 || scene.height() != cfg.height || scene.width() != cfg.width {
        return Err(Error::shape(
            "train",
            format!("{}x{} config", cfg.height, cfg.width),
            format!("{} frames of {}x{}", scene.n_frames(), scene.height(), scene.width()),
        ));
    }
    Ok(())
}

/// Plain gradient descent from freshly initialized parameters. Aborts with
/// [`Error::Diverged`] as soon as a loss or gradient is non-finite.
pub fn train(run: &RunConfig, scene: &SyntheticScene) -> Result<(ModelParams, RunReport)> {
    train_from(ModelParams::init(&run.model)?, run, scene)
}

pub fn train_from(mut params: ModelParams, run: &RunConfig, scene: &SyntheticScene) -> Result<(ModelParams, RunReport)> {
    run.validate()?;
    let cfg = &run.model;
    check_scene(cfg, scene)?;
    let TrainerConfig { steps, lr, .. } = run.trainer;
    let started = Instant::now();
    let initial = evaluate(&params, cfg, scene, &run.loss)?;
    let mut history = Vec::with_capacity(steps);
    for step in 0..steps {
        let (loss, grads) = match loss_and_gradients(&params, cfg, &scene.frames, &scene.gt_depth, &scene.gt_cameras, &run.loss) {
            Err(Error::NonFinite(what)) => return Err(Error::Diverged { step, what }),
            other => other?,
        };
        if !loss.is_finite() {
            return Err(Error::Diverged { step, what: "loss".into() });
        }
        if !grads.is_finite() {
            return Err(Error::Diverged { step, what: "gradient".into() });
        }
        history.push(loss);
        sgd_step(&mut params, &grads, lr)?;
        if !params.is_finite() {
            return Err(Error::Diverged { step, what: "parameters".into() });
        }
    }
    let final_metrics = evaluate(&params, cfg, scene, &run.loss)?;
    let report = RunReport {
        config: *run,
        history,
        initial,
        final_metrics,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok((params, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub k: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub depth_abs_error: f64,
    pub camera_loss: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// One training run per neighbour count, everything else fixed.
pub fn ablate_k(run: &RunConfig, scene: &SyntheticScene, ks: &[usize]) -> Result<Vec<AblationRow>> {
    if ks.is_empty() {
        return Err(Error::invalid("no K values given"));
    }
    for &k in ks {
        RunConfig {
            model: ModelConfig { k_neighbors: k, ..run.model },
            ..*run
        }
        .validate()?;
    }
    ks.iter()
        .map(|&k| {
            let r = RunConfig {
                model: ModelConfig { k_neighbors: k, ..run.model },
                ..*run
            };
            let (_, report) = train(&r, scene)?;
            let f = report.final_metrics;
            Ok(AblationRow {
                k,
                initial_loss: report.initial.loss.total,
                final_loss: f.loss.total,
                depth_abs_error: f.depth_abs_error,
                camera_loss: f.camera_loss,
                psnr: f.psnr,
                ssim: f.ssim,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("k,initial_loss,final_loss,depth_abs_error,camera_loss,psnr,ssim\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.k, r.initial_loss, r.final_loss, r.depth_abs_error, r.camera_loss, r.psnr, r.ssim
        );
    }
    s
}
