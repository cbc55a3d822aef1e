//! Seeded synthetic deformable scenes: a tilted base plane with drifting
//! Gaussian bumps, small rigid camera motion, depth-correlated shading and a
//! bright bar sweeping across the view as an occluding instrument.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{default_principal, rotation_from_axis_angle, CameraParams};
use crate::metrics::ImageGrid;
use crate::numerics::Matrix;

pub const MIN_SCENE_SIZE: usize = 16;

const BASE_DEPTH: f64 = 2.5;
const MAX_TILT: f64 = 0.3;
const N_BUMPS: usize = 4;
const MAX_AMPLITUDE: f64 = 0.35;
/// Bumps pulse by up to this fraction of their amplitude.
const PULSE: f64 = 0.1;
const OCCLUDER_DEPTH: f64 = 0.5;
const OCCLUDER_HALF_WIDTH: f64 = 0.05;
const OCCLUDER_HALF_LENGTH: f64 = 0.3;
const NOISE_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
struct Bump {
    amplitude: f64,
    center: [f64; 2],
    velocity: [f64; 2],
    sigma: f64,
    phase: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub frames: Vec<ImageGrid>,
    pub gt_depth: Vec<Matrix>,
    pub gt_cameras: Vec<CameraParams>,
    /// Row-major, `true` where the occluder covers the pixel.
    pub occluder_masks: Vec<Vec<bool>>,
    /// Upper bound on `|D(r, c+1) − D(r, c)|` and `|D(r+1, c) − D(r, c)|`
    /// between pixels both off the occluder.
    pub depth_step_bound: f64,
}

impl SyntheticScene {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn height(&self) -> usize {
        self.gt_depth[0].rows()
    }

    pub fn width(&self) -> usize {
        self.gt_depth[0].cols()
    }

    /// Fraction of pixels covered by the occluder in each frame.
    pub fn occluder_fractions(&self) -> Vec<f64> {
        self.occluder_masks
            .iter()
            .map(|m| m.iter().filter(|&&b| b).count() as f64 / m.len() as f64)
            .collect()
    }
}

pub fn generate_scene(seed: u64, n_frames: usize, height: usize, width: usize) -> Result<SyntheticScene> {
    if height < MIN_SCENE_SIZE || width < MIN_SCENE_SIZE {
        return Err(Error::invalid(format!(
            "scene must be at least {MIN_SCENE_SIZE}x{MIN_SCENE_SIZE}, got {height}x{width}"
        )));
    }
    if n_frames == 0 {
        return Err(Error::invalid("scene needs at least one frame"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tilt = [rng.random_range(-MAX_TILT..MAX_TILT), rng.random_range(-MAX_TILT..MAX_TILT)];
    let bumps: Vec<Bump> = (0..N_BUMPS)
        .map(|_| Bump {
            amplitude: rng.random_range(-MAX_AMPLITUDE..MAX_AMPLITUDE),
            center: [rng.random_range(0.15..0.85), rng.random_range(0.15..0.85)],
            velocity: [rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03)],
            sigma: rng.random_range(0.1..0.25),
            phase: rng.random_range(0.0..2.0 * PI),
        })
        .collect();
    let tint = [rng.random_range(0.75..0.95), rng.random_range(0.35..0.55), rng.random_range(0.3..0.5)];
    let stripe_freq = rng.random_range(3.0..6.0);

    let base_axis = [rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)];
    let spin = [rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02)];
    let t0 = [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)];
    let drift = [rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02)];
    let focal = width as f64 * rng.random_range(0.9..1.3);

    let bar_center = [rng.random_range(0.35..0.65), rng.random_range(0.35..0.65)];
    let bar_velocity = [rng.random_range(-0.04..0.04), rng.random_range(-0.04..0.04)];
    let bar_angle = rng.random_range(0.0..PI);
    let bar_spin = rng.random_range(-0.2..0.2);

    let noise = Normal::new(0.0, NOISE_STD).expect("valid normal");
    let (hf, wf) = (height as f64, width as f64);

    let mut scene = SyntheticScene {
        frames: Vec::with_capacity(n_frames),
        gt_depth: Vec::with_capacity(n_frames),
        gt_cameras: Vec::with_capacity(n_frames),
        occluder_masks: Vec::with_capacity(n_frames),
        depth_step_bound: 0.0,
    };

    for t in 0..n_frames {
        let tf = t as f64;
        let axis = [0, 1, 2].map(|i| base_axis[i] + spin[i] * tf);
        let translation = [0, 1, 2].map(|i| t0[i] + drift[i] * tf);
        scene.gt_cameras.push(CameraParams::new(
            rotation_from_axis_angle(axis),
            translation.into(),
            focal,
            default_principal(width, height),
        ));

        // Bar: a segment through a drifting, wrapped centre.
        let center = [0, 1].map(|i| 0.3 + (bar_center[i] - 0.3 + bar_velocity[i] * tf).rem_euclid(0.4));
        let angle = bar_angle + bar_spin * tf;
        let dir = [angle.cos(), angle.sin()];

        let mut depth = Matrix::zeros(height, width);
        let mut mask = vec![false; height * width];
        let mut image = ImageGrid::filled(height, width, 3, 0.0, 1.0);
        for r in 0..height {
            for c in 0..width {
                let (u, v) = ((c as f64 + 0.5) / wf, (r as f64 + 0.5) / hf);
                let mut d = BASE_DEPTH + tilt[0] * (u - 0.5) + tilt[1] * (v - 0.5) + translation[2];
                for b in &bumps {
                    let cx = b.center[0] + b.velocity[0] * tf;
                    let cy = b.center[1] + b.velocity[1] * tf;
                    let amp = b.amplitude * (1.0 + PULSE * (b.phase + 0.7 * tf).sin());
                    let q = ((u - cx).powi(2) + (v - cy).powi(2)) / (2.0 * b.sigma * b.sigma);
                    d += amp * (-q).exp();
                }

                let (du, dv) = (u - center[0], v - center[1]);
                let along = du * dir[0] + dv * dir[1];
                let across = -du * dir[1] + dv * dir[0];
                let occluded = along.abs() <= OCCLUDER_HALF_LENGTH && across.abs() <= OCCLUDER_HALF_WIDTH;

                let rgb = if occluded {
                    [0.95, 0.95, 0.92]
                } else {
                    let shade = (1.6 - 0.4 * d).clamp(0.05, 1.0);
                    let stripe = 0.85 + 0.15 * (2.0 * PI * stripe_freq * (u + 0.5 * v)).sin();
                    tint.map(|k| k * shade * stripe)
                };
                for (ch, &val) in rgb.iter().enumerate() {
                    image.set(r, c, ch, (val + noise.sample(&mut rng)).clamp(0.0, 1.0));
                }
                depth[(r, c)] = if occluded { OCCLUDER_DEPTH } else { d };
                mask[r * width + c] = occluded;
            }
        }
        scene.frames.push(image);
        scene.gt_depth.push(depth);
        scene.occluder_masks.push(mask);
    }

    // Mean-value bound on one pixel step: the slope of the plane plus the
    // steepest slope e^{-1/2}|A|/sigma of every bump, per pixel.
    let steepest: f64 = bumps
        .iter()
        .map(|b| b.amplitude.abs() * (1.0 + PULSE) * (-0.5f64).exp() / b.sigma)
        .sum();
    scene.depth_step_bound = (tilt[0].abs().max(tilt[1].abs()) + steepest) / hf.min(wf);
    Ok(scene)
}
