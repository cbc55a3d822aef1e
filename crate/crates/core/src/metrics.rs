//! Image-fidelity metrics: MSE, PSNR and Gaussian-window SSIM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Interleaved `height × width × channels` image with values in `[0, max_val]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    pub max_val: f64,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>, max_val: f64) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("images have 1 or 3 channels, got {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(
                "ImageGrid",
                format!("{height}x{width}x{channels}"),
                format!("{} values", data.len()),
            ));
        }
        if !(max_val > 0.0) {
            return Err(Error::invalid(format!("max_val must be positive, got {max_val}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image".into()));
        }
        Ok(ImageGrid {
            height,
            width,
            channels,
            data,
            max_val,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64, max_val: f64) -> Self {
        ImageGrid {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
            max_val,
        }
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f64) {
        self.data[(row * self.width + col) * self.channels + ch] = v;
    }

    /// RGB scaled to `[0, 1]`; grey images are replicated.
    pub fn rgb01(&self, row: usize, col: usize) -> [f64; 3] {
        let g = |c: usize| self.get(row, col, c.min(self.channels - 1)) / self.max_val;
        [g(0), g(1), g(2)]
    }

    /// One channel as a row-major plane.
    pub fn plane(&self, ch: usize) -> Vec<f64> {
        (0..self.height * self.width).map(|p| self.data[p * self.channels + ch]).collect()
    }

    fn same_shape(&self, other: &ImageGrid, op: &'static str) -> Result<()> {
        if (self.height, self.width, self.channels) != (other.height, other.width, other.channels) {
            return Err(Error::shape(
                op,
                format!("{}x{}x{}", self.height, self.width, self.channels),
                format!("{}x{}x{}", other.height, other.width, other.channels),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimConfig {
    pub fn with_range(dynamic_range: f64) -> Self {
        SsimConfig {
            dynamic_range,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(Error::invalid(format!("SSIM window must be odd and at least 3, got {}", self.window)));
        }
        if !(self.k1 > 0.0 && self.k2 > 0.0 && self.sigma > 0.0 && self.dynamic_range > 0.0) {
            return Err(Error::invalid("SSIM constants must be positive"));
        }
        Ok(())
    }

    /// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| {
                let x = i as f64 - r;
                (-x * x / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }
}

pub fn mse(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    a.same_shape(b, "mse")?;
    let n = a.data.len() as f64;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// `10 log10(max² / mse)`; infinite when the MSE is zero.
pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_val * max_val / mse).log10()
    }
}

pub fn psnr(a: &ImageGrid, b: &ImageGrid, max_val: f64) -> Result<f64> {
    if !(max_val > 0.0) {
        return Err(Error::invalid(format!("max_val must be positive, got {max_val}")));
    }
    Ok(psnr_from_mse(mse(a, b)?, max_val))
}

/// Separable valid-mode filter of a row-major plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let n = taps.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = taps.iter().enumerate().map(|(t, k)| k * plane[r * w + c + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = taps.iter().enumerate().map(|(t, k)| k * rows[(r + t) * ow + c]).sum();
        }
    }
    out
}

fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize, cfg: &SsimConfig) -> f64 {
    let taps = cfg.taps();
    let c1 = (cfg.k1 * cfg.dynamic_range).powi(2);
    let c2 = (cfg.k2 * cfg.dynamic_range).powi(2);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mu_x = filter_valid(x, h, w, &taps);
    let mu_y = filter_valid(y, h, w, &taps);
    let e_xx = filter_valid(&xx, h, w, &taps);
    let e_yy = filter_valid(&yy, h, w, &taps);
    let e_xy = filter_valid(&xy, h, w, &taps);
    let n = mu_x.len();
    let mut total = 0.0;
    for i in 0..n {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = e_xx[i] - mx * mx;
        let vy = e_yy[i] - my * my;
        let cov = e_xy[i] - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    total / n as f64
}

/// Mean SSIM over all valid window positions, averaged over channels.
pub fn ssim(a: &ImageGrid, b: &ImageGrid, cfg: &SsimConfig) -> Result<f64> {
    cfg.validate()?;
    a.same_shape(b, "ssim")?;
    if a.height < cfg.window || a.width < cfg.window {
        return Err(Error::invalid(format!(
            "image {}x{} is smaller than the {}x{} SSIM window",
            a.height, a.width, cfg.window, cfg.window
        )));
    }
    let total: f64 = (0..a.channels)
        .map(|ch| ssim_plane(&a.plane(ch), &b.plane(ch), a.height, a.width, cfg))
        .sum();
    Ok(total / a.channels as f64)
}
