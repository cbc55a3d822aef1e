//! PFM, PPM/PGM and pose-JSON reading and writing.
//!
//! PFM rows are stored bottom-to-top; a negative scale marks little-endian
//! data, and files are always written little-endian with scale `-1.0`.
//! PPM/PGM support the binary (`P6`/`P5`) and ASCII (`P3`/`P2`) variants with
//! maxval up to 65535.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{CameraParams, PoseJson};
use crate::metrics::ImageGrid;
use crate::numerics::Matrix;

fn format_err(format: &'static str, path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        format,
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Splits a Netpbm/PFM header into `count` whitespace-separated tokens,
/// skipping `#` comments, and returns them with the offset of the first
/// data byte (one whitespace byte after the last token).
fn header_tokens(bytes: &[u8], count: usize) -> Option<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return None;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    (i < bytes.len()).then_some((tokens, i + 1))
}

fn parse_dim(tok: &str, what: &str, format: &'static str, path: &Path) -> Result<usize> {
    match tok.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(format_err(format, path, format!("bad {what} {tok:?}"))),
    }
}

pub fn parse_pfm(bytes: &[u8], path: &Path) -> Result<ImageGrid> {
    let (tok, start) = header_tokens(bytes, 4).ok_or_else(|| format_err("PFM", path, "truncated header"))?;
    let channels = match tok[0].as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(format_err("PFM", path, format!("unknown magic {other:?}"))),
    };
    let w = parse_dim(&tok[1], "width", "PFM", path)?;
    let h = parse_dim(&tok[2], "height", "PFM", path)?;
    let scale: f64 = tok[3]
        .parse()
        .ok()
        .filter(|s: &f64| *s != 0.0 && s.is_finite())
        .ok_or_else(|| format_err("PFM", path, format!("bad scale {:?}", tok[3])))?;
    let n = w * h * channels;
    let body = &bytes[start..];
    if body.len() != 4 * n {
        return Err(format_err("PFM", path, format!("expected {} data bytes, found {}", 4 * n, body.len())));
    }
    let mut data = vec![0.0; n];
    for (k, chunk) in body.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if scale < 0.0 { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (file_row, rest) = (k / (w * channels), k % (w * channels));
        data[(h - 1 - file_row) * w * channels + rest] = v as f64;
    }
    ImageGrid::new(h, w, channels, data, 1.0)
}

pub fn pfm_bytes(image: &ImageGrid) -> Vec<u8> {
    let (h, w, ch) = (image.height, image.width, image.channels);
    let magic = if ch == 3 { "PF" } else { "Pf" };
    let mut out = format!("{magic}\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(4 * h * w * ch);
    for r in (0..h).rev() {
        for v in &image.data[r * w * ch..(r + 1) * w * ch] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn parse_pnm(bytes: &[u8], path: &Path) -> Result<ImageGrid> {
    let (tok, start) = header_tokens(bytes, 4).ok_or_else(|| format_err("PNM", path, "truncated header"))?;
    let (channels, ascii) = match tok[0].as_str() {
        "P6" => (3, false),
        "P5" => (1, false),
        "P3" => (3, true),
        "P2" => (1, true),
        other => return Err(format_err("PNM", path, format!("unsupported magic {other:?}"))),
    };
    let w = parse_dim(&tok[1], "width", "PNM", path)?;
    let h = parse_dim(&tok[2], "height", "PNM", path)?;
    let maxval = parse_dim(&tok[3], "maxval", "PNM", path)?;
    if maxval > 65535 {
        return Err(format_err("PNM", path, format!("maxval {maxval} exceeds 65535")));
    }
    let n = w * h * channels;
    let body = &bytes[start..];
    let data: Vec<f64> = if ascii {
        let vals: Vec<f64> = String::from_utf8_lossy(body)
            .split_ascii_whitespace()
            .map(|t| t.parse::<u32>().map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| format_err("PNM", path, "non-numeric sample"))?;
        if vals.len() != n {
            return Err(format_err("PNM", path, format!("expected {n} samples, found {}", vals.len())));
        }
        vals
    } else {
        let width = if maxval < 256 { 1 } else { 2 };
        if body.len() != n * width {
            return Err(format_err("PNM", path, format!("expected {} data bytes, found {}", n * width, body.len())));
        }
        if width == 1 {
            body.iter().map(|&b| f64::from(b)).collect()
        } else {
            body.chunks_exact(2).map(|c| f64::from(u16::from_be_bytes([c[0], c[1]]))).collect()
        }
    };
    if let Some(v) = data.iter().find(|&&v| v > maxval as f64) {
        return Err(format_err("PNM", path, format!("sample {v} exceeds maxval {maxval}")));
    }
    ImageGrid::new(h, w, channels, data, maxval as f64)
}

/// Binary PPM (3 channels) or PGM (1 channel). Samples are rounded and
/// clamped to `[0, maxval]`, where maxval is the image's `max_val` rounded.
pub fn pnm_bytes(image: &ImageGrid) -> Result<Vec<u8>> {
    let maxval = image.max_val.round();
    if !(1.0..=65535.0).contains(&maxval) {
        return Err(Error::invalid(format!("max value {} cannot be stored in PPM/PGM", image.max_val)));
    }
    let magic = if image.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n{}\n", image.width, image.height, maxval as u32).into_bytes();
    for v in &image.data {
        let s = v.round().clamp(0.0, maxval) as u16;
        if maxval < 256.0 {
            out.push(s as u8);
        } else {
            out.extend_from_slice(&s.to_be_bytes());
        }
    }
    Ok(out)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a PFM, PPM or PGM file, chosen by its magic bytes.
pub fn read_image(path: &Path) -> Result<ImageGrid> {
    let bytes = read_bytes(path)?;
    match bytes.get(..2) {
        Some(b"PF") | Some(b"Pf") => parse_pfm(&bytes, path),
        Some(m) if m[0] == b'P' => parse_pnm(&bytes, path),
        _ => Err(format_err("image", path, "not a PFM, PPM or PGM file")),
    }
}

pub fn write_pfm(path: &Path, image: &ImageGrid) -> Result<()> {
    write_bytes(path, &pfm_bytes(image))
}

pub fn write_pnm(path: &Path, image: &ImageGrid) -> Result<()> {
    write_bytes(path, &pnm_bytes(image)?)
}

/// Single-channel image as an `H × W` matrix.
pub fn read_depth(path: &Path) -> Result<Matrix> {
    let img = read_image(path)?;
    if img.channels != 1 {
        return Err(format_err("depth", path, format!("expected one channel, found {}", img.channels)));
    }
    Matrix::from_vec(img.height, img.width, img.data)
}

pub fn write_depth_pfm(path: &Path, depth: &Matrix) -> Result<()> {
    let img = ImageGrid::new(depth.rows(), depth.cols(), 1, depth.data().to_vec(), 1.0)?;
    write_pfm(path, &img)
}

pub fn read_pose(path: &Path) -> Result<CameraParams> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let pose: PoseJson = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let finite = pose.r.iter().chain(&pose.t).chain([&pose.f, &pose.cx, &pose.cy]).all(|v| v.is_finite());
    if !finite || !(pose.f > 0.0) {
        return Err(format_err("pose", path, "values must be finite with a positive focal length"));
    }
    Ok(CameraParams::from(&pose))
}

pub fn write_pose(path: &Path, cam: &CameraParams) -> Result<()> {
    let text = serde_json::to_string_pretty(&PoseJson::from(cam)).expect("pose serializes");
    write_bytes(path, text.as_bytes())
}
