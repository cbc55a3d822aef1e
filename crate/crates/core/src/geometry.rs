//! Pinhole back-projection of depth maps into world-frame point clouds, the
//! inverse projection, and ASCII PLY export.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ImageGrid;
use crate::numerics::Matrix;

const ORTHONORMAL_TOL: f64 = 1e-9;

/// Camera-to-world pose plus pinhole intrinsics with a single focal length.
/// The rotation is not required to be orthonormal; predicted poses are raw
/// 3×3 matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraParams {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub focal: f64,
    pub principal: (f64, f64),
}

impl CameraParams {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>, focal: f64, principal: (f64, f64)) -> Self {
        CameraParams {
            rotation,
            translation,
            focal,
            principal,
        }
    }

    /// Identity pose with the principal point at the centre of a `w × h` image.
    pub fn centered(focal: f64, width: usize, height: usize) -> Self {
        CameraParams::new(Matrix3::identity(), Vector3::zeros(), focal, default_principal(width, height))
    }

    pub fn is_orthonormal(&self, tol: f64) -> bool {
        let err = self.rotation.transpose() * self.rotation - Matrix3::identity();
        err.iter().all(|v| v.abs() <= tol)
    }

    /// Rotation entries row-major.
    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [r[(0, 0)], r[(0, 1)], r[(0, 2)], r[(1, 0)], r[(1, 1)], r[(1, 2)], r[(2, 0)], r[(2, 1)], r[(2, 2)]]
    }
}

/// `((W-1)/2, (H-1)/2)`.
pub fn default_principal(width: usize, height: usize) -> (f64, f64) {
    ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0)
}

/// Rotation from an axis-angle vector (direction = axis, norm = angle).
pub fn rotation_from_axis_angle(axis_angle: [f64; 3]) -> Matrix3<f64> {
    Rotation3::from_scaled_axis(Vector3::from(axis_angle)).into_inner()
}

/// Closest proper rotation in Frobenius norm, via SVD.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * vt;
    }
    r
}

/// Per-pixel depth with a paired positive confidence map, both `H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub depth: Matrix,
    pub confidence: Matrix,
}

impl DepthMap {
    pub fn new(depth: Matrix, confidence: Matrix) -> Result<Self> {
        if depth.shape() != confidence.shape() {
            return Err(Error::shape("DepthMap", depth.shape_str(), confidence.shape_str()));
        }
        Ok(DepthMap { depth, confidence })
    }

    /// Depth with unit confidence everywhere.
    pub fn from_depth(depth: Matrix) -> Self {
        let confidence = Matrix::from_fn(depth.rows(), depth.cols(), |_, _| 1.0);
        DepthMap { depth, confidence }
    }

    pub fn height(&self) -> usize {
        self.depth.rows()
    }

    pub fn width(&self) -> usize {
        self.depth.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    /// RGB in `[0, 1]`, one per point when present.
    pub colors: Option<Vec<[f64; 3]>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn intrinsic_matrix(focal: f64, cx: f64, cy: f64) -> Result<Matrix3<f64>> {
    if !(focal > 0.0) {
        return Err(Error::invalid(format!("focal length must be positive, got {focal}")));
    }
    Ok(Matrix3::new(focal, 0.0, cx, 0.0, focal, cy, 0.0, 0.0, 1.0))
}

/// Camera-frame point `depth · K⁻¹ (u, v, 1)ᵀ`.
pub fn camera_frame_point(u: f64, v: f64, depth: f64, cam: &CameraParams) -> Result<Vector3<f64>> {
    if !(depth > 0.0) {
        return Err(Error::invalid(format!("depth must be positive, got {depth}")));
    }
    if !(cam.focal > 0.0) {
        return Err(Error::invalid(format!("focal length must be positive, got {}", cam.focal)));
    }
    let (cx, cy) = cam.principal;
    Ok(Vector3::new(depth * (u - cx) / cam.focal, depth * (v - cy) / cam.focal, depth))
}

/// World point `R · (depth · K⁻¹ ũ) + T`.
pub fn backproject_pixel(u: f64, v: f64, depth: f64, cam: &CameraParams) -> Result<Vector3<f64>> {
    Ok(cam.rotation * camera_frame_point(u, v, depth, cam)? + cam.translation)
}

/// One point per pixel with positive finite depth, row-major pixel order.
/// Returns the cloud and the number of skipped pixels.
pub fn depth_to_pointcloud(d: &DepthMap, cam: &CameraParams, image: Option<&ImageGrid>) -> Result<(PointCloud, usize)> {
    if let Some(img) = image {
        if (img.height, img.width) != (d.height(), d.width()) {
            return Err(Error::shape(
                "depth_to_pointcloud",
                format!("depth {}x{}", d.height(), d.width()),
                format!("image {}x{}", img.height, img.width),
            ));
        }
    }
    let mut points = Vec::with_capacity(d.height() * d.width());
    let mut colors = image.map(|_| Vec::with_capacity(d.height() * d.width()));
    let mut skipped = 0;
    for row in 0..d.height() {
        for col in 0..d.width() {
            let z = d.depth[(row, col)];
            if !(z > 0.0 && z.is_finite()) {
                skipped += 1;
                continue;
            }
            let p = backproject_pixel(col as f64, row as f64, z, cam)?;
            points.push([p.x, p.y, p.z]);
            if let (Some(img), Some(colors)) = (image, colors.as_mut()) {
                colors.push(img.rgb01(row, col));
            }
        }
    }
    Ok((PointCloud { points, colors }, skipped))
}

/// Inverse of [`backproject_pixel`] for an orthonormal rotation:
/// returns `(u, v, depth)`.
pub fn project_point(p_world: &Vector3<f64>, cam: &CameraParams) -> Result<(f64, f64, f64)> {
    if !cam.is_orthonormal(ORTHONORMAL_TOL) {
        return Err(Error::invalid("projection requires an orthonormal rotation"));
    }
    let pc = cam.rotation.transpose() * (p_world - cam.translation);
    if !(pc.z > 0.0) {
        return Err(Error::BehindCamera(pc.z));
    }
    let (cx, cy) = cam.principal;
    Ok((cam.focal * pc.x / pc.z + cx, cam.focal * pc.y / pc.z + cy, pc.z))
}

pub fn ply_string(cloud: &PointCloud) -> String {
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", cloud.points.len());
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    if cloud.colors.is_some() {
        s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    s.push_str("end_header\n");
    for (i, p) in cloud.points.iter().enumerate() {
        let _ = write!(s, "{} {} {}", p[0], p[1], p[2]);
        if let Some(colors) = &cloud.colors {
            let c = colors[i];
            let byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            let _ = write!(s, " {} {} {}", byte(c[0]), byte(c[1]), byte(c[2]));
        }
        s.push('\n');
    }
    s
}

pub fn write_ply(cloud: &PointCloud, path: &Path) -> Result<()> {
    if let Some(colors) = &cloud.colors {
        if colors.len() != cloud.points.len() {
            return Err(Error::shape("write_ply", format!("{} points", cloud.points.len()), format!("{} colors", colors.len())));
        }
    }
    std::fs::write(path, ply_string(cloud)).map_err(|e| Error::io(path, e))
}

/// Pose JSON: `{R: [9 row-major], T: [3], f, cx, cy}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseJson {
    #[serde(rename = "R")]
    pub r: [f64; 9],
    #[serde(rename = "T")]
    pub t: [f64; 3],
    pub f: f64,
    pub cx: f64,
    pub cy: f64,
}

impl From<&CameraParams> for PoseJson {
    fn from(c: &CameraParams) -> Self {
        PoseJson {
            r: c.rotation_row_major(),
            t: [c.translation.x, c.translation.y, c.translation.z],
            f: c.focal,
            cx: c.principal.0,
            cy: c.principal.1,
        }
    }
}

impl From<&PoseJson> for CameraParams {
    fn from(p: &PoseJson) -> Self {
        CameraParams::new(Matrix3::from_row_slice(&p.r), Vector3::from(p.t), p.f, (p.cx, p.cy))
    }
}
