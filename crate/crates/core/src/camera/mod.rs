//! Camera poses and their per-pixel Plücker ray embeddings.
//!
//! Extrinsics follow the world-to-camera convention, so the camera centre is
//! `o = -Rᵀ t`. Ray directions are `d = R K⁻¹ [u, v, 1]ᵀ` by default; the
//! [`RayConvention::RotatedPlusTranslation`] variant adds `t` to that
//! product. Each pixel `(x, y)` is sampled at its centre `(x + 0.5, y + 0.5)`.

mod adapter;

pub use adapter::{
    camera_adapter, conv2d, depth_to_space, inject_camera, relu, residual_block, space_to_depth,
    AdapterConfig, AdapterError, CameraAdapter, Conv2d, ConvSpec, ResidualBlock,
};

use std::io::{Read, Write};

use ndarray::{Array3, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::latent::{read_f32_container, write_f32_container, LatentError};

pub const PLUCKER_MAGIC: [u8; 4] = *b"PLUK";

/// Tolerance for the orthonormality and determinant checks on `R`.
pub const ROTATION_TOL: f64 = 1e-6;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

#[derive(Debug, Error)]
pub enum CameraError {
    #[error("invalid rotation: {0}")]
    InvalidRotation(String),
    #[error("invalid intrinsics: fx={fx}, fy={fy}")]
    InvalidIntrinsics { fx: f64, fy: f64 },
    #[error("invalid image size {height}x{width}")]
    InvalidSize { height: usize, width: usize },
    #[error("zero-length ray direction at pixel ({u}, {v})")]
    ZeroDirection { u: f64, v: f64 },
    #[error("frame {frame} is {found:?}, expected {expected:?}")]
    ResolutionMismatch {
        frame: usize,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error(transparent)]
    Container(#[from] LatentError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn identity() -> Self {
        Self { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0 }
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(CameraError::InvalidIntrinsics { fx: self.fx, fy: self.fy });
        }
        Ok(())
    }

    /// `K⁻¹ [u, v, 1]ᵀ`.
    pub fn unproject(&self, u: f64, v: f64) -> Vec3 {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }
}

/// Rotation and translation mapping world points into the camera frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extrinsics {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Extrinsics {
    pub fn identity() -> Self {
        Self { rotation: IDENTITY, translation: [0.0; 3] }
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        let r = &self.rotation;
        if r.iter().flatten().any(|x| !x.is_finite()) || self.translation.iter().any(|x| !x.is_finite()) {
            return Err(CameraError::InvalidRotation("non-finite entries".into()));
        }
        let rtr = matmul(&transpose(r), r);
        for (i, row) in rtr.iter().enumerate() {
            for (j, &x) in row.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                if (x - want).abs() > ROTATION_TOL {
                    return Err(CameraError::InvalidRotation(format!(
                        "RᵀR[{i}][{j}] = {x}, expected {want}"
                    )));
                }
            }
        }
        let d = det(r);
        if (d - 1.0).abs() > ROTATION_TOL {
            return Err(CameraError::InvalidRotation(format!("det(R) = {d}")));
        }
        Ok(())
    }

    /// Camera centre in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> Vec3 {
        let c = matvec(&transpose(&self.rotation), &self.translation);
        [-c[0], -c[1], -c[2]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RayConvention {
    /// `d = R K⁻¹ [u, v, 1]ᵀ`.
    #[default]
    Rotated,
    /// `d = R K⁻¹ [u, v, 1]ᵀ + t`.
    RotatedPlusTranslation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub intrinsics: Intrinsics,
    pub extrinsics: Extrinsics,
    pub height: usize,
    pub width: usize,
}

impl CameraPose {
    pub fn validate(&self) -> Result<(), CameraError> {
        if self.height == 0 || self.width == 0 {
            return Err(CameraError::InvalidSize { height: self.height, width: self.width });
        }
        self.intrinsics.validate()?;
        self.extrinsics.validate()
    }
}

pub fn camera_center(ext: &Extrinsics) -> Result<Vec3, CameraError> {
    ext.validate()?;
    Ok(ext.center())
}

/// Unit ray direction through pixel coordinates `(u, v)`.
pub fn ray_direction(pose: &CameraPose, u: f64, v: f64, convention: RayConvention) -> Result<Vec3, CameraError> {
    pose.validate()?;
    direction_unchecked(pose, u, v, convention)
}

fn direction_unchecked(pose: &CameraPose, u: f64, v: f64, convention: RayConvention) -> Result<Vec3, CameraError> {
    let mut d = matvec(&pose.extrinsics.rotation, &pose.intrinsics.unproject(u, v));
    if convention == RayConvention::RotatedPlusTranslation {
        for (di, ti) in d.iter_mut().zip(pose.extrinsics.translation) {
            *di += ti;
        }
    }
    let n = norm(&d);
    if !(n > 0.0) || !n.is_finite() {
        return Err(CameraError::ZeroDirection { u, v });
    }
    Ok([d[0] / n, d[1] / n, d[2] / n])
}

/// `(o × d, d)` for a ray through `origin` with unit direction `dir`.
pub fn plucker_coordinates(origin: &Vec3, dir: &Vec3) -> [f64; 6] {
    let m = cross(origin, dir);
    [m[0], m[1], m[2], dir[0], dir[1], dir[2]]
}

/// `6 × H × W` embedding of one pose: channels 0-2 hold the moment, 3-5 the
/// unit direction.
pub fn plucker_embedding(pose: &CameraPose, convention: RayConvention) -> Result<Array3<f64>, CameraError> {
    pose.validate()?;
    let origin = pose.extrinsics.center();
    let mut out = Array3::zeros((6, pose.height, pose.width));
    for y in 0..pose.height {
        for x in 0..pose.width {
            let d = direction_unchecked(pose, x as f64 + 0.5, y as f64 + 0.5, convention)?;
            for (c, val) in plucker_coordinates(&origin, &d).into_iter().enumerate() {
                out[[c, y, x]] = val;
            }
        }
    }
    Ok(out)
}

/// Per-frame Plücker embeddings of a trajectory, shape `L × 6 × H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlueckerMap {
    values: Array4<f64>,
}

impl PlueckerMap {
    pub fn new(values: Array4<f64>) -> Self {
        assert_eq!(values.shape()[1], 6, "Plücker maps have 6 channels");
        Self { values }
    }

    pub fn num_frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.values.shape()[2], self.values.shape()[3])
    }

    pub fn values(&self) -> &Array4<f64> {
        &self.values
    }

    pub fn frame(&self, i: usize) -> ArrayView3<'_, f64> {
        self.values.index_axis(Axis(0), i)
    }

    /// Largest deviations from the per-pixel invariants:
    /// `(max |‖d‖ - 1|, max |(o × d)·d|)`.
    pub fn invariant_errors(&self) -> (f64, f64) {
        let mut unit: f64 = 0.0;
        let mut ortho: f64 = 0.0;
        let (h, w) = self.resolution();
        for f in 0..self.num_frames() {
            for y in 0..h {
                for x in 0..w {
                    let px = |c: usize| self.values[[f, c, y, x]];
                    let m = [px(0), px(1), px(2)];
                    let d = [px(3), px(4), px(5)];
                    unit = unit.max((norm(&d) - 1.0).abs());
                    ortho = ortho.max(dot(&m, &d).abs());
                }
            }
        }
        (unit, ortho)
    }

    pub fn write_binary<W: Write>(&self, w: W) -> Result<(), CameraError> {
        let dims: Vec<u32> = self.values.shape().iter().map(|&d| d as u32).collect();
        write_f32_container(w, PLUCKER_MAGIC, &dims, self.values.iter().copied())?;
        Ok(())
    }

    pub fn read_binary<R: Read>(r: R) -> Result<Self, CameraError> {
        let (dims, data) = read_f32_container(r, PLUCKER_MAGIC, 4, 4)?;
        let shape = (dims[0] as usize, dims[1] as usize, dims[2] as usize, dims[3] as usize);
        if shape.1 != 6 {
            return Err(LatentError::Truncated { declared: 6, found: shape.1 }.into());
        }
        let values = Array4::from_shape_vec(shape, data.into_iter().map(f64::from).collect())
            .expect("length checked against header");
        Ok(Self { values })
    }
}

pub fn trajectory_embedding(traj: &[CameraPose], convention: RayConvention) -> Result<PlueckerMap, CameraError> {
    let first = traj.first().ok_or(CameraError::EmptyTrajectory)?;
    let expected = (first.height, first.width);
    let mut values = Array4::zeros((traj.len(), 6, first.height, first.width));
    for (i, pose) in traj.iter().enumerate() {
        if (pose.height, pose.width) != expected {
            return Err(CameraError::ResolutionMismatch {
                frame: i,
                expected,
                found: (pose.height, pose.width),
            });
        }
        values.index_axis_mut(Axis(0), i).assign(&plucker_embedding(pose, convention)?);
    }
    Ok(PlueckerMap { values })
}

/// One line of a trajectory file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major rotation.
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
}

impl From<PoseRecord> for CameraPose {
    fn from(p: PoseRecord) -> Self {
        let r = p.r;
        CameraPose {
            intrinsics: Intrinsics { fx: p.fx, fy: p.fy, cx: p.cx, cy: p.cy },
            extrinsics: Extrinsics {
                rotation: [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]],
                translation: p.t,
            },
            height: p.h,
            width: p.w,
        }
    }
}

impl From<&CameraPose> for PoseRecord {
    fn from(p: &CameraPose) -> Self {
        let r = p.extrinsics.rotation;
        PoseRecord {
            fx: p.intrinsics.fx,
            fy: p.intrinsics.fy,
            cx: p.intrinsics.cx,
            cy: p.intrinsics.cy,
            r: [r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2]],
            t: p.extrinsics.translation,
            h: p.height,
            w: p.width,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrajectoryParseError {
    #[error("malformed pose at line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("invalid rotation at line {line}: {message}")]
    Rotation { line: usize, message: String },
    #[error("invalid pose at line {line}: {source}")]
    Pose { line: usize, source: CameraError },
}

/// Parses JSON-lines poses; blank lines are skipped, line numbers are 1-based.
pub fn parse_trajectory(text: &str) -> Result<Vec<CameraPose>, TrajectoryParseError> {
    let mut poses = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: PoseRecord = serde_json::from_str(raw)
            .map_err(|e| TrajectoryParseError::Malformed { line, message: e.to_string() })?;
        let pose = CameraPose::from(rec);
        match pose.validate() {
            Ok(()) => poses.push(pose),
            Err(CameraError::InvalidRotation(message)) => {
                return Err(TrajectoryParseError::Rotation { line, message })
            }
            Err(source) => return Err(TrajectoryParseError::Pose { line, source }),
        }
    }
    Ok(poses)
}

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm(a: &Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn matvec(m: &Mat3, v: &Vec3) -> Vec3 {
    [dot(&m[0], v), dot(&m[1], v), dot(&m[2], v)]
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for (i, row) in m.iter().enumerate() {
        for (j, &x) in row.iter().enumerate() {
            t[j][i] = x;
        }
    }
    t
}

pub fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    let bt = transpose(b);
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = dot(&a[i], &bt[j]);
        }
    }
    out
}

pub fn det(m: &Mat3) -> f64 {
    dot(&m[0], &cross(&m[1], &m[2]))
}

/// Rotation by `angle` radians about a unit `axis` (Rodrigues).
pub fn axis_angle(axis: &Vec3, angle: f64) -> Mat3 {
    let n = norm(axis);
    let [x, y, z] = [axis[0] / n, axis[1] / n, axis[2] / n];
    let (s, c) = angle.sin_cos();
    let k = 1.0 - c;
    [
        [c + x * x * k, x * y * k - z * s, x * z * k + y * s],
        [y * x * k + z * s, c + y * y * k, y * z * k - x * s],
        [z * x * k - y * s, z * y * k + x * s, c + z * z * k],
    ]
}
