//! Calibrated pinhole-camera geometry.
//!
//! Conventions: a [`CameraPose`] stores the world-from-camera rotation and the
//! camera origin in world coordinates. The camera frame is x-right, y-down,
//! z-forward, so `K⁻¹ · (u, v, 1)` is a forward-pointing ray with pixel `v`
//! increasing downward. Intrinsics have zero skew.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used when checking that a rotation matrix is orthonormal.
pub const ORTHONORMAL_TOL: f64 = 1e-9;
/// Two rays whose directions satisfy `|dot| > 1 - PARALLEL_TOL` are parallel.
pub const PARALLEL_TOL: f64 = 1e-9;
/// Allowed deviation of a ray direction from unit length.
pub const UNIT_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("invalid calibration for view {view}: {reason}")]
    InvalidCalibration { view: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.fx.is_finite() && self.fx > 0.0 && self.fy.is_finite() && self.fy > 0.0) {
            return Err(format!("focal lengths must be positive (fx={}, fy={})", self.fx, self.fy));
        }
        if self.width == 0 || self.height == 0 {
            return Err("image dimensions must be nonzero".into());
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(format!("cx={} outside [0, {})", self.cx, self.width));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(format!("cy={} outside [0, {})", self.cy, self.height));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x <= (self.width - 1) as f64
            && pixel.y <= (self.height - 1) as f64
    }

    /// Clamps a pixel into `[0, width-1] × [0, height-1]`.
    pub fn clamp(&self, pixel: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new(
            pixel.x.clamp(0.0, (self.width - 1) as f64),
            pixel.y.clamp(0.0, (self.height - 1) as f64),
        )
    }
}

/// World-from-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "PoseRepr", try_from = "PoseRepr")]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    /// Camera origin in world coordinates (meters).
    pub translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    rotation: [f64; 9],
    translation: [f64; 3],
}

impl From<CameraPose> for PoseRepr {
    fn from(p: CameraPose) -> Self {
        let r = &p.rotation;
        PoseRepr {
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl TryFrom<PoseRepr> for CameraPose {
    type Error = String;

    fn try_from(p: PoseRepr) -> Result<Self, String> {
        if p.rotation.iter().chain(p.translation.iter()).any(|v| !v.is_finite()) {
            return Err("pose contains non-finite values".into());
        }
        Ok(CameraPose {
            rotation: Matrix3::from_row_slice(&p.rotation),
            translation: Vector3::from(p.translation),
        })
    }
}

impl CameraPose {
    pub fn identity() -> Self {
        CameraPose { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Pose at `origin` whose optical axis points at `target`, with the camera
    /// y-axis aligned as closely as possible with `down`.
    pub fn look_at(origin: Vector3<f64>, target: Vector3<f64>, down: Vector3<f64>) -> Result<Self, GeometryError> {
        let z = (target - origin)
            .try_normalize(1e-12)
            .ok_or_else(|| GeometryError::DegenerateGeometry("target coincides with origin".into()))?;
        let x = down
            .cross(&z)
            .try_normalize(1e-12)
            .ok_or_else(|| GeometryError::DegenerateGeometry("down vector parallel to view axis".into()))?;
        let y = z.cross(&x);
        Ok(CameraPose { rotation: Matrix3::from_columns(&[x, y, z]), translation: origin })
    }

    pub fn validate(&self) -> Result<(), String> {
        let r = &self.rotation;
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !(err <= ORTHONORMAL_TOL) {
            return Err(format!("rotation is not orthonormal (max deviation {err:e})"));
        }
        let det = r.determinant();
        if !((det - 1.0).abs() <= ORTHONORMAL_TOL) {
            return Err(format!("rotation determinant {det} != +1"));
        }
        Ok(())
    }

    pub fn optical_axis(&self) -> Vector3<f64> {
        self.rotation.column(2).into_owned()
    }

    pub fn world_to_camera(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (point - self.translation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraView {
    pub id: String,
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
}

impl CameraView {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let invalid = |reason: String| GeometryError::InvalidCalibration { view: self.id.clone(), reason };
        if self.id.is_empty() {
            return Err(invalid("empty view id".into()));
        }
        self.intrinsics.validate().map_err(invalid)?;
        self.pose.validate().map_err(invalid)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    direction: Vector3<f64>,
}

impl Ray {
    /// Builds a ray, normalizing `direction`.
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>) -> Result<Self, GeometryError> {
        if !origin.iter().chain(direction.iter()).all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidInput("non-finite ray".into()));
        }
        let direction = direction
            .try_normalize(1e-300)
            .ok_or_else(|| GeometryError::InvalidInput("zero ray direction".into()))?;
        Ok(Ray { origin, direction })
    }

    pub fn direction(&self) -> &Vector3<f64> {
        &self.direction
    }

    /// `origin + d · direction`.
    pub fn point_at(&self, d: f64) -> Vector3<f64> {
        self.origin + self.direction * d
    }
}

pub fn pixel_to_ray(view: &CameraView, pixel: &Vector2<f64>) -> Result<Ray, GeometryError> {
    if !(pixel.x.is_finite() && pixel.y.is_finite()) {
        return Err(GeometryError::InvalidInput(format!("non-finite pixel ({}, {})", pixel.x, pixel.y)));
    }
    let k = &view.intrinsics;
    let camera_dir = Vector3::new((pixel.x - k.cx) / k.fx, (pixel.y - k.cy) / k.fy, 1.0);
    Ray::new(view.pose.translation, view.pose.rotation * camera_dir)
}

pub fn ray_point(ray: &Ray, d: f64) -> Vector3<f64> {
    ray.point_at(d)
}

pub fn project_point(view: &CameraView, point: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
    let p = view.pose.world_to_camera(point);
    if !(p.z > 0.0) {
        return Err(GeometryError::BehindCamera { depth: p.z });
    }
    let k = &view.intrinsics;
    Ok(Vector2::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosestPoints {
    pub p1: Vector3<f64>,
    pub p2: Vector3<f64>,
    pub gap: f64,
}

impl ClosestPoints {
    pub fn midpoint(&self) -> Vector3<f64> {
        (self.p1 + self.p2) * 0.5
    }
}

/// Closest points between the infinite lines supporting two rays.
pub fn ray_ray_closest_points(r1: &Ray, r2: &Ray) -> Result<ClosestPoints, GeometryError> {
    let d1 = r1.direction();
    let d2 = r2.direction();
    let b = d1.dot(d2);
    if b.abs() > 1.0 - PARALLEL_TOL {
        return Err(GeometryError::DegenerateGeometry("rays are parallel".into()));
    }
    let w = r1.origin - r2.origin;
    let d = d1.dot(&w);
    let e = d2.dot(&w);
    // Unit directions: a = c = 1.
    let denom = 1.0 - b * b;
    let s = (b * e - d) / denom;
    let t = (e - b * d) / denom;
    let p1 = r1.point_at(s);
    let p2 = r2.point_at(t);
    Ok(ClosestPoints { p1, p2, gap: (p1 - p2).norm() })
}

/// Calibration file: `{"views": [{id, intrinsics, pose}, …]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub views: Vec<CameraView>,
}

impl CalibrationFile {
    pub fn from_json(bytes: &[u8]) -> Result<Self, GeometryError> {
        let file: CalibrationFile = serde_json::from_slice(bytes)
            .map_err(|e| GeometryError::InvalidInput(format!("calibration JSON: {e}")))?;
        for v in &file.views {
            v.validate()?;
        }
        Ok(file)
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec_pretty(self).expect("calibration serializes")
    }

    pub fn view(&self, id: &str) -> Option<&CameraView> {
        self.views.iter().find(|v| v.id == id)
    }
}
