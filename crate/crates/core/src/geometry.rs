//! Poses, camera calibration, point clouds, and exact pinhole projection.
//!
//! Geometry runs in f64 end to end; bulk point storage is f32 with promotion
//! at computation boundaries. Extrinsics are world→camera so projection is a
//! single transform.

use thiserror::Error;

pub type Mat3 = [[f64; 3]; 3];
pub type Vec3 = [f64; 3];

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("rotation matrix is not orthonormal (deviation {0:.3e})")]
    NotOrthonormal(f64),
    #[error("rotation matrix determinant is {0}, expected +1")]
    NotProperRotation(f64),
    #[error("invalid intrinsics: {0}")]
    BadIntrinsics(String),
    #[error("point cloud invariant violated: {0}")]
    BadCloud(String),
}

/// Rigid transform: rotation plus translation, applied as `R * p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

pub const IDENTITY_ROTATION: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn mat3_transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

pub fn mat3_apply(a: &Mat3, v: &Vec3) -> Vec3 {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

pub fn mat3_det(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// Rotation about +z by `yaw` radians.
pub fn yaw_rotation(yaw: f64) -> Mat3 {
    let (s, c) = yaw.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        rotation: IDENTITY_ROTATION,
        translation: [0.0; 3],
    };

    /// Validated constructor: rotation must be orthonormal with determinant +1
    /// (both within 1e-9).
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Pose, GeometryError> {
        let rt_r = mat3_mul(&mat3_transpose(&rotation), &rotation);
        let mut dev: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                dev = dev.max((rt_r[i][j] - expect).abs());
            }
        }
        if dev > 1e-9 {
            return Err(GeometryError::NotOrthonormal(dev));
        }
        let det = mat3_det(&rotation);
        if (det - 1.0).abs() > 1e-9 {
            return Err(GeometryError::NotProperRotation(det));
        }
        Ok(Pose { rotation, translation })
    }

    pub fn from_yaw_translation(yaw: f64, translation: Vec3) -> Pose {
        Pose {
            rotation: yaw_rotation(yaw),
            translation,
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        let r = mat3_apply(&self.rotation, p);
        [
            r[0] + self.translation[0],
            r[1] + self.translation[1],
            r[2] + self.translation[2],
        ]
    }

    pub fn inverse(&self) -> Pose {
        let rt = mat3_transpose(&self.rotation);
        let t = mat3_apply(&rt, &self.translation);
        Pose {
            rotation: rt,
            translation: [-t[0], -t[1], -t[2]],
        }
    }

    /// Composition: `(self ∘ other)(p) = self(other(p))`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: mat3_mul(&self.rotation, &other.rotation),
            translation: self.apply(&other.translation),
        }
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(GeometryError::BadIntrinsics(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        if cx < 0.0 || cx >= width as f64 || cy < 0.0 || cy >= height as f64 {
            return Err(GeometryError::BadIntrinsics(format!(
                "principal point ({cx}, {cy}) outside [0,{width})x[0,{height})"
            )));
        }
        Ok(CameraIntrinsics { fx, fy, cx, cy, width, height })
    }
}

/// A calibrated view: intrinsics plus world→camera extrinsics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraView {
    pub view_id: u32,
    pub intrinsics: CameraIntrinsics,
    /// World→camera.
    pub extrinsics: Pose,
}

/// Timestamped points with per-point intensity. Storage is f32; computation
/// promotes to f64.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f32; 3]>,
    pub intensity: Vec<f32>,
    pub timestamp: f64,
}

impl PointCloud {
    pub fn new(points: Vec<[f32; 3]>, intensity: Vec<f32>, timestamp: f64) -> Result<Self, GeometryError> {
        if points.len() != intensity.len() {
            return Err(GeometryError::BadCloud(format!(
                "intensity length {} != point count {}",
                intensity.len(),
                points.len()
            )));
        }
        if points.iter().any(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(GeometryError::BadCloud("non-finite coordinate".into()));
        }
        Ok(PointCloud { points, intensity, timestamp })
    }

    pub fn empty(timestamp: f64) -> Self {
        PointCloud {
            points: Vec::new(),
            intensity: Vec::new(),
            timestamp,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point_f64(&self, i: usize) -> Vec3 {
        let p = self.points[i];
        [p[0] as f64, p[1] as f64, p[2] as f64]
    }
}

/// Per-point projection result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub valid: bool,
}

/// Projects world points through the pinhole model. Points behind the camera
/// or outside the half-open image rectangle are flagged invalid rather than
/// erroring.
pub fn project_points(view: &CameraView, pts: &[Vec3]) -> Vec<Projection> {
    pts.iter().map(|p| project_point(view, p)).collect()
}

pub fn project_point(view: &CameraView, p: &Vec3) -> Projection {
    let cam = view.extrinsics.apply(p);
    let k = &view.intrinsics;
    let z = cam[2];
    if z <= 0.0 {
        return Projection { u: 0.0, v: 0.0, depth: z, valid: false };
    }
    let u = k.fx * cam[0] / z + k.cx;
    let v = k.fy * cam[1] / z + k.cy;
    // Half-open pixel intervals: u = width is out.
    let valid = u >= 0.0 && u < k.width as f64 && v >= 0.0 && v < k.height as f64;
    Projection { u, v, depth: z, valid }
}

/// Inverse of `project_point` for a valid sample: back-projects pixel
/// coordinates at a camera depth to the world point.
pub fn back_project(view: &CameraView, u: f64, v: f64, depth: f64) -> Vec3 {
    let k = &view.intrinsics;
    let cam = [(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth];
    view.extrinsics.inverse().apply(&cam)
}

pub fn transform_points(pose: &Pose, pts: &[Vec3]) -> Vec<Vec3> {
    pts.iter().map(|p| pose.apply(p)).collect()
}
