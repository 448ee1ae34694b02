//! Procedural toy driving scenes and an analytic LiDAR ray caster.
//!
//! The caster is exact: oriented boxes via slab test in the box frame, plus an
//! infinite ground plane at z = 0. Pedestrian skeletons are non-occluding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, CameraView, PointCloud, Pose, Vec3};

pub const SKELETON_JOINTS: usize = 17;

/// COCO-style limb list over the 17-joint convention.
pub const LIMBS: [(usize, usize); 12] = [
    (5, 7),
    (7, 9),
    (6, 8),
    (8, 10),
    (5, 6),
    (5, 11),
    (6, 12),
    (11, 12),
    (11, 13),
    (13, 15),
    (12, 14),
    (14, 16),
];

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("scene params request zero lanes and zero boxes")]
    EmptyScene,
    #[error("invalid lidar pattern: {0}")]
    BadPattern(String),
    #[error("invalid layout: {0}")]
    BadLayout(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub center: Vec3,
    /// Full extents along the box axes, strictly positive.
    pub size: Vec3,
    pub yaw: f64,
    pub category: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub joints: Vec<Vec3>,
    pub visible: Vec<bool>,
}

///// Structured BEV layout: lanes, pose skeletons, and 3-D boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SceneLayout {
    pub lanes: Vec<Vec<Vec3>>,
    pub skeletons: Vec<Skeleton>,
    pub boxes: Vec<OrientedBox>,
}

impl SceneLayout {
    pub fn validate(&self) -> Result<(), SceneError> {
        for lane in &self.lanes {
            if lane.len() < 2 {
                return Err(SceneError::BadLayout("polyline with fewer than 2 vertices".into()));
            }
        }
        for b in &self.boxes {
            if b.size.iter().any(|&s| s <= 0.0) {
                return Err(SceneError::BadLayout(format!("non-positive box size {:?}", b.size)));
            }
        }
        for s in &self.skeletons {
            if s.joints.len() != SKELETON_JOINTS || s.visible.len() != SKELETON_JOINTS {
                return Err(SceneError::BadLayout(format!(
                    "skeleton with {} joints, expected {}",
                    s.joints.len(),
                    SKELETON_JOINTS
                )));
            }
        }
        Ok(())
    }
}

/// Per-frame ego poses at a fixed frame period.
#[derive(Debug, Clone, PartialEq)]
pub struct EgoTrajectory {
    pub poses: Vec<Pose>,
    pub frame_period: f64,
}

/// Spinning-LiDAR firing pattern: rings of evenly spaced azimuths.
#[derive(Debug, Clone, PartialEq)]
pub struct LidarPattern {
    pub azimuth_count: usize,
    pub elevations: Vec<f64>,
    pub max_range: f64,
}

impl LidarPattern {
    pub fn new(azimuth_count: usize, elevations: Vec<f64>, max_range: f64) -> Result<Self, SceneError> {
        if azimuth_count == 0 {
            return Err(SceneError::BadPattern("azimuth count must be >= 1".into()));
        }
        if max_range <= 0.0 {
            return Err(SceneError::BadPattern("max range must be > 0".into()));
        }
        Ok(LidarPattern { azimuth_count, elevations, max_range })
    }

    /// Default pattern: 180 azimuths, 24 rings from steep down to shallow.
    pub fn default_pattern() -> LidarPattern {
        let elevations = (0..24)
            .map(|i| (-60.0 + i as f64 * (54.0 / 23.0)).to_radians())
            .collect();
        LidarPattern {
            azimuth_count: 180,
            elevations,
            max_range: 70.0,
        }
    }

    /// Ray directions in the sensor frame, azimuth-major then elevation.
    pub fn directions(&self) -> Vec<Vec3> {
        let mut dirs = Vec::with_capacity(self.azimuth_count * self.elevations.len());
        for ai in 0..self.azimuth_count {
            let az = 2.0 * std::f64::consts::PI * ai as f64 / self.azimuth_count as f64;
            let (saz, caz) = az.sin_cos();
            for &el in &self.elevations {
                let (sel, cel) = el.sin_cos();
                dirs.push([caz * cel, saz * cel, sel]);
            }
        }
        dirs
    }
}

/// Scene-size knobs for the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    pub n_lanes: usize,
    pub n_boxes: usize,
    pub n_pedestrians: usize,
    pub n_frames: usize,
    /// Half-width of the square world extent, meters.
    pub world_extent: f64,
    pub frame_period: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            n_lanes: 2,
            n_boxes: 6,
            n_pedestrians: 2,
            n_frames: 8,
            world_extent: 40.0,
            frame_period: 0.5,
        }
    }
}

/// Deterministic procedural scene: lanes on the ground plane, boxes inside the
/// world extent, skeletons from a fixed template, and a straight ego path.
pub fn gen_scene(seed: u64, params: &SceneParams) -> Result<(SceneLayout, EgoTrajectory), SceneError> {
    if params.n_lanes == 0 && params.n_boxes == 0 {
        return Err(SceneError::EmptyScene);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ext = params.world_extent;

    let mut lanes = Vec::with_capacity(params.n_lanes);
    for li in 0..params.n_lanes {
        let y = -6.0 + 4.0 * li as f64 + rng.gen_range(-0.5..0.5);
        let curvature: f64 = rng.gen_range(-0.002..0.002);
        let n_pts = 16;
        let lane: Vec<Vec3> = (0..n_pts)
            .map(|i| {
                let x = -ext + 2.0 * ext * i as f64 / (n_pts - 1) as f64;
                [x, y + curvature * x * x, 0.0]
            })
            .collect();
        lanes.push(lane);
    }

    let mut boxes = Vec::with_capacity(params.n_boxes);
    for _ in 0..params.n_boxes {
        let size = [
            rng.gen_range(1.6..5.0),
            rng.gen_range(1.5..2.2),
            rng.gen_range(1.4..2.4),
        ];
        let margin = 3.0;
        // Keep a corridor along the ego path (y = 0) clear, as a real scene
        // would: an obstacle overlapping the sensor occludes everything.
        const EGO_CLEARANCE: f64 = 6.0;
        let mut center = [0.0, 0.0, size[2] / 2.0];
        for _ in 0..64 {
            center[0] = rng.gen_range(-(ext - margin)..(ext - margin));
            center[1] = rng.gen_range(-(ext - margin)..(ext - margin));
            if center[1].abs() > EGO_CLEARANCE {
                break;
            }
        }
        boxes.push(OrientedBox {
            center,
            size,
            yaw: rng.gen_range(0.0..std::f64::consts::TAU),
            category: rng.gen_range(0..3),
        });
    }

    let mut skeletons = Vec::with_capacity(params.n_pedestrians);
    for _ in 0..params.n_pedestrians {
        let mut base = [0.0, 0.0, 0.0];
        for _ in 0..64 {
            base[0] = rng.gen_range(-(ext - 2.0)..(ext - 2.0));
            base[1] = rng.gen_range(-(ext - 2.0)..(ext - 2.0));
            if base[1].abs() > 6.0 {
                break;
            }
        }
        let yaw = rng.gen_range(0.0..std::f64::consts::TAU);
        skeletons.push(skeleton_template(base, yaw));
    }

    let mut poses = Vec::with_capacity(params.n_frames);
    let speed = rng.gen_range(3.0..8.0);
    for f in 0..params.n_frames {
        let x = -ext * 0.5 + speed * params.frame_period * f as f64;
        poses.push(Pose::from_yaw_translation(0.0, [x, 0.0, 0.0]));
    }

    let layout = SceneLayout { lanes, skeletons, boxes };
    layout.validate()?;
    Ok((layout, EgoTrajectory { poses, frame_period: params.frame_period }))
}

/// Standing 17-joint figure at `base`, facing `yaw`.
pub fn skeleton_template(base: Vec3, yaw: f64) -> Skeleton {
    // (forward, lateral, up) offsets in meters, COCO joint order.
    const T: [[f64; 3]; SKELETON_JOINTS] = [
        [0.05, 0.00, 1.70], // nose
        [0.04, 0.03, 1.73], // left eye
        [0.04, -0.03, 1.73], // right eye
        [0.00, 0.07, 1.70], // left ear
        [0.00, -0.07, 1.70], // right ear
        [0.00, 0.20, 1.45], // left shoulder
        [0.00, -0.20, 1.45], // right shoulder
        [0.00, 0.28, 1.15], // left elbow
        [0.00, -0.28, 1.15], // right elbow
        [0.00, 0.30, 0.85], // left wrist
        [0.00, -0.30, 0.85], // right wrist
        [0.00, 0.12, 0.95], // left hip
        [0.00, -0.12, 0.95], // right hip
        [0.02, 0.13, 0.50], // left knee
        [0.02, -0.13, 0.50], // right knee
        [0.00, 0.14, 0.05], // left ankle
        [0.00, -0.14, 0.05], // right ankle
    ];
    let (s, c) = yaw.sin_cos();
    let joints = T
        .iter()
        .map(|[fx, fy, fz]| {
            [
                base[0] + c * fx - s * fy,
                base[1] + s * fx + c * fy,
                base[2] + fz,
            ]
        })
        .collect();
    Skeleton {
        joints,
        visible: vec![true; SKELETON_JOINTS],
    }
}

/// Evenly yaw-spaced camera rig with shared intrinsics.
pub fn gen_rig(n_views: u32) -> Vec<CameraView> {
    assert!(n_views >= 1, "rig needs at least one view");
    let intrinsics = CameraIntrinsics::new(400.0, 400.0, 320.0, 240.0, 640, 480).unwrap();
    (0..n_views)
        .map(|v| {
            let yaw = std::f64::consts::TAU * v as f64 / n_views as f64;
            // Camera frame: +z optical axis along the view yaw, +x right, +y down.
            let (s, c) = yaw.sin_cos();
            // world->camera rotation rows: right, down, forward in world coords.
            let rotation = [
                [s, -c, 0.0],
                [0.0, 0.0, -1.0],
                [c, s, 0.0],
            ];
            let mount = [0.0, 0.0, 1.6];
            let rp = [
                rotation[0][0] * mount[0] + rotation[0][1] * mount[1] + rotation[0][2] * mount[2],
                rotation[1][0] * mount[0] + rotation[1][1] * mount[1] + rotation[1][2] * mount[2],
                rotation[2][0] * mount[0] + rotation[2][1] * mount[1] + rotation[2][2] * mount[2],
            ];
            let extrinsics = Pose::new(rotation, [-rp[0], -rp[1], -rp[2]]).unwrap();
            CameraView { view_id: v, intrinsics, extrinsics }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub t: f64,
    pub point: Vec3,
    pub intensity: f32,
}

/// Nearest analytic intersection of a world-space ray with the scene, within
/// `max_range`. Direction must be unit length.
pub fn intersect_scene(layout: &SceneLayout, origin: &Vec3, dir: &Vec3, max_range: f64) -> Option<RayHit> {
    let mut best: Option<RayHit> = None;
    // Ground plane z = 0.
    if dir[2] != 0.0 {
        let t = -origin[2] / dir[2];
        if t > 1e-9 && t <= max_range {
            best = Some(RayHit {
                t,
                point: [origin[0] + t * dir[0], origin[1] + t * dir[1], 0.0],
                intensity: 0.3,
            });
        }
    }
    for b in &layout.boxes {
        if let Some(t) = ray_box(origin, dir, b) {
            if t > 1e-9 && t <= max_range && best.map_or(true, |h| t < h.t) {
                best = Some(RayHit {
                    t,
                    point: [
                        origin[0] + t * dir[0],
                        origin[1] + t * dir[1],
                        origin[2] + t * dir[2],
                    ],
                    intensity: 0.8,
                });
            }
        }
    }
    best
}

/// Slab test against an oriented box; returns the entry parameter.
fn ray_box(origin: &Vec3, dir: &Vec3, b: &OrientedBox) -> Option<f64> {
    // Transform the ray into the box frame (inverse yaw about center).
    let (s, c) = b.yaw.sin_cos();
    let rel = [origin[0] - b.center[0], origin[1] - b.center[1], origin[2] - b.center[2]];
    let o = [c * rel[0] + s * rel[1], -s * rel[0] + c * rel[1], rel[2]];
    let d = [c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1], dir[2]];
    let half = [b.size[0] / 2.0, b.size[1] / 2.0, b.size[2] / 2.0];
    let mut t_min = f64::NEG_INFINITY;
    let mut t_max = f64::INFINITY;
    for a in 0..3 {
        if d[a] == 0.0 {
            if o[a].abs() > half[a] {
                return None;
            }
        } else {
            let t1 = (-half[a] - o[a]) / d[a];
            let t2 = (half[a] - o[a]) / d[a];
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            t_min = t_min.max(lo);
            t_max = t_max.min(hi);
            if t_min > t_max {
                return None;
            }
        }
    }
    if t_max < 0.0 {
        return None;
    }
    Some(if t_min > 0.0 { t_min } else { t_max })
}

/// Casts the pattern's rays from `sensor` and returns hits in ray order.
pub fn cast_rays(layout: &SceneLayout, sensor: &Pose, pattern: &LidarPattern) -> PointCloud {
    let origin = sensor.translation;
    let mut points = Vec::new();
    let mut intensity = Vec::new();
    for dir_local in pattern.directions() {
        let dir = crate::geometry::mat3_apply(&sensor.rotation, &dir_local);
        if let Some(hit) = intersect_scene(layout, &origin, &dir, pattern.max_range) {
            points.push([hit.point[0] as f32, hit.point[1] as f32, hit.point[2] as f32]);
            intensity.push(hit.intensity);
        }
    }
    PointCloud { points, intensity, timestamp: 0.0 }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gen_scene_is_deterministic() {
        let p = SceneParams::default();
        let (a, ta) = gen_scene(7, &p).unwrap();
        let (b, tb) = gen_scene(7, &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
    }

    #[test]
    fn gen_scene_empty_boxes() {
        let p = SceneParams { n_boxes: 0, ..Default::default() };
        let (layout, _) = gen_scene(3, &p).unwrap();
        assert!(layout.boxes.is_empty());
    }

    #[test]
    fn gen_scene_box_count_and_bounds() {
        let p = SceneParams { n_boxes: 5, ..Default::default() };
        let (layout, _) = gen_scene(7, &p).unwrap();
        assert_eq!(layout.boxes.len(), 5);
        for b in &layout.boxes {
            assert!(b.center[0].abs() <= p.world_extent);
            assert!(b.center[1].abs() <= p.world_extent);
        }
        for lane in &layout.lanes {
            assert!(lane.iter().all(|p| p[2] == 0.0));
        }
    }

    #[test]
    fn gen_scene_rejects_fully_empty() {
        let p = SceneParams { n_lanes: 0, n_boxes: 0, ..Default::default() };
        assert!(matches!(gen_scene(0, &p), Err(SceneError::EmptyScene)));
    }

    #[test]
    fn cast_no_geometry_no_points() {
        let layout = SceneLayout { lanes: vec![vec![[0.0; 3], [1.0, 0.0, 0.0]]], ..Default::default() };
        // Rays parallel to ground at z = 1 never hit the plane, no boxes.
        let pattern = LidarPattern::new(8, vec![0.0], 50.0).unwrap();
        let sensor = Pose::from_yaw_translation(0.0, [0.0, 0.0, 1.0]);
        let cloud = cast_rays(&layout, &sensor, &pattern);
        assert!(cloud.is_empty());
    }

    #[test]
    fn cast_hits_box_face() {
        // Axis-aligned box with its near face at x = 10.
        let layout = SceneLayout {
            boxes: vec![OrientedBox {
                center: [11.0, 0.0, 1.0],
                size: [2.0, 4.0, 2.0],
                yaw: 0.0,
                category: 0,
            }],
            ..Default::default()
        };
        let hit = intersect_scene(&layout, &[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0], 50.0).unwrap();
        assert!((hit.point[0] - 10.0).abs() < 1e-9);
        assert!(hit.point[1].abs() < 1e-9);
        assert!((hit.point[2] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cast_ground_at_45_degrees() {
        let layout = SceneLayout { lanes: vec![vec![[0.0; 3], [1.0, 0.0, 0.0]]], ..Default::default() };
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let hit = intersect_scene(&layout, &[0.0, 0.0, 2.0], &[s, 0.0, -s], 50.0).unwrap();
        assert!((hit.point[0] - 2.0).abs() < 1e-9);
        assert!(hit.point[2].abs() < 1e-12);
    }

    #[test]
    fn cast_point_count_bounded_by_rays() {
        let p = SceneParams::default();
        let (layout, _) = gen_scene(11, &p).unwrap();
        let pattern = LidarPattern::default_pattern();
        let sensor = Pose::from_yaw_translation(0.0, [0.0, 0.0, 2.0]);
        let cloud = cast_rays(&layout, &sensor, &pattern);
        assert!(cloud.len() <= pattern.azimuth_count * pattern.elevations.len());
        assert!(!cloud.is_empty());
    }

    #[test]
    fn cast_points_are_first_hits() {
        // Re-intersection: the segment sensor->p must hit nothing strictly earlier.
        let p = SceneParams::default();
        let (layout, _) = gen_scene(13, &p).unwrap();
        let sensor = Pose::from_yaw_translation(0.0, [0.0, 0.0, 2.0]);
        let pattern = LidarPattern::new(60, vec![-0.5, -0.2, -0.05], 70.0).unwrap();
        let cloud = cast_rays(&layout, &sensor, &pattern);
        for i in 0..cloud.len() {
            let pt = cloud.point_f64(i);
            let d = [
                pt[0] - sensor.translation[0],
                pt[1] - sensor.translation[1],
                pt[2] - sensor.translation[2],
            ];
            let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            let dir = [d[0] / len, d[1] / len, d[2] / len];
            let hit = intersect_scene(&layout, &sensor.translation, &dir, pattern.max_range).unwrap();
            // f32 point storage, so allow coarse agreement.
            assert!(hit.t >= len - 1e-3, "earlier surface at t={} vs {}", hit.t, len);
        }
    }

    #[test]
    fn rig_spacing_and_ids() {
        let rig = gen_rig(6);
        assert_eq!(rig.len(), 6);
        let ids: std::collections::HashSet<u32> = rig.iter().map(|v| v.view_id).collect();
        assert_eq!(ids.len(), 6);
        // Forward axes 60 degrees apart: check dot of consecutive forward vectors.
        for w in rig.windows(2) {
            let f0 = w[0].extrinsics.rotation[2];
            let f1 = w[1].extrinsics.rotation[2];
            let dot = f0[0] * f1[0] + f0[1] * f1[1] + f0[2] * f1[2];
            assert!((dot - 60f64.to_radians().cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn single_view_rig_faces_forward() {
        let rig = gen_rig(1);
        assert_eq!(rig.len(), 1);
        let fwd = rig[0].extrinsics.rotation[2];
        assert!((fwd[0] - 1.0).abs() < 1e-12 && fwd[1].abs() < 1e-12);
    }

    #[test]
    fn pattern_validation() {
        assert!(LidarPattern::new(0, vec![0.0], 10.0).is_err());
        assert!(LidarPattern::new(4, vec![0.0], -1.0).is_err());
    }
}
