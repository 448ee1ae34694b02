//! Stage implementations behind the subcommands.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use drivekit::bev::{voxelize, BevFeatureGrid, BevLatent, OccupancyGrid};
use drivekit::caption::{
    build_structured_caption, filter_clips, fuse_captions, score_clip, ObjectAnnotation,
    SceneRecord, ScoredClip, StructuredCaption, ViewCaptionSet,
};
use drivekit::flow::{euler_sample, train_toy_flow, ToyFlowModel};
use drivekit::geometry::{project_point, Mat3, Pose, Vec3};
use drivekit::io::{
    load_calibration, load_gbv1, load_gpc1, load_layout, load_tensors, save_calibration,
    save_gbv1, save_gpc1, save_layout, save_tensors, GridBlob,
};
use drivekit::layout::{rasterize_layout, ControlMap, CONTROL_CHANNELS};
use drivekit::lss::{lift, splat, ImageFeatureMap};
use drivekit::metrics::{chamfer_horizons, CropVolume};
use drivekit::render::{render_rays, RayBatch};
use drivekit::scene::{cast_rays, gen_rig, gen_scene, LidarPattern, SceneParams};
use drivekit::{
    BevGridSpec, CameraIntrinsics, CameraView, CodecParams, EgoTrajectory, PointCloud,
};

use crate::config::{make_pattern, render_config, RunConfig};

/// Mounted LiDAR height above the ego origin, meters.
pub const SENSOR_HEIGHT: f64 = 1.8;

const CHAMFER_CONVENTION: &str =
    "0.5 * (mean_a min_b |a-b| + mean_b min_a |b-a|), euclidean, meters";

/// Validation failures exit with code 1, stage failures with code 2.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Stage { stage: &'static str, cause: String },
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(msg) => write!(f, "invalid input: {msg}"),
            CliError::Stage { stage, cause } => write!(f, "stage {stage} failed: {cause}"),
        }
    }
}

fn stage_err<E: fmt::Display>(stage: &'static str) -> impl Fn(E) -> CliError {
    move |e| CliError::Stage { stage, cause: e.to_string() }
}

// ---------------------------------------------------------------------------
// Argument parsing helpers

/// "default" or "x_min,x_max,y_min,y_max,z_min,z_max,cell_size,n_z_bins".
pub fn parse_spec(text: &str) -> Result<BevGridSpec, CliError> {
    if text == "default" {
        return Ok(BevGridSpec::default());
    }
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 8 {
        return Err(CliError::Validation(format!(
            "grid spec needs \"default\" or 8 comma-separated values \
             (x_min,x_max,y_min,y_max,z_min,z_max,cell_size,n_z_bins), got {text:?}"
        )));
    }
    let num = |i: usize| -> Result<f64, CliError> {
        parts[i]
            .trim()
            .parse()
            .map_err(|e| CliError::Validation(format!("grid spec field {}: {e}", i + 1)))
    };
    let spec = BevGridSpec {
        x_min: num(0)?,
        x_max: num(1)?,
        y_min: num(2)?,
        y_max: num(3)?,
        z_min: num(4)?,
        z_max: num(5)?,
        cell_size_xy: num(6)?,
        n_z_bins: parts[7]
            .trim()
            .parse()
            .map_err(|e| CliError::Validation(format!("grid spec n_z_bins: {e}")))?,
    };
    spec.validate()
        .map_err(|e| CliError::Validation(format!("grid spec: {e}")))?;
    Ok(spec)
}

/// "default" or "azimuths,rings,max_range".
pub fn parse_pattern(text: &str) -> Result<LidarPattern, CliError> {
    if text == "default" {
        return Ok(LidarPattern::default_pattern());
    }
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 3 {
        return Err(CliError::Validation(format!(
            "pattern needs \"default\" or azimuths,rings,max_range, got {text:?}"
        )));
    }
    let azimuths: usize = parts[0]
        .trim()
        .parse()
        .map_err(|e| CliError::Validation(format!("pattern azimuths: {e}")))?;
    let rings: usize = parts[1]
        .trim()
        .parse()
        .map_err(|e| CliError::Validation(format!("pattern rings: {e}")))?;
    let max_range: f64 = parts[2]
        .trim()
        .parse()
        .map_err(|e| CliError::Validation(format!("pattern max_range: {e}")))?;
    if azimuths == 0 || rings == 0 || !(max_range > 0.0) {
        return Err(CliError::Validation(format!(
            "pattern needs azimuths >= 1, rings >= 1, max_range > 0, got {text:?}"
        )));
    }
    Ok(make_pattern(azimuths, rings, max_range))
}

/// "default" or "x0,x1,y0,y1,z0,z1".
pub fn parse_volume(text: &str) -> Result<CropVolume, CliError> {
    if text == "default" {
        return Ok(CropVolume::default());
    }
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 6 {
        return Err(CliError::Validation(format!(
            "volume needs \"default\" or x0,x1,y0,y1,z0,z1, got {text:?}"
        )));
    }
    let num = |i: usize| -> Result<f64, CliError> {
        parts[i]
            .trim()
            .parse()
            .map_err(|e| CliError::Validation(format!("volume field {}: {e}", i + 1)))
    };
    let volume = CropVolume {
        x_min: num(0)?,
        x_max: num(1)?,
        y_min: num(2)?,
        y_max: num(3)?,
        z_min: num(4)?,
        z_max: num(5)?,
    };
    if volume.x_min > volume.x_max || volume.y_min > volume.y_max || volume.z_min > volume.z_max {
        return Err(CliError::Validation(format!("volume bounds are inverted: {text:?}")));
    }
    Ok(volume)
}

pub fn parse_skip(text: &str) -> Result<bool, CliError> {
    match text {
        "on" => Ok(true),
        "off" => Ok(false),
        other => Err(CliError::Validation(format!("--skip must be on or off, got {other:?}"))),
    }
}

// ---------------------------------------------------------------------------
// Trajectory serialization (ego poses are not part of the layout JSON)

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub rotation: Mat3,
    pub translation: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFile {
    pub frame_period: f64,
    pub poses: Vec<PoseRecord>,
}

pub fn save_trajectory(path: &Path, trajectory: &EgoTrajectory) -> Result<(), CliError> {
    let file = TrajectoryFile {
        frame_period: trajectory.frame_period,
        poses: trajectory
            .poses
            .iter()
            .map(|p| PoseRecord { rotation: p.rotation, translation: p.translation })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&file).map_err(stage_err("trajectory-write"))?;
    fs::write(path, text).map_err(stage_err("trajectory-write"))
}

pub fn load_trajectory(path: &Path) -> Result<EgoTrajectory, CliError> {
    let text = fs::read_to_string(path).map_err(stage_err("trajectory-read"))?;
    let file: TrajectoryFile = serde_json::from_str(&text).map_err(stage_err("trajectory-read"))?;
    let poses = file
        .poses
        .iter()
        .map(|r| Pose::new(r.rotation, r.translation))
        .collect::<Result<Vec<_>, _>>()
        .map_err(stage_err("trajectory-read"))?;
    Ok(EgoTrajectory { poses, frame_period: file.frame_period })
}

/// LiDAR pose for a frame: the ego pose lifted by the sensor height.
pub fn sensor_pose(ego: &Pose) -> Pose {
    let mut t = ego.translation;
    t[2] += SENSOR_HEIGHT;
    Pose { rotation: ego.rotation, translation: t }
}

// ---------------------------------------------------------------------------
// Grid <-> file helpers

pub fn save_feature_grid(path: &Path, grid: &BevFeatureGrid) -> Result<(), CliError> {
    let blob = GridBlob::from_f64(grid.spec.nx(), grid.spec.ny(), grid.channels(), &grid.values)
        .map_err(stage_err("grid-write"))?;
    save_gbv1(path, &blob).map_err(stage_err("grid-write"))
}

pub fn load_feature_grid(path: &Path, spec: &BevGridSpec) -> Result<BevFeatureGrid, CliError> {
    let blob = load_gbv1(path).map_err(stage_err("grid-read"))?;
    if blob.h as usize != spec.nx() || blob.w as usize != spec.ny() || blob.c as usize != spec.n_z_bins + 2 {
        return Err(CliError::Validation(format!(
            "feature grid {} is {}x{}x{}, spec expects {}x{}x{}",
            path.display(),
            blob.h,
            blob.w,
            blob.c,
            spec.nx(),
            spec.ny(),
            spec.n_z_bins + 2
        )));
    }
    Ok(BevFeatureGrid { spec: *spec, values: blob.values_f64() })
}

pub fn save_occupancy(path: &Path, occ: &OccupancyGrid) -> Result<(), CliError> {
    let blob = GridBlob::from_f64(occ.spec.nx(), occ.spec.ny(), occ.spec.n_z_bins, &occ.values)
        .map_err(stage_err("grid-write"))?;
    save_gbv1(path, &blob).map_err(stage_err("grid-write"))
}

pub fn load_occupancy(path: &Path, spec: &BevGridSpec) -> Result<OccupancyGrid, CliError> {
    let blob = load_gbv1(path).map_err(stage_err("grid-read"))?;
    if blob.h as usize != spec.nx() || blob.w as usize != spec.ny() || blob.c as usize != spec.n_z_bins {
        return Err(CliError::Validation(format!(
            "occupancy grid {} is {}x{}x{}, spec expects {}x{}x{}",
            path.display(),
            blob.h,
            blob.w,
            blob.c,
            spec.nx(),
            spec.ny(),
            spec.n_z_bins
        )));
    }
    Ok(OccupancyGrid { spec: *spec, values: blob.values_f64() })
}

pub fn save_latent(path: &Path, latent: &BevLatent) -> Result<(), CliError> {
    let blob = GridBlob::from_f64(latent.h, latent.w, drivekit::bev::LATENT_CHANNELS, &latent.values)
        .map_err(stage_err("latent-write"))?;
    save_gbv1(path, &blob).map_err(stage_err("latent-write"))
}

pub fn load_latent(path: &Path) -> Result<BevLatent, CliError> {
    let blob = load_gbv1(path).map_err(stage_err("latent-read"))?;
    if blob.c as usize != drivekit::bev::LATENT_CHANNELS {
        return Err(CliError::Validation(format!(
            "latent {} has {} channels, expected {}",
            path.display(),
            blob.c,
            drivekit::bev::LATENT_CHANNELS
        )));
    }
    BevLatent::new(blob.values_f64(), blob.h as usize, blob.w as usize)
        .map_err(|e| CliError::Validation(e.to_string()))
}

fn save_control_channel(path: &Path, map: &ControlMap, channel: usize) -> Result<(), CliError> {
    let (h, w) = (map.height as usize, map.width as usize);
    let mut values = Vec::with_capacity(h * w);
    for row in 0..h {
        for col in 0..w {
            values.push(map.get(row, col, channel));
        }
    }
    let blob = GridBlob::from_f64(h, w, 1, &values).map_err(stage_err("project"))?;
    save_gbv1(path, &blob).map_err(stage_err("project"))
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(stage_err("mkdir"))
}

// ---------------------------------------------------------------------------
// Subcommand bodies

pub fn cmd_synth(
    seed: u64,
    frames: usize,
    views: u32,
    out: &Path,
    verbose: bool,
) -> Result<(), CliError> {
    if frames == 0 {
        return Err(CliError::Validation("--frames must be >= 1".into()));
    }
    if !(1..=12).contains(&views) {
        return Err(CliError::Validation(format!("--views must be in 1..=12, got {views}")));
    }
    ensure_dir(out)?;
    let params = SceneParams { n_frames: frames, ..SceneParams::default() };
    let (layout, trajectory) = gen_scene(seed, &params).map_err(stage_err("synth"))?;
    save_layout(&out.join("layout.json"), &layout).map_err(stage_err("synth"))?;
    save_trajectory(&out.join("trajectory.json"), &trajectory)?;
    save_calibration(&out.join("calibration.json"), &gen_rig(views)).map_err(stage_err("synth"))?;
    let pattern = LidarPattern::default_pattern();
    for (f, ego) in trajectory.poses.iter().enumerate() {
        let cloud = cast_rays(&layout, &sensor_pose(ego), &pattern);
        save_gpc1(&out.join(format!("cloud_{f:03}.gpc1")), &cloud).map_err(stage_err("synth"))?;
        if verbose {
            eprintln!("synth: frame {f}: {} points", cloud.len());
        }
    }
    Ok(())
}

pub fn cmd_voxelize(input: &Path, spec: &str, out: &Path, verbose: bool) -> Result<(), CliError> {
    let spec = parse_spec(spec)?;
    let cloud = load_gpc1(input).map_err(stage_err("voxelize"))?;
    let grid = voxelize(&cloud, &spec).map_err(stage_err("voxelize"))?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    save_feature_grid(out, &grid)?;
    if verbose {
        eprintln!("voxelize: {} points into {}x{}x{}", cloud.len(), spec.nx(), spec.ny(), spec.n_z_bins + 2);
    }
    Ok(())
}

pub fn cmd_encode(input: &Path, spec: &str, out: &Path, decode: bool) -> Result<(), CliError> {
    let spec = parse_spec(spec)?;
    let params = CodecParams::structure_preserving(&spec);
    if decode {
        let latent = load_latent(input)?;
        let occ = params.decode(&latent, &spec).map_err(stage_err("decode"))?;
        save_occupancy(out, &occ)
    } else {
        let grid = load_feature_grid(input, &spec)?;
        let latent = params.encode(&grid).map_err(stage_err("encode"))?;
        save_latent(out, &latent)
    }
}

pub fn cmd_render(
    grid: &Path,
    pattern: &str,
    out: &Path,
    skip: &str,
    height: f64,
) -> Result<(), CliError> {
    let skip = parse_skip(skip)?;
    let pattern = parse_pattern(pattern)?;
    let spec = {
        // Infer the z-bin count from the file; the footprint is the default.
        let blob = load_gbv1(grid).map_err(stage_err("render"))?;
        let mut spec = BevGridSpec::default();
        spec.n_z_bins = blob.c as usize;
        spec.cell_size_xy = (spec.x_max - spec.x_min) / blob.h as f64;
        spec.validate().map_err(|e| CliError::Validation(format!("grid spec: {e}")))?;
        spec
    };
    let occ = load_occupancy(grid, &spec)?;
    let origin = [0.0, 0.0, height];
    let dirs = pattern.directions();
    let batch = RayBatch::new(vec![origin; dirs.len()], dirs.clone(), pattern.max_range)
        .map_err(stage_err("render"))?;
    let rendered = render_rays(&occ, &batch, skip);
    let mut points = Vec::new();
    let mut intensity = Vec::new();
    for (dir, r) in dirs.iter().zip(&rendered) {
        if let Some(depth) = r.expected_depth {
            points.push([
                (origin[0] + depth * dir[0]) as f32,
                (origin[1] + depth * dir[1]) as f32,
                (origin[2] + depth * dir[2]) as f32,
            ]);
            intensity.push(r.termination as f32);
        }
    }
    let cloud =
        PointCloud::new(points, intensity, 0.0).map_err(stage_err("render"))?;
    save_gpc1(out, &cloud).map_err(stage_err("render"))
}

pub fn cmd_project(scene: &Path, rig: &Path, frame: usize, out: &Path) -> Result<(), CliError> {
    let layout = load_layout(scene).map_err(stage_err("project"))?;
    let views = load_calibration(rig).map_err(stage_err("project"))?;
    let trajectory_path = scene.parent().map(|d| d.join("trajectory.json"));
    let ego = match trajectory_path.filter(|p| p.exists()) {
        Some(p) => {
            let trajectory = load_trajectory(&p)?;
            if frame >= trajectory.poses.len() {
                return Err(CliError::Validation(format!(
                    "--frame {frame} out of range, trajectory has {} poses",
                    trajectory.poses.len()
                )));
            }
            trajectory.poses[frame]
        }
        None if frame == 0 => Pose::from_yaw_translation(0.0, [0.0, 0.0, 0.0]),
        None => {
            return Err(CliError::Validation(format!(
                "--frame {frame} needs a trajectory.json next to the scene file"
            )));
        }
    };
    ensure_dir(out)?;
    for view in &views {
        let moved = CameraView {
            extrinsics: view.extrinsics.compose(&ego.inverse()),
            ..*view
        };
        let map = rasterize_layout(&layout, &moved).map_err(stage_err("project"))?;
        for channel in 0..CONTROL_CHANNELS {
            let path = out.join(format!("view{}_ch{channel}.gbv1", view.view_id));
            save_control_channel(&path, &map, channel)?;
        }
    }
    Ok(())
}

pub fn cmd_splat(features: &Path, calib: &Path, spec: &str, out: &Path) -> Result<(), CliError> {
    let spec = parse_spec(spec)?;
    let blob = load_gbv1(features).map_err(stage_err("splat"))?;
    let views = load_calibration(calib).map_err(stage_err("splat"))?;
    let Some(view) = views.first() else {
        return Err(CliError::Validation("calibration file has no views".into()));
    };
    // The feature map may be a downscaled crop of the camera; back-projection
    // still uses the calibrated intrinsics, so require matching size.
    if blob.h != view.intrinsics.height || blob.w != view.intrinsics.width {
        return Err(CliError::Validation(format!(
            "feature map is {}x{}, view {} is {}x{}",
            blob.h, blob.w, view.view_id, view.intrinsics.height, view.intrinsics.width
        )));
    }
    let binning = drivekit::DepthBinning::default();
    let map = ImageFeatureMap::with_uniform_depth(
        blob.w,
        blob.h,
        blob.c as usize,
        binning.n_bins,
        blob.values_f64(),
    )
    .map_err(stage_err("splat"))?;
    let lifted = lift(view, &map, &binning).map_err(stage_err("splat"))?;
    let pooled = splat(&lifted, &spec).map_err(stage_err("splat"))?;
    let out_blob = GridBlob::from_f64(pooled.nx, pooled.ny, pooled.channels, &pooled.values)
        .map_err(stage_err("splat"))?;
    save_gbv1(out, &out_blob).map_err(stage_err("splat"))
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn toy_model_from_dir(dir: &Path) -> Result<ToyFlowModel, CliError> {
    let tensors = load_tensors(dir).map_err(stage_err("sample"))?;
    let find = |name: &str| {
        tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, _, v)| v.clone())
            .ok_or_else(|| CliError::Validation(format!("model dir is missing tensor {name:?}")))
    };
    let a = find("a")?;
    let b = find("b")?;
    if a.len() != b.len() || a.is_empty() {
        return Err(CliError::Validation(format!(
            "model tensors a ({}) and b ({}) must be equal-length and nonempty",
            a.len(),
            b.len()
        )));
    }
    Ok(ToyFlowModel { n_bins: a.len(), a, b })
}

pub fn cmd_sample(
    model: &Path,
    steps: usize,
    seed: u64,
    cond: Option<&Path>,
    dim: usize,
    out: &Path,
) -> Result<(), CliError> {
    if steps == 0 {
        return Err(CliError::Validation("--steps must be >= 1".into()));
    }
    if dim == 0 {
        return Err(CliError::Validation("--dim must be >= 1".into()));
    }
    let model = toy_model_from_dir(model)?;
    let bias: Vec<f64> = match cond {
        Some(dir) => {
            let tensors = load_tensors(dir).map_err(stage_err("sample"))?;
            match tensors.iter().find(|(n, _, _)| n == "bias") {
                Some((_, _, v)) if v.len() == dim => v.clone(),
                Some((_, _, v)) => {
                    return Err(CliError::Validation(format!(
                        "conditioning bias has {} values, sample dim is {dim}",
                        v.len()
                    )));
                }
                None => vec![0.0; dim],
            }
        }
        None => vec![0.0; dim],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps: Vec<f64> = (0..dim).map(|_| gaussian(&mut rng)).collect();
    let z0 = euler_sample(&eps, steps, |z, t| {
        z.iter()
            .zip(&bias)
            .map(|(&zi, &bi)| model.velocity(zi, t) + bi)
            .collect()
    });
    let blob = GridBlob::from_f64(dim, 1, 1, &z0).map_err(stage_err("sample"))?;
    save_gbv1(out, &blob).map_err(stage_err("sample"))
}

// ---------------------------------------------------------------------------
// Caption subcommands

#[derive(Debug, Deserialize)]
pub struct ClipInput {
    pub id: u32,
    pub q: [f64; 3],
    pub lambdas: [f64; 3],
}

#[derive(Debug, Serialize)]
struct ScoreReport {
    scores: Vec<ScoredClip>,
    kept: Vec<u32>,
    tau: f64,
}

pub fn cmd_caption_score(input: &Path, tau: f64) -> Result<String, CliError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(CliError::Validation(format!("--tau must be in [0, 1], got {tau}")));
    }
    let text = fs::read_to_string(input).map_err(stage_err("caption-score"))?;
    let clips: Vec<ClipInput> =
        serde_json::from_str(&text).map_err(|e| CliError::Validation(e.to_string()))?;
    let mut scores = Vec::with_capacity(clips.len());
    for clip in &clips {
        let s = score_clip(clip.q, clip.lambdas)
            .map_err(|e| CliError::Validation(format!("clip {}: {e}", clip.id)))?;
        scores.push(ScoredClip { id: clip.id, score: s.s });
    }
    let kept = filter_clips(&scores, tau);
    let report = ScoreReport { scores, kept, tau };
    serde_json::to_string_pretty(&report).map_err(stage_err("caption-score"))
}

#[derive(Debug, Deserialize)]
pub struct ViewInput {
    pub view_id: u32,
    pub caption: StructuredCaption,
}

pub fn cmd_caption_fuse(input: &Path, out: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(input).map_err(stage_err("caption-fuse"))?;
    let views: Vec<ViewInput> =
        serde_json::from_str(&text).map_err(|e| CliError::Validation(e.to_string()))?;
    let set = ViewCaptionSet::new(views.into_iter().map(|v| (v.view_id, v.caption)).collect())
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let fused = fuse_captions(&set).map_err(stage_err("caption-fuse"))?;
    let text = serde_json::to_string_pretty(&fused).map_err(stage_err("caption-fuse"))?;
    fs::write(out, text).map_err(stage_err("caption-fuse"))
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ChamferReport {
    pub chamfer_1s: f64,
    pub chamfer_2s: f64,
    pub chamfer_3s: f64,
    pub convention: String,
}

fn load_cloud_dir(dir: &Path) -> Result<Vec<PointCloud>, CliError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(stage_err("eval"))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "gpc1"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Validation(format!("no .gpc1 files in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| load_gpc1(p).map_err(stage_err("eval")))
        .collect()
}

pub fn cmd_eval_chamfer(
    pred: &Path,
    gt: &Path,
    rate: f64,
    volume: &str,
) -> Result<String, CliError> {
    if !(rate > 0.0) {
        return Err(CliError::Validation(format!("--rate must be > 0, got {rate}")));
    }
    let volume = parse_volume(volume)?;
    let gt_clouds = load_cloud_dir(gt)?;
    let pred_clouds = load_cloud_dir(pred)?;
    let horizons = chamfer_horizons(&gt_clouds, &pred_clouds, rate, &volume)
        .map_err(stage_err("eval"))?;
    let report = ChamferReport {
        chamfer_1s: horizons.chamfer_1s,
        chamfer_2s: horizons.chamfer_2s,
        chamfer_3s: horizons.chamfer_3s,
        convention: CHAMFER_CONVENTION.into(),
    };
    serde_json::to_string_pretty(&report).map_err(stage_err("eval"))
}

// ---------------------------------------------------------------------------
// Full pipeline

#[derive(Debug, Serialize)]
struct RunManifest {
    config: RunConfig,
    artifacts: Vec<String>,
    metrics: ChamferReport,
}

fn category_name(category: u32) -> &'static str {
    match category {
        0 => "car",
        1 => "truck",
        2 => "bus",
        _ => "vehicle",
    }
}

/// Axis-aligned image bbox of a world-space box, if any corner projects.
fn project_bbox(view: &CameraView, b: &drivekit::scene::OrientedBox) -> Option<[f64; 4]> {
    let corners = drivekit::layout::box_corners(b);
    let (mut x1, mut y1) = (f64::INFINITY, f64::INFINITY);
    let (mut x2, mut y2) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut any = false;
    for c in &corners {
        let p = project_point(view, c);
        if p.valid {
            any = true;
            x1 = x1.min(p.u);
            y1 = y1.min(p.v);
            x2 = x2.max(p.u);
            y2 = y2.max(p.v);
        }
    }
    (any && x2 > x1 && y2 > y1).then_some([x1, y1, x2, y2])
}

fn pipeline_caption(
    layout: &drivekit::SceneLayout,
    views: &[CameraView],
    clip_tau: f64,
) -> Result<serde_json::Value, CliError> {
    let record = SceneRecord {
        time: "Daytime".into(),
        weather: "Sunny".into(),
        road_type: "Urban Road".into(),
        road_surface: "Asphalt".into(),
        lane: "Dual Lane".into(),
        environment_type: "Urban Road".into(),
        surroundings: format!(
            "{} parked vehicles and {} pedestrians near the road",
            layout.boxes.len(),
            layout.skeletons.len()
        ),
        traffic: "Light traffic".into(),
    };
    let mut per_view = Vec::new();
    for view in views {
        let objects: Vec<ObjectAnnotation> = layout
            .boxes
            .iter()
            .filter_map(|b| {
                project_bbox(view, b).map(|bbox| ObjectAnnotation {
                    category: category_name(b.category).into(),
                    bbox,
                    description: format!("{} on the road", category_name(b.category)),
                })
            })
            .collect();
        let caption = build_structured_caption(record.clone(), objects)
            .map_err(stage_err("caption"))?;
        per_view.push((view.view_id, caption));
    }
    let set = ViewCaptionSet::new(per_view).map_err(stage_err("caption"))?;
    let fused = fuse_captions(&set).map_err(stage_err("caption"))?;
    // Deterministic demo scoring: one clean clip, one blurry one.
    let scores = vec![
        ScoredClip {
            id: 0,
            score: score_clip([0.9, 0.8, 0.85], [0.4, 0.3, 0.3]).map_err(stage_err("caption"))?.s,
        },
        ScoredClip {
            id: 1,
            score: score_clip([0.3, 0.4, 0.2], [0.4, 0.3, 0.3]).map_err(stage_err("caption"))?.s,
        },
    ];
    let kept = filter_clips(&scores, clip_tau);
    Ok(serde_json::json!({
        "caption": fused,
        "clip_scores": scores,
        "kept_clips": kept,
        "clip_tau": clip_tau,
    }))
}

pub fn cmd_run(
    config_path: Option<&Path>,
    seed_override: Option<u64>,
    out_override: Option<&Path>,
    verbose: bool,
) -> Result<(), CliError> {
    let text = match config_path {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| CliError::Validation(format!("config {}: {e}", p.display())))?,
        None => String::new(),
    };
    let (mut config, warnings) = crate::config::validate_config(&text)
        .map_err(|errors| CliError::Validation(errors.join("; ")))?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    if let Some(seed) = seed_override {
        config.seed = seed;
    }
    if let Some(out) = out_override {
        config.out = out.display().to_string();
    }
    run_pipeline(&config, verbose)
}

pub fn run_pipeline(config: &RunConfig, verbose: bool) -> Result<(), CliError> {
    let out = PathBuf::from(&config.out);
    ensure_dir(&out)?;
    let spec = config.grid_spec();
    let pattern = config.lidar_pattern();
    let mut artifacts: Vec<String> = Vec::new();
    let note = |path: &Path, artifacts: &mut Vec<String>| {
        if let Ok(rel) = path.strip_prefix(&out) {
            artifacts.push(rel.display().to_string());
        }
    };

    // Stage: synth.
    let params = SceneParams {
        n_lanes: config.n_lanes,
        n_boxes: config.n_boxes,
        n_pedestrians: config.n_pedestrians,
        n_frames: config.frames,
        world_extent: config.world_extent,
        frame_period: config.frame_period,
    };
    let (layout, trajectory) = gen_scene(config.seed, &params).map_err(stage_err("synth"))?;
    let layout_path = out.join("layout.json");
    save_layout(&layout_path, &layout).map_err(stage_err("synth"))?;
    note(&layout_path, &mut artifacts);
    let trajectory_path = out.join("trajectory.json");
    save_trajectory(&trajectory_path, &trajectory)?;
    note(&trajectory_path, &mut artifacts);
    let views = gen_rig(config.n_views);
    let calib_path = out.join("calibration.json");
    save_calibration(&calib_path, &views).map_err(stage_err("synth"))?;
    note(&calib_path, &mut artifacts);

    let gt_dir = out.join("gt");
    ensure_dir(&gt_dir)?;
    let mut gt_clouds = Vec::with_capacity(config.frames);
    for (f, ego) in trajectory.poses.iter().enumerate() {
        let cloud = cast_rays(&layout, &sensor_pose(ego), &pattern);
        let path = gt_dir.join(format!("cloud_{f:03}.gpc1"));
        save_gpc1(&path, &cloud).map_err(stage_err("synth"))?;
        note(&path, &mut artifacts);
        gt_clouds.push(cloud);
    }
    if verbose {
        eprintln!("synth: {} frames, {} points in frame 0", config.frames, gt_clouds[0].len());
    }

    // Stages: voxelize, encode, reconstruct.
    let codec = CodecParams::structure_preserving(&spec);
    let grids_dir = out.join("grids");
    let latents_dir = out.join("latents");
    let recon_dir = out.join("recon");
    ensure_dir(&grids_dir)?;
    ensure_dir(&latents_dir)?;
    ensure_dir(&recon_dir)?;
    let mut recon_clouds = Vec::with_capacity(config.frames);
    let mut first_latent: Option<BevLatent> = None;
    for (f, ego) in trajectory.poses.iter().enumerate() {
        let grid = voxelize(&gt_clouds[f], &spec).map_err(stage_err("voxelize"))?;
        let grid_path = grids_dir.join(format!("grid_{f:03}.gbv1"));
        save_feature_grid(&grid_path, &grid)?;
        note(&grid_path, &mut artifacts);

        let latent = codec.encode(&grid).map_err(stage_err("encode"))?;
        let latent_path = latents_dir.join(format!("latent_{f:03}.gbv1"));
        save_latent(&latent_path, &latent)?;
        note(&latent_path, &mut artifacts);

        let recon = drivekit::bev::reconstruct_cloud(
            &latent,
            &spec,
            &codec,
            &sensor_pose(ego),
            &pattern,
            config.post_threshold,
        )
        .map_err(stage_err("reconstruct"))?;
        let recon_path = recon_dir.join(format!("cloud_{f:03}.gpc1"));
        save_gpc1(&recon_path, &recon).map_err(stage_err("reconstruct"))?;
        note(&recon_path, &mut artifacts);
        if verbose {
            eprintln!("reconstruct: frame {f}: {} points", recon.len());
        }
        recon_clouds.push(recon);
        if first_latent.is_none() {
            first_latent = Some(latent);
        }
    }

    // Stage: project (control maps for frame 0).
    let control_dir = out.join("control");
    ensure_dir(&control_dir)?;
    let ego0 = trajectory.poses[0];
    for view in &views {
        let moved = CameraView { extrinsics: view.extrinsics.compose(&ego0.inverse()), ..*view };
        let map = rasterize_layout(&layout, &moved).map_err(stage_err("project"))?;
        for channel in 0..CONTROL_CHANNELS {
            let path = control_dir.join(format!("view{}_ch{channel}.gbv1", view.view_id));
            save_control_channel(&path, &map, channel)?;
            note(&path, &mut artifacts);
        }
    }

    // Stage: splat (small synthetic image features through view 0).
    let splat_view = CameraView {
        view_id: views[0].view_id,
        intrinsics: CameraIntrinsics::new(30.0, 30.0, 16.0, 10.0, 32, 20)
            .map_err(stage_err("splat"))?,
        extrinsics: views[0].extrinsics,
    };
    let binning = drivekit::DepthBinning { d_min: 1.0, d_max: 49.0, n_bins: 16 };
    let features: Vec<f64> = (0..32 * 20 * 2).map(|i| 1.0 + (i % 7) as f64 * 0.1).collect();
    let map = ImageFeatureMap::with_uniform_depth(32, 20, 2, binning.n_bins, features)
        .map_err(stage_err("splat"))?;
    let lifted = lift(&splat_view, &map, &binning).map_err(stage_err("splat"))?;
    let pooled = splat(&lifted, &spec).map_err(stage_err("splat"))?;
    let splat_path = out.join("splat.gbv1");
    let splat_blob = GridBlob::from_f64(pooled.nx, pooled.ny, pooled.channels, &pooled.values)
        .map_err(stage_err("splat"))?;
    save_gbv1(&splat_path, &splat_blob).map_err(stage_err("splat"))?;
    note(&splat_path, &mut artifacts);

    // Stage: sample (toy flow trained on latent statistics).
    let latent = first_latent.expect("frames >= 1");
    let dataset: Vec<f64> = latent.values.iter().step_by(64).copied().collect();
    let dataset = if dataset.iter().all(|&v| v == 0.0) { vec![0.0] } else { dataset };
    let (model, _) = train_toy_flow(&dataset, ToyFlowModel::zeros(16), 4000, 0.05, config.seed);
    let model_dir = out.join("flow_model");
    save_tensors(
        &model_dir,
        &[
            ("a".into(), vec![model.n_bins], model.a.clone()),
            ("b".into(), vec![model.n_bins], model.b.clone()),
        ],
    )
    .map_err(stage_err("sample"))?;
    note(&model_dir.join("manifest.json"), &mut artifacts);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5a5a);
    let eps: Vec<f64> = (0..8).map(|_| gaussian(&mut rng)).collect();
    let z0 = euler_sample(&eps, config.flow_steps, |z, t| {
        z.iter().map(|&zi| model.velocity(zi, t)).collect()
    });
    let sample_path = out.join("sample.gbv1");
    let sample_blob = GridBlob::from_f64(z0.len(), 1, 1, &z0).map_err(stage_err("sample"))?;
    save_gbv1(&sample_path, &sample_blob).map_err(stage_err("sample"))?;
    note(&sample_path, &mut artifacts);

    // Stage: caption.
    let caption = pipeline_caption(&layout, &views, config.clip_tau)?;
    let caption_path = out.join("caption.json");
    fs::write(
        &caption_path,
        serde_json::to_string_pretty(&caption).map_err(stage_err("caption"))?,
    )
    .map_err(stage_err("caption"))?;
    note(&caption_path, &mut artifacts);

    // Stage: eval.
    let rate = 1.0 / config.frame_period;
    let horizons = chamfer_horizons(&gt_clouds, &recon_clouds, rate, &CropVolume::default())
        .map_err(stage_err("eval"))?;
    let metrics = ChamferReport {
        chamfer_1s: horizons.chamfer_1s,
        chamfer_2s: horizons.chamfer_2s,
        chamfer_3s: horizons.chamfer_3s,
        convention: CHAMFER_CONVENTION.into(),
    };
    let metrics_path = out.join("metrics.json");
    fs::write(
        &metrics_path,
        serde_json::to_string_pretty(&metrics).map_err(stage_err("eval"))?,
    )
    .map_err(stage_err("eval"))?;
    note(&metrics_path, &mut artifacts);

    let config_path = out.join("config.txt");
    fs::write(&config_path, render_config(config)).map_err(stage_err("manifest"))?;
    note(&config_path, &mut artifacts);

    let manifest = RunManifest { config: config.clone(), artifacts, metrics };
    fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(stage_err("manifest"))?,
    )
    .map_err(stage_err("manifest"))?;
    if verbose {
        eprintln!(
            "run: chamfer 1s/2s/3s = {:.3}/{:.3}/{:.3} m",
            manifest.metrics.chamfer_1s, manifest.metrics.chamfer_2s, manifest.metrics.chamfer_3s
        );
    }
    Ok(())
}
