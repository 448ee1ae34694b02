//! BEV point-cloud codec: voxelization into BEV grids, a compact latent
//! encoder/decoder, rendering losses, and the occupancy post-filter.

mod codec;

pub use codec::{CodecConfig, CodecParams};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::PointCloud;

#[derive(Debug, Error)]
pub enum BevError {
    #[error("invalid grid spec: {0}")]
    BadSpec(String),
    #[error("grid of {h}x{w} not divisible by 8")]
    NotDivisibleBy8 { h: usize, w: usize },
    #[error("latent shape {0:?} does not match spec ({1}x{2}x4)")]
    BadLatentShape(Vec<usize>, usize, usize),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
}

/// Metric extents and resolution of a BEV grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevGridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub cell_size_xy: f64,
    pub n_z_bins: usize,
}

impl Default for BevGridSpec {
    /// Crop volume [-51.2, 51.2]^2 x [-3, 5] at 0.4 m cells, 20 z bins:
    /// a 256x256 grid divisible by 8.
    fn default() -> Self {
        BevGridSpec {
            x_min: -51.2,
            x_max: 51.2,
            y_min: -51.2,
            y_max: 51.2,
            z_min: -3.0,
            z_max: 5.0,
            cell_size_xy: 0.4,
            n_z_bins: 20,
        }
    }
}

fn divides_evenly(extent: f64, cell: f64) -> Option<usize> {
    let n = extent / cell;
    let rounded = n.round();
    if (n - rounded).abs() < 1e-9 && rounded >= 1.0 {
        Some(rounded as usize)
    } else {
        None
    }
}

impl BevGridSpec {
    pub fn validate(&self) -> Result<(), BevError> {
        if self.x_min >= self.x_max || self.y_min >= self.y_max || self.z_min >= self.z_max {
            return Err(BevError::BadSpec("extents must be strictly ordered".into()));
        }
        if self.cell_size_xy <= 0.0 {
            return Err(BevError::BadSpec("cell size must be positive".into()));
        }
        if self.n_z_bins < 1 {
            return Err(BevError::BadSpec("n_z_bins must be >= 1".into()));
        }
        if divides_evenly(self.x_max - self.x_min, self.cell_size_xy).is_none()
            || divides_evenly(self.y_max - self.y_min, self.cell_size_xy).is_none()
        {
            return Err(BevError::BadSpec(format!(
                "extent not divisible by cell size {}",
                self.cell_size_xy
            )));
        }
        Ok(())
    }

    /// Number of cells along x (grid rows).
    pub fn nx(&self) -> usize {
        ((self.x_max - self.x_min) / self.cell_size_xy).round() as usize
    }

    /// Number of cells along y (grid columns).
    pub fn ny(&self) -> usize {
        ((self.y_max - self.y_min) / self.cell_size_xy).round() as usize
    }

    pub fn z_bin_size(&self) -> f64 {
        (self.z_max - self.z_min) / self.n_z_bins as f64
    }

    /// Cell indices of a point, `None` if outside the half-open volume.
    pub fn cell_of(&self, p: &[f64; 3]) -> Option<(usize, usize, usize)> {
        if p[0] < self.x_min || p[0] >= self.x_max {
            return None;
        }
        if p[1] < self.y_min || p[1] >= self.y_max {
            return None;
        }
        if p[2] < self.z_min || p[2] >= self.z_max {
            return None;
        }
        let i = ((p[0] - self.x_min) / self.cell_size_xy).floor() as usize;
        let j = ((p[1] - self.y_min) / self.cell_size_xy).floor() as usize;
        let k = ((p[2] - self.z_min) / self.z_bin_size()).floor() as usize;
        Some((i.min(self.nx() - 1), j.min(self.ny() - 1), k.min(self.n_z_bins - 1)))
    }

    /// Index of the z bin containing z = 0, clamped into range.
    pub fn ground_bin(&self) -> usize {
        let k = ((0.0 - self.z_min) / self.z_bin_size()).floor();
        (k.max(0.0) as usize).min(self.n_z_bins - 1)
    }

    pub fn z_bin_center(&self, k: usize) -> f64 {
        self.z_min + (k as f64 + 0.5) * self.z_bin_size()
    }
}

/// Rasterized BEV tensor: `n_z_bins` occupancy channels plus per-column
/// min-z / max-z height statistics, channel-last row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BevFeatureGrid {
    pub spec: BevGridSpec,
    pub values: Vec<f64>,
}

impl BevFeatureGrid {
    pub fn channels(&self) -> usize {
        self.spec.n_z_bins + 2
    }

    pub fn zeros(spec: BevGridSpec) -> Self {
        let len = spec.nx() * spec.ny() * (spec.n_z_bins + 2);
        BevFeatureGrid { spec, values: vec![0.0; len] }
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, c: usize) -> usize {
        (i * self.spec.ny() + j) * self.channels() + c
    }

    pub fn get(&self, i: usize, j: usize, c: usize) -> f64 {
        self.values[self.idx(i, j, c)]
    }
}

/// Decoded per-cell occupancy probabilities, `nx x ny x n_z_bins`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub spec: BevGridSpec,
    pub values: Vec<f64>,
}

impl OccupancyGrid {
    pub fn zeros(spec: BevGridSpec) -> Self {
        let len = spec.nx() * spec.ny() * spec.n_z_bins;
        OccupancyGrid { spec, values: vec![0.0; len] }
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.spec.ny() + j) * self.spec.n_z_bins + k
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.idx(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let ix = self.idx(i, j, k);
        self.values[ix] = v;
    }

    /// Binary occupancy channels of a feature grid, as an occupancy grid.
    pub fn from_feature_grid(grid: &BevFeatureGrid) -> OccupancyGrid {
        let spec = grid.spec;
        let mut occ = OccupancyGrid::zeros(spec);
        for i in 0..spec.nx() {
            for j in 0..spec.ny() {
                for k in 0..spec.n_z_bins {
                    let v = grid.get(i, j, k);
                    occ.set(i, j, k, v);
                }
            }
        }
        occ
    }
}

/// 8x-downsampled 4-channel latent of a BEV grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BevLatent {
    /// `(nx/8) x (ny/8) x 4`, channel-last row-major.
    pub values: Vec<f64>,
    pub h: usize,
    pub w: usize,
}

pub const LATENT_CHANNELS: usize = 4;
pub const DOWNSAMPLE: usize = 8;

impl BevLatent {
    pub fn new(values: Vec<f64>, h: usize, w: usize) -> Result<Self, BevError> {
        if values.len() != h * w * LATENT_CHANNELS {
            return Err(BevError::BadLatentShape(vec![values.len()], h, w));
        }
        Ok(BevLatent { values, h, w })
    }
}

/// Rasterizes a cloud into occupancy plus per-column min/max-z channels.
/// Points outside the volume are dropped; cells use half-open upper bounds.
pub fn voxelize(cloud: &PointCloud, spec: &BevGridSpec) -> Result<BevFeatureGrid, BevError> {
    spec.validate()?;
    let mut grid = BevFeatureGrid::zeros(*spec);
    let nz = spec.n_z_bins;
    let mut has_points = vec![false; spec.nx() * spec.ny()];
    for pi in 0..cloud.len() {
        let p = cloud.point_f64(pi);
        let Some((i, j, k)) = spec.cell_of(&p) else { continue };
        let occ = grid.idx(i, j, k);
        grid.values[occ] = 1.0;
        let col = i * spec.ny() + j;
        let zmin_ix = grid.idx(i, j, nz);
        let zmax_ix = grid.idx(i, j, nz + 1);
        if !has_points[col] {
            has_points[col] = true;
            grid.values[zmin_ix] = p[2];
            grid.values[zmax_ix] = p[2];
        } else {
            if p[2] < grid.values[zmin_ix] {
                grid.values[zmin_ix] = p[2];
            }
            if p[2] > grid.values[zmax_ix] {
                grid.values[zmax_ix] = p[2];
            }
        }
    }
    Ok(grid)
}

/// Mean |pred - gt| over valid rays; 0 when nothing is valid.
pub fn depth_l1_loss(pred: &[f64], gt: &[f64], valid: &[bool]) -> Result<f64, BevError> {
    if pred.len() != gt.len() || pred.len() != valid.len() {
        return Err(BevError::LengthMismatch(format!(
            "depth_l1_loss: pred {} gt {} valid {}",
            pred.len(),
            gt.len(),
            valid.len()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..pred.len() {
        if valid[i] {
            sum += (pred[i] - gt[i]).abs();
            n += 1;
        }
    }
    if n == 0 {
        Ok(0.0)
    } else {
        Ok(sum / n as f64)
    }
}

pub const BCE_CLAMP: f64 = 1e-7;

/// Mean binary cross-entropy with probability clamping, recorded on a tape so
/// it stays differentiable.
pub fn occupancy_loss_on_tape(
    tape: &mut crate::tape::Tape,
    pred: crate::tape::TensorHandle,
    gt: &[f64],
) -> Result<crate::tape::TensorHandle, BevError> {
    let n = tape.values(pred).len();
    if n != gt.len() {
        return Err(BevError::LengthMismatch(format!(
            "occupancy_loss: pred {} gt {}",
            n,
            gt.len()
        )));
    }
    let shape = tape.shape(pred).to_vec();
    let gt_h = tape.leaf(&shape, gt.to_vec());
    let one = tape.leaf(&shape, vec![1.0; n]);
    let p = tape.clamp(pred, BCE_CLAMP, 1.0 - BCE_CLAMP);
    let log_p = tape.ln(p);
    let one_minus_p = tape.sub(one, p).unwrap();
    let log_1mp = tape.ln(one_minus_p);
    let one_minus_gt = tape.sub(one, gt_h).unwrap();
    let a = tape.mul(gt_h, log_p).unwrap();
    let b = tape.mul(one_minus_gt, log_1mp).unwrap();
    let s = tape.add(a, b).unwrap();
    let m = tape.mean(s);
    Ok(tape.mul_scalar(m, -1.0))
}

/// Plain-value binary cross-entropy, matching the tape version.
pub fn occupancy_loss(pred: &[f64], gt: &[f64]) -> Result<f64, BevError> {
    let mut tape = crate::tape::Tape::new();
    let h = tape.leaf(&[pred.len()], pred.to_vec());
    let loss = occupancy_loss_on_tape(&mut tape, h, gt)?;
    Ok(tape.scalar_value(loss))
}

/// Mean entropy of each ray's normalized weight distribution; zero for
/// one-hot weights, `ln k` for uniform weights over k cells.
pub fn surface_reg_loss(weights_per_ray: &[Vec<f64>]) -> f64 {
    if weights_per_ray.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    let mut rays = 0usize;
    for w in weights_per_ray {
        let sum: f64 = w.iter().sum();
        if sum <= 0.0 {
            continue;
        }
        let mut h = 0.0;
        for &wi in w {
            if wi > 0.0 {
                let p = wi / sum;
                h -= p * p.ln();
            }
        }
        total += h;
        rays += 1;
    }
    if rays == 0 {
        0.0
    } else {
        total / rays as f64
    }
}

/// Retains exactly the in-volume points whose containing cell has occupancy
/// at or above `threshold`. Idempotent.
pub fn postprocess_filter(
    cloud: &PointCloud,
    occ: &OccupancyGrid,
    threshold: f64,
) -> PointCloud {
    let spec = &occ.spec;
    let mut points = Vec::new();
    let mut intensity = Vec::new();
    for pi in 0..cloud.len() {
        let p = cloud.point_f64(pi);
        if let Some((i, j, k)) = spec.cell_of(&p) {
            if occ.get(i, j, k) >= threshold {
                points.push(cloud.points[pi]);
                intensity.push(cloud.intensity[pi]);
            }
        }
    }
    PointCloud { points, intensity, timestamp: cloud.timestamp }
}

/// Full decode-and-render reconstruction: decode the latent to occupancy,
/// march the pattern's rays from the sensor, place a point at each hitting
/// ray's expected depth, then occupancy-filter the result.
pub fn reconstruct_cloud(
    latent: &BevLatent,
    spec: &BevGridSpec,
    params: &CodecParams,
    sensor: &crate::geometry::Pose,
    pattern: &crate::scene::LidarPattern,
    threshold: f64,
) -> Result<PointCloud, BevError> {
    let occ = params.decode(latent, spec)?;
    let origin = sensor.translation;
    let dirs: Vec<[f64; 3]> = pattern
        .directions()
        .iter()
        .map(|d| crate::geometry::mat3_apply(&sensor.rotation, d))
        .collect();
    let batch = crate::render::RayBatch::new(vec![origin; dirs.len()], dirs, pattern.max_range)
        .expect("unit directions");
    let rendered = crate::render::render_rays(&occ, &batch, true);
    let mut points = Vec::new();
    let mut intensity = Vec::new();
    for (ray, out) in batch.directions.iter().zip(&rendered) {
        if let Some(depth) = out.expected_depth {
            points.push([
                (origin[0] + depth * ray[0]) as f32,
                (origin[1] + depth * ray[1]) as f32,
                (origin[2] + depth * ray[2]) as f32,
            ]);
            intensity.push(out.termination as f32);
        }
    }
    let cloud = PointCloud { points, intensity, timestamp: 0.0 };
    Ok(postprocess_filter(&cloud, &occ, threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::gradcheck;
    use proptest::prelude::*;

    fn small_spec() -> BevGridSpec {
        BevGridSpec {
            x_min: -8.0,
            x_max: 8.0,
            y_min: -8.0,
            y_max: 8.0,
            z_min: -2.0,
            z_max: 2.0,
            cell_size_xy: 1.0,
            n_z_bins: 4,
        }
    }

    #[test]
    fn default_spec_is_256() {
        let spec = BevGridSpec::default();
        spec.validate().unwrap();
        assert_eq!(spec.nx(), 256);
        assert_eq!(spec.ny(), 256);
        assert_eq!(spec.ground_bin(), 7);
    }

    #[test]
    fn voxelize_empty_cloud_is_zero() {
        let cloud = PointCloud::empty(0.0);
        let grid = voxelize(&cloud, &small_spec()).unwrap();
        assert!(grid.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn voxelize_index_arithmetic() {
        let spec = BevGridSpec::default();
        let cloud = PointCloud::new(vec![[0.1, 0.1, 0.0]], vec![1.0], 0.0).unwrap();
        let grid = voxelize(&cloud, &spec).unwrap();
        // floor(51.3 / 0.4) = 128, z bin containing 0 is bin 7.
        assert_eq!(grid.get(128, 128, 7), 1.0);
        let occupied: usize = (0..spec.n_z_bins)
            .map(|k| {
                (0..spec.nx())
                    .flat_map(|i| (0..spec.ny()).map(move |j| (i, j)))
                    .filter(|&(i, j)| grid.get(i, j, k) != 0.0)
                    .count()
            })
            .sum();
        assert_eq!(occupied, 1);
    }

    #[test]
    fn voxelize_drops_point_at_x_max() {
        let spec = small_spec();
        let cloud = PointCloud::new(vec![[8.0, 0.0, 0.0]], vec![1.0], 0.0).unwrap();
        let grid = voxelize(&cloud, &spec).unwrap();
        assert!(grid.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn voxelize_height_channels() {
        let spec = small_spec();
        let cloud = PointCloud::new(
            vec![[0.5, 0.5, -0.5], [0.5, 0.5, 1.5]],
            vec![1.0, 1.0],
            0.0,
        )
        .unwrap();
        let grid = voxelize(&cloud, &spec).unwrap();
        let (i, j) = (8, 8);
        assert_eq!(grid.get(i, j, spec.n_z_bins), -0.5);
        assert!((grid.get(i, j, spec.n_z_bins + 1) - 1.5).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn voxelize_is_permutation_invariant(seed in 0u64..50) {
            use rand::{Rng, SeedableRng};
            use rand::seq::SliceRandom;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let spec = small_spec();
            let n = 40;
            let pts: Vec<[f32; 3]> = (0..n)
                .map(|_| [rng.gen_range(-9.0..9.0), rng.gen_range(-9.0..9.0), rng.gen_range(-3.0..3.0)])
                .collect();
            let cloud = PointCloud::new(pts.clone(), vec![1.0; n], 0.0).unwrap();
            let mut shuffled = pts;
            shuffled.shuffle(&mut rng);
            let cloud2 = PointCloud::new(shuffled, vec![1.0; n], 0.0).unwrap();
            let g1 = voxelize(&cloud, &spec).unwrap();
            let g2 = voxelize(&cloud2, &spec).unwrap();
            prop_assert_eq!(g1.values, g2.values);
        }
    }

    #[test]
    fn depth_l1_cases() {
        assert_eq!(depth_l1_loss(&[1.0, 2.0], &[1.0, 2.0], &[true, true]).unwrap(), 0.0);
        assert_eq!(depth_l1_loss(&[2.0, 5.0], &[1.0, 2.0], &[true, true]).unwrap(), 2.0);
        assert_eq!(depth_l1_loss(&[2.0, 5.0], &[1.0, 2.0], &[false, false]).unwrap(), 0.0);
        assert!(depth_l1_loss(&[1.0], &[1.0, 2.0], &[true, true]).is_err());
    }

    #[test]
    fn occupancy_loss_perfect_and_half() {
        let loss = occupancy_loss(&[1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert!(loss <= 1e-6);
        let loss = occupancy_loss(&[0.5; 8], &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn occupancy_loss_gradient_matches_finite_differences() {
        let pred = vec![0.3, 0.7, 0.9, 0.2];
        let gt = vec![0.0, 1.0, 1.0, 0.0];
        let gt2 = gt.clone();
        assert!(gradcheck::check(
            &[(&[4], pred)],
            move |t, h| occupancy_loss_on_tape(t, h[0], &gt2).unwrap(),
            1e-4,
            1e-7,
        ));
    }

    #[test]
    fn surface_reg_cases() {
        assert_eq!(surface_reg_loss(&[vec![0.0, 1.0, 0.0]]), 0.0);
        let k = 5;
        let uniform = vec![vec![0.2; k]];
        assert!((surface_reg_loss(&uniform) - (k as f64).ln()).abs() < 1e-12);
        assert!(surface_reg_loss(&[vec![0.3, 0.1, 0.2]]) >= 0.0);
    }

    #[test]
    fn postfilter_threshold_semantics() {
        let spec = small_spec();
        let mut occ = OccupancyGrid::zeros(spec);
        // Points at (0.5,0.5,z) land in column (8,8).
        occ.set(8, 8, 2, 0.9); // z in [0,1)
        occ.set(8, 8, 3, 0.3); // z in [1,2)
        let cloud = PointCloud::new(
            vec![[0.5, 0.5, 0.5], [0.5, 0.5, 1.5], [20.0, 0.0, 0.0]],
            vec![1.0; 3],
            0.0,
        )
        .unwrap();
        let kept = postprocess_filter(&cloud, &occ, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept.points[0], [0.5, 0.5, 0.5]);
        // threshold 0 keeps all in-volume points
        let all = postprocess_filter(&cloud, &occ, 0.0);
        assert_eq!(all.len(), 2);
        // idempotence
        let twice = postprocess_filter(&kept, &occ, 0.5);
        assert_eq!(twice, kept);
        // empty in, empty out
        assert!(postprocess_filter(&PointCloud::empty(0.0), &occ, 0.5).is_empty());
    }
}
