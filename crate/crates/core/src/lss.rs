//! Lift-splat pooling: per-pixel depth distributions lift image features into
//! a frustum of weighted 3-D points, which are then sum-pooled into BEV cells.

use thiserror::Error;

use crate::bev::BevGridSpec;
use crate::geometry::{back_project, CameraView, Vec3};

#[derive(Debug, Error)]
pub enum LssError {
    #[error("invalid depth binning: {0}")]
    BadBinning(String),
    #[error("invalid feature map: {0}")]
    BadFeatureMap(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Discretization of camera depth into uniform bins.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthBinning {
    pub d_min: f64,
    pub d_max: f64,
    pub n_bins: usize,
}

impl Default for DepthBinning {
    /// 1 m bins over [1, 60] m.
    fn default() -> Self {
        DepthBinning { d_min: 1.0, d_max: 60.0, n_bins: 59 }
    }
}

impl DepthBinning {
    pub fn validate(&self) -> Result<(), LssError> {
        if !(self.d_min > 0.0 && self.d_max > self.d_min) {
            return Err(LssError::BadBinning(format!(
                "need 0 < d_min < d_max, got [{}, {}]",
                self.d_min, self.d_max
            )));
        }
        if self.n_bins == 0 {
            return Err(LssError::BadBinning("n_bins must be >= 1".into()));
        }
        Ok(())
    }

    pub fn bin_size(&self) -> f64 {
        (self.d_max - self.d_min) / self.n_bins as f64
    }

    pub fn bin_center(&self, k: usize) -> f64 {
        self.d_min + (k as f64 + 0.5) * self.bin_size()
    }
}

/// Image-plane features with a categorical depth distribution per pixel.
/// Both tensors are row-major `height x width x (channels | n_depth_bins)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatureMap {
    pub width: u32,
    pub height: u32,
    pub channels: usize,
    pub n_depth_bins: usize,
    pub features: Vec<f64>,
    pub depth_dist: Vec<f64>,
}

const DIST_SUM_TOL: f64 = 1e-6;

impl ImageFeatureMap {
    pub fn new(
        width: u32,
        height: u32,
        channels: usize,
        n_depth_bins: usize,
        features: Vec<f64>,
        depth_dist: Vec<f64>,
    ) -> Result<Self, LssError> {
        let pixels = width as usize * height as usize;
        if features.len() != pixels * channels {
            return Err(LssError::BadFeatureMap(format!(
                "features len {} != {} pixels x {} channels",
                features.len(),
                pixels,
                channels
            )));
        }
        if depth_dist.len() != pixels * n_depth_bins {
            return Err(LssError::BadFeatureMap(format!(
                "depth_dist len {} != {} pixels x {} bins",
                depth_dist.len(),
                pixels,
                n_depth_bins
            )));
        }
        for p in 0..pixels {
            let row = &depth_dist[p * n_depth_bins..(p + 1) * n_depth_bins];
            if row.iter().any(|&v| v < 0.0) {
                return Err(LssError::BadFeatureMap(format!(
                    "negative depth probability at pixel {p}"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > DIST_SUM_TOL {
                return Err(LssError::BadFeatureMap(format!(
                    "depth distribution at pixel {p} sums to {sum}"
                )));
            }
        }
        Ok(ImageFeatureMap { width, height, channels, n_depth_bins, features, depth_dist })
    }

    /// Uniform depth distribution helper for tests and demos.
    pub fn with_uniform_depth(
        width: u32,
        height: u32,
        channels: usize,
        n_depth_bins: usize,
        features: Vec<f64>,
    ) -> Result<Self, LssError> {
        let pixels = width as usize * height as usize;
        let dist = vec![1.0 / n_depth_bins as f64; pixels * n_depth_bins];
        Self::new(width, height, channels, n_depth_bins, features, dist)
    }

    fn feature_row(&self, pixel: usize) -> &[f64] {
        &self.features[pixel * self.channels..(pixel + 1) * self.channels]
    }
}

/// Frustum of lifted world points with depth-weighted feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedPoints {
    pub points: Vec<Vec3>,
    /// `points.len() x channels`, row-major.
    pub features: Vec<f64>,
    pub channels: usize,
}

/// Back-projects every pixel center at every depth-bin center and weights the
/// pixel's feature row by that bin's probability mass.
pub fn lift(
    view: &CameraView,
    map: &ImageFeatureMap,
    binning: &DepthBinning,
) -> Result<LiftedPoints, LssError> {
    binning.validate()?;
    if map.n_depth_bins != binning.n_bins {
        return Err(LssError::ShapeMismatch(format!(
            "feature map has {} depth bins, binning has {}",
            map.n_depth_bins, binning.n_bins
        )));
    }
    let (w, h) = (map.width as usize, map.height as usize);
    let mut points = Vec::with_capacity(w * h * binning.n_bins);
    let mut features = Vec::with_capacity(w * h * binning.n_bins * map.channels);
    for row in 0..h {
        for col in 0..w {
            let pixel = row * w + col;
            let feat = map.feature_row(pixel);
            for k in 0..binning.n_bins {
                let prob = map.depth_dist[pixel * map.n_depth_bins + k];
                let depth = binning.bin_center(k);
                let world = back_project(view, col as f64 + 0.5, row as f64 + 0.5, depth);
                points.push(world);
                features.extend(feat.iter().map(|&f| f * prob));
            }
        }
    }
    Ok(LiftedPoints { points, features, channels: map.channels })
}

/// Sum-pooled BEV feature plane, `nx x ny x channels` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BevPooled {
    pub nx: usize,
    pub ny: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl BevPooled {
    pub fn zeros(nx: usize, ny: usize, channels: usize) -> Self {
        BevPooled { nx, ny, channels, values: vec![0.0; nx * ny * channels] }
    }

    pub fn get(&self, i: usize, j: usize, c: usize) -> f64 {
        self.values[(i * self.ny + j) * self.channels + c]
    }
}

/// Sum-pools lifted points into the grid's xy cells. Points outside the
/// half-open xy extents or z range are dropped; feature mass of every in-bound
/// point is conserved exactly (pure additions, input order).
pub fn splat(lifted: &LiftedPoints, spec: &BevGridSpec) -> Result<BevPooled, LssError> {
    spec.validate().map_err(|e| LssError::ShapeMismatch(e.to_string()))?;
    if lifted.features.len() != lifted.points.len() * lifted.channels {
        return Err(LssError::ShapeMismatch(format!(
            "{} feature values for {} points x {} channels",
            lifted.features.len(),
            lifted.points.len(),
            lifted.channels
        )));
    }
    let mut out = BevPooled::zeros(spec.nx(), spec.ny(), lifted.channels);
    for (pi, p) in lifted.points.iter().enumerate() {
        let Some((i, j, _)) = spec.cell_of(p) else { continue };
        let base = (i * out.ny + j) * out.channels;
        let row = &lifted.features[pi * lifted.channels..(pi + 1) * lifted.channels];
        for (c, &f) in row.iter().enumerate() {
            out.values[base + c] += f;
        }
    }
    Ok(out)
}

/// Channel-wise concatenation of BEV planes with matching spatial shape.
pub fn concat_bev_conditions(planes: &[&BevPooled]) -> Result<BevPooled, LssError> {
    let Some(first) = planes.first() else {
        return Err(LssError::ShapeMismatch("no planes to concatenate".into()));
    };
    let (nx, ny) = (first.nx, first.ny);
    if let Some(bad) = planes.iter().find(|p| p.nx != nx || p.ny != ny) {
        return Err(LssError::ShapeMismatch(format!(
            "plane of {}x{} cannot concat with {}x{}",
            bad.nx, bad.ny, nx, ny
        )));
    }
    let channels: usize = planes.iter().map(|p| p.channels).sum();
    let mut out = BevPooled::zeros(nx, ny, channels);
    for i in 0..nx {
        for j in 0..ny {
            let mut c0 = 0;
            for p in planes {
                let base = (i * ny + j) * p.channels;
                let dst = (i * ny + j) * channels + c0;
                out.values[dst..dst + p.channels]
                    .copy_from_slice(&p.values[base..base + p.channels]);
                c0 += p.channels;
            }
        }
    }
    Ok(out)
}
