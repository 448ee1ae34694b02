//! Evaluation utilities: cropped Chamfer distance (with a grid-accelerated
//! nearest-neighbor search that reproduces the brute-force result bit for
//! bit) and a Fréchet distance between Gaussian summaries.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::PointCloud;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("first cloud is empty after cropping")]
    EmptyCloudA,
    #[error("second cloud is empty after cropping")]
    EmptyCloudB,
    #[error("horizon frame {0} out of range for {1} frames")]
    HorizonOutOfRange(usize, usize),
    #[error("covariance is not positive semidefinite (eigenvalue {0:.3e})")]
    NotPsd(f64),
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("cannot summarize an empty point set")]
    EmptySummary,
}

/// Closed-bound evaluation crop volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropVolume {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl Default for CropVolume {
    fn default() -> Self {
        CropVolume {
            x_min: -51.2,
            x_max: 51.2,
            y_min: -51.2,
            y_max: 51.2,
            z_min: -3.0,
            z_max: 5.0,
        }
    }
}

impl CropVolume {
    pub fn contains(&self, p: &[f64; 3]) -> bool {
        p[0] >= self.x_min
            && p[0] <= self.x_max
            && p[1] >= self.y_min
            && p[1] <= self.y_max
            && p[2] >= self.z_min
            && p[2] <= self.z_max
    }
}

pub fn crop_cloud(cloud: &PointCloud, crop: &CropVolume) -> PointCloud {
    let mut points = Vec::new();
    let mut intensity = Vec::new();
    for i in 0..cloud.len() {
        if crop.contains(&cloud.point_f64(i)) {
            points.push(cloud.points[i]);
            intensity.push(cloud.intensity[i]);
        }
    }
    PointCloud { points, intensity, timestamp: cloud.timestamp }
}

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn points_f64(cloud: &PointCloud) -> Vec<[f64; 3]> {
    (0..cloud.len()).map(|i| cloud.point_f64(i)).collect()
}

/// Lowest-index nearest neighbor by squared distance.
fn nn_brute(q: &[f64; 3], pts: &[[f64; 3]]) -> f64 {
    let mut best = f64::INFINITY;
    for p in pts {
        let d2 = dist2(q, p);
        if d2 < best {
            best = d2;
        }
    }
    best
}

/// Uniform-grid index over a point set for nearest-neighbor queries.
struct NnGrid {
    origin: [f64; 3],
    cell: f64,
    dims: [usize; 3],
    /// Point indices per cell, in input order.
    cells: Vec<Vec<usize>>,
}

impl NnGrid {
    fn build(pts: &[[f64; 3]]) -> NnGrid {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in pts {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let target = (pts.len() as f64).cbrt().ceil().max(1.0) as usize;
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        let cell = (extent / target as f64).max(1e-9);
        let dims = [
            (((hi[0] - lo[0]) / cell).floor() as usize + 1).min(64),
            (((hi[1] - lo[1]) / cell).floor() as usize + 1).min(64),
            (((hi[2] - lo[2]) / cell).floor() as usize + 1).min(64),
        ];
        let mut cells = vec![Vec::new(); dims[0] * dims[1] * dims[2]];
        let mut grid = NnGrid { origin: lo, cell, dims, cells: Vec::new() };
        for (i, p) in pts.iter().enumerate() {
            let c = grid.cell_of(p);
            cells[grid.flat(c)].push(i);
        }
        grid.cells = cells;
        grid
    }

    fn cell_of(&self, p: &[f64; 3]) -> [usize; 3] {
        let mut c = [0usize; 3];
        for a in 0..3 {
            let i = ((p[a] - self.origin[a]) / self.cell).floor();
            c[a] = (i.max(0.0) as usize).min(self.dims[a] - 1);
        }
        c
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    /// True minimum squared distance from `q` to the indexed set, identical
    /// to the brute-force value: the ring search only prunes cells whose
    /// every point is provably farther than the current best.
    fn nn(&self, q: &[f64; 3], pts: &[[f64; 3]]) -> f64 {
        let c = self.cell_of(q);
        let max_ring = (0..3)
            .map(|a| c[a].max(self.dims[a] - 1 - c[a]))
            .max()
            .unwrap();
        let mut best = f64::INFINITY;
        for r in 0..=max_ring {
            // Cells at Chebyshev ring r or farther contain only points at
            // distance >= (r - 1) * cell from q.
            if r >= 1 && best.is_finite() && best.sqrt() <= (r - 1) as f64 * self.cell {
                break;
            }
            self.scan_ring(q, c, r, pts, &mut best);
        }
        best
    }

    fn scan_ring(&self, q: &[f64; 3], c: [usize; 3], r: usize, pts: &[[f64; 3]], best: &mut f64) {
        let lo = |a: usize| c[a].saturating_sub(r);
        let hi = |a: usize| (c[a] + r).min(self.dims[a] - 1);
        for x in lo(0)..=hi(0) {
            for y in lo(1)..=hi(1) {
                for z in lo(2)..=hi(2) {
                    let cheb = x
                        .abs_diff(c[0])
                        .max(y.abs_diff(c[1]))
                        .max(z.abs_diff(c[2]));
                    if cheb != r {
                        continue;
                    }
                    for &pi in &self.cells[self.flat([x, y, z])] {
                        let d2 = dist2(q, &pts[pi]);
                        if d2 < *best {
                            *best = d2;
                        }
                    }
                }
            }
        }
    }
}

fn one_sided_mean(from: &[[f64; 3]], grid: &NnGrid, to: &[[f64; 3]]) -> f64 {
    let mut sum = 0.0;
    for q in from {
        sum += grid.nn(q, to).sqrt();
    }
    sum / from.len() as f64
}

fn one_sided_mean_brute(from: &[[f64; 3]], to: &[[f64; 3]]) -> f64 {
    let mut sum = 0.0;
    for q in from {
        sum += nn_brute(q, to).sqrt();
    }
    sum / from.len() as f64
}

/// Chamfer distance, half-sum convention:
/// `0.5 * (mean_a min_b |a-b| + mean_b min_a |b-a|)`.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64, MetricsError> {
    if a.is_empty() {
        return Err(MetricsError::EmptyCloudA);
    }
    if b.is_empty() {
        return Err(MetricsError::EmptyCloudB);
    }
    let pa = points_f64(a);
    let pb = points_f64(b);
    let ga = NnGrid::build(&pa);
    let gb = NnGrid::build(&pb);
    Ok(0.5 * (one_sided_mean(&pa, &gb, &pb) + one_sided_mean(&pb, &ga, &pa)))
}

/// O(nm) reference implementation of [`chamfer`].
pub fn chamfer_brute(a: &PointCloud, b: &PointCloud) -> Result<f64, MetricsError> {
    if a.is_empty() {
        return Err(MetricsError::EmptyCloudA);
    }
    if b.is_empty() {
        return Err(MetricsError::EmptyCloudB);
    }
    let pa = points_f64(a);
    let pb = points_f64(b);
    Ok(0.5 * (one_sided_mean_brute(&pa, &pb) + one_sided_mean_brute(&pb, &pa)))
}

/// Cropped Chamfer at the 1 s / 2 s / 3 s horizons of a frame sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChamferHorizons {
    pub chamfer_1s: f64,
    pub chamfer_2s: f64,
    pub chamfer_3s: f64,
}

pub fn chamfer_horizons(
    gt: &[PointCloud],
    pred: &[PointCloud],
    rate_hz: f64,
    crop: &CropVolume,
) -> Result<ChamferHorizons, MetricsError> {
    let n = gt.len().min(pred.len());
    let mut out = [0.0; 3];
    for (slot, sec) in out.iter_mut().zip([1.0, 2.0, 3.0]) {
        let idx = (rate_hz * sec).round() as usize;
        if idx >= n {
            return Err(MetricsError::HorizonOutOfRange(idx, n));
        }
        let a = crop_cloud(&gt[idx], crop);
        let b = crop_cloud(&pred[idx], crop);
        *slot = chamfer(&a, &b)?;
    }
    Ok(ChamferHorizons { chamfer_1s: out[0], chamfer_2s: out[1], chamfer_3s: out[2] })
}

/// Mean and (population) covariance of a point set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSummary {
    pub dim: usize,
    pub mean: Vec<f64>,
    /// Row-major `dim x dim`.
    pub cov: Vec<f64>,
}

impl GaussianSummary {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<GaussianSummary, MetricsError> {
        let Some(first) = rows.first() else {
            return Err(MetricsError::EmptySummary);
        };
        let d = first.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(MetricsError::DimMismatch(bad.len(), d));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut cov = vec![0.0; d * d];
        for r in rows {
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += (r[i] - mean[i]) * (r[j] - mean[j]);
                }
            }
        }
        for c in cov.iter_mut() {
            *c /= n;
        }
        Ok(GaussianSummary { dim: d, mean, cov })
    }

    pub fn from_cloud(cloud: &PointCloud) -> Result<GaussianSummary, MetricsError> {
        let rows: Vec<Vec<f64>> = (0..cloud.len()).map(|i| cloud.point_f64(i).to_vec()).collect();
        Self::from_rows(&rows)
    }
}

const PSD_TOL: f64 = 1e-9;

fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>, MetricsError> {
    let eig = m.clone().symmetric_eigen();
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -PSD_TOL {
            return Err(MetricsError::NotPsd(*v));
        }
        *v = v.max(0.0).sqrt();
    }
    let d = DMatrix::from_diagonal(&vals);
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Fréchet distance between Gaussians:
/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))`.
pub fn frechet_gaussian(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64, MetricsError> {
    if a.dim != b.dim {
        return Err(MetricsError::DimMismatch(a.dim, b.dim));
    }
    let d = a.dim;
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let s1 = DMatrix::from_row_slice(d, d, &a.cov);
    let s2 = DMatrix::from_row_slice(d, d, &b.cov);
    // tr((S1 S2)^(1/2)) through the symmetric similar form
    // S1^(1/2) S2 S1^(1/2).
    let r1 = sqrtm_psd(&s1)?;
    let inner = &r1 * &s2 * &r1;
    let eig = inner.symmetric_eigen();
    let mut cross = 0.0;
    for &v in eig.eigenvalues.iter() {
        if v < -PSD_TOL {
            return Err(MetricsError::NotPsd(v));
        }
        cross += v.max(0.0).sqrt();
    }
    let trace_term = s1.trace() + s2.trace() - 2.0 * cross;
    Ok((mean_term + trace_term).max(0.0))
}
