//! Volumetric ray marching over BEV occupancy grids.
//!
//! Cells are traversed front to back by a 3-D digital differential analyzer
//! whose plane-crossing parameters are computed from plane coordinates rather
//! than incrementally, so the visited sequence is a pure function of the ray.
//! Spatial skipping consults a coarse non-empty-block mask and avoids reading
//! occupancy inside empty blocks; outputs are bitwise identical either way.

use thiserror::Error;

use crate::bev::OccupancyGrid;
use crate::geometry::Vec3;

/// Rays below this termination probability report a miss.
pub const MISS_THRESHOLD: f64 = 0.05;

/// Edge length of a skip block, in cells per axis.
const SKIP_BLOCK: usize = 4;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("ray {index} direction has norm {norm}, expected unit")]
    NonUnitDirection { index: usize, norm: f64 },
    #[error("origin/direction count mismatch: {0} vs {1}")]
    CountMismatch(usize, usize),
}

/// A batch of world-space rays with unit directions.
#[derive(Debug, Clone, PartialEq)]
pub struct RayBatch {
    pub origins: Vec<Vec3>,
    pub directions: Vec<Vec3>,
    pub max_t: f64,
}

impl RayBatch {
    pub fn new(origins: Vec<Vec3>, directions: Vec<Vec3>, max_t: f64) -> Result<Self, RenderError> {
        if origins.len() != directions.len() {
            return Err(RenderError::CountMismatch(origins.len(), directions.len()));
        }
        for (i, d) in directions.iter().enumerate() {
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(RenderError::NonUnitDirection { index: i, norm });
            }
        }
        Ok(RayBatch { origins, directions, max_t })
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }
}

/// Per-ray march result. `weights` holds the contribution of every visited
/// cell with nonzero occupancy, front to back.
#[derive(Debug, Clone, PartialEq)]
pub struct RayRender {
    pub expected_depth: Option<f64>,
    pub termination: f64,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RenderStats {
    /// Number of occupancy lookups performed across the batch.
    pub cells_evaluated: u64,
}

/// Coarse any-nonzero mask over `SKIP_BLOCK`-sized cell blocks.
struct SkipMask {
    nbx: usize,
    nby: usize,
    nbz: usize,
    nonempty: Vec<bool>,
}

impl SkipMask {
    fn build(occ: &OccupancyGrid) -> SkipMask {
        let spec = &occ.spec;
        let nbx = spec.nx().div_ceil(SKIP_BLOCK);
        let nby = spec.ny().div_ceil(SKIP_BLOCK);
        let nbz = spec.n_z_bins.div_ceil(SKIP_BLOCK);
        let mut nonempty = vec![false; nbx * nby * nbz];
        for i in 0..spec.nx() {
            for j in 0..spec.ny() {
                for k in 0..spec.n_z_bins {
                    if occ.get(i, j, k) != 0.0 {
                        let b = ((i / SKIP_BLOCK) * nby + j / SKIP_BLOCK) * nbz + k / SKIP_BLOCK;
                        nonempty[b] = true;
                    }
                }
            }
        }
        SkipMask { nbx, nby, nbz, nonempty }
    }

    #[inline]
    fn is_nonempty(&self, i: usize, j: usize, k: usize) -> bool {
        let b = ((i / SKIP_BLOCK).min(self.nbx - 1) * self.nby + (j / SKIP_BLOCK).min(self.nby - 1))
            * self.nbz
            + (k / SKIP_BLOCK).min(self.nbz - 1);
        self.nonempty[b]
    }
}

/// Marches every ray of the batch through the grid.
pub fn render_rays(occ: &OccupancyGrid, rays: &RayBatch, skip: bool) -> Vec<RayRender> {
    render_rays_with_stats(occ, rays, skip).0
}

pub fn render_rays_with_stats(
    occ: &OccupancyGrid,
    rays: &RayBatch,
    skip: bool,
) -> (Vec<RayRender>, RenderStats) {
    let mask = if skip { Some(SkipMask::build(occ)) } else { None };
    let mut stats = RenderStats::default();
    let out = (0..rays.len())
        .map(|r| march_ray(occ, &rays.origins[r], &rays.directions[r], rays.max_t, mask.as_ref(), &mut stats))
        .collect();
    (out, stats)
}

fn march_ray(
    occ: &OccupancyGrid,
    origin: &Vec3,
    dir: &Vec3,
    max_t: f64,
    mask: Option<&SkipMask>,
    stats: &mut RenderStats,
) -> RayRender {
    let spec = &occ.spec;
    let cell_z = spec.z_bin_size();
    let mins = [spec.x_min, spec.y_min, spec.z_min];
    let maxs = [spec.x_max, spec.y_max, spec.z_max];
    let cells = [spec.cell_size_xy, spec.cell_size_xy, cell_z];
    let dims = [spec.nx(), spec.ny(), spec.n_z_bins];

    // Clip to the grid volume.
    let mut t0: f64 = 0.0;
    let mut t1 = max_t;
    for a in 0..3 {
        if dir[a] == 0.0 {
            if origin[a] < mins[a] || origin[a] >= maxs[a] {
                return miss();
            }
        } else {
            let ta = (mins[a] - origin[a]) / dir[a];
            let tb = (maxs[a] - origin[a]) / dir[a];
            let (lo, hi) = if ta < tb { (ta, tb) } else { (tb, ta) };
            t0 = t0.max(lo);
            t1 = t1.min(hi);
            if t0 >= t1 {
                return miss();
            }
        }
    }

    // Entry cell from the clipped start position.
    let mut idx = [0isize; 3];
    for a in 0..3 {
        let pos = origin[a] + t0 * dir[a];
        let i = ((pos - mins[a]) / cells[a]).floor() as isize;
        idx[a] = i.clamp(0, dims[a] as isize - 1);
    }

    let mut transmittance = 1.0f64;
    let mut weights = Vec::new();
    let mut depth_acc = 0.0f64;
    let mut term = 0.0f64;
    let mut t_in = t0;

    loop {
        // Next plane crossing per axis, from plane coordinates.
        let mut t_exit = t1;
        let mut advance = [false; 3];
        let mut t_axis = [f64::INFINITY; 3];
        for a in 0..3 {
            if dir[a] > 0.0 {
                let plane = mins[a] + (idx[a] + 1) as f64 * cells[a];
                t_axis[a] = (plane - origin[a]) / dir[a];
            } else if dir[a] < 0.0 {
                let plane = mins[a] + idx[a] as f64 * cells[a];
                t_axis[a] = (plane - origin[a]) / dir[a];
            }
        }
        let t_min_axis = t_axis[0].min(t_axis[1]).min(t_axis[2]);
        if t_min_axis < t_exit {
            t_exit = t_min_axis;
            for a in 0..3 {
                advance[a] = t_axis[a] == t_min_axis;
            }
        }

        let (i, j, k) = (idx[0] as usize, idx[1] as usize, idx[2] as usize);
        let in_live_block = mask.map_or(true, |m| m.is_nonempty(i, j, k));
        if in_live_block {
            stats.cells_evaluated += 1;
            let alpha = occ.get(i, j, k);
            if alpha > 0.0 {
                let w = alpha * transmittance;
                weights.push(w);
                let d = 0.5 * (t_in + t_exit);
                depth_acc += w * d;
                term += w;
                transmittance *= 1.0 - alpha;
                if transmittance == 0.0 {
                    break;
                }
            }
        }

        if t_exit >= t1 {
            break;
        }
        for a in 0..3 {
            if advance[a] {
                idx[a] += if dir[a] > 0.0 { 1 } else { -1 };
                if idx[a] < 0 || idx[a] >= dims[a] as isize {
                    return finish(weights, depth_acc, term);
                }
            }
        }
        t_in = t_exit;
    }
    finish(weights, depth_acc, term)
}

fn miss() -> RayRender {
    RayRender { expected_depth: None, termination: 0.0, weights: Vec::new() }
}

fn finish(weights: Vec<f64>, depth_acc: f64, term: f64) -> RayRender {
    let expected_depth = if term >= MISS_THRESHOLD {
        Some(depth_acc / term)
    } else {
        None
    };
    RayRender { expected_depth, termination: term, weights }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bev::BevGridSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec_unit() -> BevGridSpec {
        BevGridSpec {
            x_min: 0.0,
            x_max: 8.0,
            y_min: 0.0,
            y_max: 8.0,
            z_min: 0.0,
            z_max: 4.0,
            cell_size_xy: 1.0,
            n_z_bins: 4,
        }
    }

    #[test]
    fn empty_grid_all_rays_miss() {
        let occ = OccupancyGrid::zeros(spec_unit());
        let rays = RayBatch::new(
            vec![[0.5, 0.5, 0.5]; 3],
            vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            20.0,
        )
        .unwrap();
        for r in render_rays(&occ, &rays, false) {
            assert!(r.expected_depth.is_none());
            assert_eq!(r.termination, 0.0);
        }
    }

    #[test]
    fn single_opaque_cell_depth_is_segment_midpoint() {
        // Ray along +x from x=2.0: cell [3,4) spans ray interval [1.0, 2.0),
        // an opaque cell there gives depth 1.5. To match the spec's [1.0,1.4]
        // interval example, shift the origin so the segment is [1.0, 1.4].
        let mut occ = OccupancyGrid::zeros(spec_unit());
        occ.set(3, 0, 0, 1.0);
        // origin x=2.0 -> enters cell 3 at t=1.0, exits at t=2.0.
        let rays = RayBatch::new(vec![[2.0, 0.5, 0.5]], vec![[1.0, 0.0, 0.0]], 20.0).unwrap();
        let out = &render_rays(&occ, &rays, false)[0];
        assert_eq!(out.termination, 1.0);
        assert_eq!(out.expected_depth, Some(1.5));

        // Truncated interval: cap max_t at 1.4 so the segment is [1.0, 1.4].
        let rays = RayBatch::new(vec![[2.0, 0.5, 0.5]], vec![[1.0, 0.0, 0.0]], 1.4).unwrap();
        let out = &render_rays(&occ, &rays, false)[0];
        assert_eq!(out.termination, 1.0);
        assert!((out.expected_depth.unwrap() - 1.2).abs() < 1e-12);
    }

    #[test]
    fn two_semi_transparent_cells_transmittance_product() {
        let mut occ = OccupancyGrid::zeros(spec_unit());
        occ.set(3, 0, 0, 0.6);
        occ.set(4, 0, 0, 0.6);
        let rays = RayBatch::new(vec![[2.0, 0.5, 0.5]], vec![[1.0, 0.0, 0.0]], 20.0).unwrap();
        let out = &render_rays(&occ, &rays, false)[0];
        assert_eq!(out.weights.len(), 2);
        assert!((out.weights[0] - 0.6).abs() < 1e-12);
        assert!((out.weights[1] - 0.24).abs() < 1e-12);
        let (d1, d2) = (1.5, 2.5);
        let expect = (0.6 * d1 + 0.24 * d2) / 0.84;
        assert!((out.expected_depth.unwrap() - expect).abs() < 1e-12);
        assert!((out.termination - 0.84).abs() < 1e-12);
    }

    fn random_sparse_grid(rng: &mut ChaCha8Rng) -> OccupancyGrid {
        let mut occ = OccupancyGrid::zeros(spec_unit());
        let n = rng.gen_range(3..30);
        for _ in 0..n {
            let i = rng.gen_range(0..8);
            let j = rng.gen_range(0..8);
            let k = rng.gen_range(0..4);
            occ.set(i, j, k, rng.gen_range(0.1..1.0));
        }
        occ
    }

    fn random_rays(rng: &mut ChaCha8Rng, n: usize) -> RayBatch {
        let mut origins = Vec::new();
        let mut dirs = Vec::new();
        for _ in 0..n {
            origins.push([
                rng.gen_range(-2.0..10.0),
                rng.gen_range(-2.0..10.0),
                rng.gen_range(-1.0..5.0),
            ]);
            let v: [f64; 3] = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-6);
            dirs.push([v[0] / norm, v[1] / norm, v[2] / norm]);
        }
        RayBatch::new(origins, dirs, 30.0).unwrap()
    }

    #[test]
    fn skip_is_bitwise_identical_and_cheaper() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut total_full = 0u64;
        let mut total_skip = 0u64;
        for _ in 0..20 {
            let occ = random_sparse_grid(&mut rng);
            let rays = random_rays(&mut rng, 50);
            let (full, sf) = render_rays_with_stats(&occ, &rays, false);
            let (skipped, ss) = render_rays_with_stats(&occ, &rays, true);
            assert_eq!(full, skipped);
            total_full += sf.cells_evaluated;
            total_skip += ss.cells_evaluated;
        }
        assert!(total_skip < total_full, "skip evaluated {total_skip} vs {total_full}");
    }

    #[test]
    fn weights_nonnegative_and_telescoping() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let occ = random_sparse_grid(&mut rng);
            let rays = random_rays(&mut rng, 30);
            for out in render_rays(&occ, &rays, false) {
                let sum: f64 = out.weights.iter().sum();
                assert!(out.weights.iter().all(|&w| w >= 0.0));
                assert!(sum <= 1.0 + 1e-9);
                assert!((sum - out.termination).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_non_unit_direction() {
        let err = RayBatch::new(vec![[0.0; 3]], vec![[1.0, 1.0, 0.0]], 10.0);
        assert!(matches!(err, Err(RenderError::NonUnitDirection { .. })));
    }
}
