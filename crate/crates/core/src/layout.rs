//! Projects structured BEV layouts (lanes, boxes, pose skeletons) into
//! per-view control maps, and pools control maps into a compact latent.

use thiserror::Error;

use crate::geometry::{CameraView, Vec3};
use crate::scene::{SceneLayout, Skeleton, LIMBS, SKELETON_JOINTS};
use crate::tape::{Tape, TensorHandle};

#[derive(Debug, Error)]
pub enum LayoutError {
    #[error("invalid layout: {0}")]
    BadLayout(String),
    #[error("skeleton has {0} joints, expected {1}")]
    BadSkeleton(usize, usize),
    #[error("control map of {0}x{1} not divisible by {2}")]
    NotDivisible(usize, usize, usize),
    #[error("frame shape mismatch: {0}")]
    FrameMismatch(String),
}

pub const CHANNEL_LANE: usize = 0;
pub const CHANNEL_BOX: usize = 1;
pub const CHANNEL_SKELETON: usize = 2;
pub const CONTROL_CHANNELS: usize = 3;

/// Camera-space near plane for clipping projected layout geometry.
pub const NEAR_PLANE: f64 = 0.1;

/// Image-plane raster of the layout as seen from one view. Three channels
/// (lane, box, skeleton), values in [0, 1], channel-last row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlMap {
    pub view_id: u32,
    pub width: u32,
    pub height: u32,
    pub values: Vec<f64>,
}

impl ControlMap {
    pub fn zeros(view_id: u32, width: u32, height: u32) -> Self {
        let len = width as usize * height as usize * CONTROL_CHANNELS;
        ControlMap { view_id, width, height, values: vec![0.0; len] }
    }

    #[inline]
    fn idx(&self, row: usize, col: usize, c: usize) -> usize {
        (row * self.width as usize + col) * CONTROL_CHANNELS + c
    }

    pub fn get(&self, row: usize, col: usize, c: usize) -> f64 {
        self.values[self.idx(row, col, c)]
    }

    /// Max-accumulates coverage so overlapping strokes stay in [0, 1].
    fn stamp(&mut self, row: usize, col: usize, c: usize, cov: f64) {
        let ix = self.idx(row, col, c);
        if cov > self.values[ix] {
            self.values[ix] = cov.min(1.0);
        }
    }
}

/// Camera-frame point with positive depth, projected to pixel coordinates.
fn to_pixel(view: &CameraView, cam: &Vec3) -> [f64; 2] {
    let k = &view.intrinsics;
    [k.fx * cam[0] / cam[2] + k.cx, k.fy * cam[1] / cam[2] + k.cy]
}

/// Clips a camera-frame segment to z >= NEAR_PLANE; `None` if fully behind.
fn clip_segment(a: Vec3, b: Vec3) -> Option<(Vec3, Vec3)> {
    let (za, zb) = (a[2], b[2]);
    if za < NEAR_PLANE && zb < NEAR_PLANE {
        return None;
    }
    let lerp = |p: &Vec3, q: &Vec3, t: f64| -> Vec3 {
        [
            p[0] + t * (q[0] - p[0]),
            p[1] + t * (q[1] - p[1]),
            p[2] + t * (q[2] - p[2]),
        ]
    };
    let mut a2 = a;
    let mut b2 = b;
    if za < NEAR_PLANE {
        a2 = lerp(&a, &b, (NEAR_PLANE - za) / (zb - za));
    } else if zb < NEAR_PLANE {
        b2 = lerp(&a, &b, (NEAR_PLANE - za) / (zb - za));
    }
    Some((a2, b2))
}

fn dist_to_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = b[0] - a[0];
    let dy = b[1] - a[1];
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let qx = a[0] + t * dx;
    let qy = a[1] + t * dy;
    ((p[0] - qx).powi(2) + (p[1] - qy).powi(2)).sqrt()
}

/// Anti-aliased 1-pixel stroke: coverage 1 on the line, fading linearly to 0
/// one pixel away.
fn draw_segment(map: &mut ControlMap, c: usize, a: [f64; 2], b: [f64; 2]) {
    let (w, h) = (map.width as usize, map.height as usize);
    let row_min = (a[1].min(b[1]) - 1.5).floor().max(0.0) as usize;
    let row_max = ((a[1].max(b[1]) + 1.5).ceil() as isize).min(h as isize - 1);
    let col_min = (a[0].min(b[0]) - 1.5).floor().max(0.0) as usize;
    let col_max = ((a[0].max(b[0]) + 1.5).ceil() as isize).min(w as isize - 1);
    if row_max < 0 || col_max < 0 {
        return;
    }
    for row in row_min..=row_max as usize {
        for col in col_min..=col_max as usize {
            let center = [col as f64 + 0.5, row as f64 + 0.5];
            let cov = 1.0 - dist_to_segment(center, a, b);
            if cov > 0.0 {
                map.stamp(row, col, c, cov);
            }
        }
    }
}

/// Projects a world segment through the view and draws it clipped.
fn draw_world_segment(map: &mut ControlMap, view: &CameraView, c: usize, a: &Vec3, b: &Vec3) {
    let ca = view.extrinsics.apply(a);
    let cb = view.extrinsics.apply(b);
    if let Some((ca, cb)) = clip_segment(ca, cb) {
        draw_segment(map, c, to_pixel(view, &ca), to_pixel(view, &cb));
    }
}

/// Monotone-chain convex hull; input order does not matter.
fn convex_hull(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap().then(a[1].partial_cmp(&b[1]).unwrap()));
    pts.dedup_by(|a, b| a == b);
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: &[f64; 2], a: &[f64; 2], b: &[f64; 2]| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for p in &pts {
        while lower.len() >= 2 && cross(&lower[lower.len() - 2], &lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(*p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for p in pts.iter().rev() {
        while upper.len() >= 2 && cross(&upper[upper.len() - 2], &upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(*p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Scanline fill of a convex polygon: pixels whose centers are inside get 1.
fn fill_convex(map: &mut ControlMap, c: usize, hull: &[[f64; 2]]) {
    if hull.len() < 3 {
        return;
    }
    let (w, h) = (map.width as usize, map.height as usize);
    let y_min = hull.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
    let y_max = hull.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
    let row0 = y_min.floor().max(0.0) as usize;
    let row1 = (y_max.ceil() as isize).min(h as isize - 1);
    if row1 < 0 {
        return;
    }
    for row in row0..=row1 as usize {
        let y = row as f64 + 0.5;
        let mut xs: Vec<f64> = Vec::with_capacity(2);
        for i in 0..hull.len() {
            let a = hull[i];
            let b = hull[(i + 1) % hull.len()];
            let (ya, yb) = (a[1], b[1]);
            if (ya <= y && yb > y) || (yb <= y && ya > y) {
                let t = (y - ya) / (yb - ya);
                xs.push(a[0] + t * (b[0] - a[0]));
            }
        }
        if xs.len() < 2 {
            continue;
        }
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let x_enter = xs[0];
        let x_exit = xs[xs.len() - 1];
        let col0 = (x_enter - 0.5).ceil().max(0.0) as usize;
        let col1 = ((x_exit - 0.5).floor() as isize).min(w as isize - 1);
        if col1 < 0 {
            continue;
        }
        for col in col0..=col1 as usize {
            map.stamp(row, col, c, 1.0);
        }
    }
}

pub fn box_corners(b: &crate::scene::OrientedBox) -> [Vec3; 8] {
    let (sy, cy) = b.yaw.sin_cos();
    let half = [b.size[0] / 2.0, b.size[1] / 2.0, b.size[2] / 2.0];
    let mut out = [[0.0; 3]; 8];
    for (i, corner) in out.iter_mut().enumerate() {
        let sx = if i & 1 == 0 { -half[0] } else { half[0] };
        let sy2 = if i & 2 == 0 { -half[1] } else { half[1] };
        let sz = if i & 4 == 0 { -half[2] } else { half[2] };
        *corner = [
            b.center[0] + cy * sx - sy * sy2,
            b.center[1] + sy * sx + cy * sy2,
            b.center[2] + sz,
        ];
    }
    out
}

const BOX_EDGES: [(usize, usize); 12] = [
    (0, 1),
    (2, 3),
    (4, 5),
    (6, 7),
    (0, 2),
    (1, 3),
    (4, 6),
    (5, 7),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

fn rasterize_box(map: &mut ControlMap, view: &CameraView, b: &crate::scene::OrientedBox) {
    let corners = box_corners(b);
    let cam: Vec<Vec3> = corners.iter().map(|p| view.extrinsics.apply(p)).collect();
    let mut projected: Vec<[f64; 2]> = Vec::new();
    for &(i, j) in &BOX_EDGES {
        if let Some((a, c)) = clip_segment(cam[i], cam[j]) {
            projected.push(to_pixel(view, &a));
            projected.push(to_pixel(view, &c));
        }
    }
    let hull = convex_hull(projected);
    fill_convex(map, CHANNEL_BOX, &hull);
}

fn rasterize_skeleton(map: &mut ControlMap, view: &CameraView, s: &Skeleton) {
    let cam: Vec<Vec3> = s.joints.iter().map(|p| view.extrinsics.apply(p)).collect();
    for (jt, &vis) in cam.iter().zip(&s.visible) {
        if !vis || jt[2] < NEAR_PLANE {
            continue;
        }
        let px = to_pixel(view, jt);
        let (w, h) = (map.width as isize, map.height as isize);
        let col = px[0].floor() as isize;
        let row = px[1].floor() as isize;
        for dr in -1..=1 {
            for dc in -1..=1 {
                let (r, c) = (row + dr, col + dc);
                if r >= 0 && r < h && c >= 0 && c < w {
                    map.stamp(r as usize, c as usize, CHANNEL_SKELETON, 1.0);
                }
            }
        }
    }
    for &(a, b) in &LIMBS {
        if s.visible[a] && s.visible[b] {
            if let Some((ca, cb)) = clip_segment(cam[a], cam[b]) {
                draw_segment(map, CHANNEL_SKELETON, to_pixel(view, &ca), to_pixel(view, &cb));
            }
        }
    }
}

/// Rasterizes lanes, boxes, and skeletons of the layout into the view's
/// control map.
pub fn rasterize_layout(layout: &SceneLayout, view: &CameraView) -> Result<ControlMap, LayoutError> {
    layout
        .validate()
        .map_err(|e| LayoutError::BadLayout(e.to_string()))?;
    let mut map = ControlMap::zeros(view.view_id, view.intrinsics.width, view.intrinsics.height);
    for lane in &layout.lanes {
        for seg in lane.windows(2) {
            draw_world_segment(&mut map, view, CHANNEL_LANE, &seg[0], &seg[1]);
        }
    }
    for b in &layout.boxes {
        rasterize_box(&mut map, view, b);
    }
    for s in &layout.skeletons {
        rasterize_skeleton(&mut map, view, s);
    }
    Ok(map)
}

/// Single-skeleton keypoint raster (the skeleton channel alone), rejecting
/// malformed joint counts.
pub fn pose_keypoints_channel(s: &Skeleton, view: &CameraView) -> Result<Vec<f64>, LayoutError> {
    if s.joints.len() != SKELETON_JOINTS || s.visible.len() != SKELETON_JOINTS {
        return Err(LayoutError::BadSkeleton(s.joints.len(), SKELETON_JOINTS));
    }
    let mut map = ControlMap::zeros(view.view_id, view.intrinsics.width, view.intrinsics.height);
    rasterize_skeleton(&mut map, view, s);
    let (w, h) = (map.width as usize, map.height as usize);
    let mut out = vec![0.0; w * h];
    for row in 0..h {
        for col in 0..w {
            out[row * w + col] = map.get(row, col, CHANNEL_SKELETON);
        }
    }
    Ok(out)
}

pub const LAYOUT_DOWNSAMPLE: usize = 8;

/// 8x-pooled control-map sequence, `frames x channels x h x w` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LayoutLatent {
    pub frames: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
}

/// Records 8x8 average pooling of one frame on the tape. Input handle shape
/// `[h, w, c]`, output `[c, h/8, w/8]`.
pub fn pool_frame_graph(tape: &mut Tape, frame: TensorHandle) -> Result<TensorHandle, LayoutError> {
    let shape = tape.shape(frame).to_vec();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let d = LAYOUT_DOWNSAMPLE;
    if h % d != 0 || w % d != 0 {
        return Err(LayoutError::NotDivisible(h, w, d));
    }
    let x = tape.reshape(frame, &[h / d, d, w / d, d, c]).unwrap();
    let x = tape.permute(x, &[0, 2, 4, 1, 3]).unwrap();
    let x = tape.reshape(x, &[(h / d) * (w / d) * c, d * d]).unwrap();
    let avg = tape.leaf(&[d * d, 1], vec![1.0 / (d * d) as f64; d * d]);
    let x = tape.matmul(x, avg).unwrap();
    let x = tape.reshape(x, &[h / d, w / d, c]).unwrap();
    Ok(tape.permute(x, &[2, 0, 1]).unwrap())
}

/// Pools each control map 8x spatially into the layout latent sequence.
pub fn encode_layout(maps: &[ControlMap]) -> Result<LayoutLatent, LayoutError> {
    let Some(first) = maps.first() else {
        return Err(LayoutError::FrameMismatch("no frames".into()));
    };
    let (w, h) = (first.width, first.height);
    if let Some(bad) = maps.iter().find(|m| m.width != w || m.height != h) {
        return Err(LayoutError::FrameMismatch(format!(
            "{}x{} frame in a {}x{} sequence",
            bad.width, bad.height, w, h
        )));
    }
    let d = LAYOUT_DOWNSAMPLE;
    let (hh, ww) = (h as usize, w as usize);
    if hh % d != 0 || ww % d != 0 {
        return Err(LayoutError::NotDivisible(hh, ww, d));
    }
    let mut values = Vec::with_capacity(maps.len() * CONTROL_CHANNELS * (hh / d) * (ww / d));
    for m in maps {
        let mut tape = Tape::new();
        let frame = tape.leaf(&[hh, ww, CONTROL_CHANNELS], m.values.clone());
        let pooled = pool_frame_graph(&mut tape, frame)?;
        values.extend_from_slice(tape.values(pooled));
    }
    Ok(LayoutLatent {
        frames: maps.len(),
        channels: CONTROL_CHANNELS,
        h: hh / d,
        w: ww / d,
        values,
    })
}
