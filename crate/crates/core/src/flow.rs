//! Rectified-flow schedule, Euler sampler, conditioned transformer blocks
//! for the camera and LiDAR branches, control residual projections, and a
//! toy 1-D flow-matching trainer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tape::{Tape, TensorHandle};

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("time {0} outside [0, 1]")]
    BadTime(f64),
    #[error("invalid block config: {0}")]
    BadConfig(String),
    #[error("condition bundle mismatch: {0}")]
    BadBundle(String),
}

/// Latent plus its diffusion time.
#[derive(Debug, Clone, Copy)]
pub struct FlowState {
    pub z: TensorHandle,
    pub t: f64,
}

/// z_t = (1 - t) * x0 + t * eps.
pub fn rf_interpolate(
    tape: &mut Tape,
    x0: TensorHandle,
    eps: TensorHandle,
    t: f64,
) -> Result<TensorHandle, FlowError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(FlowError::BadTime(t));
    }
    if tape.shape(x0) != tape.shape(eps) {
        return Err(FlowError::ShapeMismatch(format!(
            "rf_interpolate: {:?} vs {:?}",
            tape.shape(x0),
            tape.shape(eps)
        )));
    }
    let a = tape.mul_scalar(x0, 1.0 - t);
    let b = tape.mul_scalar(eps, t);
    Ok(tape.add(a, b).unwrap())
}

/// Velocity target v = eps - x0 of the linear path.
pub fn rf_velocity_target(
    tape: &mut Tape,
    x0: TensorHandle,
    eps: TensorHandle,
) -> Result<TensorHandle, FlowError> {
    tape.sub(eps, x0)
        .map_err(|e| FlowError::ShapeMismatch(e.to_string()))
}

/// Deterministic Euler integration from t = 1 down to t = 0 in `n_steps`
/// uniform steps: z <- z - h * v(z, t) with t = (n - k) / n.
pub fn euler_sample(
    z1: &[f64],
    n_steps: usize,
    mut velocity: impl FnMut(&[f64], f64) -> Vec<f64>,
) -> Vec<f64> {
    assert!(n_steps >= 1, "euler_sample needs n_steps >= 1");
    let n = n_steps as f64;
    let h = 1.0 / n;
    let mut z = z1.to_vec();
    for k in 0..n_steps {
        let t = (n_steps - k) as f64 / n;
        let v = velocity(&z, t);
        assert_eq!(v.len(), z.len(), "velocity must preserve length");
        for (zi, vi) in z.iter_mut().zip(v) {
            *zi -= h * vi;
        }
    }
    z
}

/// Token-grid dimensions and conditioning dims of a transformer block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockConfig {
    pub frames: usize,
    pub views: usize,
    pub tokens: usize,
    pub channels: usize,
    pub heads: usize,
    pub cap_dim: usize,
    pub zs_dim: usize,
    pub box_dim: usize,
    pub mv_dim: usize,
    pub bev_dim: usize,
}

impl Default for BlockConfig {
    fn default() -> Self {
        BlockConfig {
            frames: 2,
            views: 2,
            tokens: 4,
            channels: 8,
            heads: 2,
            cap_dim: 8,
            zs_dim: 6,
            box_dim: 5,
            mv_dim: 6,
            bev_dim: 6,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<(), FlowError> {
        let dims = [
            self.frames,
            self.views,
            self.tokens,
            self.channels,
            self.heads,
            self.cap_dim,
            self.zs_dim,
            self.box_dim,
            self.mv_dim,
            self.bev_dim,
        ];
        if dims.contains(&0) {
            return Err(FlowError::BadConfig("all dims must be >= 1".into()));
        }
        if self.channels % self.heads != 0 {
            return Err(FlowError::BadConfig(format!(
                "channels {} not divisible by {} heads",
                self.channels, self.heads
            )));
        }
        Ok(())
    }
}

/// One attention stage's projections, all `channels x channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams {
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
}

impl AttnParams {
    fn seeded(rng: &mut ChaCha8Rng, c: usize, zero_out: bool) -> AttnParams {
        let bound = (1.0 / c as f64).sqrt();
        let mut mk = |zero: bool| -> Vec<f64> {
            (0..c * c)
                .map(|_| if zero { 0.0 } else { rng.gen_range(-bound..bound) })
                .collect()
        };
        AttnParams { wq: mk(false), wk: mk(false), wv: mk(false), wo: mk(zero_out) }
    }
}

/// All weights of one conditioned block. The conditioning stages' output
/// projections (`cond`, `mv`, `control`, `bev`) start at zero, so a fresh
/// block is bitwise identical to its unconditioned path.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub config: BlockConfig,
    pub spatial: AttnParams,
    pub cross_view: AttnParams,
    pub temporal: AttnParams,
    pub cond: AttnParams,
    pub mv: AttnParams,
    pub control: AttnParams,
    pub bev: AttnParams,
    pub w_cap: Vec<f64>,
    pub w_zs: Vec<f64>,
    pub w_box: Vec<f64>,
    pub w_mv: Vec<f64>,
    pub w_bev: Vec<f64>,
}

impl BlockParams {
    pub fn seeded(seed: u64, config: BlockConfig) -> Result<BlockParams, FlowError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let embed = |rng: &mut ChaCha8Rng, d_in: usize| -> Vec<f64> {
            let bound = (1.0 / d_in as f64).sqrt();
            (0..d_in * c).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        Ok(BlockParams {
            spatial: AttnParams::seeded(&mut rng, c, false),
            cross_view: AttnParams::seeded(&mut rng, c, false),
            temporal: AttnParams::seeded(&mut rng, c, false),
            cond: AttnParams::seeded(&mut rng, c, true),
            mv: AttnParams::seeded(&mut rng, c, true),
            control: AttnParams::seeded(&mut rng, c, true),
            bev: AttnParams::seeded(&mut rng, c, true),
            w_cap: embed(&mut rng, config.cap_dim),
            w_zs: embed(&mut rng, config.zs_dim),
            w_box: embed(&mut rng, config.box_dim),
            w_mv: embed(&mut rng, config.mv_dim),
            w_bev: embed(&mut rng, config.bev_dim),
            config,
        })
    }
}

/// Conditioning inputs: caption embedding, layout-latent tokens, box
/// embedding, and optional lift-splat BEV tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBundle {
    pub e_cap: Vec<f64>,
    /// `n_zs x zs_dim`, row-major.
    pub z_s: Vec<f64>,
    pub n_zs: usize,
    pub e_box: Vec<f64>,
    /// Optional `n_bev x bev_dim` tokens.
    pub bev_cond: Option<Vec<f64>>,
    pub n_bev: usize,
}

impl ConditionBundle {
    fn validate(&self, cfg: &BlockConfig) -> Result<(), FlowError> {
        if self.e_cap.len() != cfg.cap_dim {
            return Err(FlowError::BadBundle(format!(
                "e_cap len {} != cap_dim {}",
                self.e_cap.len(),
                cfg.cap_dim
            )));
        }
        if self.n_zs == 0 || self.z_s.len() != self.n_zs * cfg.zs_dim {
            return Err(FlowError::BadBundle(format!(
                "z_s len {} != {} tokens x zs_dim {}",
                self.z_s.len(),
                self.n_zs,
                cfg.zs_dim
            )));
        }
        if self.e_box.len() != cfg.box_dim {
            return Err(FlowError::BadBundle(format!(
                "e_box len {} != box_dim {}",
                self.e_box.len(),
                cfg.box_dim
            )));
        }
        if let Some(b) = &self.bev_cond {
            if self.n_bev == 0 || b.len() != self.n_bev * cfg.bev_dim {
                return Err(FlowError::BadBundle(format!(
                    "bev_cond len {} != {} tokens x bev_dim {}",
                    b.len(),
                    self.n_bev,
                    cfg.bev_dim
                )));
            }
        }
        Ok(())
    }
}

/// Projects every row of a `[.., d_in]` tensor: flatten, 2-D matmul, restore.
fn proj(tape: &mut Tape, x: TensorHandle, w: TensorHandle) -> TensorHandle {
    let shape = tape.shape(x).to_vec();
    let d_in = *shape.last().unwrap();
    let d_out = tape.shape(w)[1];
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let flat = tape.reshape(x, &[rows, d_in]).unwrap();
    let out = tape.matmul(flat, w).unwrap();
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = d_out;
    tape.reshape(out, &out_shape).unwrap()
}

fn leaf_mat(tape: &mut Tape, rows: usize, cols: usize, vals: &[f64]) -> TensorHandle {
    tape.leaf(&[rows, cols], vals.to_vec())
}

/// Multi-head scaled-dot-product attention over batched token sequences.
/// `q` is `[B, n, c]`, `kv` is `[B, m, c]`; returns the attended `[B, n, c]`
/// (after the output projection) and the `[B*heads, n, m]` probability rows.
pub fn attention(
    tape: &mut Tape,
    q: TensorHandle,
    kv: TensorHandle,
    p: &AttnParams,
    heads: usize,
) -> (TensorHandle, TensorHandle) {
    let qs = tape.shape(q).to_vec();
    let (batch, n, c) = (qs[0], qs[1], qs[2]);
    let m = tape.shape(kv)[1];
    let dh = c / heads;
    let wq = leaf_mat(tape, c, c, &p.wq);
    let wk = leaf_mat(tape, c, c, &p.wk);
    let wv = leaf_mat(tape, c, c, &p.wv);
    let wo = leaf_mat(tape, c, c, &p.wo);

    let split = |tape: &mut Tape, x: TensorHandle, len: usize| -> TensorHandle {
        let x = tape.reshape(x, &[batch, len, heads, dh]).unwrap();
        let x = tape.permute(x, &[0, 2, 1, 3]).unwrap();
        tape.reshape(x, &[batch * heads, len, dh]).unwrap()
    };
    let qh = proj(tape, q, wq);
    let qh = split(tape, qh, n);
    let kh = proj(tape, kv, wk);
    let kh = split(tape, kh, m);
    let vh = proj(tape, kv, wv);
    let vh = split(tape, vh, m);

    let kt = tape.transpose_last2(kh).unwrap();
    let scores = tape.matmul(qh, kt).unwrap();
    let scores = tape.mul_scalar(scores, 1.0 / (dh as f64).sqrt());
    let probs = tape.softmax_lastdim(scores);
    let ctx = tape.matmul(probs, vh).unwrap();
    let ctx = tape.reshape(ctx, &[batch, heads, n, dh]).unwrap();
    let ctx = tape.permute(ctx, &[0, 2, 1, 3]).unwrap();
    let ctx = tape.reshape(ctx, &[batch, n, c]).unwrap();
    (proj(tape, ctx, wo), probs)
}

/// Residual self-attention over one axis of the `[f, v, n, c]` token grid.
fn residual_attn(
    tape: &mut Tape,
    x: TensorHandle,
    p: &AttnParams,
    heads: usize,
) -> TensorHandle {
    let (out, _) = attention(tape, x, x, p, heads);
    tape.add(x, out).unwrap()
}

/// Concatenates two `[m_i, c]` token matrices along the token axis.
fn concat_tokens(tape: &mut Tape, a: TensorHandle, b: TensorHandle) -> TensorHandle {
    let at = tape.transpose_last2(a).unwrap();
    let bt = tape.transpose_last2(b).unwrap();
    let cat = tape.concat_lastdim(at, bt).unwrap();
    tape.transpose_last2(cat).unwrap()
}

fn cond_tokens_cam(
    tape: &mut Tape,
    bundle: &ConditionBundle,
    params: &BlockParams,
) -> (TensorHandle, TensorHandle) {
    let cfg = &params.config;
    let cap = tape.leaf(&[1, cfg.cap_dim], bundle.e_cap.clone());
    let w_cap = leaf_mat(tape, cfg.cap_dim, cfg.channels, &params.w_cap);
    let cap = tape.matmul(cap, w_cap).unwrap();
    let zs = tape.leaf(&[bundle.n_zs, cfg.zs_dim], bundle.z_s.clone());
    let w_zs = leaf_mat(tape, cfg.zs_dim, cfg.channels, &params.w_zs);
    let zs = tape.matmul(zs, w_zs).unwrap();
    (concat_tokens(tape, cap, zs), zs)
}

/// Camera-branch block: spatial, cross-view, and temporal self-attention,
/// then (when conditioned) caption/layout cross-attention, control-map
/// cross-attention, and the layout control residual. Input `[f, v, n, c]`.
pub fn stdit_block_cam(
    tape: &mut Tape,
    z: TensorHandle,
    m_v: Option<(&[f64], usize)>,
    bundle: Option<&ConditionBundle>,
    params: &BlockParams,
) -> Result<TensorHandle, FlowError> {
    let cfg = &params.config;
    cfg.validate()?;
    let (f, v, n, c) = (cfg.frames, cfg.views, cfg.tokens, cfg.channels);
    if tape.shape(z) != [f, v, n, c] {
        return Err(FlowError::ShapeMismatch(format!(
            "block input {:?}, config wants [{f}, {v}, {n}, {c}]",
            tape.shape(z)
        )));
    }
    if let Some(b) = bundle {
        b.validate(cfg)?;
    }
    if let Some((mv, n_mv)) = m_v {
        if n_mv == 0 || mv.len() != n_mv * cfg.mv_dim {
            return Err(FlowError::BadBundle(format!(
                "control-map embedding len {} != {} tokens x mv_dim {}",
                mv.len(),
                n_mv,
                cfg.mv_dim
            )));
        }
    }

    // Spatial: tokens within one (frame, view) image attend to each other.
    let x = tape.reshape(z, &[f * v, n, c]).unwrap();
    let x = residual_attn(tape, x, &params.spatial, cfg.heads);

    // Cross-view: same (frame, token) across views.
    let x = tape.reshape(x, &[f, v, n, c]).unwrap();
    let x = tape.permute(x, &[0, 2, 1, 3]).unwrap();
    let x = tape.reshape(x, &[f * n, v, c]).unwrap();
    let x = residual_attn(tape, x, &params.cross_view, cfg.heads);
    let x = tape.reshape(x, &[f, n, v, c]).unwrap();
    let x = tape.permute(x, &[0, 2, 1, 3]).unwrap();

    // Temporal: same (view, token) across frames.
    let x = tape.permute(x, &[1, 2, 0, 3]).unwrap();
    let x = tape.reshape(x, &[v * n, f, c]).unwrap();
    let x = residual_attn(tape, x, &params.temporal, cfg.heads);
    let x = tape.reshape(x, &[v, n, f, c]).unwrap();
    let x = tape.permute(x, &[2, 0, 1, 3]).unwrap();

    let mut x = tape.reshape(x, &[1, f * v * n, c]).unwrap();
    if let Some(b) = bundle {
        // Condition cross-attention, keys/values [e_cap, z_s].
        let (cond_kv, zs_tokens) = cond_tokens_cam(tape, b, params);
        let cond_kv = tape.reshape(cond_kv, &[1, 1 + b.n_zs, c]).unwrap();
        let (out, _) = attention(tape, x, cond_kv, &params.cond, cfg.heads);
        x = tape.add(x, out).unwrap();
        // Control residual over the layout tokens alone.
        let zs3 = tape.reshape(zs_tokens, &[1, b.n_zs, c]).unwrap();
        let (ctrl, _) = attention(tape, x, zs3, &params.control, cfg.heads);
        x = tape.add(x, ctrl).unwrap();
    }
    if let Some((mv, n_mv)) = m_v {
        let tokens = tape.leaf(&[n_mv, cfg.mv_dim], mv.to_vec());
        let w_mv = leaf_mat(tape, cfg.mv_dim, c, &params.w_mv);
        let tokens = tape.matmul(tokens, w_mv).unwrap();
        let tokens = tape.reshape(tokens, &[1, n_mv, c]).unwrap();
        let (out, _) = attention(tape, x, tokens, &params.mv, cfg.heads);
        x = tape.add(x, out).unwrap();
    }
    Ok(tape.reshape(x, &[f, v, n, c]).unwrap())
}

/// LiDAR-branch block: caption/box cross-attention, temporal multi-head
/// self-attention with residual, and an optional BEV control residual.
/// Input `[f, n, c]` (frames x tokens x channels).
pub fn stdit_block_lidar(
    tape: &mut Tape,
    z: TensorHandle,
    bundle: Option<&ConditionBundle>,
    params: &BlockParams,
) -> Result<TensorHandle, FlowError> {
    let cfg = &params.config;
    cfg.validate()?;
    let (f, n, c) = (cfg.frames, cfg.tokens, cfg.channels);
    if tape.shape(z) != [f, n, c] {
        return Err(FlowError::ShapeMismatch(format!(
            "lidar block input {:?}, config wants [{f}, {n}, {c}]",
            tape.shape(z)
        )));
    }
    if let Some(b) = bundle {
        b.validate(cfg)?;
    }
    let mut x = tape.reshape(z, &[1, f * n, c]).unwrap();
    if let Some(b) = bundle {
        // Keys/values are the caption and box embeddings.
        let cap = tape.leaf(&[1, cfg.cap_dim], b.e_cap.clone());
        let w_cap = leaf_mat(tape, cfg.cap_dim, c, &params.w_cap);
        let cap = tape.matmul(cap, w_cap).unwrap();
        let bx = tape.leaf(&[1, cfg.box_dim], b.e_box.clone());
        let w_box = leaf_mat(tape, cfg.box_dim, c, &params.w_box);
        let bx = tape.matmul(bx, w_box).unwrap();
        let kv = concat_tokens(tape, cap, bx);
        let kv = tape.reshape(kv, &[1, 2, c]).unwrap();
        let (out, _) = attention(tape, x, kv, &params.cond, cfg.heads);
        x = tape.add(x, out).unwrap();
    }
    // Temporal self-attention across frames per token.
    let xt = tape.reshape(x, &[f, n, c]).unwrap();
    let xt = tape.permute(xt, &[1, 0, 2]).unwrap();
    let xt = residual_attn(tape, xt, &params.temporal, cfg.heads);
    let xt = tape.permute(xt, &[1, 0, 2]).unwrap();
    let mut x = tape.reshape(xt, &[1, f * n, c]).unwrap();
    if let Some(b) = bundle {
        if let Some(bev) = &b.bev_cond {
            let tokens = tape.leaf(&[b.n_bev, cfg.bev_dim], bev.clone());
            let w_bev = leaf_mat(tape, cfg.bev_dim, c, &params.w_bev);
            let tokens = tape.matmul(tokens, w_bev).unwrap();
            let tokens = tape.reshape(tokens, &[1, b.n_bev, c]).unwrap();
            let (out, _) = attention(tape, x, tokens, &params.bev, cfg.heads);
            x = tape.add(x, out).unwrap();
        }
    }
    Ok(tape.reshape(x, &[f, n, c]).unwrap())
}

/// Per-block control residual projections: a random input embedding followed
/// by a zero-initialized output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlNetParams {
    pub cond_dim: usize,
    pub channels: usize,
    pub w_in: Vec<Vec<f64>>,
    pub w_out: Vec<Vec<f64>>,
}

impl ControlNetParams {
    pub fn seeded(seed: u64, cond_dim: usize, channels: usize, n_blocks: usize) -> ControlNetParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (1.0 / cond_dim as f64).sqrt();
        let w_in = (0..n_blocks)
            .map(|_| (0..cond_dim * channels).map(|_| rng.gen_range(-bound..bound)).collect())
            .collect();
        let w_out = (0..n_blocks).map(|_| vec![0.0; channels * channels]).collect();
        ControlNetParams { cond_dim, channels, w_in, w_out }
    }
}

/// One residual tensor per block, `[n_tokens, channels]`; all exactly zero
/// while the output projections are at their zero init.
pub fn controlnet_residuals(
    tape: &mut Tape,
    cond: &[f64],
    n_tokens: usize,
    params: &ControlNetParams,
) -> Result<Vec<TensorHandle>, FlowError> {
    if n_tokens == 0 || cond.len() != n_tokens * params.cond_dim {
        return Err(FlowError::BadBundle(format!(
            "conditioning len {} != {} tokens x dim {}",
            cond.len(),
            n_tokens,
            params.cond_dim
        )));
    }
    let x = tape.leaf(&[n_tokens, params.cond_dim], cond.to_vec());
    let mut out = Vec::with_capacity(params.w_in.len());
    for (w_in, w_out) in params.w_in.iter().zip(&params.w_out) {
        let wi = leaf_mat(tape, params.cond_dim, params.channels, w_in);
        let h = tape.matmul(x, wi).unwrap();
        let h = tape.relu(h);
        let wo = leaf_mat(tape, params.channels, params.channels, w_out);
        out.push(tape.matmul(h, wo).unwrap());
    }
    Ok(out)
}

/// Piecewise (per time bin) linear velocity model for 1-D flow matching:
/// v(z, t) = a_b * z + b_b with b = bin(t).
#[derive(Debug, Clone, PartialEq)]
pub struct ToyFlowModel {
    pub n_bins: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl ToyFlowModel {
    pub fn zeros(n_bins: usize) -> ToyFlowModel {
        ToyFlowModel { n_bins, a: vec![0.0; n_bins], b: vec![0.0; n_bins] }
    }

    fn bin(&self, t: f64) -> usize {
        ((t * self.n_bins as f64) as usize).min(self.n_bins - 1)
    }

    pub fn velocity(&self, z: f64, t: f64) -> f64 {
        let b = self.bin(t);
        self.a[b] * z + self.b[b]
    }
}

/// Online SGD on the flow-matching regression: draw x0 from the dataset,
/// eps ~ N(0,1), t ~ U(0,1), regress the model velocity at z_t onto
/// eps - x0. Returns the fitted model and the per-step squared-error curve.
pub fn train_toy_flow(
    dataset: &[f64],
    mut model: ToyFlowModel,
    steps: usize,
    lr: f64,
    seed: u64,
) -> (ToyFlowModel, Vec<f64>) {
    assert!(!dataset.is_empty(), "train_toy_flow needs a nonempty dataset");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut curve = Vec::with_capacity(steps);
    for _ in 0..steps {
        let x0 = dataset[rng.gen_range(0..dataset.len())];
        let eps: f64 = {
            // Box-Muller keeps the dependency surface small and seeded.
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        };
        let t: f64 = rng.gen_range(0.0..1.0);
        let z = (1.0 - t) * x0 + t * eps;
        let target = eps - x0;
        let bin = model.bin(t);
        let pred = model.a[bin] * z + model.b[bin];
        let err = pred - target;
        curve.push(err * err);
        model.a[bin] -= lr * 2.0 * err * z;
        model.b[bin] -= lr * 2.0 * err;
    }
    (model, curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::gradcheck;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn bundle_for(cfg: &BlockConfig, rng: &mut ChaCha8Rng, with_bev: bool) -> ConditionBundle {
        let n_zs = 3;
        let n_bev = 2;
        ConditionBundle {
            e_cap: rand_vec(rng, cfg.cap_dim),
            z_s: rand_vec(rng, n_zs * cfg.zs_dim),
            n_zs,
            e_box: rand_vec(rng, cfg.box_dim),
            bev_cond: with_bev.then(|| rand_vec(rng, n_bev * cfg.bev_dim)),
            n_bev,
        }
    }

    #[test]
    fn interpolate_endpoints_and_midpoint() {
        let mut tape = Tape::new();
        let x0 = tape.leaf(&[3], vec![0.0, 1.0, -2.0]);
        let eps = tape.leaf(&[3], vec![2.0, 2.0, 2.0]);
        let z0 = rf_interpolate(&mut tape, x0, eps, 0.0).unwrap();
        assert_eq!(tape.values(z0), tape.values(x0));
        let z1 = rf_interpolate(&mut tape, x0, eps, 1.0).unwrap();
        assert_eq!(tape.values(z1), tape.values(eps));
        let zh = rf_interpolate(&mut tape, x0, eps, 0.5).unwrap();
        assert_eq!(tape.values(zh), &[1.0, 1.5, 0.0]);
        assert!(rf_interpolate(&mut tape, x0, eps, 1.5).is_err());
        let bad = tape.leaf(&[2], vec![0.0; 2]);
        assert!(rf_interpolate(&mut tape, x0, bad, 0.5).is_err());
    }

    #[test]
    fn velocity_is_path_derivative() {
        let mut tape = Tape::new();
        let x0 = tape.leaf(&[2], vec![0.3, -1.2]);
        let eps = tape.leaf(&[2], vec![1.1, 0.4]);
        let v = rf_velocity_target(&mut tape, x0, eps).unwrap();
        // (z(t2) - z(t1)) / (t2 - t1) must equal v for the linear path.
        for (t1, t2) in [(0.1, 0.9), (0.25, 0.5)] {
            let za = rf_interpolate(&mut tape, x0, eps, t1).unwrap();
            let zb = rf_interpolate(&mut tape, x0, eps, t2).unwrap();
            for i in 0..2 {
                let slope = (tape.values(zb)[i] - tape.values(za)[i]) / (t2 - t1);
                assert!((slope - tape.values(v)[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn euler_frozen_and_constant_fields() {
        let z1 = vec![1.5, -2.0];
        assert_eq!(euler_sample(&z1, 7, |_, _| vec![0.0, 0.0]), z1);
        let z0 = euler_sample(&z1, 4, |z, _| vec![3.0; z.len()]);
        assert_eq!(z0, vec![1.5 - 3.0, -2.0 - 3.0]);
    }

    #[test]
    fn euler_point_mass_field_reaches_origin_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n_steps in 1..=64 {
            let z1: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let z0 = euler_sample(&z1, n_steps, |z, t| z.iter().map(|zi| zi / t).collect());
            assert!(z0.iter().all(|&v| v == 0.0), "n={n_steps} left {z0:?}");
        }
    }

    #[test]
    fn cam_block_shape_and_zero_init_noop() {
        let cfg = BlockConfig::default();
        let params = BlockParams::seeded(5, cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n_total = cfg.frames * cfg.views * cfg.tokens * cfg.channels;
        let zv = rand_vec(&mut rng, n_total);
        let bundle = bundle_for(&cfg, &mut rng, false);
        let mv = rand_vec(&mut rng, 2 * cfg.mv_dim);

        let mut t1 = Tape::new();
        let z1 = t1.leaf(&[cfg.frames, cfg.views, cfg.tokens, cfg.channels], zv.clone());
        let full = stdit_block_cam(&mut t1, z1, Some((&mv, 2)), Some(&bundle), &params).unwrap();
        assert_eq!(t1.shape(full), [cfg.frames, cfg.views, cfg.tokens, cfg.channels]);

        let mut t2 = Tape::new();
        let z2 = t2.leaf(&[cfg.frames, cfg.views, cfg.tokens, cfg.channels], zv);
        let bare = stdit_block_cam(&mut t2, z2, None, None, &params).unwrap();
        let a: Vec<u64> = t1.values(full).iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = t2.values(bare).iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b, "zero-init conditioning must be a bitwise no-op");
    }

    #[test]
    fn nonzero_conditioning_changes_output() {
        let cfg = BlockConfig::default();
        let mut params = BlockParams::seeded(7, cfg).unwrap();
        for w in params.cond.wo.iter_mut() {
            *w = 0.05;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n_total = cfg.frames * cfg.views * cfg.tokens * cfg.channels;
        let zv = rand_vec(&mut rng, n_total);
        let bundle = bundle_for(&cfg, &mut rng, false);
        let mut t1 = Tape::new();
        let z1 = t1.leaf(&[cfg.frames, cfg.views, cfg.tokens, cfg.channels], zv.clone());
        let with = stdit_block_cam(&mut t1, z1, None, Some(&bundle), &params).unwrap();
        let mut t2 = Tape::new();
        let z2 = t2.leaf(&[cfg.frames, cfg.views, cfg.tokens, cfg.channels], zv);
        let without = stdit_block_cam(&mut t2, z2, None, None, &params).unwrap();
        assert_ne!(t1.values(with), t2.values(without));
    }

    #[test]
    fn cam_block_is_view_permutation_equivariant() {
        let cfg = BlockConfig::default();
        let params = BlockParams::seeded(9, cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (f, v, n, c) = (cfg.frames, cfg.views, cfg.tokens, cfg.channels);
        let zv = rand_vec(&mut rng, f * v * n * c);
        // Swap the two views of the input.
        let mut swapped = zv.clone();
        for fi in 0..f {
            for ni in 0..n {
                for ci in 0..c {
                    let i0 = ((fi * v) * n + ni) * c + ci;
                    let i1 = ((fi * v + 1) * n + ni) * c + ci;
                    swapped.swap(i0, i1);
                }
            }
        }
        let mut t1 = Tape::new();
        let z1 = t1.leaf(&[f, v, n, c], zv);
        let out1 = stdit_block_cam(&mut t1, z1, None, None, &params).unwrap();
        let mut t2 = Tape::new();
        let z2 = t2.leaf(&[f, v, n, c], swapped);
        let out2 = stdit_block_cam(&mut t2, z2, None, None, &params).unwrap();
        // The swapped run's output, un-swapped, must equal the original.
        let v1 = t1.values(out1);
        let v2 = t2.values(out2);
        for fi in 0..f {
            for ni in 0..n {
                for ci in 0..c {
                    let i0 = ((fi * v) * n + ni) * c + ci;
                    let i1 = ((fi * v + 1) * n + ni) * c + ci;
                    assert_eq!(v1[i0].to_bits(), v2[i1].to_bits());
                    assert_eq!(v1[i1].to_bits(), v2[i0].to_bits());
                }
            }
        }
    }

    #[test]
    fn attention_rows_are_probabilities() {
        let cfg = BlockConfig::default();
        let params = BlockParams::seeded(12, cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut tape = Tape::new();
        let q = tape.leaf(&[2, 3, cfg.channels], rand_vec(&mut rng, 2 * 3 * cfg.channels));
        let kv = tape.leaf(&[2, 5, cfg.channels], rand_vec(&mut rng, 2 * 5 * cfg.channels));
        let (_, probs) = attention(&mut tape, q, kv, &params.spatial, cfg.heads);
        let pv = tape.values(probs);
        assert!(pv.iter().all(|&p| p >= 0.0));
        for row in pv.chunks(5) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn lidar_block_contracts() {
        let cfg = BlockConfig::default();
        let params = BlockParams::seeded(14, cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (f, n, c) = (cfg.frames, cfg.tokens, cfg.channels);
        let zv = rand_vec(&mut rng, f * n * c);
        let bundle = bundle_for(&cfg, &mut rng, true);
        let mut tape = Tape::new();
        let z = tape.leaf(&[f, n, c], zv.clone());
        let out = stdit_block_lidar(&mut tape, z, Some(&bundle), &params).unwrap();
        assert_eq!(tape.shape(out), [f, n, c]);
        // Zero-weight temporal attention: the residual path passes z through.
        let mut frozen = params.clone();
        frozen.temporal = AttnParams {
            wq: vec![0.0; c * c],
            wk: vec![0.0; c * c],
            wv: vec![0.0; c * c],
            wo: vec![0.0; c * c],
        };
        let mut t2 = Tape::new();
        let z2 = t2.leaf(&[f, n, c], zv.clone());
        let out2 = stdit_block_lidar(&mut t2, z2, None, &frozen).unwrap();
        let same: Vec<u64> = t2.values(out2).iter().map(|v| v.to_bits()).collect();
        let orig: Vec<u64> = zv.iter().map(|v| v.to_bits()).collect();
        assert_eq!(same, orig);
    }

    #[test]
    fn lidar_block_gradient_matches_finite_differences() {
        let cfg = BlockConfig::default();
        let params = BlockParams::seeded(16, cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (f, n, c) = (cfg.frames, cfg.tokens, cfg.channels);
        let zv = rand_vec(&mut rng, f * n * c);
        let bundle = bundle_for(&cfg, &mut rng, true);
        let p = params.clone();
        assert!(gradcheck::check(
            &[(&[f, n, c], zv)],
            move |t, h| {
                let out = stdit_block_lidar(t, h[0], Some(&bundle), &p).unwrap();
                t.sum(out)
            },
            1e-4,
            1e-7,
        ));
    }

    #[test]
    fn cam_block_gradient_matches_finite_differences() {
        let cfg = BlockConfig::default();
        let params = BlockParams::seeded(18, cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let (f, v, n, c) = (cfg.frames, cfg.views, cfg.tokens, cfg.channels);
        let zv = rand_vec(&mut rng, f * v * n * c);
        let bundle = bundle_for(&cfg, &mut rng, false);
        let p = params.clone();
        assert!(gradcheck::check(
            &[(&[f, v, n, c], zv)],
            move |t, h| {
                let out = stdit_block_cam(t, h[0], None, Some(&bundle), &p).unwrap();
                t.sum(out)
            },
            1e-4,
            1e-7,
        ));
    }

    #[test]
    fn controlnet_residuals_zero_at_init() {
        let params = ControlNetParams::seeded(20, 6, 8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cond = rand_vec(&mut rng, 4 * 6);
        let mut tape = Tape::new();
        let res = controlnet_residuals(&mut tape, &cond, 4, &params).unwrap();
        assert_eq!(res.len(), 3);
        for r in &res {
            assert_eq!(tape.shape(*r), [4, 8]);
            assert!(tape.values(*r).iter().all(|&v| v == 0.0));
        }
        assert!(controlnet_residuals(&mut tape, &cond, 3, &params).is_err());
    }

    #[test]
    fn toy_flow_training_converges_on_constant() {
        let dataset = vec![1.5];
        let (model, curve) = train_toy_flow(&dataset, ToyFlowModel::zeros(32), 60000, 0.05, 22);
        let head: f64 = curve[..400].iter().sum::<f64>() / 400.0;
        let tail: f64 = curve[curve.len() - 400..].iter().sum::<f64>() / 400.0;
        assert!(tail < 0.5 * head, "loss did not drop: head {head}, tail {tail}");
        // The learned field must carry noise back to the constant.
        for eps in [-1.0, 0.0, 2.0] {
            let z0 = euler_sample(&[eps], 100, |z, t| vec![model.velocity(z[0], t)]);
            assert!((z0[0] - 1.5).abs() < 0.2, "eps {eps} landed at {}", z0[0]);
        }
        // Zero learning rate leaves params untouched.
        let (frozen, _) = train_toy_flow(&dataset, ToyFlowModel::zeros(8), 100, 0.0, 22);
        assert_eq!(frozen, ToyFlowModel::zeros(8));
        // Determinism.
        let (_, c1) = train_toy_flow(&dataset, ToyFlowModel::zeros(8), 500, 0.05, 23);
        let (_, c2) = train_toy_flow(&dataset, ToyFlowModel::zeros(8), 500, 0.05, 23);
        assert_eq!(c1, c2);
    }

    #[test]
    fn sampled_gaussian_matches_moments() {
        let (mu, sigma) = (2.0, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let dataset: Vec<f64> = (0..2000)
            .map(|_| {
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                mu + sigma * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        let (model, _) = train_toy_flow(&dataset, ToyFlowModel::zeros(32), 60000, 0.02, 25);
        let n_samples = 10000;
        let mut samples = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let eps = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            let z0 = euler_sample(&[eps], 100, |z, t| vec![model.velocity(z[0], t)]);
            samples.push(z0[0]);
        }
        let mean: f64 = samples.iter().sum::<f64>() / n_samples as f64;
        let var: f64 =
            samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n_samples as f64;
        assert!((mean - mu).abs() < 0.05 * mu.abs(), "mean {mean}");
        assert!((var - sigma * sigma).abs() < 0.1 * sigma * sigma, "var {var}");
    }
}
