//! BEV latent codec: three stride-2 windowed-mixing layers plus a channel
//! projection down to the 4-channel latent, and the mirrored decoder back to
//! per-cell occupancy probabilities. Runs on the autodiff tape so both
//! directions are differentiable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BevError, BevFeatureGrid, BevGridSpec, BevLatent, OccupancyGrid, DOWNSAMPLE, LATENT_CHANNELS};
use crate::tape::{Tape, TensorHandle};

#[derive(Debug, Clone, PartialEq)]
pub struct CodecConfig {
    pub enc_channels: [usize; 3],
    pub dec_channels: [usize; 3],
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            enc_channels: [16, 16, 16],
            dec_channels: [16, 16, 16],
        }
    }
}

/// All weights of the encoder/decoder pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecParams {
    pub in_channels: usize,
    pub n_z: usize,
    pub config: CodecConfig,
    pub enc_w: [Vec<f64>; 3],
    pub enc_b: [Vec<f64>; 3],
    pub enc_proj_w: Vec<f64>,
    pub enc_proj_b: Vec<f64>,
    pub dec_proj_w: Vec<f64>,
    pub dec_proj_b: Vec<f64>,
    pub dec_w: [Vec<f64>; 3],
    pub dec_b: [Vec<f64>; 3],
}

/// Tape handles for every parameter tensor, in `flat` order.
pub struct CodecParamHandles {
    pub enc_w: [TensorHandle; 3],
    pub enc_b: [TensorHandle; 3],
    pub enc_proj_w: TensorHandle,
    pub enc_proj_b: TensorHandle,
    pub dec_proj_w: TensorHandle,
    pub dec_proj_b: TensorHandle,
    pub dec_w: [TensorHandle; 3],
    pub dec_b: [TensorHandle; 3],
}

impl CodecParamHandles {
    pub fn decoder_handles(&self) -> Vec<TensorHandle> {
        let mut v = vec![self.dec_proj_w, self.dec_proj_b];
        for s in 0..3 {
            v.push(self.dec_w[s]);
            v.push(self.dec_b[s]);
        }
        v
    }
}

impl CodecParams {
    fn shapes(in_channels: usize, n_z: usize, config: &CodecConfig) -> CodecShapes {
        let [e1, e2, e3] = config.enc_channels;
        let [d1, d2, d3] = config.dec_channels;
        CodecShapes {
            enc_w: [
                (4 * in_channels, e1),
                (4 * e1, e2),
                (4 * e2, e3),
            ],
            enc_proj: (e3, LATENT_CHANNELS),
            dec_proj: (LATENT_CHANNELS, d1),
            dec_w: [(d1, 4 * d2), (d2, 4 * d3), (d3, 4 * n_z)],
        }
    }

    pub fn zeros(in_channels: usize, n_z: usize, config: CodecConfig) -> CodecParams {
        let s = Self::shapes(in_channels, n_z, &config);
        CodecParams {
            in_channels,
            n_z,
            enc_w: s.enc_w.map(|(a, b)| vec![0.0; a * b]),
            enc_b: [
                vec![0.0; config.enc_channels[0]],
                vec![0.0; config.enc_channels[1]],
                vec![0.0; config.enc_channels[2]],
            ],
            enc_proj_w: vec![0.0; s.enc_proj.0 * s.enc_proj.1],
            enc_proj_b: vec![0.0; s.enc_proj.1],
            dec_proj_w: vec![0.0; s.dec_proj.0 * s.dec_proj.1],
            dec_proj_b: vec![0.0; s.dec_proj.1],
            dec_w: s.dec_w.map(|(a, b)| vec![0.0; a * b]),
            dec_b: s.dec_w.map(|(_, b)| vec![0.0; b]),
            config,
        }
    }

    /// Xavier-style random init with zero biases, deterministic per seed.
    pub fn seeded(seed: u64, in_channels: usize, n_z: usize, config: CodecConfig) -> CodecParams {
        let mut p = Self::zeros(in_channels, n_z, config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Self::shapes(in_channels, n_z, &p.config);
        let fill = |w: &mut Vec<f64>, fan_in: usize, rng: &mut ChaCha8Rng| {
            let bound = (1.0 / fan_in as f64).sqrt();
            for v in w.iter_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        };
        for i in 0..3 {
            fill(&mut p.enc_w[i], s.enc_w[i].0, &mut rng);
        }
        fill(&mut p.enc_proj_w, s.enc_proj.0, &mut rng);
        fill(&mut p.dec_proj_w, s.dec_proj.0, &mut rng);
        for i in 0..3 {
            fill(&mut p.dec_w[i], s.dec_w[i].0, &mut rng);
        }
        p
    }

    /// Constructed weights that make decode(encode(grid)) preserve the
    /// dominant occupancy structure of driving scenes: per 8x8 block the
    /// latent carries ground-return count, obstacle-cell count, and an
    /// obstacle height moment; the decoder re-emits the ground bin and an
    /// obstacle column up to twice the mean occupied height.
    pub fn structure_preserving(spec: &BevGridSpec) -> CodecParams {
        let n_z = spec.n_z_bins;
        let in_channels = n_z + 2;
        let config = CodecConfig { enc_channels: [4, 4, 4], dec_channels: [4, 4, 4] };
        let mut p = Self::zeros(in_channels, n_z, config);
        let ground = spec.ground_bin();
        const SCALE: f64 = 1.0 / 8.0;

        // Stage 0: per window position, map occupancy channels to
        // (ground count, obstacle count, obstacle z moment, 0).
        for pos in 0..4 {
            let row0 = pos * in_channels;
            p.enc_w[0][(row0 + ground) * 4] = 1.0;
            for k in (ground + 1)..n_z {
                p.enc_w[0][(row0 + k) * 4 + 1] = 1.0;
                p.enc_w[0][(row0 + k) * 4 + 2] = spec.z_bin_center(k);
            }
        }
        // Stages 1-2: channel-wise sums over window positions.
        for stage in 1..3 {
            for pos in 0..4 {
                for c in 0..4 {
                    p.enc_w[stage][(pos * 4 + c) * 4 + c] = 1.0;
                }
            }
        }
        // Latent projection: diagonal rescale.
        for c in 0..4 {
            p.enc_proj_w[c * 4 + c] = SCALE;
        }

        // Decoder: carry the latent channels through the hidden stages
        // unchanged (values are nonnegative, so relu is transparent), then
        // emit logits in the last projection.
        for c in 0..4 {
            p.dec_proj_w[c * 4 + c] = 1.0;
        }
        for stage in 0..2 {
            for pos in 0..4 {
                for c in 0..4 {
                    p.dec_w[stage][c * 16 + pos * 4 + c] = 1.0;
                }
            }
        }
        // Final stage: 4 latent channels -> 4 positions x n_z logits. Empty
        // cells must sit deep in the sigmoid tail (logit -12, occupancy
        // ~6e-6) or the decoded grid fogs up and ray marching terminates at
        // the first cell; a single occupied source cell must still swing the
        // logit clearly positive.
        let (a_g, b_g) = (160.0, 12.0);
        let (a_o, b_o) = (320.0, 12.0);
        for pos in 0..4 {
            for k in 0..n_z {
                let col = pos * n_z + k;
                if k == ground {
                    p.dec_w[2][col] = a_g; // from ground-count channel
                    p.dec_b[2][col] = -b_g;
                } else if k > ground {
                    let zc = spec.z_bin_center(k);
                    p.dec_w[2][n_z * 4 + col] = -a_o * zc; // obstacle count
                    p.dec_w[2][2 * n_z * 4 + col] = 2.0 * a_o; // z moment
                    p.dec_b[2][col] = -b_o;
                } else {
                    p.dec_b[2][col] = -12.0;
                }
            }
        }
        p
    }

    pub fn make_handles(&self, tape: &mut Tape) -> CodecParamHandles {
        let s = Self::shapes(self.in_channels, self.n_z, &self.config);
        let mk = |tape: &mut Tape, shape: (usize, usize), vals: &Vec<f64>| {
            tape.leaf(&[shape.0, shape.1], vals.clone())
        };
        let mkb = |tape: &mut Tape, n: usize, vals: &Vec<f64>| tape.leaf(&[n], vals.clone());
        CodecParamHandles {
            enc_w: [
                mk(tape, s.enc_w[0], &self.enc_w[0]),
                mk(tape, s.enc_w[1], &self.enc_w[1]),
                mk(tape, s.enc_w[2], &self.enc_w[2]),
            ],
            enc_b: [
                mkb(tape, self.config.enc_channels[0], &self.enc_b[0]),
                mkb(tape, self.config.enc_channels[1], &self.enc_b[1]),
                mkb(tape, self.config.enc_channels[2], &self.enc_b[2]),
            ],
            enc_proj_w: mk(tape, s.enc_proj, &self.enc_proj_w),
            enc_proj_b: mkb(tape, s.enc_proj.1, &self.enc_proj_b),
            dec_proj_w: mk(tape, s.dec_proj, &self.dec_proj_w),
            dec_proj_b: mkb(tape, s.dec_proj.1, &self.dec_proj_b),
            dec_w: [
                mk(tape, s.dec_w[0], &self.dec_w[0]),
                mk(tape, s.dec_w[1], &self.dec_w[1]),
                mk(tape, s.dec_w[2], &self.dec_w[2]),
            ],
            dec_b: [
                mkb(tape, s.dec_w[0].1, &self.dec_b[0]),
                mkb(tape, s.dec_w[1].1, &self.dec_b[1]),
                mkb(tape, s.dec_w[2].1, &self.dec_b[2]),
            ],
        }
    }

    /// Records the encoder on the tape. Input shape `[h, w, in_channels]`.
    pub fn encode_graph(
        &self,
        tape: &mut Tape,
        handles: &CodecParamHandles,
        grid: TensorHandle,
    ) -> Result<TensorHandle, BevError> {
        let shape = tape.shape(grid).to_vec();
        let (mut h, mut w) = (shape[0], shape[1]);
        if h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
            return Err(BevError::NotDivisibleBy8 { h, w });
        }
        let mut cur = grid;
        let mut c = shape[2];
        for s in 0..3 {
            let c_out = self.config.enc_channels[s];
            let x = tape.reshape(cur, &[h / 2, 2, w / 2, 2, c]).unwrap();
            let x = tape.permute(x, &[0, 2, 1, 3, 4]).unwrap();
            let x = tape.reshape(x, &[(h / 2) * (w / 2), 4 * c]).unwrap();
            let x = tape.matmul(x, handles.enc_w[s]).unwrap();
            let x = tape.add_bias_lastdim(x, handles.enc_b[s]).unwrap();
            let x = tape.relu(x);
            h /= 2;
            w /= 2;
            c = c_out;
            cur = tape.reshape(x, &[h, w, c]).unwrap();
        }
        let x = tape.reshape(cur, &[h * w, c]).unwrap();
        let x = tape.matmul(x, handles.enc_proj_w).unwrap();
        let x = tape.add_bias_lastdim(x, handles.enc_proj_b).unwrap();
        Ok(tape.reshape(x, &[h, w, LATENT_CHANNELS]).unwrap())
    }

    /// Records the decoder on the tape. Input shape `[h, w, 4]`, output
    /// `[8h, 8w, n_z]` occupancy probabilities.
    pub fn decode_graph(
        &self,
        tape: &mut Tape,
        handles: &CodecParamHandles,
        latent: TensorHandle,
    ) -> TensorHandle {
        let shape = tape.shape(latent).to_vec();
        let (mut h, mut w) = (shape[0], shape[1]);
        let x = tape.reshape(latent, &[h * w, LATENT_CHANNELS]).unwrap();
        let x = tape.matmul(x, handles.dec_proj_w).unwrap();
        let x = tape.add_bias_lastdim(x, handles.dec_proj_b).unwrap();
        let mut cur = tape.relu(x);
        let mut c = self.config.dec_channels[0];
        for s in 0..3 {
            let c_out = if s == 2 { self.n_z } else { self.config.dec_channels[s + 1] };
            let x = tape.matmul(cur, handles.dec_w[s]).unwrap();
            let x = tape.add_bias_lastdim(x, handles.dec_b[s]).unwrap();
            let x = tape.reshape(x, &[h, w, 2, 2, c_out]).unwrap();
            let x = tape.permute(x, &[0, 2, 1, 3, 4]).unwrap();
            h *= 2;
            w *= 2;
            let x = tape.reshape(x, &[h, w, c_out]).unwrap();
            let x = if s == 2 { tape.sigmoid(x) } else { tape.relu(x) };
            c = c_out;
            cur = tape.reshape(x, &[h * w, c]).unwrap();
        }
        tape.reshape(cur, &[h, w, c]).unwrap()
    }

    /// Convenience: encode a feature grid to a latent, on a private tape.
    pub fn encode(&self, grid: &BevFeatureGrid) -> Result<BevLatent, BevError> {
        let spec = &grid.spec;
        let (h, w, c) = (spec.nx(), spec.ny(), grid.channels());
        if c != self.in_channels {
            return Err(BevError::LengthMismatch(format!(
                "grid has {c} channels, codec expects {}",
                self.in_channels
            )));
        }
        let mut tape = Tape::new();
        let handles = self.make_handles(&mut tape);
        let g = tape.leaf(&[h, w, c], grid.values.clone());
        let latent = self.encode_graph(&mut tape, &handles, g)?;
        BevLatent::new(tape.values(latent).to_vec(), h / DOWNSAMPLE, w / DOWNSAMPLE)
    }

    /// Convenience: decode a latent to an occupancy grid over `spec`.
    pub fn decode(&self, latent: &BevLatent, spec: &BevGridSpec) -> Result<OccupancyGrid, BevError> {
        if latent.h * DOWNSAMPLE != spec.nx() || latent.w * DOWNSAMPLE != spec.ny() || self.n_z != spec.n_z_bins {
            return Err(BevError::BadLatentShape(
                vec![latent.h, latent.w, LATENT_CHANNELS],
                spec.nx() / DOWNSAMPLE,
                spec.ny() / DOWNSAMPLE,
            ));
        }
        let mut tape = Tape::new();
        let handles = self.make_handles(&mut tape);
        let l = tape.leaf(&[latent.h, latent.w, LATENT_CHANNELS], latent.values.clone());
        let out = self.decode_graph(&mut tape, &handles, l);
        Ok(OccupancyGrid { spec: *spec, values: tape.values(out).to_vec() })
    }
}

struct CodecShapes {
    enc_w: [(usize, usize); 3],
    enc_proj: (usize, usize),
    dec_proj: (usize, usize),
    dec_w: [(usize, usize); 3],
}
