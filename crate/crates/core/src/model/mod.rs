//! 3D encoder–decoder segmentation network with hand-written reverse-mode
//! differentiation, Adam, and the exponential-moving-average update that ties
//! the student and teacher networks together.
//!
//! Architecture (all convs 3x3x3 same-padding + ReLU unless noted):
//! input (1 ch) → conv1 → maxpool x2 → conv2 → maxpool x2 → conv3
//! (bottleneck) → [upsample x2, concat conv2 skip] → dconv2 → [upsample x2,
//! concat conv1 skip] → dconv1 → 1x1x1 head (2 ch) → softmax.

pub mod layers;
mod net;

pub use layers::softmax2_backward;
pub use net::{
    backward, bottleneck_style, bottleneck_style_adjoint, forward, model_gradcheck, ForwardTrace,
    GradCheckRow,
};

use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::volume::{write_atomic, Dims};
use crate::{Error, Result};

/// Adam first-moment decay.
pub const ADAM_BETA1: f64 = 0.9;
/// Adam second-moment decay.
pub const ADAM_BETA2: f64 = 0.999;
/// Adam denominator offset (added outside the square root).
pub const ADAM_EPS: f64 = 1e-8;
/// Checkpoint file magic.
pub const CKPT_MAGIC: &[u8; 5] = b"CKPT1";

/// Network hyperparameters: input patch dims and the three encoder widths.
#[derive(Clone, Copy, PartialEq, Eq, Debug, serde::Serialize, serde::Deserialize)]
pub struct NetSpec {
    pub in_dims: Dims,
    pub channels: (usize, usize, usize),
}

/// One parameter block (a convolution's weights + biases) inside the flat
/// parameter vector.
#[derive(Clone, Copy, Debug)]
pub struct LayerDef {
    pub name: &'static str,
    pub ci: usize,
    pub co: usize,
    /// Kernel taps: 27 for 3x3x3 layers, 1 for the head.
    pub taps: usize,
    pub w_off: usize,
    pub w_len: usize,
    pub b_off: usize,
    pub b_len: usize,
}

impl NetSpec {
    pub fn new(in_dims: Dims, channels: (usize, usize, usize)) -> Result<Self> {
        let spec = NetSpec { in_dims, channels };
        spec.validate()?;
        Ok(spec)
    }

    /// Dims must each be a power of two and at least 8 so that two pooling
    /// stages land on a transformable bottleneck grid.
    pub fn validate(&self) -> Result<()> {
        let (nx, ny, nz) = self.in_dims.as_tuple();
        for d in [nx, ny, nz] {
            if !d.is_power_of_two() || d < 8 {
                return Err(Error::UnsupportedSize { nx, ny, nz });
            }
        }
        let (c1, c2, c3) = self.channels;
        if c1 == 0 || c2 == 0 || c3 == 0 {
            return Err(Error::invalid("channels", "all channel counts must be positive"));
        }
        Ok(())
    }

    pub fn dims_half(&self) -> Dims {
        let (nx, ny, nz) = self.in_dims.as_tuple();
        Dims::new(nx / 2, ny / 2, nz / 2).expect("validated dims halve cleanly")
    }

    pub fn dims_quarter(&self) -> Dims {
        let (nx, ny, nz) = self.in_dims.as_tuple();
        Dims::new(nx / 4, ny / 4, nz / 4).expect("validated dims quarter cleanly")
    }

    /// Flattened length of the bottleneck activation (the content feature).
    pub fn bottleneck_len(&self) -> usize {
        self.channels.2 * self.dims_quarter().n()
    }

    /// The six parameter blocks in storage order.
    pub fn layers(&self) -> [LayerDef; 6] {
        let (c1, c2, c3) = self.channels;
        let mut off = 0;
        let mut mk = |name, ci: usize, co: usize, taps: usize| {
            let w_len = co * ci * taps;
            let def = LayerDef { name, ci, co, taps, w_off: off, w_len, b_off: off + w_len, b_len: co };
            off += w_len + co;
            def
        };
        [
            mk("conv1", 1, c1, 27),
            mk("conv2", c1, c2, 27),
            mk("conv3", c2, c3, 27),
            mk("dconv2", c3 + c2, c2, 27),
            mk("dconv1", c2 + c1, c1, 27),
            mk("head", c1, 2, 1),
        ]
    }

    /// Total number of learnable parameters.
    pub fn param_count(&self) -> usize {
        let last = self.layers()[5];
        last.b_off + last.b_len
    }
}

/// Flattened model parameters with their gradient buffer and Adam state.
#[derive(Clone, Debug)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub grads: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub step: u64,
}

impl ParamVector {
    pub fn zeros(n: usize) -> Self {
        ParamVector {
            values: vec![0.0; n],
            grads: vec![0.0; n],
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            step: 0,
        }
    }

    /// Seeded He-style initialization: each weight uniform in
    /// `±sqrt(6 / fan_in)` with `fan_in = ci * taps`; biases zero.
    pub fn init_seeded(spec: &NetSpec, seed: u64) -> Self {
        let mut p = ParamVector::zeros(spec.param_count());
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        for layer in spec.layers() {
            let bound = (6.0 / (layer.ci * layer.taps) as f64).sqrt();
            for w in &mut p.values[layer.w_off..layer.w_off + layer.w_len] {
                *w = rng.gen_range(-bound..bound);
            }
        }
        p
    }

    /// Restores a parameter vector around loaded values with fresh optimizer
    /// state.
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len();
        ParamVector { values, grads: vec![0.0; n], adam_m: vec![0.0; n], adam_v: vec![0.0; n], step: 0 }
    }

    /// Zeroes the gradient buffer.
    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    /// One Adam update from the accumulated gradients; gradients are zeroed
    /// afterwards.
    pub fn adam_step(&mut self, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for i in 0..self.values.len() {
            let g = self.grads[i];
            self.adam_m[i] = ADAM_BETA1 * self.adam_m[i] + (1.0 - ADAM_BETA1) * g;
            self.adam_v[i] = ADAM_BETA2 * self.adam_v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.adam_m[i] / bc1;
            let v_hat = self.adam_v[i] / bc2;
            self.values[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        self.zero_grads();
    }

    /// Exponential-moving-average update of this network's values toward
    /// `src`: `theta = alpha * theta + (1 - alpha) * src` with
    /// `alpha = min(1 - 1/(iter + 1), decay)`. Iteration 0 copies `src`.
    pub fn ema_update(&mut self, src: &ParamVector, iter: u64, decay: f64) {
        let alpha = (1.0 - 1.0 / (iter as f64 + 1.0)).min(decay);
        for (t, &s) in self.values.iter_mut().zip(&src.values) {
            *t = alpha * *t + (1.0 - alpha) * s;
        }
    }
}

/// Writes a checkpoint: magic, input dims, channel widths, parameter count,
/// then the raw parameter values as little-endian f64.
pub fn save_checkpoint(path: &Path, spec: &NetSpec, params: &ParamVector) -> Result<()> {
    let n = spec.param_count();
    if params.values.len() != n {
        return Err(Error::LenMismatch { what: "checkpoint params", expected: n, got: params.values.len() });
    }
    let mut bytes = Vec::with_capacity(5 + 6 * 4 + 8 + 8 * n);
    bytes.extend_from_slice(CKPT_MAGIC);
    let (nx, ny, nz) = spec.in_dims.as_tuple();
    let (c1, c2, c3) = spec.channels;
    for v in [nx, ny, nz, c1, c2, c3] {
        let v32 = u32::try_from(v).map_err(|_| Error::DimsOverflow {
            nx: nx as u64,
            ny: ny as u64,
            nz: nz as u64,
        })?;
        bytes.extend_from_slice(&v32.to_le_bytes());
    }
    bytes.extend_from_slice(&(n as u64).to_le_bytes());
    for v in &params.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &bytes)
}

/// Reads a checkpoint written by [`save_checkpoint`]; optimizer state starts
/// fresh.
pub fn load_checkpoint(path: &Path) -> Result<(NetSpec, ParamVector)> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 5];
    f.read_exact(&mut magic).map_err(|_| Error::Truncated { expected: 5, got: 0 })?;
    if &magic != CKPT_MAGIC {
        return Err(Error::BadMagic { expected: "CKPT1", found: magic.to_vec() });
    }
    let mut header = [0u8; 6 * 4 + 8];
    f.read_exact(&mut header).map_err(|_| Error::Truncated { expected: 37, got: 5 })?;
    let mut u32s = [0u32; 6];
    for (i, v) in u32s.iter_mut().enumerate() {
        *v = u32::from_le_bytes(header[4 * i..4 * i + 4].try_into().unwrap());
    }
    let count = u64::from_le_bytes(header[24..32].try_into().unwrap());
    let dims = Dims::new(u32s[0] as usize, u32s[1] as usize, u32s[2] as usize)?;
    let spec = NetSpec::new(dims, (u32s[3] as usize, u32s[4] as usize, u32s[5] as usize))?;
    if count != spec.param_count() as u64 {
        return Err(Error::LenMismatch {
            what: "checkpoint params",
            expected: spec.param_count(),
            got: count as usize,
        });
    }
    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;
    if payload.len() as u64 != 8 * count {
        return Err(Error::Truncated { expected: 8 * count, got: payload.len() as u64 });
    }
    let mut values = Vec::with_capacity(count as usize);
    for chunk in payload.chunks_exact(8) {
        let v = f64::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::NonFinite { what: "checkpoint params".into() });
        }
        values.push(v);
    }
    Ok((spec, ParamVector::from_values(values)))
}
