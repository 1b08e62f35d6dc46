//! Differentiable layer primitives on flat channel-major buffers.
//!
//! A `c`-channel field over spatial dims `d` is stored as `c * d.n()` values
//! with channel-major layout: `buf[ch * d.n() + d.idx(x, y, z)]`. All
//! backward functions *accumulate* into their gradient outputs so merging
//! paths (skip connections, pooling) compose by repeated calls.

use crate::volume::Dims;

/// 3x3x3 same-padding convolution. Weights are laid out as
/// `w[(o * ci + i) * 27 + tap]` with `tap = ((dz+1)*3 + (dy+1))*3 + (dx+1)`.
///
/// Each output x-row is produced in one pass from the nine neighbouring
/// input rows, three x-shifted multiply-adds per row, which keeps the
/// working set a handful of rows and lets the inner loops vectorize.
pub fn conv3_forward(inp: &[f64], ci: usize, co: usize, d: Dims, w: &[f64], b: &[f64], out: &mut [f64]) {
    let n = d.n();
    let (nx, ny, nz) = (d.nx as i64, d.ny as i64, d.nz as i64);
    debug_assert_eq!(inp.len(), ci * n);
    debug_assert_eq!(out.len(), co * n);
    debug_assert_eq!(w.len(), co * ci * 27);
    for o in 0..co {
        out[o * n..(o + 1) * n].fill(b[o]);
    }
    // Blocks of up to eight output channels share each loaded input row, and
    // each tap contributes one long multiply-add sweep per row.
    let mut ochs: Vec<&mut [f64]> = out.chunks_exact_mut(n).collect();
    for (bi, oblock) in ochs.chunks_mut(8).enumerate() {
        let o0 = bi * 8;
        for i in 0..ci {
            let in_ch = &inp[i * n..(i + 1) * n];
            for tap in 0..27 {
                let (dz, dy, dx) =
                    ((tap / 9) as i64 - 1, ((tap / 3) % 3) as i64 - 1, (tap % 3) as i64 - 1);
                let mut wvs = [0.0f64; 8];
                for (j, wv) in wvs.iter_mut().enumerate().take(oblock.len()) {
                    *wv = w[((o0 + j) * ci + i) * 27 + tap];
                }
                let xo0 = (-dx).max(0);
                let len = (nx - dx.abs()) as usize;
                for z in (-dz).max(0)..(nz - dz.max(0)) {
                    let zi = z + dz;
                    for y in (-dy).max(0)..(ny - dy.max(0)) {
                        let yi = y + dy;
                        let ob = ((z * ny + y) * nx + xo0) as usize;
                        let ib = ((zi * ny + yi) * nx + xo0 + dx) as usize;
                        let irow = &in_ch[ib..ib + len];
                        for (j, och) in oblock.iter_mut().enumerate() {
                            let wv = wvs[j];
                            let orow = &mut och[ob..ob + len];
                            for (o, &iv) in orow.iter_mut().zip(irow) {
                                *o += wv * iv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Backward pass of [`conv3_forward`]: accumulates weight/bias gradients and,
/// if `d_in` is given, the input gradient.
pub fn conv3_backward(
    inp: &[f64],
    ci: usize,
    co: usize,
    d: Dims,
    w: &[f64],
    d_out: &[f64],
    d_in: Option<&mut [f64]>,
    w_grad: &mut [f64],
    b_grad: &mut [f64],
) {
    let n = d.n();
    let (nx, ny, nz) = d.as_tuple();
    let mut d_in = d_in;
    for o in 0..co {
        let d_out_ch = &d_out[o * n..(o + 1) * n];
        b_grad[o] += d_out_ch.iter().sum::<f64>();
        for i in 0..ci {
            let in_ch = &inp[i * n..(i + 1) * n];
            let wk = &w[(o * ci + i) * 27..(o * ci + i) * 27 + 27];
            let mut acc = [0.0f64; 27];
            let mut di_ch = d_in.as_deref_mut().map(|di| &mut di[i * n..(i + 1) * n]);
            for z in 0..nz {
                for y in 0..ny {
                    let ab = (z * ny + y) * nx;
                    let arow = &d_out_ch[ab..ab + nx];
                    for udz in 0..3 {
                        let zi = z as i64 + udz as i64 - 1;
                        if zi < 0 || zi >= nz as i64 {
                            continue;
                        }
                        for udy in 0..3 {
                            let yi = y as i64 + udy as i64 - 1;
                            if yi < 0 || yi >= ny as i64 {
                                continue;
                            }
                            let ib = (zi as usize * ny + yi as usize) * nx;
                            let irow = &in_ch[ib..ib + nx];
                            let t = (udz * 3 + udy) * 3;
                            let (dm, d0, dp) = row_dot3(arow, irow);
                            acc[t] += dm;
                            acc[t + 1] += d0;
                            acc[t + 2] += dp;
                            if let Some(di) = di_ch.as_deref_mut() {
                                // out[p] += w(dv) * in[p + dv] means
                                // d_in[q] += w(dv) * d_out[q - dv]: the same
                                // row pairing with the x-taps mirrored.
                                let dirow = &mut di[ib..ib + nx];
                                row_axpy3(dirow, arow, wk[t + 2], wk[t + 1], wk[t]);
                            }
                        }
                    }
                }
            }
            let wg = &mut w_grad[(o * ci + i) * 27..(o * ci + i) * 27 + 27];
            for t in 0..27 {
                wg[t] += acc[t];
            }
        }
    }
}

/// `out[x] += wm * in[x-1] + w0 * in[x] + wp * in[x+1]` with zero padding.
/// Three aligned multiply-add sweeps so each vectorizes independently.
#[inline]
fn row_axpy3(orow: &mut [f64], irow: &[f64], wm: f64, w0: f64, wp: f64) {
    let nx = orow.len();
    debug_assert_eq!(irow.len(), nx);
    for (o, &i) in orow.iter_mut().zip(irow) {
        *o += w0 * i;
    }
    for (o, &i) in orow[1..].iter_mut().zip(&irow[..nx - 1]) {
        *o += wm * i;
    }
    for (o, &i) in orow[..nx - 1].iter_mut().zip(&irow[1..]) {
        *o += wp * i;
    }
}

/// `sum a[x] * b[x]` with eight independent accumulators so the reduction
/// vectorizes (fixed, deterministic summation order).
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let chunks = a.len() / 8;
    for k in 0..chunks {
        let (ar, br) = (&a[8 * k..8 * k + 8], &b[8 * k..8 * k + 8]);
        for j in 0..8 {
            acc[j] += ar[j] * br[j];
        }
    }
    let mut tail = 0.0;
    for x in 8 * chunks..a.len() {
        tail += a[x] * b[x];
    }
    acc.iter().sum::<f64>() + tail
}

/// Shifted row dots: `(sum a[x] b[x-1], sum a[x] b[x], sum a[x] b[x+1])`
/// over in-bounds x.
#[inline]
fn row_dot3(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let nx = a.len();
    (dot(&a[1..], &b[..nx - 1]), dot(a, b), dot(&a[..nx - 1], &b[1..]))
}

/// Pointwise (1x1x1) convolution; `w[o * ci + i]`.
pub fn conv1_forward(inp: &[f64], ci: usize, co: usize, n: usize, w: &[f64], b: &[f64], out: &mut [f64]) {
    for o in 0..co {
        let out_ch = &mut out[o * n..(o + 1) * n];
        out_ch.fill(b[o]);
        for i in 0..ci {
            let wv = w[o * ci + i];
            let in_ch = &inp[i * n..(i + 1) * n];
            for k in 0..n {
                out_ch[k] += wv * in_ch[k];
            }
        }
    }
}

/// Backward pass of [`conv1_forward`]; accumulates all gradients.
pub fn conv1_backward(
    inp: &[f64],
    ci: usize,
    co: usize,
    n: usize,
    w: &[f64],
    d_out: &[f64],
    mut d_in: Option<&mut [f64]>,
    w_grad: &mut [f64],
    b_grad: &mut [f64],
) {
    for o in 0..co {
        let d_out_ch = &d_out[o * n..(o + 1) * n];
        b_grad[o] += d_out_ch.iter().sum::<f64>();
        for i in 0..ci {
            let in_ch = &inp[i * n..(i + 1) * n];
            let mut s = 0.0;
            for k in 0..n {
                s += d_out_ch[k] * in_ch[k];
            }
            w_grad[o * ci + i] += s;
            if let Some(di) = d_in.as_deref_mut() {
                let di_ch = &mut di[i * n..(i + 1) * n];
                let wv = w[o * ci + i];
                for k in 0..n {
                    di_ch[k] += wv * d_out_ch[k];
                }
            }
        }
    }
}

/// 2x2x2 max pooling with stride 2. Each input dim must be even. `arg`
/// records, per output voxel, the flat spatial index of the chosen input
/// voxel within its channel (first maximum in z, y, x scan order).
pub fn maxpool2_forward(inp: &[f64], c: usize, d_in: Dims, out: &mut [f64], arg: &mut [u32]) {
    let (nx, ny, nz) = d_in.as_tuple();
    debug_assert!(nx % 2 == 0 && ny % 2 == 0 && nz % 2 == 0);
    let n_in = d_in.n();
    let (ox, oy, oz) = (nx / 2, ny / 2, nz / 2);
    let n_out = ox * oy * oz;
    for ch in 0..c {
        let in_ch = &inp[ch * n_in..(ch + 1) * n_in];
        let out_ch = &mut out[ch * n_out..(ch + 1) * n_out];
        let arg_ch = &mut arg[ch * n_out..(ch + 1) * n_out];
        for z in 0..oz {
            for y in 0..oy {
                for x in 0..ox {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = (2 * z + dz) * ny * nx + (2 * y + dy) * nx + (2 * x + dx);
                                if in_ch[idx] > best {
                                    best = in_ch[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    let o = z * oy * ox + y * ox + x;
                    out_ch[o] = best;
                    arg_ch[o] = best_idx as u32;
                }
            }
        }
    }
}

/// Backward pass of [`maxpool2_forward`]: routes each output gradient to the
/// recorded argmax voxel (accumulating).
pub fn maxpool2_backward(d_out: &[f64], c: usize, d_in: Dims, arg: &[u32], d_in_buf: &mut [f64]) {
    let n_in = d_in.n();
    let n_out = n_in / 8;
    for ch in 0..c {
        let d_out_ch = &d_out[ch * n_out..(ch + 1) * n_out];
        let arg_ch = &arg[ch * n_out..(ch + 1) * n_out];
        let di_ch = &mut d_in_buf[ch * n_in..(ch + 1) * n_in];
        for o in 0..n_out {
            di_ch[arg_ch[o] as usize] += d_out_ch[o];
        }
    }
}

/// Nearest-neighbour x2 upsampling: `out[z][y][x] = in[z/2][y/2][x/2]`.
pub fn upsample2_forward(inp: &[f64], c: usize, d_in: Dims, out: &mut [f64]) {
    let (nx, ny, nz) = d_in.as_tuple();
    let n_in = d_in.n();
    let n_out = 8 * n_in;
    let (ux, uy) = (2 * nx, 2 * ny);
    for ch in 0..c {
        let in_ch = &inp[ch * n_in..(ch + 1) * n_in];
        let out_ch = &mut out[ch * n_out..(ch + 1) * n_out];
        for z in 0..2 * nz {
            let zi = z / 2;
            for y in 0..uy {
                let yi = y / 2;
                let ob = z * uy * ux + y * ux;
                let ib = zi * ny * nx + yi * nx;
                for x in 0..ux {
                    out_ch[ob + x] = in_ch[ib + x / 2];
                }
            }
        }
    }
}

/// Backward pass of [`upsample2_forward`]: sums each 2x2x2 block of output
/// gradients into its source voxel (accumulating).
pub fn upsample2_backward(d_out: &[f64], c: usize, d_in: Dims, d_in_buf: &mut [f64]) {
    let (nx, ny, nz) = d_in.as_tuple();
    let n_in = d_in.n();
    let n_out = 8 * n_in;
    let (ux, uy) = (2 * nx, 2 * ny);
    for ch in 0..c {
        let d_out_ch = &d_out[ch * n_out..(ch + 1) * n_out];
        let di_ch = &mut d_in_buf[ch * n_in..(ch + 1) * n_in];
        for z in 0..2 * nz {
            let zi = z / 2;
            for y in 0..uy {
                let yi = y / 2;
                let ob = z * uy * ux + y * ux;
                let ib = zi * ny * nx + yi * nx;
                for x in 0..ux {
                    di_ch[ib + x / 2] += d_out_ch[ob + x];
                }
            }
        }
    }
}

/// In-place rectifier.
pub fn relu_inplace(buf: &mut [f64]) {
    for v in buf {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Backward pass of [`relu_inplace`] using the post-activation values: zeroes
/// the gradient wherever the output was clamped.
pub fn relu_backward_inplace(d: &mut [f64], post: &[f64]) {
    for (g, &p) in d.iter_mut().zip(post) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Numerically stable two-channel softmax over channel-major logits
/// (`[ch0; ch1]`, each of length `n`).
pub fn softmax2_forward(logits: &[f64], n: usize, probs: &mut [f64]) {
    for k in 0..n {
        let (a, b) = (logits[k], logits[n + k]);
        let m = a.max(b);
        let e0 = (a - m).exp();
        let e1 = (b - m).exp();
        let s = e0 + e1;
        probs[k] = e0 / s;
        probs[n + k] = e1 / s;
    }
}

/// Chains probability-space gradients through the softmax:
/// `d_logit_c = p_c * (d_prob_c - sum_c' d_prob_c' p_c')`, accumulating.
pub fn softmax2_backward(probs: &[f64], d_probs: &[f64], n: usize, d_logits: &mut [f64]) {
    for k in 0..n {
        let (p0, p1) = (probs[k], probs[n + k]);
        let (g0, g1) = (d_probs[k], d_probs[n + k]);
        let dot = g0 * p0 + g1 * p1;
        d_logits[k] += p0 * (g0 - dot);
        d_logits[n + k] += p1 * (g1 - dot);
    }
}
