//! 3-D spectra, frequency-domain masks, and Fourier amplitude style transfer.
//!
//! Conventions: [`fft3`] is unnormalized, [`ifft3`] scales by `1/(nx*ny*nz)`;
//! spectra are stored unshifted (DC at index 0) while masks are stored
//! centered (DC weight at voxel `(nx/2, ny/2, nz/2)`). All transforms accept
//! power-of-two axis lengths >= 2 only.

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::volume::{Dims, Volume};
use crate::{Error, Result};

/// Imaginary residue above this (relative to the output's max magnitude)
/// indicates a non-conjugate-symmetric spectrum; callers should warn.
pub const RESIDUE_WARN: f64 = 1e-3;

/// Complex 3-D spectrum, unshifted, same flat layout as [`Volume`].
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub dims: Dims,
    pub data: Vec<Complex64>,
}

/// Real-valued frequency mask stored centered; weights in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralMask {
    pub dims: Dims,
    pub weights: Vec<f64>,
}

impl SpectralMask {
    /// Weight seen by the *unshifted* frequency index `(kx, ky, kz)`.
    #[inline]
    pub fn at_unshifted(&self, kx: usize, ky: usize, kz: usize) -> f64 {
        let Dims { nx, ny, nz } = self.dims;
        let c = self.dims.idx(
            (kx + nx / 2) % nx,
            (ky + ny / 2) % ny,
            (kz + nz / 2) % nz,
        );
        self.weights[c]
    }

    /// Mask exported as a volume in its centered layout.
    pub fn to_volume(&self) -> Volume {
        Volume { dims: self.dims, data: self.weights.clone() }
    }
}

fn require_pow2(dims: Dims) -> Result<()> {
    if !dims.is_pow2() {
        return Err(Error::UnsupportedSize { nx: dims.nx, ny: dims.ny, nz: dims.nz });
    }
    Ok(())
}

/// In-place transform along one axis; `stride`-strided lanes are gathered
/// into a contiguous scratch row, transformed, and scattered back.
fn transform_axis(
    data: &mut [Complex64],
    dims: Dims,
    axis: usize,
    planner: &mut FftPlanner<f64>,
    forward: bool,
) {
    let (n, stride, lanes): (usize, usize, Vec<(usize, usize)>) = match axis {
        0 => {
            let mut l = Vec::new();
            for k in 0..dims.nz {
                for j in 0..dims.ny {
                    l.push((dims.idx(0, j, k), 0));
                }
            }
            (dims.nx, 1, l)
        }
        1 => {
            let mut l = Vec::new();
            for k in 0..dims.nz {
                for i in 0..dims.nx {
                    l.push((dims.idx(i, 0, k), 0));
                }
            }
            (dims.ny, dims.nx, l)
        }
        _ => {
            let mut l = Vec::new();
            for j in 0..dims.ny {
                for i in 0..dims.nx {
                    l.push((dims.idx(i, j, 0), 0));
                }
            }
            (dims.nz, dims.nx * dims.ny, l)
        }
    };
    let fft = if forward { planner.plan_fft_forward(n) } else { planner.plan_fft_inverse(n) };
    let mut row = vec![Complex64::new(0.0, 0.0); n];
    for (start, _) in lanes {
        for (t, slot) in row.iter_mut().enumerate() {
            *slot = data[start + t * stride];
        }
        fft.process(&mut row);
        for (t, slot) in row.iter().enumerate() {
            data[start + t * stride] = *slot;
        }
    }
}

/// Forward 3-D DFT (unnormalized).
pub fn fft3(v: &Volume) -> Result<Spectrum> {
    require_pow2(v.dims)?;
    let mut data: Vec<Complex64> = v.data.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    let mut planner = FftPlanner::new();
    for axis in 0..3 {
        transform_axis(&mut data, v.dims, axis, &mut planner, true);
    }
    Ok(Spectrum { dims: v.dims, data })
}

/// Inverse 3-D DFT scaled by `1/(nx*ny*nz)`.
///
/// Returns the real part and the maximum absolute imaginary residue, which
/// is numerically zero for conjugate-symmetric spectra; callers may compare
/// it against [`RESIDUE_WARN`].
pub fn ifft3(s: &Spectrum) -> Result<(Volume, f64)> {
    require_pow2(s.dims)?;
    if s.data.len() != s.dims.n() {
        return Err(Error::LenMismatch {
            what: "spectrum data",
            expected: s.dims.n(),
            got: s.data.len(),
        });
    }
    let mut data = s.data.clone();
    let mut planner = FftPlanner::new();
    for axis in 0..3 {
        transform_axis(&mut data, s.dims, axis, &mut planner, false);
    }
    let scale = 1.0 / s.dims.n() as f64;
    let mut real = Vec::with_capacity(data.len());
    let mut residue = 0.0f64;
    for c in &data {
        let re = c.re * scale;
        let im = (c.im * scale).abs();
        if im > residue {
            residue = im;
        }
        real.push(re);
    }
    if !real.iter().all(|v| v.is_finite()) || !residue.is_finite() {
        return Err(Error::NonFinite { what: "inverse transform output".into() });
    }
    Ok((Volume { dims: s.dims, data: real }, residue))
}

/// Phase of one coefficient in `(-pi, pi]`, with exact zeros mapping to 0.
#[inline]
fn coef_phase(c: Complex64) -> f64 {
    if c.re == 0.0 && c.im == 0.0 {
        return 0.0;
    }
    let p = c.im.atan2(c.re);
    if p == -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        p
    }
}

/// Splits a spectrum into amplitude (nonnegative) and phase (`(-pi, pi]`,
/// zero coefficients get phase 0) volumes in the spectrum's unshifted layout.
pub fn amp_phase(s: &Spectrum) -> (Volume, Volume) {
    let amp: Vec<f64> = s.data.iter().map(|c| c.norm()).collect();
    let phase: Vec<f64> = s.data.iter().map(|&c| coef_phase(c)).collect();
    (
        Volume { dims: s.dims, data: amp },
        Volume { dims: s.dims, data: phase },
    )
}

/// Smooth homocentric-square Gaussian mask.
///
/// In centered coordinates each voxel's normalized Chebyshev radius is
/// `d = max(|du|/hx, |dv|/hy, |dw|/hz)` with `h = floor(n/2)`, and the weight
/// is `exp(-d^2 / (2 sigma^2))`: exactly 1 at the center, decaying along
/// nested square shells, 1/e^8-scale at the corners for sigma = 0.25.
pub fn make_hsg_mask(dims: Dims, sigma: f64) -> Result<SpectralMask> {
    require_pow2(dims)?;
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid("sigma", format!("must be positive and finite, got {sigma}")));
    }
    let (hx, hy, hz) = (dims.nx / 2, dims.ny / 2, dims.nz / 2);
    let mut weights = vec![0.0f64; dims.n()];
    for w in 0..dims.nz {
        let dw = (w as f64 - hz as f64).abs() / hz as f64;
        for v in 0..dims.ny {
            let dv = (v as f64 - hy as f64).abs() / hy as f64;
            for u in 0..dims.nx {
                let du = (u as f64 - hx as f64).abs() / hx as f64;
                let d = du.max(dv).max(dw);
                weights[dims.idx(u, v, w)] = (-d * d / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    Ok(SpectralMask { dims, weights })
}

/// Binary rectangular low-frequency mask: 1 inside the centered cube of
/// per-axis half-width `floor(beta * n)`, 0 outside. `0 < beta <= 0.5`.
pub fn make_fda_mask(dims: Dims, beta: f64) -> Result<SpectralMask> {
    require_pow2(dims)?;
    if !(beta > 0.0 && beta <= 0.5) {
        return Err(Error::invalid("beta", format!("must be in (0, 0.5], got {beta}")));
    }
    let (hx, hy, hz) = (dims.nx / 2, dims.ny / 2, dims.nz / 2);
    let wx = (beta * dims.nx as f64).floor() as i64;
    let wy = (beta * dims.ny as f64).floor() as i64;
    let wz = (beta * dims.nz as f64).floor() as i64;
    let mut weights = vec![0.0f64; dims.n()];
    for w in 0..dims.nz {
        let dw = (w as i64 - hz as i64).abs();
        for v in 0..dims.ny {
            let dv = (v as i64 - hy as i64).abs();
            for u in 0..dims.nx {
                let du = (u as i64 - hx as i64).abs();
                if du <= wx && dv <= wy && dw <= wz {
                    weights[dims.idx(u, v, w)] = 1.0;
                }
            }
        }
    }
    Ok(SpectralMask { dims, weights })
}

fn check_same_dims(what: &'static str, a: Dims, b: Dims) -> Result<()> {
    if a != b {
        return Err(Error::DimsMismatch { what, expected: a.as_tuple(), got: b.as_tuple() });
    }
    Ok(())
}

/// Fourier amplitude style transfer.
///
/// Keeps the source phase everywhere and blends per-frequency amplitudes,
/// `A_out = K * A_tgt + (1 - K) * A_src` with the mask weight `K` looked up
/// in centered coordinates; the result is the real part of the inverse
/// transform (not clamped), returned with its imaginary residue.
pub fn hsda_transfer(
    src: &Volume,
    tgt: &Volume,
    mask: &SpectralMask,
) -> Result<(Volume, f64)> {
    check_same_dims("target volume", src.dims, tgt.dims)?;
    check_same_dims("mask", src.dims, mask.dims)?;
    let s = fft3(src)?;
    let t = fft3(tgt)?;
    let mut out = Vec::with_capacity(s.data.len());
    let Dims { nx, ny, nz } = s.dims;
    for kz in 0..nz {
        for ky in 0..ny {
            for kx in 0..nx {
                let o = s.dims.idx(kx, ky, kz);
                let k = mask.at_unshifted(kx, ky, kz);
                let sc = s.data[o];
                let amp_src = sc.norm();
                let amp_tgt = t.data[o].norm();
                let amp = k * amp_tgt + (1.0 - k) * amp_src;
                let c = if amp_src > 0.0 {
                    sc * (amp / amp_src)
                } else {
                    // Zero source coefficient: phase convention 0.
                    Complex64::new(amp, 0.0)
                };
                out.push(c);
            }
        }
    }
    ifft3(&Spectrum { dims: s.dims, data: out })
}

/// Low-pass linear filter `F^-1[K * F(z)]` (real part).
///
/// With a center-symmetric real mask the operator is self-adjoint, which the
/// backward pass of style features relies on.
pub fn lowpass_style(z: &Volume, mask: &SpectralMask) -> Result<Volume> {
    check_same_dims("mask", z.dims, mask.dims)?;
    let mut s = fft3(z)?;
    let Dims { nx, ny, nz } = s.dims;
    for kz in 0..nz {
        for ky in 0..ny {
            for kx in 0..nx {
                let o = s.dims.idx(kx, ky, kz);
                let k = mask.at_unshifted(kx, ky, kz);
                s.data[o] *= k;
            }
        }
    }
    Ok(ifft3(&s)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn d(nx: usize, ny: usize, nz: usize) -> Dims {
        Dims::new(nx, ny, nz).unwrap()
    }

    fn random_vol(dims: Dims, seed: u64) -> Volume {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let data = (0..dims.n()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Volume::from_vec(dims, data).unwrap()
    }

    fn random_nonneg(dims: Dims, seed: u64) -> Volume {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let data = (0..dims.n()).map(|_| rng.gen_range(0.0..1.0)).collect();
        Volume::from_vec(dims, data).unwrap()
    }

    /// Independent O(N^2) triple-sum DFT used as the transform oracle.
    fn naive_dft3(v: &Volume) -> Vec<Complex64> {
        let Dims { nx, ny, nz } = v.dims;
        let mut out = vec![Complex64::new(0.0, 0.0); v.dims.n()];
        for kz in 0..nz {
            for ky in 0..ny {
                for kx in 0..nx {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for z in 0..nz {
                        for y in 0..ny {
                            for x in 0..nx {
                                let ang = -std::f64::consts::TAU
                                    * (kx as f64 * x as f64 / nx as f64
                                        + ky as f64 * y as f64 / ny as f64
                                        + kz as f64 * z as f64 / nz as f64);
                                acc += Complex64::new(ang.cos(), ang.sin()) * v.at(x, y, z);
                            }
                        }
                    }
                    out[v.dims.idx(kx, ky, kz)] = acc;
                }
            }
        }
        out
    }

    fn naive_idft3(dims: Dims, s: &[Complex64]) -> Vec<Complex64> {
        let Dims { nx, ny, nz } = dims;
        let mut out = vec![Complex64::new(0.0, 0.0); dims.n()];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for kz in 0..nz {
                        for ky in 0..ny {
                            for kx in 0..nx {
                                let ang = std::f64::consts::TAU
                                    * (kx as f64 * x as f64 / nx as f64
                                        + ky as f64 * y as f64 / ny as f64
                                        + kz as f64 * z as f64 / nz as f64);
                                acc += Complex64::new(ang.cos(), ang.sin())
                                    * s[dims.idx(kx, ky, kz)];
                            }
                        }
                    }
                    out[dims.idx(x, y, z)] = acc / dims.n() as f64;
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_naive_dft_on_4cubed() {
        let v = random_vol(d(4, 4, 4), 1);
        let s = fft3(&v).unwrap();
        let oracle = naive_dft3(&v);
        let max = s
            .data
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0f64, f64::max);
        assert!(max < 1e-8, "max abs diff {max}");
    }

    #[test]
    fn inverse_matches_naive_idft_on_4cubed() {
        let v = random_vol(d(4, 4, 4), 9);
        let s = fft3(&v).unwrap();
        let oracle = naive_idft3(s.dims, &s.data);
        let (back, _residue) = ifft3(&s).unwrap();
        let max_re = back
            .data
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b.re).abs())
            .fold(0.0f64, f64::max);
        let max_im = oracle.iter().map(|c| c.im.abs()).fold(0.0f64, f64::max);
        assert!(max_re < 1e-8, "max abs diff to naive inverse {max_re}");
        assert!(max_im < 1e-8, "naive inverse of a real volume's spectrum drifted off the real axis");
    }

    #[test]
    fn round_trip_8cubed_within_1e6() {
        for seed in 0..5 {
            let v = random_vol(d(8, 8, 8), seed);
            let (back, residue) = ifft3(&fft3(&v).unwrap()).unwrap();
            let max = v
                .data
                .iter()
                .zip(&back.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max < 1e-6);
            assert!(residue < RESIDUE_WARN);
        }
    }

    #[test]
    fn round_trip_anisotropic_dims() {
        let v = random_vol(d(4, 8, 2), 3);
        let (back, _) = ifft3(&fft3(&v).unwrap()).unwrap();
        let max = v
            .data
            .iter()
            .zip(&back.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max < 1e-6);
    }

    #[test]
    fn linearity() {
        let dims = d(8, 8, 8);
        let u = random_vol(dims, 10);
        let v = random_vol(dims, 11);
        let (a, b) = (1.7, -0.3);
        let mix = Volume {
            dims,
            data: u.data.iter().zip(&v.data).map(|(x, y)| a * x + b * y).collect(),
        };
        let su = fft3(&u).unwrap();
        let sv = fft3(&v).unwrap();
        let sm = fft3(&mix).unwrap();
        let max = sm
            .data
            .iter()
            .enumerate()
            .map(|(i, c)| (c - (su.data[i] * a + sv.data[i] * b)).norm())
            .fold(0.0f64, f64::max);
        assert!(max < 1e-6);
    }

    #[test]
    fn parseval() {
        let v = random_vol(d(8, 8, 8), 4);
        let s = fft3(&v).unwrap();
        let e_space: f64 = v.data.iter().map(|x| x * x).sum();
        let e_freq: f64 = s.data.iter().map(|c| c.norm_sqr()).sum::<f64>() / v.dims.n() as f64;
        assert!((e_space - e_freq).abs() / e_space < 1e-9);
    }

    #[test]
    fn non_pow2_rejected() {
        for dims in [d(6, 8, 8), d(8, 8, 12), d(1, 8, 8)] {
            let v = Volume::zeros(dims);
            assert!(matches!(fft3(&v), Err(Error::UnsupportedSize { .. })));
        }
    }

    #[test]
    fn amp_phase_conventions_and_recomposition() {
        let v = random_vol(d(8, 4, 2), 6);
        let s = fft3(&v).unwrap();
        let (amp, phase) = amp_phase(&s);
        assert!(amp.data.iter().all(|&a| a >= 0.0));
        assert!(phase
            .data
            .iter()
            .all(|&p| p > -std::f64::consts::PI && p <= std::f64::consts::PI));
        let recomposed: Vec<Complex64> = amp
            .data
            .iter()
            .zip(&phase.data)
            .map(|(&a, &p)| Complex64::new(a * p.cos(), a * p.sin()))
            .collect();
        let max = recomposed
            .iter()
            .zip(&s.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0f64, f64::max);
        assert!(max < 1e-9);

        let zeros = fft3(&Volume::zeros(d(4, 4, 4))).unwrap();
        let (_, phase0) = amp_phase(&zeros);
        assert!(phase0.data.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn hsg_center_exact_one_and_point_symmetric() {
        let dims = d(8, 16, 4);
        let m = make_hsg_mask(dims, 0.1).unwrap();
        let (cx, cy, cz) = (dims.nx / 2, dims.ny / 2, dims.nz / 2);
        assert_eq!(m.weights[dims.idx(cx, cy, cz)], 1.0);
        assert!(m.weights.iter().all(|&w| (0.0..=1.0).contains(&w)));
        for w in 0..dims.nz {
            for v in 0..dims.ny {
                for u in 0..dims.nx {
                    let (ru, rv, rw) = (2 * cx as i64 - u as i64, 2 * cy as i64 - v as i64, 2 * cz as i64 - w as i64);
                    if ru >= 0
                        && rv >= 0
                        && rw >= 0
                        && (ru as usize) < dims.nx
                        && (rv as usize) < dims.ny
                        && (rw as usize) < dims.nz
                    {
                        assert_eq!(
                            m.weights[dims.idx(u, v, w)],
                            m.weights[dims.idx(ru as usize, rv as usize, rw as usize)]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn hsg_corner_value_8cubed_sigma_quarter() {
        let m = make_hsg_mask(d(8, 8, 8), 0.25).unwrap();
        assert!((m.weights[0] - (-8.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn hsg_monotone_along_axis_doubling_sigma_raises_weights() {
        let dims = d(16, 16, 16);
        let m1 = make_hsg_mask(dims, 0.1).unwrap();
        let m2 = make_hsg_mask(dims, 0.2).unwrap();
        let c = dims.nx / 2;
        for u in c..dims.nx - 1 {
            assert!(m1.weights[dims.idx(u + 1, c, c)] <= m1.weights[dims.idx(u, c, c)]);
        }
        for (a, b) in m1.weights.iter().zip(&m2.weights) {
            assert!(b >= a);
        }
    }

    #[test]
    fn fda_counts() {
        let dims = d(8, 8, 8);
        let ones = |m: &SpectralMask| m.weights.iter().filter(|&&w| w == 1.0).count();
        let m = make_fda_mask(dims, 0.25).unwrap();
        assert_eq!(ones(&m), 125);
        assert!(m.weights.iter().all(|&w| w == 0.0 || w == 1.0));
        let all = make_fda_mask(dims, 0.5).unwrap();
        assert_eq!(ones(&all), dims.n());
        let tiny = make_fda_mask(dims, 0.03).unwrap();
        assert_eq!(ones(&tiny), 1);
        assert_eq!(tiny.weights[dims.idx(4, 4, 4)], 1.0);
        for bad in [0.0, -0.1, 0.6] {
            assert!(make_fda_mask(dims, bad).is_err());
        }
        assert!(make_hsg_mask(dims, 0.0).is_err());
    }

    #[test]
    fn transfer_identity_when_src_equals_tgt() {
        let dims = d(8, 8, 8);
        let v = random_vol(dims, 20);
        let m = make_hsg_mask(dims, 0.1).unwrap();
        let (out, residue) = hsda_transfer(&v, &v, &m).unwrap();
        let max = out
            .data
            .iter()
            .zip(&v.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max < 1e-5);
        assert!(residue < RESIDUE_WARN);
    }

    #[test]
    fn transfer_amplitudes_blend_between_endpoints() {
        let dims = d(8, 8, 8);
        let src = random_vol(dims, 21);
        let tgt = random_vol(dims, 22);
        let m = make_hsg_mask(dims, 0.15).unwrap();
        let (out, _) = hsda_transfer(&src, &tgt, &m).unwrap();
        let (sa, _) = amp_phase(&fft3(&src).unwrap());
        let (ta, _) = amp_phase(&fft3(&tgt).unwrap());
        let (oa, _) = amp_phase(&fft3(&out).unwrap());
        for i in 0..dims.n() {
            let lo = sa.data[i].min(ta.data[i]) - 1e-9;
            let hi = sa.data[i].max(ta.data[i]) + 1e-9;
            assert!(oa.data[i] >= lo && oa.data[i] <= hi);
        }
    }

    #[test]
    fn transfer_exact_tgt_amplitude_where_mask_is_one() {
        let dims = d(8, 8, 8);
        let src = random_vol(dims, 23);
        let tgt = random_vol(dims, 24);
        let m = make_fda_mask(dims, 0.25).unwrap();
        let (out, _) = hsda_transfer(&src, &tgt, &m).unwrap();
        let (ta, _) = amp_phase(&fft3(&tgt).unwrap());
        let (oa, _) = amp_phase(&fft3(&out).unwrap());
        let scale = ta.data.iter().fold(0.0f64, |a, &b| a.max(b));
        let Dims { nx, ny, nz } = dims;
        for kz in 0..nz {
            for ky in 0..ny {
                for kx in 0..nx {
                    if m.at_unshifted(kx, ky, kz) == 1.0 {
                        let o = dims.idx(kx, ky, kz);
                        assert!((oa.data[o] - ta.data[o]).abs() < 1e-6 * scale);
                    }
                }
            }
        }
    }

    #[test]
    fn transfer_with_center_only_mask_matches_target_mean() {
        let dims = d(8, 8, 8);
        let src = random_nonneg(dims, 30);
        let tgt = random_nonneg(dims, 31);
        // Vanishing sigma: every non-center weight underflows to zero.
        let m = make_hsg_mask(dims, 1e-4).unwrap();
        let center = dims.idx(4, 4, 4);
        for (i, &w) in m.weights.iter().enumerate() {
            if i == center {
                assert_eq!(w, 1.0);
            } else {
                assert_eq!(w, 0.0);
            }
        }
        let (out, _) = hsda_transfer(&src, &tgt, &m).unwrap();
        assert!((out.mean() - tgt.mean()).abs() < 1e-5);
        // The DC swap pins the mean to the target endpoint of the blend.
        let lo = src.mean().min(tgt.mean()) - 1e-9;
        let hi = src.mean().max(tgt.mean()) + 1e-9;
        assert!(out.mean() >= lo && out.mean() <= hi);
    }

    #[test]
    fn lowpass_all_ones_mask_is_identity_and_constant_passthrough() {
        let dims = d(8, 8, 8);
        let v = random_vol(dims, 40);
        let all = make_fda_mask(dims, 0.5).unwrap();
        let out = lowpass_style(&v, &all).unwrap();
        let max = out
            .data
            .iter()
            .zip(&v.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max < 1e-9);

        let c = Volume::from_vec(dims, vec![0.37; dims.n()]).unwrap();
        let m = make_hsg_mask(dims, 0.1).unwrap();
        let out = lowpass_style(&c, &m).unwrap();
        assert!(out.data.iter().all(|&x| (x - 0.37).abs() < 1e-9));
    }

    #[test]
    fn lowpass_is_self_adjoint() {
        let dims = d(8, 8, 8);
        let u = random_vol(dims, 50);
        let v = random_vol(dims, 51);
        let m = make_hsg_mask(dims, 0.12).unwrap();
        let lu = lowpass_style(&u, &m).unwrap();
        let lv = lowpass_style(&v, &m).unwrap();
        let dot = |a: &Volume, b: &Volume| -> f64 {
            a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
        };
        let lhs = dot(&lu, &v);
        let rhs = dot(&u, &lv);
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(rhs.abs()).max(1.0));
    }
}
