//! Forward and reverse passes through the encoder–decoder network, plus an
//! end-to-end finite-difference gradient check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::losses::{dice_ce_loss, ProbPair};
use crate::model::layers::{
    conv1_backward, conv1_forward, conv3_backward, conv3_forward, maxpool2_backward,
    maxpool2_forward, relu_backward_inplace, relu_inplace, softmax2_forward, upsample2_backward,
    upsample2_forward,
};
use crate::model::{NetSpec, ParamVector};
use crate::spectral::{lowpass_style, make_hsg_mask, SpectralMask};
use crate::volume::{SegMask, Volume};
use crate::{Error, Result};

/// All intermediate activations of one forward pass, kept for the backward
/// pass. Buffers are channel-major; resolutions refer to the input grid.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Input copy (1 channel, full resolution).
    pub x: Vec<f64>,
    /// conv1 output after ReLU (c1, full).
    pub a1: Vec<f64>,
    /// First pooling output (c1, half) and its argmax indices.
    pub p1: Vec<f64>,
    pub arg1: Vec<u32>,
    /// conv2 output after ReLU (c2, half).
    pub a2: Vec<f64>,
    /// Second pooling output (c2, quarter) and its argmax indices.
    pub p2: Vec<f64>,
    pub arg2: Vec<u32>,
    /// Bottleneck: conv3 output after ReLU (c3, quarter). The flattened
    /// content feature.
    pub a3: Vec<f64>,
    /// Upsampled bottleneck concatenated with the conv2 skip (c3+c2, half).
    pub cat2: Vec<f64>,
    /// dconv2 output after ReLU (c2, half).
    pub d2: Vec<f64>,
    /// Upsampled dconv2 concatenated with the conv1 skip (c2+c1, full).
    pub cat1: Vec<f64>,
    /// dconv1 output after ReLU (c1, full).
    pub d1: Vec<f64>,
    /// Head logits (2, full).
    pub logits: Vec<f64>,
    /// Softmax probabilities (2, full); channel 1 is foreground.
    pub probs: Vec<f64>,
}

impl ForwardTrace {
    /// Foreground-probability field (channel 1).
    pub fn prob_fg(&self) -> &[f64] {
        &self.probs[self.probs.len() / 2..]
    }

    /// Copies the probabilities into a two-channel pair for the losses.
    pub fn prob_pair(&self, spec: &NetSpec) -> ProbPair {
        let n = spec.in_dims.n();
        ProbPair {
            dims: spec.in_dims,
            ch: [self.probs[..n].to_vec(), self.probs[n..].to_vec()],
        }
    }

    /// Hard segmentation at the 0.5 threshold (strictly greater).
    pub fn hard_mask(&self, spec: &NetSpec) -> SegMask {
        let fg = self.prob_fg();
        let data = fg.iter().map(|&p| (p > 0.5) as u8).collect();
        SegMask::from_vec(spec.in_dims, data).expect("thresholded mask is 0/1")
    }
}

fn check_finite(buf: &[f64], layer: &str) -> Result<()> {
    if buf.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: format!("{layer} output") });
    }
    Ok(())
}

/// Runs the full network on one single-channel volume.
pub fn forward(spec: &NetSpec, params: &ParamVector, x: &Volume) -> Result<ForwardTrace> {
    spec.validate()?;
    if x.dims != spec.in_dims {
        return Err(Error::DimsMismatch {
            what: "network input",
            expected: spec.in_dims.as_tuple(),
            got: x.dims.as_tuple(),
        });
    }
    if params.values.len() != spec.param_count() {
        return Err(Error::LenMismatch {
            what: "parameter vector",
            expected: spec.param_count(),
            got: params.values.len(),
        });
    }
    check_finite(&x.data, "input")?;
    let (c1, c2, c3) = spec.channels;
    let (df, dh, dq) = (spec.in_dims, spec.dims_half(), spec.dims_quarter());
    let (nf, nh, nq) = (df.n(), dh.n(), dq.n());
    let layers = spec.layers();
    let w = |i: usize| &params.values[layers[i].w_off..layers[i].w_off + layers[i].w_len];
    let b = |i: usize| &params.values[layers[i].b_off..layers[i].b_off + layers[i].b_len];

    let mut a1 = vec![0.0; c1 * nf];
    conv3_forward(&x.data, 1, c1, df, w(0), b(0), &mut a1);
    relu_inplace(&mut a1);
    check_finite(&a1, "conv1")?;

    let mut p1 = vec![0.0; c1 * nh];
    let mut arg1 = vec![0u32; c1 * nh];
    maxpool2_forward(&a1, c1, df, &mut p1, &mut arg1);

    let mut a2 = vec![0.0; c2 * nh];
    conv3_forward(&p1, c1, c2, dh, w(1), b(1), &mut a2);
    relu_inplace(&mut a2);
    check_finite(&a2, "conv2")?;

    let mut p2 = vec![0.0; c2 * nq];
    let mut arg2 = vec![0u32; c2 * nq];
    maxpool2_forward(&a2, c2, dh, &mut p2, &mut arg2);

    let mut a3 = vec![0.0; c3 * nq];
    conv3_forward(&p2, c2, c3, dq, w(2), b(2), &mut a3);
    relu_inplace(&mut a3);
    check_finite(&a3, "conv3")?;

    let mut cat2 = vec![0.0; (c3 + c2) * nh];
    upsample2_forward(&a3, c3, dq, &mut cat2[..c3 * nh]);
    cat2[c3 * nh..].copy_from_slice(&a2);
    let mut d2 = vec![0.0; c2 * nh];
    conv3_forward(&cat2, c3 + c2, c2, dh, w(3), b(3), &mut d2);
    relu_inplace(&mut d2);
    check_finite(&d2, "dconv2")?;

    let mut cat1 = vec![0.0; (c2 + c1) * nf];
    upsample2_forward(&d2, c2, dh, &mut cat1[..c2 * nf]);
    cat1[c2 * nf..].copy_from_slice(&a1);
    let mut d1 = vec![0.0; c1 * nf];
    conv3_forward(&cat1, c2 + c1, c1, df, w(4), b(4), &mut d1);
    relu_inplace(&mut d1);
    check_finite(&d1, "dconv1")?;

    let mut logits = vec![0.0; 2 * nf];
    conv1_forward(&d1, c1, 2, nf, w(5), b(5), &mut logits);
    check_finite(&logits, "head")?;
    let mut probs = vec![0.0; 2 * nf];
    softmax2_forward(&logits, nf, &mut probs);

    Ok(ForwardTrace {
        x: x.data.clone(),
        a1,
        p1,
        arg1,
        a2,
        p2,
        arg2,
        a3,
        cat2,
        d2,
        cat1,
        d1,
        logits,
        probs,
    })
}

/// Accumulates parameter gradients for one traced forward pass.
///
/// `d_logits` is the loss gradient at the head logits (2 channels, full
/// resolution); `d_bottleneck` is an extra gradient injected at the
/// post-ReLU bottleneck activation (content/style feature losses). Either
/// may be absent; with no `d_logits` the decoder is skipped entirely.
pub fn backward(
    spec: &NetSpec,
    values: &[f64],
    grads: &mut [f64],
    trace: &ForwardTrace,
    d_logits: Option<&[f64]>,
    d_bottleneck: Option<&[f64]>,
) -> Result<()> {
    let (c1, c2, c3) = spec.channels;
    let (df, dh, dq) = (spec.in_dims, spec.dims_half(), spec.dims_quarter());
    let (nf, nh, nq) = (df.n(), dh.n(), dq.n());
    if values.len() != spec.param_count() || grads.len() != spec.param_count() {
        return Err(Error::LenMismatch {
            what: "parameter vector",
            expected: spec.param_count(),
            got: values.len().min(grads.len()),
        });
    }
    let layers = spec.layers();

    let mut d_a3 = vec![0.0; c3 * nq];
    let mut d_a2 = vec![0.0; c2 * nh];
    let mut d_a1 = vec![0.0; c1 * nf];

    if let Some(dl) = d_logits {
        if dl.len() != 2 * nf {
            return Err(Error::LenMismatch { what: "logit gradient", expected: 2 * nf, got: dl.len() });
        }
        let l = layers[5];
        let (wg, bg) = grads[l.w_off..l.b_off + l.b_len].split_at_mut(l.w_len);
        let mut d_d1 = vec![0.0; c1 * nf];
        conv1_backward(
            &trace.d1,
            c1,
            2,
            nf,
            &values[l.w_off..l.w_off + l.w_len],
            dl,
            Some(&mut d_d1),
            wg,
            bg,
        );
        relu_backward_inplace(&mut d_d1, &trace.d1);

        let l = layers[4];
        let (wg, bg) = grads[l.w_off..l.b_off + l.b_len].split_at_mut(l.w_len);
        let mut d_cat1 = vec![0.0; (c2 + c1) * nf];
        conv3_backward(
            &trace.cat1,
            c2 + c1,
            c1,
            df,
            &values[l.w_off..l.w_off + l.w_len],
            &d_d1,
            Some(&mut d_cat1),
            wg,
            bg,
        );
        let mut d_d2 = vec![0.0; c2 * nh];
        upsample2_backward(&d_cat1[..c2 * nf], c2, dh, &mut d_d2);
        for (g, s) in d_a1.iter_mut().zip(&d_cat1[c2 * nf..]) {
            *g += s;
        }
        relu_backward_inplace(&mut d_d2, &trace.d2);

        let l = layers[3];
        let (wg, bg) = grads[l.w_off..l.b_off + l.b_len].split_at_mut(l.w_len);
        let mut d_cat2 = vec![0.0; (c3 + c2) * nh];
        conv3_backward(
            &trace.cat2,
            c3 + c2,
            c2,
            dh,
            &values[l.w_off..l.w_off + l.w_len],
            &d_d2,
            Some(&mut d_cat2),
            wg,
            bg,
        );
        upsample2_backward(&d_cat2[..c3 * nh], c3, dq, &mut d_a3);
        for (g, s) in d_a2.iter_mut().zip(&d_cat2[c3 * nh..]) {
            *g += s;
        }
    }

    if let Some(db) = d_bottleneck {
        if db.len() != c3 * nq {
            return Err(Error::LenMismatch {
                what: "bottleneck gradient",
                expected: c3 * nq,
                got: db.len(),
            });
        }
        for (g, s) in d_a3.iter_mut().zip(db) {
            *g += s;
        }
    }

    relu_backward_inplace(&mut d_a3, &trace.a3);
    let l = layers[2];
    let (wg, bg) = grads[l.w_off..l.b_off + l.b_len].split_at_mut(l.w_len);
    let mut d_p2 = vec![0.0; c2 * nq];
    conv3_backward(
        &trace.p2,
        c2,
        c3,
        dq,
        &values[l.w_off..l.w_off + l.w_len],
        &d_a3,
        Some(&mut d_p2),
        wg,
        bg,
    );
    maxpool2_backward(&d_p2, c2, dh, &trace.arg2, &mut d_a2);
    relu_backward_inplace(&mut d_a2, &trace.a2);

    let l = layers[1];
    let (wg, bg) = grads[l.w_off..l.b_off + l.b_len].split_at_mut(l.w_len);
    let mut d_p1 = vec![0.0; c1 * nh];
    conv3_backward(
        &trace.p1,
        c1,
        c2,
        dh,
        &values[l.w_off..l.w_off + l.w_len],
        &d_a2,
        Some(&mut d_p1),
        wg,
        bg,
    );
    maxpool2_backward(&d_p1, c1, df, &trace.arg1, &mut d_a1);
    relu_backward_inplace(&mut d_a1, &trace.a1);

    let l = layers[0];
    let (wg, bg) = grads[l.w_off..l.b_off + l.b_len].split_at_mut(l.w_len);
    conv3_backward(&trace.x, 1, c1, df, &values[l.w_off..l.w_off + l.w_len], &d_a1, None, wg, bg);
    Ok(())
}

/// Per-channel low-pass filtering of the bottleneck activation: the style
/// feature.
pub fn bottleneck_style(a3: &[f64], spec: &NetSpec, mask: &SpectralMask) -> Result<Vec<f64>> {
    let dq = spec.dims_quarter();
    let nq = dq.n();
    let c3 = spec.channels.2;
    if a3.len() != c3 * nq {
        return Err(Error::LenMismatch { what: "bottleneck buffer", expected: c3 * nq, got: a3.len() });
    }
    let mut out = vec![0.0; a3.len()];
    for c in 0..c3 {
        let v = Volume::from_vec(dq, a3[c * nq..(c + 1) * nq].to_vec())?;
        let filtered = lowpass_style(&v, mask)?;
        out[c * nq..(c + 1) * nq].copy_from_slice(&filtered.data);
    }
    Ok(out)
}

/// Pulls a style-feature gradient back to the bottleneck. The filter has a
/// real, centro-symmetric transfer function, so it is self-adjoint: the
/// backward map is the filter itself.
pub fn bottleneck_style_adjoint(
    d_style: &[f64],
    spec: &NetSpec,
    mask: &SpectralMask,
) -> Result<Vec<f64>> {
    bottleneck_style(d_style, spec, mask)
}

/// One row of the end-to-end gradient check report.
#[derive(Clone, Debug)]
pub struct GradCheckRow {
    pub layer: &'static str,
    pub probes: usize,
    pub max_rel_err: f64,
}

/// Compares analytic parameter gradients against central finite differences
/// on a seeded random problem that exercises every path: segmentation loss
/// at the head plus quadratic penalties on the bottleneck content and style
/// features.
pub fn model_gradcheck(spec: &NetSpec, seed: u64, probes_per_layer: usize) -> Result<Vec<GradCheckRow>> {
    spec.validate()?;
    if probes_per_layer == 0 {
        return Err(Error::invalid("probes", "need at least one probe per layer"));
    }
    let nf = spec.in_dims.n();
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x00C0_FFEE);
    let x = Volume::from_vec(
        spec.in_dims,
        (0..nf).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    let y = SegMask::from_vec(
        spec.in_dims,
        (0..nf).map(|_| (rng.gen_range(0.0..1.0) < 0.3) as u8).collect(),
    )?;
    let mask = make_hsg_mask(spec.dims_quarter(), 0.25)?;
    let n3 = spec.bottleneck_len() as f64;

    let scalar_loss = |params: &ParamVector| -> Result<f64> {
        let trace = forward(spec, params, &x)?;
        let (l_seg, _) = dice_ce_loss(&trace.prob_pair(spec), &y)?;
        let style = bottleneck_style(&trace.a3, spec, &mask)?;
        let l_style = 0.1 * style.iter().map(|v| v * v).sum::<f64>() / n3;
        let l_content = 0.05 * trace.a3.iter().map(|v| v * v).sum::<f64>() / n3;
        Ok(l_seg + l_style + l_content)
    };

    let mut params = ParamVector::init_seeded(spec, seed);
    let trace = forward(spec, &params, &x)?;
    let (_, g_logits) = dice_ce_loss(&trace.prob_pair(spec), &y)?;
    let mut d_logits = vec![0.0; 2 * nf];
    d_logits[..nf].copy_from_slice(&g_logits[0]);
    d_logits[nf..].copy_from_slice(&g_logits[1]);
    let style = bottleneck_style(&trace.a3, spec, &mask)?;
    let d_style: Vec<f64> = style.iter().map(|v| 0.1 * 2.0 * v / n3).collect();
    let mut d_bottleneck = bottleneck_style_adjoint(&d_style, spec, &mask)?;
    for (g, &a) in d_bottleneck.iter_mut().zip(&trace.a3) {
        *g += 0.05 * 2.0 * a / n3;
    }
    params.zero_grads();
    backward(spec, &params.values, &mut params.grads, &trace, Some(&d_logits), Some(&d_bottleneck))?;
    let analytic = params.grads.clone();
    params.zero_grads();

    let h = 1e-5;
    let mut rows = Vec::new();
    for layer in spec.layers() {
        let total = layer.w_len + layer.b_len;
        let probes = probes_per_layer.min(total);
        let mut max_rel = 0.0f64;
        for j in 0..probes {
            let idx = layer.w_off + (j * total) / probes;
            let orig = params.values[idx];
            params.values[idx] = orig + h;
            let vp = scalar_loss(&params)?;
            params.values[idx] = orig - h;
            let vm = scalar_loss(&params)?;
            params.values[idx] = orig;
            let fd = (vp - vm) / (2.0 * h);
            let an = analytic[idx];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-4);
            max_rel = max_rel.max(rel);
        }
        rows.push(GradCheckRow { layer: layer.name, probes, max_rel_err: max_rel });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;

    fn tiny_spec() -> NetSpec {
        NetSpec::new(Dims::new(8, 8, 8).unwrap(), (2, 3, 4)).unwrap()
    }

    fn seeded_input(spec: &NetSpec, seed: u64) -> Volume {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Volume::from_vec(
            spec.in_dims,
            (0..spec.in_dims.n()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn forward_shapes_probabilities_and_determinism() {
        let spec = tiny_spec();
        let params = ParamVector::init_seeded(&spec, 1);
        let x = seeded_input(&spec, 2);
        let t = forward(&spec, &params, &x).unwrap();
        let nf = spec.in_dims.n();
        assert_eq!(t.a3.len(), spec.bottleneck_len());
        assert_eq!(t.probs.len(), 2 * nf);
        for k in 0..nf {
            let s = t.probs[k] + t.probs[nf + k];
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(t.a3.iter().all(|&v| v >= 0.0), "bottleneck is post-ReLU");
        let t2 = forward(&spec, &params, &x).unwrap();
        assert_eq!(t.probs, t2.probs);
        assert_eq!(t.prob_fg().len(), nf);
    }

    #[test]
    fn forward_rejects_bad_input() {
        let spec = tiny_spec();
        let params = ParamVector::init_seeded(&spec, 1);
        let wrong = Volume::zeros(Dims::new(16, 8, 8).unwrap());
        assert!(matches!(
            forward(&spec, &params, &wrong),
            Err(Error::DimsMismatch { .. })
        ));
        let short = ParamVector::zeros(3);
        let x = seeded_input(&spec, 2);
        assert!(matches!(forward(&spec, &short, &x), Err(Error::LenMismatch { .. })));
        let mut bad = x.clone();
        bad.data[0] = f64::NAN;
        let err = forward(&spec, &params, &bad).unwrap_err();
        assert!(err.to_string().contains("input"), "{err}");
    }

    #[test]
    fn nonfinite_parameters_name_the_layer() {
        let spec = tiny_spec();
        let mut params = ParamVector::init_seeded(&spec, 1);
        let l = spec.layers()[2];
        params.values[l.w_off] = f64::INFINITY;
        let x = seeded_input(&spec, 2);
        let err = forward(&spec, &params, &x).unwrap_err();
        assert!(err.to_string().contains("conv3"), "{err}");
    }

    #[test]
    fn bottleneck_only_gradient_leaves_decoder_untouched() {
        let spec = tiny_spec();
        let mut params = ParamVector::init_seeded(&spec, 3);
        let x = seeded_input(&spec, 4);
        let trace = forward(&spec, &params, &x).unwrap();
        let db = vec![1.0; spec.bottleneck_len()];
        let values = params.values.clone();
        backward(&spec, &values, &mut params.grads, &trace, None, Some(&db)).unwrap();
        let layers = spec.layers();
        for enc in [layers[0], layers[1], layers[2]] {
            let g = &params.grads[enc.w_off..enc.b_off + enc.b_len];
            assert!(g.iter().any(|&v| v != 0.0), "{} should receive gradient", enc.name);
        }
        for dec in [layers[3], layers[4], layers[5]] {
            let g = &params.grads[dec.w_off..dec.b_off + dec.b_len];
            assert!(g.iter().all(|&v| v == 0.0), "{} must stay zero", dec.name);
        }
    }

    #[test]
    fn logit_gradient_reaches_every_layer() {
        let spec = tiny_spec();
        let mut params = ParamVector::init_seeded(&spec, 5);
        let x = seeded_input(&spec, 6);
        let trace = forward(&spec, &params, &x).unwrap();
        let dl = vec![0.5; 2 * spec.in_dims.n()];
        let values = params.values.clone();
        backward(&spec, &values, &mut params.grads, &trace, Some(&dl), None).unwrap();
        for l in spec.layers() {
            let g = &params.grads[l.w_off..l.b_off + l.b_len];
            assert!(g.iter().any(|&v| v != 0.0), "{} got no gradient", l.name);
        }
    }

    #[test]
    fn style_feature_matches_per_channel_filtering_and_is_self_adjoint() {
        let spec = tiny_spec();
        let mask = make_hsg_mask(spec.dims_quarter(), 0.3).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let n = spec.bottleneck_len();
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fa = bottleneck_style(&a, &spec, &mask).unwrap();
        let fb = bottleneck_style_adjoint(&b, &spec, &mask).unwrap();
        let lhs: f64 = fa.iter().zip(&b).map(|(x, y)| x * y).sum();
        let rhs: f64 = a.iter().zip(&fb).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-8 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
        // First channel equals filtering that channel alone.
        let dq = spec.dims_quarter();
        let v = Volume::from_vec(dq, a[..dq.n()].to_vec()).unwrap();
        let direct = lowpass_style(&v, &mask).unwrap();
        assert_eq!(&fa[..dq.n()], &direct.data[..]);
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let spec = NetSpec::new(Dims::new(16, 16, 16).unwrap(), (8, 16, 32)).unwrap();
        let rows = model_gradcheck(&spec, 11, 4).unwrap();
        assert_eq!(rows.len(), 6);
        for row in &rows {
            assert!(
                row.max_rel_err < 1e-3,
                "{}: rel err {} exceeds 1e-3",
                row.layer,
                row.max_rel_err
            );
        }
    }
}
