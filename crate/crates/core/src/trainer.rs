//! Student-teacher training loop on synthetic two-modality phantoms.
//!
//! One training step renders four input streams — the raw source patch
//! `x_s`, the raw target patch `x_t`, and their cross-style transfers
//! `x_st` (source content, target amplitudes) and `x_ts` — runs the student
//! network on `(x_s, x_ts)` and the teacher on `(x_t, x_st)`, and descends
//! the composite loss `lambda1 * L_fully + lambda2 * L_semi + lambda3 *
//! L_transwarp` on whichever network [`EmaRole`] designates, mirroring the
//! other by exponential moving average.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::losses::{
    dice_ce_loss, semi_mse_loss, total_loss, transwarp_loss, Detach, FeatureQuad, LossWeights,
    TauMode,
};
use crate::model::{
    backward, bottleneck_style, bottleneck_style_adjoint, forward, save_checkpoint,
    softmax2_backward, NetSpec, ParamVector,
};
use crate::spectral::{hsda_transfer, make_fda_mask, make_hsg_mask, SpectralMask};
use crate::volume::{
    generate_phantom, write_atomic, Dims, ModalityStyle, PhantomSpec, SegMask, Volume,
};
use crate::{Error, Result};

/// Which of the two weight-sharing networks receives gradient descent; the
/// other one tracks it by exponential moving average.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmaRole {
    /// The teacher descends and the student is its EMA mirror. The
    /// supervised loss is still computed and reported but cannot move the
    /// student directly; the consistency loss trains the teacher against
    /// the student's detached pseudo-labels.
    AsPrinted,
    /// The student descends (receiving the supervised gradient) and the
    /// teacher is its EMA mirror. This is the conventional mean-teacher
    /// wiring; the consistency loss still detaches the student's outputs,
    /// so it is reported as an agreement metric without a gradient of its
    /// own.
    TeacherIsEma,
}

/// Spectral mask family used for the amplitude-blend input transfer.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskType {
    /// Homocentric-square Gaussian weights (the default method).
    Hsg,
    /// Binary low-frequency box of half-width `beta * n` (classical
    /// frequency-domain adaptation baseline).
    Fda,
    /// No input transfer: the cross streams are plain copies.
    None,
}

/// Experiment flavour selecting what [`run_experiment`] trains on.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Supervised training on modality-A patches only (domain-gap lower
    /// bound); evaluated on held-out modality-B phantoms.
    SourceOnly,
    /// The complete adaptation pipeline: labelled modality-A, unlabelled
    /// modality-B, cross-style streams, composite loss, EMA mirror.
    FullMethod,
    /// Supervised training directly on labelled modality-B patches (upper
    /// bound); evaluated on the same held-out modality-B phantoms.
    TargetOracle,
}

/// Fully resolved training configuration. Serializes to/from JSON; unknown
/// keys are rejected and missing keys fall back to the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Patch edge lengths; each must be a power of two >= 8.
    pub patch_dims: Dims,
    /// Encoder channel widths (conv1, conv2, bottleneck).
    pub channels: (usize, usize, usize),
    /// Gaussian width of the homocentric-square mask, in fractions of the
    /// half-extent; also used for the bottleneck style filter.
    pub sigma: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Where the temperature enters the contrastive ratio.
    pub tau_mode: TauMode,
    /// Input-transfer mask family.
    pub mask_type: MaskType,
    /// Half-width fraction of the binary mask (only used by `fda`).
    pub beta: f64,
    /// Loss weights (lambda1, lambda2, lambda3).
    pub lambdas: LossWeights,
    /// Initial learning rate.
    pub lr0: f64,
    /// Multiplicative decay applied every `lr_decay_every` epochs.
    pub lr_decay_factor: f64,
    /// Epoch period of the learning-rate decay.
    pub lr_decay_every: usize,
    /// Number of passes over the training phantoms.
    pub epochs: usize,
    /// Patches per step; the adaptation mode splits this evenly between
    /// source and target, so it must be even.
    pub batch_size: usize,
    /// Asymptotic EMA decay (ramped as `min(1 - 1/(step+1), ema_decay)`).
    pub ema_decay: f64,
    /// Which network descends and which one mirrors.
    pub ema_role: EmaRole,
    /// Training phantoms per modality.
    pub n_train: usize,
    /// Held-out evaluation phantoms (modality B).
    pub n_eval: usize,
    /// Tubes threaded through each phantom.
    pub n_tubes: usize,
    /// Tube radius range in voxels.
    pub radius_range: (f64, f64),
    /// Seed for weight init and epoch shuffling.
    pub seed: u64,
    /// Base seed for phantom generation; modality A uses `base + i`,
    /// modality B `base + 1000 + i`, the eval set `base + 2000 + i`.
    pub phantom_seed_base: u64,
    /// Output directory for reports, loss curves, config echo, checkpoint.
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            patch_dims: Dims { nx: 32, ny: 32, nz: 32 },
            channels: (8, 16, 32),
            sigma: 0.1,
            tau: 0.5,
            tau_mode: TauMode::Printed,
            mask_type: MaskType::Hsg,
            beta: 0.25,
            lambdas: LossWeights::default(),
            lr0: 1e-3,
            lr_decay_factor: 0.1,
            lr_decay_every: 10,
            epochs: 30,
            batch_size: 4,
            ema_decay: 0.99,
            ema_role: EmaRole::AsPrinted,
            n_train: 40,
            n_eval: 10,
            n_tubes: 3,
            radius_range: (1.5, 3.0),
            seed: 17,
            phantom_seed_base: 1000,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl TrainConfig {
    /// Network shape implied by the patch dims and channel widths.
    pub fn net_spec(&self) -> Result<NetSpec> {
        NetSpec::new(self.patch_dims, self.channels)
    }

    pub fn validate(&self) -> Result<()> {
        self.net_spec()?;
        self.lambdas.validate()?;
        let w = &self.lambdas;
        if w.lambda1 + w.lambda2 + w.lambda3 <= 0.0 {
            return Err(Error::invalid("lambdas", "at least one weight must be positive"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid("sigma", "must be finite and positive"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid("tau", "must be finite and positive"));
        }
        if !(self.beta > 0.0 && self.beta <= 0.5) {
            return Err(Error::invalid("beta", "must lie in (0, 0.5]"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::invalid("lr0", "must be finite and positive"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return Err(Error::invalid("lr_decay_factor", "must be finite and positive"));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::invalid("lr_decay_every", "must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be at least 1"));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::invalid("batch_size", "must be even and at least 2"));
        }
        if self.n_train == 0 || self.n_train % self.batch_size != 0 {
            return Err(Error::invalid(
                "n_train",
                "must be a positive multiple of batch_size",
            ));
        }
        if self.n_eval == 0 {
            return Err(Error::invalid("n_eval", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::invalid("ema_decay", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Spectral masks a training run needs: the optional input-transfer mask at
/// full patch resolution and the style filter at bottleneck resolution.
///
/// The style filter is always the homocentric-square Gaussian with the
/// configured `sigma`; `mask_type` only switches the input transfer.
pub struct StepMasks {
    pub input: Option<SpectralMask>,
    pub style: SpectralMask,
}

impl StepMasks {
    pub fn from_config(cfg: &TrainConfig) -> Result<Self> {
        let spec = cfg.net_spec()?;
        let input = match cfg.mask_type {
            MaskType::Hsg => Some(make_hsg_mask(cfg.patch_dims, cfg.sigma)?),
            MaskType::Fda => Some(make_fda_mask(cfg.patch_dims, cfg.beta)?),
            MaskType::None => None,
        };
        let style = make_hsg_mask(spec.dims_quarter(), cfg.sigma)?;
        Ok(StepMasks { input, style })
    }
}

/// Loss values of one training step (already averaged over the batch).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub l_fully: f64,
    pub l_semi: f64,
    pub l_transwarp: f64,
    pub total: f64,
}

/// One row of the step-loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub l_fully: f64,
    pub l_semi: f64,
    pub l_transwarp: f64,
    pub total: f64,
    pub lr: f64,
}

/// Learning rate at a given epoch: `lr0 * factor^floor(epoch / every)`.
pub fn lr_schedule(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr0 * cfg.lr_decay_factor.powi((epoch / cfg.lr_decay_every) as i32)
}

/// Scales the foreground-probability gradient `d_fg` and pushes it through
/// the softmax of one stream, accumulating into that stream's logit
/// gradient.
fn add_fg_prob_grad(probs: &[f64], d_fg: &[f64], scale: f64, nf: usize, d_logits: &mut [f64]) {
    let mut d_probs = vec![0.0; 2 * nf];
    for (o, g) in d_probs[nf..].iter_mut().zip(d_fg) {
        *o = scale * g;
    }
    softmax2_backward(probs, &d_probs, nf, d_logits);
}

/// Combines a content gradient and a style gradient (pulled back through the
/// self-adjoint style filter) into one bottleneck injection, scaled.
fn bottleneck_grad(
    z_grad: &[f64],
    s_grad: &[f64],
    spec: &NetSpec,
    style_mask: &SpectralMask,
    scale: f64,
) -> Result<Vec<f64>> {
    let adj = bottleneck_style_adjoint(s_grad, spec, style_mask)?;
    Ok(z_grad.iter().zip(&adj).map(|(z, a)| scale * (z + a)).collect())
}

/// One adaptation step over `source.len()` (source, target) patch pairs.
///
/// Loss terms with zero weight are skipped entirely and reported as `0.0`.
/// Gradients flow only into the network designated by `cfg.ema_role`; the
/// other network is EMA-updated afterwards with ramp index `iter`.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    spec: &NetSpec,
    student: &mut ParamVector,
    teacher: &mut ParamVector,
    source: &[(&Volume, &SegMask)],
    target: &[&Volume],
    masks: &StepMasks,
    cfg: &TrainConfig,
    iter: u64,
    lr: f64,
) -> Result<StepLosses> {
    let n_pairs = source.len();
    if n_pairs == 0 {
        return Err(Error::invalid("batch", "needs at least one (source, target) pair"));
    }
    if target.len() != n_pairs {
        return Err(Error::LenMismatch {
            what: "target batch",
            expected: n_pairs,
            got: target.len(),
        });
    }
    let w = &cfg.lambdas;
    w.validate()?;
    let use_fully = w.lambda1 > 0.0;
    let use_semi = w.lambda2 > 0.0;
    let use_trans = w.lambda3 > 0.0;
    let need_teacher = use_semi || use_trans;
    let descender_is_student = cfg.ema_role == EmaRole::TeacherIsEma;
    // The student's predictions always act as the constant pseudo-labels in
    // the consistency loss, whichever network descends.  When the student is
    // itself the descender the term therefore carries no gradient and is
    // reported as a pure agreement metric.
    let detach = Detach::Student;

    let nf = spec.in_dims.n();
    let inv_pairs = 1.0 / n_pairs as f64;
    let scale1 = w.lambda1 * inv_pairs;
    let scale2 = w.lambda2 * inv_pairs;
    let scale3 = w.lambda3 * inv_pairs;

    if descender_is_student {
        student.zero_grads();
    } else {
        teacher.zero_grads();
    }

    let mut sum_fully = 0.0;
    let mut sum_semi = 0.0;
    let mut sum_trans = 0.0;

    for k in 0..n_pairs {
        let (x_s, y_s) = source[k];
        let x_t = target[k];

        // Cross-style inputs; plain copies when no input mask is configured.
        let (x_st, x_ts) = if need_teacher {
            match &masks.input {
                Some(m) => {
                    let (st, _) = hsda_transfer(x_s, x_t, m)?;
                    let (ts, _) = hsda_transfer(x_t, x_s, m)?;
                    (Some(st), Some(ts))
                }
                None => (Some(x_s.clone()), Some(x_t.clone())),
            }
        } else {
            (None, None)
        };

        // Four streams: student sees (x_s, x_ts), teacher sees (x_st, x_t).
        // Every stream is normalized per patch after the transfer.
        let tr_s = forward(spec, student, &x_s.normalized())?;
        let (tr_ts, tr_st, tr_t) = if need_teacher {
            let tr_ts = forward(spec, student, &x_ts.as_ref().unwrap().normalized())?;
            let tr_st = forward(spec, teacher, &x_st.as_ref().unwrap().normalized())?;
            let tr_t = forward(spec, teacher, &x_t.normalized())?;
            (Some(tr_ts), Some(tr_st), Some(tr_t))
        } else {
            (None, None, None)
        };

        // Gradient payloads for the descender's two streams: stream A is
        // x_s (student descending) or x_st (teacher descending); stream B
        // is x_ts respectively x_t.
        let mut dlog_a: Option<Vec<f64>> = None;
        let mut dlog_b: Option<Vec<f64>> = None;
        let mut dbot_a: Option<Vec<f64>> = None;
        let mut dbot_b: Option<Vec<f64>> = None;

        if use_fully {
            let (lf, gl) = dice_ce_loss(&tr_s.prob_pair(spec), y_s)?;
            sum_fully += lf;
            // The supervised loss lives on the student's labelled stream;
            // it can only descend when the student is the descender.
            if descender_is_student {
                let buf = dlog_a.get_or_insert_with(|| vec![0.0; 2 * nf]);
                for c in 0..2 {
                    for (o, g) in buf[c * nf..(c + 1) * nf].iter_mut().zip(&gl[c]) {
                        *o += scale1 * g;
                    }
                }
            }
        }

        if need_teacher {
            let tr_ts = tr_ts.as_ref().unwrap();
            let tr_st = tr_st.as_ref().unwrap();
            let tr_t = tr_t.as_ref().unwrap();

            if use_semi {
                let (ls, sg) = semi_mse_loss(
                    tr_s.prob_fg(),
                    tr_st.prob_fg(),
                    tr_ts.prob_fg(),
                    tr_t.prob_fg(),
                    detach,
                )?;
                sum_semi += ls;
                if descender_is_student {
                    let buf = dlog_a.get_or_insert_with(|| vec![0.0; 2 * nf]);
                    add_fg_prob_grad(&tr_s.probs, &sg.d_s, scale2, nf, buf);
                    let buf = dlog_b.get_or_insert_with(|| vec![0.0; 2 * nf]);
                    add_fg_prob_grad(&tr_ts.probs, &sg.d_ts, scale2, nf, buf);
                } else {
                    let buf = dlog_a.get_or_insert_with(|| vec![0.0; 2 * nf]);
                    add_fg_prob_grad(&tr_st.probs, &sg.d_st, scale2, nf, buf);
                    let buf = dlog_b.get_or_insert_with(|| vec![0.0; 2 * nf]);
                    add_fg_prob_grad(&tr_t.probs, &sg.d_t, scale2, nf, buf);
                }
            }

            if use_trans {
                let quad = FeatureQuad {
                    z_s: tr_s.a3.clone(),
                    z_st: tr_st.a3.clone(),
                    z_ts: tr_ts.a3.clone(),
                    z_t: tr_t.a3.clone(),
                    s_s: bottleneck_style(&tr_s.a3, spec, &masks.style)?,
                    s_st: bottleneck_style(&tr_st.a3, spec, &masks.style)?,
                    s_ts: bottleneck_style(&tr_ts.a3, spec, &masks.style)?,
                    s_t: bottleneck_style(&tr_t.a3, spec, &masks.style)?,
                };
                let (lt, qg) = transwarp_loss(&quad, cfg.tau, cfg.tau_mode)?;
                sum_trans += lt;
                if descender_is_student {
                    dbot_a = Some(bottleneck_grad(&qg.z_s, &qg.s_s, spec, &masks.style, scale3)?);
                    dbot_b =
                        Some(bottleneck_grad(&qg.z_ts, &qg.s_ts, spec, &masks.style, scale3)?);
                } else {
                    dbot_a =
                        Some(bottleneck_grad(&qg.z_st, &qg.s_st, spec, &masks.style, scale3)?);
                    dbot_b = Some(bottleneck_grad(&qg.z_t, &qg.s_t, spec, &masks.style, scale3)?);
                }
            }
        }

        // Backprop into the descending network only.
        if descender_is_student {
            if dlog_a.is_some() || dbot_a.is_some() {
                backward(
                    spec,
                    &student.values,
                    &mut student.grads,
                    &tr_s,
                    dlog_a.as_deref(),
                    dbot_a.as_deref(),
                )?;
            }
            if dlog_b.is_some() || dbot_b.is_some() {
                backward(
                    spec,
                    &student.values,
                    &mut student.grads,
                    tr_ts.as_ref().unwrap(),
                    dlog_b.as_deref(),
                    dbot_b.as_deref(),
                )?;
            }
        } else {
            if dlog_a.is_some() || dbot_a.is_some() {
                backward(
                    spec,
                    &teacher.values,
                    &mut teacher.grads,
                    tr_st.as_ref().unwrap(),
                    dlog_a.as_deref(),
                    dbot_a.as_deref(),
                )?;
            }
            if dlog_b.is_some() || dbot_b.is_some() {
                backward(
                    spec,
                    &teacher.values,
                    &mut teacher.grads,
                    tr_t.as_ref().unwrap(),
                    dlog_b.as_deref(),
                    dbot_b.as_deref(),
                )?;
            }
        }
    }

    let l_fully = if use_fully { sum_fully * inv_pairs } else { 0.0 };
    let l_semi = if use_semi { sum_semi * inv_pairs } else { 0.0 };
    let l_transwarp = if use_trans { sum_trans * inv_pairs } else { 0.0 };
    let total = total_loss(l_fully, l_semi, l_transwarp, w);
    if !(l_fully.is_finite() && l_semi.is_finite() && l_transwarp.is_finite() && total.is_finite())
    {
        return Err(Error::NonFinite { what: "step losses".into() });
    }

    if descender_is_student {
        student.adam_step(lr);
        teacher.ema_update(student, iter, cfg.ema_decay);
    } else {
        teacher.adam_step(lr);
        student.ema_update(teacher, iter, cfg.ema_decay);
    }

    Ok(StepLosses { l_fully, l_semi, l_transwarp, total })
}

/// One plain supervised step (segmentation loss only) on labelled patches;
/// returns the batch-mean loss.
pub fn supervised_step(
    spec: &NetSpec,
    params: &mut ParamVector,
    batch: &[(&Volume, &SegMask)],
    lr: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("batch", "needs at least one labelled patch"));
    }
    params.zero_grads();
    let nf = spec.in_dims.n();
    let scale = 1.0 / batch.len() as f64;
    let mut sum = 0.0;
    for (x, y) in batch {
        let tr = forward(spec, params, &x.normalized())?;
        let (l, gl) = dice_ce_loss(&tr.prob_pair(spec), y)?;
        sum += l;
        let mut dlog = vec![0.0; 2 * nf];
        for c in 0..2 {
            for (o, g) in dlog[c * nf..(c + 1) * nf].iter_mut().zip(&gl[c]) {
                *o = scale * g;
            }
        }
        backward(spec, &params.values, &mut params.grads, &tr, Some(&dlog), None)?;
    }
    let mean = sum * scale;
    if !mean.is_finite() {
        return Err(Error::NonFinite { what: "supervised loss".into() });
    }
    params.adam_step(lr);
    Ok(mean)
}

/// Overlap metrics of one evaluated case, in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CaseMetrics {
    pub dsc: f64,
    pub sen: f64,
    pub jac: f64,
    pub vs: f64,
    /// True when prediction and ground truth were both empty and the
    /// metrics were defined as 100 by convention.
    pub flagged: bool,
}

/// Mean or spread of the four metrics across cases.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricSummary {
    pub dsc: f64,
    pub sen: f64,
    pub jac: f64,
    pub vs: f64,
}

/// Per-case metrics plus mean and population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub cases: Vec<CaseMetrics>,
    pub mean: MetricSummary,
    pub std: MetricSummary,
}

/// Confusion counts `(tp, fp, fn)` of a binary prediction against ground
/// truth.
pub fn confusion(pred: &SegMask, gt: &SegMask) -> Result<(u64, u64, u64)> {
    if pred.dims != gt.dims {
        return Err(Error::DimsMismatch {
            what: "ground-truth mask",
            expected: (pred.dims.nx, pred.dims.ny, pred.dims.nz),
            got: (gt.dims.nx, gt.dims.ny, gt.dims.nz),
        });
    }
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p, g) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => {}
        }
    }
    Ok((tp, fp, fn_))
}

/// Percent metrics from confusion counts.
///
/// When prediction and ground truth are both empty every metric is defined
/// as 100 and the case is flagged. An empty ground truth with a nonempty
/// prediction yields sensitivity 0.
pub fn case_metrics(tp: u64, fp: u64, fn_: u64) -> CaseMetrics {
    if tp + fp + fn_ == 0 {
        return CaseMetrics { dsc: 100.0, sen: 100.0, jac: 100.0, vs: 100.0, flagged: true };
    }
    let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
    let dsc = 100.0 * 2.0 * tp / (2.0 * tp + fp + fn_);
    let sen = if tp + fn_ > 0.0 { 100.0 * tp / (tp + fn_) } else { 0.0 };
    let jac = 100.0 * tp / (tp + fp + fn_);
    let vs = 100.0 * (1.0 - (fp - fn_).abs() / (2.0 * tp + fp + fn_));
    CaseMetrics { dsc, sen, jac, vs, flagged: false }
}

fn summarize(cases: &[CaseMetrics], pick: impl Fn(&CaseMetrics) -> f64) -> (f64, f64) {
    let n = cases.len() as f64;
    let mean = cases.iter().map(&pick).sum::<f64>() / n;
    let var = cases.iter().map(|c| (pick(c) - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Segments every case with `params`, thresholds the foreground probability
/// strictly above `threshold`, and reports overlap metrics in percent with
/// mean and population standard deviation.
pub fn evaluate(
    spec: &NetSpec,
    params: &ParamVector,
    cases: &[(Volume, SegMask)],
    threshold: f64,
) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(Error::invalid("cases", "evaluation needs at least one case"));
    }
    let mut rows = Vec::with_capacity(cases.len());
    for (x, gt) in cases {
        let tr = forward(spec, params, &x.normalized())?;
        let pred: Vec<u8> = tr.prob_fg().iter().map(|&p| u8::from(p > threshold)).collect();
        let pred = SegMask::from_vec(spec.in_dims, pred)?;
        let (tp, fp, fn_) = confusion(&pred, gt)?;
        rows.push(case_metrics(tp, fp, fn_));
    }
    let (dsc_m, dsc_s) = summarize(&rows, |c| c.dsc);
    let (sen_m, sen_s) = summarize(&rows, |c| c.sen);
    let (jac_m, jac_s) = summarize(&rows, |c| c.jac);
    let (vs_m, vs_s) = summarize(&rows, |c| c.vs);
    Ok(EvalReport {
        cases: rows,
        mean: MetricSummary { dsc: dsc_m, sen: sen_m, jac: jac_m, vs: vs_m },
        std: MetricSummary { dsc: dsc_s, sen: sen_s, jac: jac_s, vs: vs_s },
    })
}

/// Generates `count` phantoms of one modality with consecutive seeds.
pub fn make_phantom_set(
    cfg: &TrainConfig,
    style: ModalityStyle,
    seed0: u64,
    count: usize,
) -> Result<Vec<(Volume, SegMask)>> {
    (0..count)
        .map(|i| {
            let spec = PhantomSpec {
                dims: cfg.patch_dims,
                n_tubes: cfg.n_tubes,
                radius_range: cfg.radius_range,
                style,
                seed: seed0 + i as u64,
            };
            generate_phantom(&spec)
        })
        .collect()
}

/// The held-out modality-B evaluation set implied by a configuration.
pub fn eval_cases(cfg: &TrainConfig) -> Result<Vec<(Volume, SegMask)>> {
    make_phantom_set(cfg, ModalityStyle::B, cfg.phantom_seed_base + 2000, cfg.n_eval)
}

/// Deterministic epoch shuffle: a permutation of `0..n` drawn from a stream
/// keyed by (seed, salt, epoch).
fn epoch_order(n: usize, seed: u64, salt: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let key = seed
        ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (epoch as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93);
    let mut rng = ChaCha12Rng::seed_from_u64(key);
    idx.shuffle(&mut rng);
    idx
}

/// Everything a finished run hands back in memory; the same content is
/// persisted under the configured output directory.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub report: EvalReport,
    pub losses: Vec<StepRecord>,
}

fn write_losses_csv(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut s = String::from("step,l_fully,l_semi,l_transwarp,total,lr\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.l_fully, r.l_semi, r.l_transwarp, r.total, r.lr
        ));
    }
    write_atomic(path, s.as_bytes())
}

/// Writes a report as CSV: one row per case, then `mean` and `std` summary
/// rows.
pub fn write_report_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut s = String::from("case,dsc,sen,jac,vs,flagged\n");
    for (i, c) in report.cases.iter().enumerate() {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            i, c.dsc, c.sen, c.jac, c.vs, c.flagged as u8
        ));
    }
    let m = &report.mean;
    let d = &report.std;
    s.push_str(&format!("mean,{},{},{},{},\n", m.dsc, m.sen, m.jac, m.vs));
    s.push_str(&format!("std,{},{},{},{},\n", d.dsc, d.sen, d.jac, d.vs));
    write_atomic(path, s.as_bytes())
}

/// Runs one full training experiment and evaluates on held-out modality-B
/// phantoms.
///
/// Persists `losses.csv`, `report.csv`, `config.json` (the resolved
/// configuration) and `model.ckpt` (the final student parameters — the
/// student is always the evaluated network, whichever role descends) under
/// `cfg.out_dir`. Identical configurations reproduce identical outputs.
pub fn run_experiment(cfg: &TrainConfig, mode: Mode) -> Result<RunOutput> {
    cfg.validate()?;
    let spec = cfg.net_spec()?;
    let train_a = make_phantom_set(cfg, ModalityStyle::A, cfg.phantom_seed_base, cfg.n_train)?;
    let train_b =
        make_phantom_set(cfg, ModalityStyle::B, cfg.phantom_seed_base + 1000, cfg.n_train)?;
    let eval_b = eval_cases(cfg)?;

    let mut student = ParamVector::init_seeded(&spec, cfg.seed);
    let mut teacher = student.clone();
    let masks = StepMasks::from_config(cfg)?;

    let mut records: Vec<StepRecord> = Vec::new();
    let mut iter: u64 = 0;
    match mode {
        Mode::FullMethod => {
            let ppb = cfg.batch_size / 2;
            let steps = cfg.n_train / ppb;
            for epoch in 0..cfg.epochs {
                let lr = lr_schedule(cfg, epoch);
                let ord_s = epoch_order(cfg.n_train, cfg.seed, 1, epoch);
                let ord_t = epoch_order(cfg.n_train, cfg.seed, 2, epoch);
                for b in 0..steps {
                    let src: Vec<(&Volume, &SegMask)> = ord_s[b * ppb..(b + 1) * ppb]
                        .iter()
                        .map(|&i| (&train_a[i].0, &train_a[i].1))
                        .collect();
                    let tgt: Vec<&Volume> =
                        ord_t[b * ppb..(b + 1) * ppb].iter().map(|&i| &train_b[i].0).collect();
                    let l =
                        train_step(&spec, &mut student, &mut teacher, &src, &tgt, &masks, cfg, iter, lr)
                            .map_err(|e| Error::Step { step: iter, source: Box::new(e) })?;
                    records.push(StepRecord {
                        step: iter,
                        l_fully: l.l_fully,
                        l_semi: l.l_semi,
                        l_transwarp: l.l_transwarp,
                        total: l.total,
                        lr,
                    });
                    iter += 1;
                }
            }
        }
        Mode::SourceOnly | Mode::TargetOracle => {
            let set = if mode == Mode::SourceOnly { &train_a } else { &train_b };
            let steps = cfg.n_train / cfg.batch_size;
            for epoch in 0..cfg.epochs {
                let lr = lr_schedule(cfg, epoch);
                let ord = epoch_order(cfg.n_train, cfg.seed, 1, epoch);
                for b in 0..steps {
                    let batch: Vec<(&Volume, &SegMask)> = ord
                        [b * cfg.batch_size..(b + 1) * cfg.batch_size]
                        .iter()
                        .map(|&i| (&set[i].0, &set[i].1))
                        .collect();
                    let lf = supervised_step(&spec, &mut student, &batch, lr)
                        .map_err(|e| Error::Step { step: iter, source: Box::new(e) })?;
                    records.push(StepRecord {
                        step: iter,
                        l_fully: lf,
                        l_semi: 0.0,
                        l_transwarp: 0.0,
                        total: lf,
                        lr,
                    });
                    iter += 1;
                }
            }
        }
    }

    let report = evaluate(&spec, &student, &eval_b, 0.5)?;

    std::fs::create_dir_all(&cfg.out_dir)?;
    write_losses_csv(&cfg.out_dir.join("losses.csv"), &records)?;
    write_report_csv(&cfg.out_dir.join("report.csv"), &report)?;
    write_atomic(&cfg.out_dir.join("config.json"), &serde_json::to_vec_pretty(cfg)?)?;
    save_checkpoint(&cfg.out_dir.join("model.ckpt"), &spec, &student)?;

    Ok(RunOutput { report, losses: records })
}
