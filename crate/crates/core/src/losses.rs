//! Loss functions with analytic gradients.
//!
//! All losses are per-sample scalars on `f64` buffers; the trainer averages
//! over a batch. Gradients are returned for every input (zeroed where a side
//! is detached) so callers decide which network parameters they reach.

use crate::volume::{Dims, SegMask};
use crate::{Error, Result};

/// Epsilon in the Dice numerator and denominator.
pub const DICE_EPS: f64 = 1e-6;
/// Probability floor inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Placement of the temperature in the contrastive ratio.
#[derive(Clone, Copy, PartialEq, Eq, Debug, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauMode {
    /// Numerator divided by tau inside the log (adds `ln tau` to the loss).
    Printed,
    /// Conventional form: every exponent is divided by tau.
    Infonce,
}

/// Which side of the consistency pairs is treated as a constant pseudo-label.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Detach {
    /// Student outputs (`p_s`, `p_ts`) get zero gradient.
    Student,
    /// Teacher outputs (`p_st`, `p_t`) get zero gradient.
    Teacher,
    /// All four inputs receive gradients.
    None,
}

/// Weights of the three loss terms in the total objective.
#[derive(Clone, Copy, PartialEq, Debug, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 0.8, lambda2: 0.1, lambda3: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid("loss weights", format!("{name} = {v}")));
            }
        }
        Ok(())
    }
}

/// Two-channel per-voxel probability field (softmax output); channel 1 is
/// the foreground.
#[derive(Clone, Debug)]
pub struct ProbPair {
    pub dims: Dims,
    pub ch: [Vec<f64>; 2],
}

impl ProbPair {
    pub fn validate(&self) -> Result<()> {
        let n = self.dims.n();
        for c in &self.ch {
            if c.len() != n {
                return Err(Error::LenMismatch {
                    what: "probability channel",
                    expected: n,
                    got: c.len(),
                });
            }
        }
        for i in 0..n {
            let (a, b) = (self.ch[0][i], self.ch[1][i]);
            if a.is_nan() || b.is_nan() {
                return Err(Error::NonFinite { what: "probabilities".into() });
            }
            if (a + b - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(
                    "probabilities",
                    format!("channels sum to {} at voxel {i}", a + b),
                ));
            }
        }
        Ok(())
    }
}

/// Segmentation loss: soft Dice on the foreground channel plus two-class
/// cross-entropy, both meaned over voxels.
///
/// Returns the value and the gradient with respect to the *logits* that
/// produced `p` (chained through the softmax Jacobian, which only needs `p`).
pub fn dice_ce_loss(p: &ProbPair, y: &SegMask) -> Result<(f64, [Vec<f64>; 2])> {
    p.validate()?;
    if y.dims != p.dims {
        return Err(Error::DimsMismatch {
            what: "labels",
            expected: p.dims.as_tuple(),
            got: y.dims.as_tuple(),
        });
    }
    let n = p.dims.n();
    let nf = n as f64;
    let p1 = &p.ch[1];
    let p0 = &p.ch[0];

    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut ysum = 0.0;
    for i in 0..n {
        let yi = y.data[i] as f64;
        inter += p1[i] * yi;
        psum += p1[i];
        ysum += yi;
    }
    let denom = psum + ysum + DICE_EPS;
    let dice = 1.0 - (2.0 * inter + DICE_EPS) / denom;

    let mut ce = 0.0;
    for i in 0..n {
        let py = if y.data[i] == 1 { p1[i] } else { p0[i] };
        ce -= py.max(PROB_FLOOR).ln();
    }
    ce /= nf;
    let value = dice + ce;

    // Gradient wrt probabilities, then through softmax: for each voxel,
    // g_logit_c = p_c * (g_c - sum_c' g_c' p_c').
    let mut g0 = vec![0.0f64; n];
    let mut g1 = vec![0.0f64; n];
    for i in 0..n {
        let yi = y.data[i] as f64;
        // Dice term touches channel 1 only.
        let gd = -(2.0 * yi * denom - (2.0 * inter + DICE_EPS)) / (denom * denom);
        let (mut gp0, mut gp1) = (0.0, gd);
        if y.data[i] == 1 {
            if p1[i] > PROB_FLOOR {
                gp1 += -1.0 / (nf * p1[i]);
            }
        } else if p0[i] > PROB_FLOOR {
            gp0 += -1.0 / (nf * p0[i]);
        }
        let dot = gp0 * p0[i] + gp1 * p1[i];
        g0[i] = p0[i] * (gp0 - dot);
        g1[i] = p1[i] * (gp1 - dot);
    }
    Ok((value, [g0, g1]))
}

/// Gradients of [`semi_mse_loss`] with respect to its four inputs.
#[derive(Clone, Debug)]
pub struct SemiGrads {
    pub d_s: Vec<f64>,
    pub d_st: Vec<f64>,
    pub d_ts: Vec<f64>,
    pub d_t: Vec<f64>,
}

/// Bidirectional consistency loss on foreground-probability fields:
/// `mean((p_s - p_st)^2) + mean((p_ts - p_t)^2)`.
///
/// `p_s`/`p_ts` come from the student, `p_st`/`p_t` from the teacher; the
/// `detach` side is treated as a constant pseudo-label and gets zero
/// gradient.
pub fn semi_mse_loss(
    p_s: &[f64],
    p_st: &[f64],
    p_ts: &[f64],
    p_t: &[f64],
    detach: Detach,
) -> Result<(f64, SemiGrads)> {
    let n = p_s.len();
    for (what, v) in [("p_st", p_st), ("p_ts", p_ts), ("p_t", p_t)] {
        if v.len() != n {
            return Err(Error::LenMismatch { what, expected: n, got: v.len() });
        }
    }
    if n == 0 {
        return Err(Error::invalid("consistency field", "empty input"));
    }
    let nf = n as f64;
    let mut value = 0.0;
    let mut d_s = vec![0.0f64; n];
    let mut d_st = vec![0.0f64; n];
    let mut d_ts = vec![0.0f64; n];
    let mut d_t = vec![0.0f64; n];
    for i in 0..n {
        let a = p_s[i] - p_st[i];
        let b = p_ts[i] - p_t[i];
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::NonFinite { what: "consistency field".into() });
        }
        value += a * a + b * b;
        d_s[i] = 2.0 * a / nf;
        d_st[i] = -2.0 * a / nf;
        d_ts[i] = 2.0 * b / nf;
        d_t[i] = -2.0 * b / nf;
    }
    value /= nf;
    match detach {
        Detach::Student => {
            d_s.iter_mut().for_each(|v| *v = 0.0);
            d_ts.iter_mut().for_each(|v| *v = 0.0);
        }
        Detach::Teacher => {
            d_st.iter_mut().for_each(|v| *v = 0.0);
            d_t.iter_mut().for_each(|v| *v = 0.0);
        }
        Detach::None => {}
    }
    Ok((value, SemiGrads { d_s, d_st, d_ts, d_t }))
}

/// Cosine similarity `u.v / (|u| |v|)`; zero-norm inputs are an error.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::LenMismatch { what: "cosine input", expected: u.len(), got: v.len() });
    }
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for i in 0..u.len() {
        dot += u[i] * v[i];
        nu += u[i] * u[i];
        nv += v[i] * v[i];
    }
    if !(dot.is_finite() && nu.is_finite() && nv.is_finite()) {
        return Err(Error::NonFinite { what: "cosine input".into() });
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm { what: "cosine input" });
    }
    Ok(dot / (nu.sqrt() * nv.sqrt()))
}

/// Adds `coef * d cosine(u, v)` into `gu` and `gv`.
fn cosine_grad_acc(u: &[f64], v: &[f64], coef: f64, gu: &mut [f64], gv: &mut [f64]) {
    let mut dot = 0.0;
    let mut nu2 = 0.0;
    let mut nv2 = 0.0;
    for i in 0..u.len() {
        dot += u[i] * v[i];
        nu2 += u[i] * u[i];
        nv2 += v[i] * v[i];
    }
    let nu = nu2.sqrt();
    let nv = nv2.sqrt();
    let h = dot / (nu * nv);
    for i in 0..u.len() {
        gu[i] += coef * (v[i] / (nu * nv) - h * u[i] / nu2);
        gv[i] += coef * (u[i] / (nu * nv) - h * v[i] / nv2);
    }
}

/// The eight per-sample feature vectors entering the contrastive loss:
/// bottleneck content `z` and low-pass style `s` for the source patch (`_s`),
/// source-to-target transfer (`_st`), target-to-source transfer (`_ts`), and
/// target patch (`_t`). Student streams are `_s`/`_ts`, teacher streams
/// `_st`/`_t`.
#[derive(Clone, Debug)]
pub struct FeatureQuad {
    pub z_s: Vec<f64>,
    pub z_st: Vec<f64>,
    pub z_ts: Vec<f64>,
    pub z_t: Vec<f64>,
    pub s_s: Vec<f64>,
    pub s_st: Vec<f64>,
    pub s_ts: Vec<f64>,
    pub s_t: Vec<f64>,
}

impl FeatureQuad {
    fn validate(&self) -> Result<()> {
        let lc = self.z_s.len();
        let ls = self.s_s.len();
        if lc == 0 || ls == 0 {
            return Err(Error::invalid("feature quad", "empty feature vector"));
        }
        for (what, v, l) in [
            ("z_st", &self.z_st, lc),
            ("z_ts", &self.z_ts, lc),
            ("z_t", &self.z_t, lc),
            ("s_st", &self.s_st, ls),
            ("s_ts", &self.s_ts, ls),
            ("s_t", &self.s_t, ls),
        ] {
            if v.len() != l {
                return Err(Error::LenMismatch { what, expected: l, got: v.len() });
            }
        }
        Ok(())
    }
}

/// Gradients of [`transwarp_loss`] with respect to each quad member.
#[derive(Clone, Debug)]
pub struct QuadGrads {
    pub z_s: Vec<f64>,
    pub z_st: Vec<f64>,
    pub z_ts: Vec<f64>,
    pub z_t: Vec<f64>,
    pub s_s: Vec<f64>,
    pub s_st: Vec<f64>,
    pub s_ts: Vec<f64>,
    pub s_t: Vec<f64>,
}

/// Content and style cosine-pair sums `(pos_c, pos_s, neg_c)`.
///
/// Positive content pairs tie each patch to its own transfer; negative pairs
/// cross them; positive style pairs tie everything rendered in one style.
/// Term grouping is chosen so the role swap
/// (`z_s <-> z_ts`, `z_st <-> z_t`, styles alike) reproduces each sum
/// bit for bit (IEEE addition is commutative).
pub fn pair_sums(q: &FeatureQuad) -> Result<(f64, f64, f64)> {
    q.validate()?;
    let pos_c = cosine(&q.z_s, &q.z_st)? + cosine(&q.z_ts, &q.z_t)?;
    let neg_c = cosine(&q.z_s, &q.z_ts)? + cosine(&q.z_st, &q.z_t)?;
    let pos_s = (cosine(&q.s_s, &q.s_ts)? + cosine(&q.s_st, &q.s_t)?)
        + (cosine(&q.s_s, &q.s_t)? + cosine(&q.s_st, &q.s_ts)?);
    Ok((pos_c, pos_s, neg_c))
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::invalid("tau", format!("must be positive and finite, got {tau}")));
    }
    Ok(())
}

/// Contrastive ratio loss on the three pair sums.
pub fn transwarp_from_sums(
    pos_c: f64,
    pos_s: f64,
    neg_c: f64,
    tau: f64,
    mode: TauMode,
) -> Result<f64> {
    check_tau(tau)?;
    let (a, b, c) = match mode {
        TauMode::Printed => (pos_c, pos_s, neg_c),
        TauMode::Infonce => (pos_c / tau, pos_s / tau, neg_c / tau),
    };
    let num = a.exp() + b.exp();
    let den = num + c.exp();
    let ratio = match mode {
        TauMode::Printed => (num / tau) / den,
        TauMode::Infonce => num / den,
    };
    // Exponentials of finite sums and a positive tau keep the ratio positive.
    assert!(ratio > 0.0, "contrastive ratio must be positive");
    Ok(-ratio.ln())
}

/// Contrastive alignment loss over a [`FeatureQuad`] with analytic gradients
/// for all eight vectors.
pub fn transwarp_loss(q: &FeatureQuad, tau: f64, mode: TauMode) -> Result<(f64, QuadGrads)> {
    let (pos_c, pos_s, neg_c) = pair_sums(q)?;
    let value = transwarp_from_sums(pos_c, pos_s, neg_c, tau, mode)?;

    // d value / d (pos_c, pos_s, neg_c).
    let inv_tau = match mode {
        TauMode::Printed => 1.0,
        TauMode::Infonce => 1.0 / tau,
    };
    let (a, b, c) = match mode {
        TauMode::Printed => (pos_c, pos_s, neg_c),
        TauMode::Infonce => (pos_c / tau, pos_s / tau, neg_c / tau),
    };
    let (e1, e2, e3) = (a.exp(), b.exp(), c.exp());
    let s2 = e1 + e2;
    let s3 = s2 + e3;
    let d_pos_c = inv_tau * (-e1 / s2 + e1 / s3);
    let d_pos_s = inv_tau * (-e2 / s2 + e2 / s3);
    let d_neg_c = inv_tau * (e3 / s3);

    let lc = q.z_s.len();
    let ls = q.s_s.len();
    let mut g = QuadGrads {
        z_s: vec![0.0; lc],
        z_st: vec![0.0; lc],
        z_ts: vec![0.0; lc],
        z_t: vec![0.0; lc],
        s_s: vec![0.0; ls],
        s_st: vec![0.0; ls],
        s_ts: vec![0.0; ls],
        s_t: vec![0.0; ls],
    };
    cosine_grad_acc(&q.z_s, &q.z_st, d_pos_c, &mut g.z_s, &mut g.z_st);
    cosine_grad_acc(&q.z_ts, &q.z_t, d_pos_c, &mut g.z_ts, &mut g.z_t);
    cosine_grad_acc(&q.z_s, &q.z_ts, d_neg_c, &mut g.z_s, &mut g.z_ts);
    cosine_grad_acc(&q.z_st, &q.z_t, d_neg_c, &mut g.z_st, &mut g.z_t);
    cosine_grad_acc(&q.s_s, &q.s_ts, d_pos_s, &mut g.s_s, &mut g.s_ts);
    cosine_grad_acc(&q.s_st, &q.s_t, d_pos_s, &mut g.s_st, &mut g.s_t);
    cosine_grad_acc(&q.s_s, &q.s_t, d_pos_s, &mut g.s_s, &mut g.s_t);
    cosine_grad_acc(&q.s_st, &q.s_ts, d_pos_s, &mut g.s_st, &mut g.s_ts);
    Ok((value, g))
}

/// Weighted total objective.
pub fn total_loss(l_fully: f64, l_semi: f64, l_transwarp: f64, w: &LossWeights) -> f64 {
    w.lambda1 * l_fully + w.lambda2 * l_semi + w.lambda3 * l_transwarp
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn softmax2(dims: Dims, logits: &[Vec<f64>; 2]) -> ProbPair {
        let n = logits[0].len();
        let mut ch = [vec![0.0; n], vec![0.0; n]];
        for i in 0..n {
            let m = logits[0][i].max(logits[1][i]);
            let e0 = (logits[0][i] - m).exp();
            let e1 = (logits[1][i] - m).exp();
            ch[0][i] = e0 / (e0 + e1);
            ch[1][i] = e1 / (e0 + e1);
        }
        ProbPair { dims, ch }
    }

    fn rand_vec(rng: &mut ChaCha12Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(lo..hi)).collect()
    }

    #[test]
    fn dice_ce_half_probability_half_labels() {
        let n = 64;
        let dims = Dims::new(4, 4, 4).unwrap();
        let p = ProbPair { dims, ch: [vec![0.5; n], vec![0.5; n]] };
        let y = SegMask::from_vec(dims, (0..n).map(|i| (i < n / 2) as u8).collect()).unwrap();
        let (v, _) = dice_ce_loss(&p, &y).unwrap();
        assert!((v - (0.5 + std::f64::consts::LN_2)).abs() < 1e-6, "got {v}");
    }

    #[test]
    fn dice_ce_perfect_one_hot_is_epsilon_level() {
        let dims = Dims::new(4, 4, 2).unwrap();
        let n = dims.n();
        let y: Vec<u8> = (0..n).map(|i| (i % 3 == 0) as u8).collect();
        let p1: Vec<f64> = y.iter().map(|&b| b as f64).collect();
        let p0: Vec<f64> = y.iter().map(|&b| 1.0 - b as f64).collect();
        let p = ProbPair { dims, ch: [p0, p1] };
        let y = SegMask::from_vec(dims, y).unwrap();
        let (v, _) = dice_ce_loss(&p, &y).unwrap();
        assert!(v.abs() <= 2e-6);
    }

    #[test]
    fn dice_ce_gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let n = 64;
        let dims = Dims::new(4, 4, 4).unwrap();
        let mut logits = [rand_vec(&mut rng, n, -2.0, 2.0), rand_vec(&mut rng, n, -2.0, 2.0)];
        let y = SegMask::from_vec(dims, (0..n).map(|_| rng.gen_range(0..=1u8)).collect()).unwrap();
        let (_, g) = dice_ce_loss(&softmax2(dims, &logits), &y).unwrap();
        let h = 1e-5;
        let mut max_rel = 0.0f64;
        for c in 0..2 {
            for i in (0..n).step_by(7) {
                let orig = logits[c][i];
                logits[c][i] = orig + h;
                let (vp, _) = dice_ce_loss(&softmax2(dims, &logits), &y).unwrap();
                logits[c][i] = orig - h;
                let (vm, _) = dice_ce_loss(&softmax2(dims, &logits), &y).unwrap();
                logits[c][i] = orig;
                let fd = (vp - vm) / (2.0 * h);
                let an = g[c][i];
                let rel = (an - fd).abs() / (an.abs() + fd.abs()).max(1e-8);
                max_rel = max_rel.max(rel);
            }
        }
        assert!(max_rel < 1e-4, "max rel err {max_rel}");
    }

    #[test]
    fn dice_ce_rejects_nan_and_bad_sums() {
        let dims = Dims::new(2, 2, 2).unwrap();
        let y = SegMask::zeros(dims);
        let mut p = ProbPair { dims, ch: [vec![0.5; 8], vec![0.5; 8]] };
        p.ch[1][0] = f64::NAN;
        p.ch[0][0] = f64::NAN;
        assert!(matches!(dice_ce_loss(&p, &y), Err(Error::NonFinite { .. })));
        let p = ProbPair { dims, ch: [vec![0.9; 8], vec![0.9; 8]] };
        assert!(dice_ce_loss(&p, &y).is_err());
    }

    #[test]
    fn semi_mse_worked_example_and_identical_inputs() {
        let n = 32;
        let (v, _) = semi_mse_loss(
            &vec![1.0; n],
            &vec![0.0; n],
            &vec![0.25; n],
            &vec![0.25; n],
            Detach::None,
        )
        .unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        let x = vec![0.3; n];
        let (v0, _) = semi_mse_loss(&x, &x, &x, &x, Detach::None).unwrap();
        assert_eq!(v0, 0.0);
    }

    #[test]
    fn semi_mse_gradient_and_detach_sides() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let n = 40;
        let a = rand_vec(&mut rng, n, 0.0, 1.0);
        let b = rand_vec(&mut rng, n, 0.0, 1.0);
        let c = rand_vec(&mut rng, n, 0.0, 1.0);
        let d = rand_vec(&mut rng, n, 0.0, 1.0);
        let (_, g) = semi_mse_loss(&a, &b, &c, &d, Detach::None).unwrap();
        let h = 1e-6;
        let mut max_rel = 0.0f64;
        let mut probe = |v: &Vec<f64>, g: &Vec<f64>, which: usize| {
            for i in (0..n).step_by(5) {
                let mut vp = v.clone();
                vp[i] += h;
                let mut vm = v.clone();
                vm[i] -= h;
                let args = |x: &Vec<f64>| match which {
                    0 => semi_mse_loss(x, &b, &c, &d, Detach::None),
                    1 => semi_mse_loss(&a, x, &c, &d, Detach::None),
                    2 => semi_mse_loss(&a, &b, x, &d, Detach::None),
                    _ => semi_mse_loss(&a, &b, &c, x, Detach::None),
                };
                let fd = (args(&vp).unwrap().0 - args(&vm).unwrap().0) / (2.0 * h);
                let rel = (g[i] - fd).abs() / (g[i].abs() + fd.abs()).max(1e-8);
                max_rel = max_rel.max(rel);
            }
        };
        probe(&a, &g.d_s, 0);
        probe(&b, &g.d_st, 1);
        probe(&c, &g.d_ts, 2);
        probe(&d, &g.d_t, 3);
        assert!(max_rel < 1e-6, "max rel err {max_rel}");

        let (_, gs) = semi_mse_loss(&a, &b, &c, &d, Detach::Student).unwrap();
        assert!(gs.d_s.iter().chain(&gs.d_ts).all(|&x| x == 0.0));
        assert!(gs.d_st.iter().any(|&x| x != 0.0));
        let (_, gt) = semi_mse_loss(&a, &b, &c, &d, Detach::Teacher).unwrap();
        assert!(gt.d_st.iter().chain(&gt.d_t).all(|&x| x == 0.0));
        assert!(gt.d_s.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn cosine_basics() {
        let u = vec![1.0, 2.0, -3.0];
        assert!((cosine(&u, &u).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = u.iter().map(|x| -2.0 * x).collect();
        assert!((cosine(&u, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!(cosine(&[1.0, 0.0], &[0.0, 5.0]).unwrap().abs() < 1e-15);
        let scaled: Vec<f64> = u.iter().map(|x| 37.5 * x).collect();
        assert!((cosine(&scaled, &u).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(
            cosine(&[0.0, 0.0], &[1.0, 2.0]),
            Err(Error::ZeroNorm { .. })
        ));
        assert!(cosine(&[1.0], &[1.0, 2.0]).is_err());
    }

    fn rand_quad(rng: &mut ChaCha12Rng, lc: usize, ls: usize) -> FeatureQuad {
        FeatureQuad {
            z_s: rand_vec(rng, lc, -1.0, 1.0),
            z_st: rand_vec(rng, lc, -1.0, 1.0),
            z_ts: rand_vec(rng, lc, -1.0, 1.0),
            z_t: rand_vec(rng, lc, -1.0, 1.0),
            s_s: rand_vec(rng, ls, -1.0, 1.0),
            s_st: rand_vec(rng, ls, -1.0, 1.0),
            s_ts: rand_vec(rng, ls, -1.0, 1.0),
            s_t: rand_vec(rng, ls, -1.0, 1.0),
        }
    }

    #[test]
    fn transwarp_identical_features_fixed_point() {
        let v = vec![0.3, -0.7, 1.1, 0.2];
        let s = vec![0.9, 0.4, -0.5];
        let q = FeatureQuad {
            z_s: v.clone(),
            z_st: v.clone(),
            z_ts: v.clone(),
            z_t: v.clone(),
            s_s: s.clone(),
            s_st: s.clone(),
            s_ts: s.clone(),
            s_t: s,
        };
        let (l, _) = transwarp_loss(&q, 1.0, TauMode::Printed).unwrap();
        // All cosines are 1: pos_c = 2, pos_s = 4, neg_c = 2.
        let expected = -((2f64.exp() + 4f64.exp()) / (2.0 * 2f64.exp() + 4f64.exp())).ln();
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.11265).abs() < 1e-4);
        // Printed mode shifts by ln(tau); infonce matches printed at tau = 1.
        let (l_half, _) = transwarp_loss(&q, 0.5, TauMode::Printed).unwrap();
        assert!((l_half - (l + 0.5f64.ln())).abs() < 1e-12);
        let (l_inf, _) = transwarp_loss(&q, 1.0, TauMode::Infonce).unwrap();
        assert!((l_inf - l).abs() < 1e-15);
    }

    #[test]
    fn transwarp_nonnegative_at_unit_tau() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let q = rand_quad(&mut rng, 6, 5);
            let (l, _) = transwarp_loss(&q, 1.0, TauMode::Printed).unwrap();
            assert!(l >= 0.0, "loss {l} negative at tau = 1");
            assert!(l.is_finite());
        }
    }

    #[test]
    fn transwarp_increases_with_negative_pair_sum() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        for _ in 0..100 {
            let q = rand_quad(&mut rng, 6, 5);
            let (pc, ps, nc) = pair_sums(&q).unwrap();
            for mode in [TauMode::Printed, TauMode::Infonce] {
                let l0 = transwarp_from_sums(pc, ps, nc, 0.5, mode).unwrap();
                let l1 = transwarp_from_sums(pc, ps, nc + 1e-4, 0.5, mode).unwrap();
                assert!(l1 > l0);
            }
        }
    }

    #[test]
    fn transwarp_role_swap_exactness() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..50 {
            let q = rand_quad(&mut rng, 8, 6);
            // Swapping the two transferred latents exchanges pos_c and neg_c.
            let content_swapped = FeatureQuad {
                z_st: q.z_ts.clone(),
                z_ts: q.z_st.clone(),
                ..q.clone()
            };
            let (pc, _, nc) = pair_sums(&q).unwrap();
            let (pc2, ps2, nc2) = pair_sums(&content_swapped).unwrap();
            assert_eq!(pc2, nc);
            assert_eq!(nc2, pc);
            let (_, ps, _) = pair_sums(&q).unwrap();
            assert_eq!(ps2, ps);

            // The full role swap (source <-> transferred-target on both
            // content and style) leaves every sum — hence the loss — exact.
            let role_swapped = FeatureQuad {
                z_s: q.z_ts.clone(),
                z_ts: q.z_s.clone(),
                z_st: q.z_t.clone(),
                z_t: q.z_st.clone(),
                s_s: q.s_ts.clone(),
                s_ts: q.s_s.clone(),
                s_st: q.s_t.clone(),
                s_t: q.s_st.clone(),
            };
            let (pa, sa, na) = pair_sums(&q).unwrap();
            let (pb, sb, nb) = pair_sums(&role_swapped).unwrap();
            assert_eq!((pa, sa, na), (pb, sb, nb));
            let (la, _) = transwarp_loss(&q, 0.5, TauMode::Printed).unwrap();
            let (lb, _) = transwarp_loss(&role_swapped, 0.5, TauMode::Printed).unwrap();
            assert_eq!(la, lb);
        }
    }

    #[test]
    fn transwarp_scale_invariance() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let q = rand_quad(&mut rng, 10, 7);
        let (l0, _) = transwarp_loss(&q, 0.5, TauMode::Printed).unwrap();
        let mut scaled = q.clone();
        scaled.z_s.iter_mut().for_each(|x| *x *= 3.7);
        scaled.s_t.iter_mut().for_each(|x| *x *= 0.004);
        let (l1, _) = transwarp_loss(&scaled, 0.5, TauMode::Printed).unwrap();
        assert!((l0 - l1).abs() < 1e-9);
    }

    #[test]
    fn transwarp_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for mode in [TauMode::Printed, TauMode::Infonce] {
            let q = rand_quad(&mut rng, 16, 12);
            let (_, g) = transwarp_loss(&q, 0.5, mode).unwrap();
            let h = 1e-5;
            let mut max_rel = 0.0f64;
            let fields: [(&Vec<f64>, &Vec<f64>); 8] = [
                (&q.z_s, &g.z_s),
                (&q.z_st, &g.z_st),
                (&q.z_ts, &g.z_ts),
                (&q.z_t, &g.z_t),
                (&q.s_s, &g.s_s),
                (&q.s_st, &g.s_st),
                (&q.s_ts, &g.s_ts),
                (&q.s_t, &g.s_t),
            ];
            for (fi, (vals, grads)) in fields.iter().enumerate() {
                for i in (0..vals.len()).step_by(3) {
                    let perturb = |delta: f64| {
                        let mut qq = q.clone();
                        let slot = match fi {
                            0 => &mut qq.z_s,
                            1 => &mut qq.z_st,
                            2 => &mut qq.z_ts,
                            3 => &mut qq.z_t,
                            4 => &mut qq.s_s,
                            5 => &mut qq.s_st,
                            6 => &mut qq.s_ts,
                            _ => &mut qq.s_t,
                        };
                        slot[i] += delta;
                        transwarp_loss(&qq, 0.5, mode).unwrap().0
                    };
                    let fd = (perturb(h) - perturb(-h)) / (2.0 * h);
                    let an = grads[i];
                    let rel = (an - fd).abs() / (an.abs() + fd.abs()).max(1e-8);
                    max_rel = max_rel.max(rel);
                }
            }
            assert!(max_rel < 1e-4, "{mode:?} max rel err {max_rel}");
        }
    }

    #[test]
    fn transwarp_rejects_bad_tau_and_mismatched_vectors() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let q = rand_quad(&mut rng, 4, 4);
        assert!(transwarp_loss(&q, 0.0, TauMode::Printed).is_err());
        assert!(transwarp_loss(&q, -1.0, TauMode::Printed).is_err());
        assert!(transwarp_loss(&q, f64::NAN, TauMode::Printed).is_err());
        let mut bad = q;
        bad.z_t.pop();
        assert!(transwarp_loss(&bad, 0.5, TauMode::Printed).is_err());
    }

    #[test]
    fn total_loss_weighting() {
        let w = LossWeights::default();
        assert!((w.lambda1, w.lambda2, w.lambda3) == (0.8, 0.1, 0.1));
        let v = total_loss(1.0, 2.0, 3.0, &w);
        assert!((v - (0.8 + 0.2 + 0.3)).abs() < 1e-15);
        let zero = LossWeights { lambda1: 1.0, lambda2: 0.0, lambda3: 0.0 };
        assert_eq!(total_loss(0.7, 9.9, -4.0, &zero), 0.7);
        assert!(LossWeights { lambda1: -0.1, ..w }.validate().is_err());
    }
}
