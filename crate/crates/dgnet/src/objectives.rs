//! Loss terms and their weighting.
//!
//! Reconstruction terms are mean absolute differences; identity terms are
//! cross-entropy over per-head logits; the teacher-matching term is a KL
//! divergence with the teacher's distribution held constant; the
//! adversarial game uses logit outputs with the softplus (non-saturating)
//! parameterization, summed over discriminator scales; and the
//! discriminator is regularized by an R1 gradient penalty on real inputs,
//! which differentiates the score a second time through the same tape.

use autograd::{NodeId, Tape};
use ndarray::{ArrayD, IxDyn};

use crate::config::LossCfg;
use crate::data::LUMA;

/// Mean absolute difference over all elements.
pub fn l1_loss(t: &mut Tape, a: NodeId, b: NodeId) -> NodeId {
    assert_eq!(t.shape(a), t.shape(b), "l1 operands must match");
    let d = t.sub(a, b);
    let ad = t.abs(d);
    t.mean_all(ad)
}

/// Mean negative log-likelihood of `labels` under softmax of `logits`.
pub fn cross_entropy(t: &mut Tape, logits: NodeId, labels: &[usize]) -> NodeId {
    let sh = t.shape(logits).to_vec();
    assert_eq!(sh.len(), 2, "logits must be [N, K]");
    let (n, k) = (sh[0], sh[1]);
    assert_eq!(labels.len(), n, "one label per row");
    let mut pick = ArrayD::<f64>::zeros(IxDyn(&[n, k]));
    for (i, &y) in labels.iter().enumerate() {
        assert!(y < k, "label {} out of range for {} classes", y, k);
        pick[[i, y]] = -1.0 / n as f64;
    }
    let ls = t.log_softmax(logits, 1);
    let mask = t.constant(pick);
    let prod = t.mul(ls, mask);
    t.sum_all(prod)
}

/// KL(q || p) with q = softmax of the teacher's logits (a constant) and
/// p = softmax of the student's logits; mean over the batch.
pub fn kl_to_teacher(t: &mut Tape, student_logits: NodeId, teacher_logits: &ArrayD<f64>) -> NodeId {
    let sh = t.shape(student_logits).to_vec();
    assert_eq!(sh.as_slice(), teacher_logits.shape(), "logit shapes must match");
    let (n, k) = (sh[0], sh[1]);

    // q rows and the constant Σ q ln q part (0·ln 0 taken as 0).
    let mut q = ArrayD::<f64>::zeros(IxDyn(&[n, k]));
    let mut entropy_part = 0.0;
    for i in 0..n {
        let row: Vec<f64> = (0..k).map(|j| teacher_logits[[i, j]]).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        for j in 0..k {
            let qj = exps[j] / z;
            q[[i, j]] = -qj / n as f64;
            if qj > 0.0 {
                entropy_part += qj * qj.ln() / n as f64;
            }
        }
    }
    let ls = t.log_softmax(student_logits, 1);
    let qc = t.constant(q);
    let prod = t.mul(ls, qc);
    let cross = t.sum_all(prod);
    t.add_scalar(cross, entropy_part)
}

/// Discriminator objective over per-scale logit maps: for each scale, mean
/// softplus(-real) + mean softplus(fake); scales are summed. Probability
/// one-half everywhere gives 2 ln 2 per scale.
pub fn adv_d(t: &mut Tape, real_maps: &[NodeId], fake_maps: &[NodeId]) -> NodeId {
    assert_eq!(real_maps.len(), fake_maps.len());
    let mut acc: Option<NodeId> = None;
    for (&r, &f) in real_maps.iter().zip(fake_maps.iter()) {
        let nr = t.neg(r);
        let sr = t.softplus(nr);
        let mr = t.mean_all(sr);
        let sf = t.softplus(f);
        let mf = t.mean_all(sf);
        let term = t.add(mr, mf);
        acc = Some(match acc {
            None => term,
            Some(a) => t.add(a, term),
        });
    }
    acc.expect("at least one scale")
}

/// Non-saturating generator objective: mean softplus(-fake) per scale,
/// summed over scales.
pub fn adv_g(t: &mut Tape, fake_maps: &[NodeId]) -> NodeId {
    let mut acc: Option<NodeId> = None;
    for &f in fake_maps {
        let nf = t.neg(f);
        let sf = t.softplus(nf);
        let m = t.mean_all(sf);
        acc = Some(match acc {
            None => m,
            Some(a) => t.add(a, m),
        });
    }
    acc.expect("at least one scale")
}

/// R1 penalty: (gamma/2) times the batch mean of the squared input-gradient
/// norm of `score_sum` (the summed discriminator logits) at the real batch
/// `x`. The returned node participates in further differentiation.
pub fn r1_penalty(t: &mut Tape, score_sum: NodeId, x: NodeId, gamma: f64) -> NodeId {
    let grads = t.backward(score_sum, &[x]);
    let gx = grads
        .get(x)
        .expect("real batch must be registered as a differentiable input");
    let sq = t.square(gx);
    let per_sample = t.sum_axes(sq, &[1, 2, 3]);
    let mean = t.mean_all(per_sample);
    t.scale(mean, gamma * 0.5)
}

/// In-graph luminance, `[N,3,H,W]` to `[N,1,H,W]`; gradients flow to all
/// three channels with the luma weights.
pub fn tape_grayscale(t: &mut Tape, img: NodeId) -> NodeId {
    assert_eq!(t.shape(img)[1], 3, "grayscale expects 3 channels");
    let r = t.slice_axis(img, 1, 0, 1);
    let g = t.slice_axis(img, 1, 1, 1);
    let b = t.slice_axis(img, 1, 2, 1);
    let rw = t.scale(r, LUMA[0]);
    let gw = t.scale(g, LUMA[1]);
    let bw = t.scale(b, LUMA[2]);
    let rg = t.add(rw, gw);
    t.add(rg, bw)
}

/// Effective loss weights at an iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Weights {
    pub lambda_img: f64,
    pub lambda_id: f64,
    pub lambda_prim: f64,
    pub lambda_fine: f64,
}

/// Identity-learning terms ramp in linearly after generation has had time
/// to stabilize: zero before `warmup_start`, full after `warmup_start +
/// warmup_len`, with `lambda_fine = alpha * lambda_prim` throughout.
pub fn weights_at(iter: u64, cfg: &LossCfg) -> Weights {
    let prim = if iter <= cfg.warmup_start {
        0.0
    } else if iter >= cfg.warmup_start + cfg.warmup_len {
        cfg.lambda_prim
    } else {
        cfg.lambda_prim * (iter - cfg.warmup_start) as f64 / cfg.warmup_len as f64
    };
    Weights {
        lambda_img: cfg.lambda_img,
        lambda_id: cfg.lambda_id,
        lambda_prim: prim,
        lambda_fine: cfg.alpha * prim,
    }
}

/// Weighted sum of the objective's parts (scalar mirror of the tape-side
/// combination): lambda_img*img_recon + code_recon + id_self +
/// lambda_id*id_cross + adv + lambda_prim*prim + lambda_fine*fine.
pub fn total_of(
    w: &Weights,
    img_recon: f64,
    code_recon: f64,
    id_self: f64,
    id_cross: f64,
    adv: f64,
    prim: f64,
    fine: f64,
) -> f64 {
    w.lambda_img * img_recon
        + code_recon
        + id_self
        + w.lambda_id * id_cross
        + adv
        + w.lambda_prim * prim
        + w.lambda_fine * fine
}

/// Generator-phase loss nodes prior to weighting. `prim`/`fine` are absent
/// before the warmup gate opens.
pub struct GenNodes {
    pub img_self: NodeId,
    pub img_cross: NodeId,
    pub code_a: NodeId,
    pub code_s: NodeId,
    pub id_self: NodeId,
    pub id_cross: NodeId,
    pub adv_g: NodeId,
    pub prim: Option<NodeId>,
    pub fine: Option<NodeId>,
}

/// Combine the generator-phase nodes under `w` into one scalar node.
pub fn total_gen(t: &mut Tape, n: &GenNodes, w: &Weights) -> NodeId {
    let img = t.add(n.img_self, n.img_cross);
    let img_w = t.scale(img, w.lambda_img);
    let code = t.add(n.code_a, n.code_s);
    let idc = t.scale(n.id_cross, w.lambda_id);
    let mut total = t.add(img_w, code);
    total = t.add(total, n.id_self);
    total = t.add(total, idc);
    total = t.add(total, n.adv_g);
    if let Some(p) = n.prim {
        let pw = t.scale(p, w.lambda_prim);
        total = t.add(total, pw);
    }
    if let Some(f) = n.fine {
        let fw = t.scale(f, w.lambda_fine);
        total = t.add(total, fw);
    }
    total
}

/// Per-iteration scalar record of every term. Generator-phase entries are
/// always present; discriminator-phase entries are filled by its step.
#[derive(Clone, Debug, Default)]
pub struct LossReport {
    pub img_self: f64,
    pub img_cross: f64,
    pub code_a: f64,
    pub code_s: f64,
    pub id_self: f64,
    pub id_cross: f64,
    pub adv_g: f64,
    pub prim: f64,
    pub fine: f64,
    pub lambda_prim: f64,
    pub lambda_fine: f64,
    pub total: f64,
    pub adv_d: f64,
    pub r1: f64,
    pub code_a_d: f64,
    pub code_s_d: f64,
    pub d_total: f64,
}

impl LossReport {
    /// The Eq-10-style invariant: the recorded total must re-derive from
    /// the recorded parts.
    pub fn total_consistent(&self, w: &Weights) -> bool {
        let re = total_of(
            w,
            self.img_self + self.img_cross,
            self.code_a + self.code_s,
            self.id_self,
            self.id_cross,
            self.adv_g,
            self.prim,
            self.fine,
        );
        (re - self.total).abs() <= 1e-6 * self.total.abs().max(1.0)
    }

    /// Metrics-log lines: `iter<TAB>term<TAB>value`.
    pub fn lines(&self, iter: u64) -> Vec<String> {
        let pairs: [(&str, f64); 17] = [
            ("img_self", self.img_self),
            ("img_cross", self.img_cross),
            ("code_a", self.code_a),
            ("code_s", self.code_s),
            ("id_self", self.id_self),
            ("id_cross", self.id_cross),
            ("adv_g", self.adv_g),
            ("prim", self.prim),
            ("fine", self.fine),
            ("lambda_prim", self.lambda_prim),
            ("lambda_fine", self.lambda_fine),
            ("total", self.total),
            ("adv_d", self.adv_d),
            ("r1", self.r1),
            ("code_a_d", self.code_a_d),
            ("code_s_d", self.code_s_d),
            ("d_total", self.d_total),
        ];
        pairs.iter().map(|(k, v)| format!("{}\t{}\t{}", iter, k, v)).collect()
    }

    pub fn non_finite_terms(&self) -> Vec<&'static str> {
        let mut bad = Vec::new();
        for (name, v) in [
            ("img_self", self.img_self),
            ("img_cross", self.img_cross),
            ("code_a", self.code_a),
            ("code_s", self.code_s),
            ("id_self", self.id_self),
            ("id_cross", self.id_cross),
            ("adv_g", self.adv_g),
            ("prim", self.prim),
            ("fine", self.fine),
            ("total", self.total),
            ("adv_d", self.adv_d),
            ("r1", self.r1),
            ("code_a_d", self.code_a_d),
            ("code_s_d", self.code_s_d),
            ("d_total", self.d_total),
        ] {
            if !v.is_finite() {
                bad.push(name);
            }
        }
        bad
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;

    #[test]
    fn unit_terms_weighted_sum() {
        let w = Weights { lambda_img: 5.0, lambda_id: 0.5, lambda_prim: 2.0, lambda_fine: 0.4 };
        let total = total_of(&w, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0);
        assert!((total - 10.9).abs() < 1e-12);
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let cfg = Config::full().loss;
        let at = |i| weights_at(i, &cfg);
        assert_eq!((at(30000).lambda_prim, at(30000).lambda_fine), (0.0, 0.0));
        assert_eq!((at(32000).lambda_prim, at(32000).lambda_fine), (1.0, 0.2));
        assert_eq!((at(34000).lambda_prim, at(34000).lambda_fine), (2.0, 0.4));
        assert_eq!(at(0).lambda_prim, 0.0);
        assert_eq!(at(1_000_000).lambda_prim, 2.0);
        assert_eq!(at(31000).lambda_img, 5.0);
        assert_eq!(at(31000).lambda_id, 0.5);
    }

    #[test]
    fn schedule_is_monotone_over_warmup() {
        let cfg = Config::desk().loss;
        let mut prev = -1.0;
        for i in 0..(cfg.warmup_start + cfg.warmup_len + 50) {
            let w = weights_at(i, &cfg);
            assert!(w.lambda_prim >= prev);
            assert!((w.lambda_fine - cfg.alpha * w.lambda_prim).abs() < 1e-15);
            prev = w.lambda_prim;
        }
    }

    #[test]
    fn grayscale_on_tape_matches_data_path() {
        use ndarray::IxDyn;
        let mut t = Tape::new();
        let mut arr = ArrayD::<f64>::zeros(IxDyn(&[2, 3, 4, 3]));
        for (i, v) in arr.iter_mut().enumerate() {
            *v = (i as f64 * 0.713).sin().abs();
        }
        let x = t.constant(arr.clone());
        let g = tape_grayscale(&mut t, x);
        let expect = crate::data::grayscale(&arr.into_dimensionality().unwrap());
        let got = t.data(g);
        assert_eq!(got.shape(), &[2, 1, 4, 3]);
        for (a, b) in got.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
