//! Closed-form values, gradients, and invariants of the loss layer.

mod common;

use autograd::nn::{param_grads, Param};
use autograd::Tape;
use common::{rand_tensor, rel_err};
use dgnet::config::Config;
use dgnet::objectives::{
    adv_d, adv_g, cross_entropy, kl_to_teacher, l1_loss, r1_penalty, total_gen, total_of,
    weights_at, GenNodes, LossReport, Weights,
};
use ndarray::{ArrayD, IxDyn};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

const LN2: f64 = std::f64::consts::LN_2;

fn scalar(t: &Tape, id: autograd::NodeId) -> f64 {
    let d = t.data(id);
    assert_eq!(d.len(), 1);
    d[[0]]
}

#[test]
fn identical_images_reconstruct_at_zero_cost() {
    let mut rng = ChaCha12Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, &[2, 3, 8, 4], 0.0, 1.0);
    let mut t = Tape::new();
    let a = t.constant(x.clone());
    let b = t.constant(x);
    let l = l1_loss(&mut t, a, b);
    assert_eq!(scalar(&t, l), 0.0);
}

#[test]
fn uniform_logits_cost_ln_k() {
    for k in [2usize, 3, 7, 751] {
        let mut t = Tape::new();
        let z = t.constant(ArrayD::zeros(IxDyn(&[4, k])));
        let labels = [0usize, k - 1, k / 2, 0];
        let l = cross_entropy(&mut t, z, &labels);
        assert!(
            (scalar(&t, l) - (k as f64).ln()).abs() < 1e-9,
            "k={k}: got {}",
            scalar(&t, l)
        );
    }
}

#[test]
fn one_hot_teacher_against_uniform_student_costs_ln_two() {
    // Teacher mass entirely on class 0 (the second logit underflows to
    // zero probability), student exactly uniform over two classes.
    let mut t = Tape::new();
    let student = t.constant(ArrayD::zeros(IxDyn(&[3, 2])));
    let mut teacher = ArrayD::zeros(IxDyn(&[3, 2]));
    for i in 0..3 {
        teacher[[i, 1]] = -1e9;
    }
    let l = kl_to_teacher(&mut t, student, &teacher);
    assert!((scalar(&t, l) - LN2).abs() < 1e-9);
}

#[test]
fn matching_distributions_have_zero_divergence() {
    let mut rng = ChaCha12Rng::seed_from_u64(21);
    let logits = rand_tensor(&mut rng, &[4, 6], -5.0, 5.0);
    let mut t = Tape::new();
    let s = t.constant(logits.clone());
    let l = kl_to_teacher(&mut t, s, &logits);
    assert!(scalar(&t, l).abs() < 1e-12);
}

#[test]
fn indifferent_discriminator_costs_two_ln_two_per_scale() {
    for scales in [1usize, 2, 3] {
        let mut t = Tape::new();
        let maps: Vec<_> = (0..scales)
            .map(|s| t.constant(ArrayD::zeros(IxDyn(&[2, 1, 4 >> s, 2]))))
            .collect();
        let d = adv_d(&mut t, &maps, &maps);
        let g = adv_g(&mut t, &maps);
        assert!((scalar(&t, d) - 2.0 * LN2 * scales as f64).abs() < 1e-9);
        assert!((scalar(&t, g) - LN2 * scales as f64).abs() < 1e-9);
    }
}

#[test]
fn unit_terms_combine_to_ten_point_nine() {
    let w = Weights { lambda_img: 5.0, lambda_id: 0.5, lambda_prim: 2.0, lambda_fine: 0.4 };
    assert!((total_of(&w, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0) - 10.9).abs() < 1e-9);

    // The tape-side combination agrees: every part contributes 1.0, but
    // split so that img and code each arrive in two halves.
    let mut t = Tape::new();
    let half = t.constant(ArrayD::from_elem(IxDyn(&[1]), 0.5));
    let one = t.constant(ArrayD::from_elem(IxDyn(&[1]), 1.0));
    let nodes = GenNodes {
        img_self: half,
        img_cross: half,
        code_a: half,
        code_s: half,
        id_self: one,
        id_cross: one,
        adv_g: one,
        prim: Some(one),
        fine: Some(one),
    };
    let total = total_gen(&mut t, &nodes, &w);
    assert!((scalar(&t, total) - 10.9).abs() < 1e-9);
}

#[test]
fn warmup_gate_omits_teacher_terms_from_the_total() {
    let w = Weights { lambda_img: 5.0, lambda_id: 0.5, lambda_prim: 0.0, lambda_fine: 0.0 };
    let mut t = Tape::new();
    let one = t.constant(ArrayD::from_elem(IxDyn(&[1]), 1.0));
    let nodes = GenNodes {
        img_self: one,
        img_cross: one,
        code_a: one,
        code_s: one,
        id_self: one,
        id_cross: one,
        adv_g: one,
        prim: None,
        fine: None,
    };
    let total = total_gen(&mut t, &nodes, &w);
    // 5*(1+1) + (1+1) + 1 + 0.5 + 1 = 14.5
    assert!((scalar(&t, total) - 14.5).abs() < 1e-9);
    assert!(
        (total_of(&w, 2.0, 2.0, 1.0, 1.0, 1.0, 0.0, 0.0) - scalar(&t, total)).abs() < 1e-12
    );
}

#[test]
fn linear_scorer_matches_r1_closed_form() {
    // score_sum = c * sum(x) has d(score)/dx = c everywhere, so the
    // penalty is (gamma/2) * c^2 * C*H*W independent of x.
    let mut rng = ChaCha12Rng::seed_from_u64(31);
    let x = rand_tensor(&mut rng, &[2, 3, 4, 5], -1.0, 1.0);
    let mut t = Tape::new();
    let xin = t.input(x);
    let s = t.sum_all(xin);
    let score = t.scale(s, 3.0);
    let pen = r1_penalty(&mut t, score, xin, 10.0);
    let expect = 5.0 * 9.0 * (3 * 4 * 5) as f64;
    assert!((scalar(&t, pen) - expect).abs() < 1e-9 * expect);
}

#[test]
fn r1_penalty_backpropagates_into_scorer_weights() {
    // score_sum = w * sum(x): penalty = (gamma/2) w^2 CHW, so
    // d(penalty)/dw = gamma * w * CHW. The analytic gradient from the
    // tape must match both the closed form and finite differences.
    let gamma = 10.0;
    let chw = (3 * 4 * 5) as f64;
    let w0 = 0.8;
    let p = Param::new(ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), w0));
    let mut rng = ChaCha12Rng::seed_from_u64(41);
    let x = rand_tensor(&mut rng, &[2, 3, 4, 5], -1.0, 1.0);

    let eval = |p: &Param, x: &ArrayD<f64>| -> (f64, Option<f64>) {
        let mut t = Tape::new();
        let xin = t.input(x.clone());
        let wn = t.param(p);
        let xw = t.mul(xin, wn);
        let score = t.sum_all(xw);
        let pen = r1_penalty(&mut t, score, xin, gamma);
        let grads = t.backward(pen, &[wn]);
        let gw = grads.get(wn).map(|g| t.data(g)[[0, 0, 0, 0]]);
        (t.data(pen)[[0]], gw)
    };

    let (val, gw) = eval(&p, &x);
    assert!((val - 0.5 * gamma * w0 * w0 * chw).abs() < 1e-9);
    let gw = gw.expect("penalty must be differentiable in the scorer");
    assert!((gw - gamma * w0 * chw).abs() < 1e-6);

    let fd = common::fd_param(&p, 0, 1e-4, || eval(&p, &x).0);
    assert!(rel_err(gw, fd) < 1e-6, "analytic {gw} vs fd {fd}");
}

#[test]
fn classifier_gradient_matches_finite_differences() {
    let mut rng = ChaCha12Rng::seed_from_u64(51);
    let p = Param::new(rand_tensor(&mut rng, &[3, 5], -2.0, 2.0));
    let labels = [0usize, 3, 4];
    let eval = |p: &Param| -> (f64, Vec<f64>) {
        let mut t = Tape::new();
        let z = t.param(p);
        let l = cross_entropy(&mut t, z, &labels);
        let grads = t.backward(l, &[z]);
        let g = param_grads(&t, &grads, std::slice::from_ref(p))[0]
            .clone()
            .unwrap();
        (t.data(l)[[0]], g.iter().cloned().collect())
    };
    let (_, analytic) = eval(&p);
    for idx in [0usize, 3, 7, 14] {
        let fd = common::fd_param(&p, idx, 1e-5, || eval(&p).0);
        assert!(
            rel_err(analytic[idx], fd) < 1e-6,
            "idx {idx}: analytic {} vs fd {fd}",
            analytic[idx]
        );
    }
}

#[test]
fn teacher_matching_gradient_matches_finite_differences() {
    let mut rng = ChaCha12Rng::seed_from_u64(61);
    let p = Param::new(rand_tensor(&mut rng, &[2, 4], -3.0, 3.0));
    let teacher = rand_tensor(&mut rng, &[2, 4], -3.0, 3.0);
    let eval = |p: &Param| -> (f64, Vec<f64>) {
        let mut t = Tape::new();
        let z = t.param(p);
        let l = kl_to_teacher(&mut t, z, &teacher);
        let grads = t.backward(l, &[z]);
        let g = param_grads(&t, &grads, std::slice::from_ref(p))[0]
            .clone()
            .unwrap();
        (t.data(l)[[0]], g.iter().cloned().collect())
    };
    let (_, analytic) = eval(&p);
    for idx in 0..8 {
        let fd = common::fd_param(&p, idx, 1e-5, || eval(&p).0);
        assert!(
            rel_err(analytic[idx], fd) < 1e-6,
            "idx {idx}: analytic {} vs fd {fd}",
            analytic[idx]
        );
    }
}

#[test]
fn adversarial_gradients_match_finite_differences() {
    let mut rng = ChaCha12Rng::seed_from_u64(71);
    let fake = Param::new(rand_tensor(&mut rng, &[2, 1, 3, 2], -2.0, 2.0));
    let real = rand_tensor(&mut rng, &[2, 1, 3, 2], -2.0, 2.0);

    let eval_d = |p: &Param| -> (f64, Vec<f64>) {
        let mut t = Tape::new();
        let f = t.param(p);
        let r = t.constant(real.clone());
        let l = adv_d(&mut t, &[r], &[f]);
        let grads = t.backward(l, &[f]);
        let g = param_grads(&t, &grads, std::slice::from_ref(p))[0]
            .clone()
            .unwrap();
        (t.data(l)[[0]], g.iter().cloned().collect())
    };
    let (_, ga) = eval_d(&fake);
    for idx in [0usize, 5, 11] {
        let fd = common::fd_param(&fake, idx, 1e-5, || eval_d(&fake).0);
        assert!(rel_err(ga[idx], fd) < 1e-6);
    }

    let eval_g = |p: &Param| -> (f64, Vec<f64>) {
        let mut t = Tape::new();
        let f = t.param(p);
        let l = adv_g(&mut t, &[f]);
        let grads = t.backward(l, &[f]);
        let g = param_grads(&t, &grads, std::slice::from_ref(p))[0]
            .clone()
            .unwrap();
        (t.data(l)[[0]], g.iter().cloned().collect())
    };
    let (_, ga) = eval_g(&fake);
    for idx in [0usize, 5, 11] {
        let fd = common::fd_param(&fake, idx, 1e-5, || eval_g(&fake).0);
        assert!(rel_err(ga[idx], fd) < 1e-6);
    }
}

#[test]
fn divergence_is_nonnegative_over_random_pairs() {
    let mut rng = ChaCha12Rng::seed_from_u64(81);
    for _ in 0..1000 {
        let teacher = rand_tensor(&mut rng, &[2, 5], -8.0, 8.0);
        let student = rand_tensor(&mut rng, &[2, 5], -8.0, 8.0);
        let mut t = Tape::new();
        let s = t.constant(student);
        let l = kl_to_teacher(&mut t, s, &teacher);
        assert!(scalar(&t, l) >= -1e-12);
    }
}

#[test]
fn ramp_is_continuous_and_piecewise_linear() {
    let cfg = Config::desk().loss;
    let max_step = cfg.lambda_prim / cfg.warmup_len as f64 + 1e-12;
    let mut prev = weights_at(0, &cfg).lambda_prim;
    for i in 1..(cfg.warmup_start + cfg.warmup_len + 20) {
        let cur = weights_at(i, &cfg).lambda_prim;
        assert!(cur - prev >= -1e-15 && cur - prev <= max_step);
        prev = cur;
    }
    let quarter = weights_at(cfg.warmup_start + cfg.warmup_len / 4, &cfg);
    assert!((quarter.lambda_prim - cfg.lambda_prim * 0.25).abs() < 1e-12);
}

#[test]
fn report_total_consistency_detects_tampering() {
    let w = Weights { lambda_img: 5.0, lambda_id: 0.5, lambda_prim: 2.0, lambda_fine: 0.4 };
    let mut r = LossReport {
        img_self: 0.5,
        img_cross: 0.5,
        code_a: 0.5,
        code_s: 0.5,
        id_self: 1.0,
        id_cross: 1.0,
        adv_g: 1.0,
        prim: 1.0,
        fine: 1.0,
        lambda_prim: 2.0,
        lambda_fine: 0.4,
        ..Default::default()
    };
    r.total = 10.9;
    assert!(r.total_consistent(&w));
    r.total = 11.2;
    assert!(!r.total_consistent(&w));
}

#[test]
fn report_lines_carry_iteration_term_and_value() {
    let r = LossReport { img_self: 0.25, ..Default::default() };
    let lines = r.lines(42);
    assert_eq!(lines[0], "42\timg_self\t0.25");
    assert!(lines.iter().all(|l| l.split('\t').count() == 3));
    assert!(lines.iter().any(|l| l.contains("\tlambda_prim\t")));
    assert!(lines.iter().any(|l| l.contains("\td_total\t")));
}

#[test]
fn non_finite_terms_are_named() {
    let r = LossReport { adv_d: f64::NAN, r1: f64::INFINITY, ..Default::default() };
    assert_eq!(r.non_finite_terms(), vec!["adv_d", "r1"]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn prop_cross_entropy_is_nonnegative(
        vals in proptest::collection::vec(-10.0f64..10.0, 12),
        label in 0usize..4,
    ) {
        let mut t = Tape::new();
        let z = t.constant(ArrayD::from_shape_vec(IxDyn(&[3, 4]), vals).unwrap());
        let l = cross_entropy(&mut t, z, &[label, label, label]);
        prop_assert!(scalar(&t, l) >= 0.0);
    }

    #[test]
    fn prop_ramp_stays_in_band(iter in 0u64..1_000_000) {
        let cfg = Config::full().loss;
        let w = weights_at(iter, &cfg);
        prop_assert!(w.lambda_prim >= 0.0 && w.lambda_prim <= cfg.lambda_prim);
        prop_assert!((w.lambda_fine - cfg.alpha * w.lambda_prim).abs() < 1e-12);
    }

    #[test]
    fn prop_total_is_affine_in_each_term(
        base in 0.0f64..3.0,
        delta in 0.0f64..2.0,
    ) {
        let w = Weights { lambda_img: 5.0, lambda_id: 0.5, lambda_prim: 2.0, lambda_fine: 0.4 };
        let t0 = total_of(&w, base, base, base, base, base, base, base);
        let t1 = total_of(&w, base + delta, base, base, base, base, base, base);
        prop_assert!((t1 - t0 - w.lambda_img * delta).abs() < 1e-9);
        let t2 = total_of(&w, base, base, base, base + delta, base, base, base);
        prop_assert!((t2 - t0 - w.lambda_id * delta).abs() < 1e-9);
    }
}
