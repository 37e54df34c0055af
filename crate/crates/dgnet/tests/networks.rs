//! Network geometry and behavior checks: code extents at full scale,
//! adaptive pooling invariance, sample independence of the convolutional
//! paths, head independence, and gradient flow through the composed
//! generator.

mod common;

use autograd::Tape;
use common::{rand_tensor, tiny_config};
use dgnet::config::Config;
use dgnet::model::{seeded, streams, JointModel};
use dgnet::nets::Teacher;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn forward_code_shape(cfg: &Config, in_hw: (usize, usize)) -> Vec<usize> {
    let model = JointModel::new(cfg, 8);
    let mut t = Tape::new();
    let mut rng = ChaCha12Rng::seed_from_u64(1);
    let x = t.constant(rand_tensor(&mut rng, &[1, 3, in_hw.0, in_hw.1], 0.0, 1.0));
    let code = model.ea.encode(&mut t, x, false);
    t.shape(code).to_vec()
}

#[test]
fn full_scale_appearance_code_is_2048x4x1() {
    let cfg = Config::full();
    assert_eq!(forward_code_shape(&cfg, (256, 128)), vec![1, 2048, 4, 1]);
}

#[test]
fn appearance_code_extent_is_input_independent() {
    // Adaptive pooling pins the code extent even at half-size input.
    let cfg = Config::full();
    assert_eq!(forward_code_shape(&cfg, (128, 64)), vec![1, 2048, 4, 1]);
}

#[test]
fn full_scale_structure_code_and_generation_shapes() {
    let cfg = Config::full();
    let model = JointModel::new(&cfg, 8);
    let mut rng = ChaCha12Rng::seed_from_u64(2);
    let mut t = Tape::new();

    let gray = t.constant(rand_tensor(&mut rng, &[1, 1, 256, 128], 0.0, 1.0));
    let s = model.es.encode(&mut t, gray);
    assert_eq!(t.shape(s), &[1, 128, 64, 32]);

    let x = t.constant(rand_tensor(&mut rng, &[1, 3, 256, 128], 0.0, 1.0));
    let a = model.ea.encode(&mut t, x, false);
    let img = model.g.decode(&mut t, a, s);
    assert_eq!(t.shape(img), &[1, 3, 256, 128]);

    let maps = model.d.forward(&mut t, img);
    let shapes: Vec<Vec<usize>> = maps.iter().map(|&m| t.shape(m).to_vec()).collect();
    assert_eq!(
        shapes,
        vec![vec![1, 1, 64, 32], vec![1, 1, 32, 16], vec![1, 1, 16, 8]]
    );

    // Generated pixels stay in the decoder's bounded output range.
    let vals = t.value(img);
    assert!(vals.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn desk_input_through_full_structure_encoder_quarters_extent() {
    let cfg = Config::full();
    let model = JointModel::new(&cfg, 4);
    let mut rng = ChaCha12Rng::seed_from_u64(3);
    let mut t = Tape::new();
    let gray = t.constant(rand_tensor(&mut rng, &[1, 1, 64, 32], 0.0, 1.0));
    let s = model.es.encode(&mut t, gray);
    assert_eq!(t.shape(s), &[1, 128, 16, 8]);
}

#[test]
fn batching_matches_single_item_processing() {
    // Instance/layer-normalized paths and the eval-mode appearance encoder
    // must treat batch items independently.
    let cfg = tiny_config();
    let model = JointModel::new(&cfg, 4);
    let mut rng = ChaCha12Rng::seed_from_u64(4);
    let (h, w) = (cfg.data.height, cfg.data.width);

    let batch = rand_tensor(&mut rng, &[3, 3, h, w], 0.0, 1.0);
    let gray = rand_tensor(&mut rng, &[3, 1, h, w], 0.0, 1.0);

    let mut t = Tape::new();
    let xb = t.constant(batch.clone());
    let gb = t.constant(gray.clone());
    let ab = model.ea.encode(&mut t, xb, false);
    let sb = model.es.encode(&mut t, gb);
    let ib = model.g.decode(&mut t, ab, sb);
    let scores_b = model.d.forward(&mut t, ib);
    let img_batch = t.data(ib);
    let score_batch = t.data(scores_b[0]);

    for n in 0..3 {
        let mut t1 = Tape::new();
        let x1 = t1.constant(
            batch
                .slice(ndarray::s![n..n + 1, .., .., ..])
                .to_owned()
                .into_dyn(),
        );
        let g1 = t1.constant(
            gray
                .slice(ndarray::s![n..n + 1, .., .., ..])
                .to_owned()
                .into_dyn(),
        );
        let a1 = model.ea.encode(&mut t1, x1, false);
        let s1 = model.es.encode(&mut t1, g1);
        let i1 = model.g.decode(&mut t1, a1, s1);
        let sc1 = model.d.forward(&mut t1, i1);
        let img_one = t1.data(i1);
        let score_one = t1.data(sc1[0]);

        let img_slice = img_batch.slice(ndarray::s![n..n + 1, .., .., ..].as_ref());
        for (a, b) in img_slice.iter().zip(img_one.iter()) {
            assert!((a - b).abs() < 1e-5, "decoder couples batch items: {} vs {}", a, b);
        }
        let sc_slice = score_batch.slice(ndarray::s![n..n + 1, .., .., ..].as_ref());
        for (a, b) in sc_slice.iter().zip(score_one.iter()) {
            assert!((a - b).abs() < 1e-5, "discriminator couples batch items");
        }
    }
}

#[test]
fn feature_heads_have_disjoint_parameters() {
    let cfg = tiny_config();
    let model = JointModel::new(&cfg, 4);
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[2, 3, cfg.data.height, cfg.data.width], 0.0, 1.0);

    let run = |m: &JointModel| {
        let mut t = Tape::new();
        let xn = t.constant(x.clone());
        let code = m.ea.encode(&mut t, xn, false);
        let (fp, ff) = m.ea.project(&mut t, code);
        (t.data(fp), t.data(ff))
    };
    let (p0, f0) = run(&model);

    // Perturb the primary head; the fine feature must not move.
    let mut w = model.ea.head_prim.w.to_owned_array();
    w[[0, 0]] += 1.0;
    model.ea.head_prim.w.set_value(w);
    let (p1, f1) = run(&model);

    assert!(p0.iter().zip(p1.iter()).any(|(a, b)| (a - b).abs() > 1e-9));
    assert!(f0.iter().zip(f1.iter()).all(|(a, b)| a == b));
}

#[test]
fn single_class_softmax_is_one() {
    let cfg = tiny_config();
    let model = JointModel::new(&cfg, 1);
    let mut rng = ChaCha12Rng::seed_from_u64(6);
    let mut t = Tape::new();
    let x = t.constant(rand_tensor(&mut rng, &[2, 3, cfg.data.height, cfg.data.width], 0.0, 1.0));
    let code = model.ea.encode(&mut t, x, false);
    let (fp, _) = model.ea.project(&mut t, code);
    let logits = model.ea.logits_prim(&mut t, fp);
    assert_eq!(t.shape(logits), &[2, 1]);
    let ls = t.log_softmax(logits, 1);
    for v in t.value(ls).iter() {
        assert!(v.abs() < 1e-12, "sole class must get probability 1");
    }
}

#[test]
fn structure_controls_layout_appearance_held_fixed() {
    let cfg = tiny_config();
    let model = JointModel::new(&cfg, 4);
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    let (h, w) = (cfg.data.height, cfg.data.width);
    let mut t = Tape::new();
    let x = t.constant(rand_tensor(&mut rng, &[1, 3, h, w], 0.0, 1.0));
    let a = model.ea.encode(&mut t, x, false);
    let g1 = t.constant(rand_tensor(&mut rng, &[1, 1, h, w], 0.0, 1.0));
    let g2 = t.constant(rand_tensor(&mut rng, &[1, 1, h, w], 0.0, 1.0));
    let s1 = model.es.encode(&mut t, g1);
    let s2 = model.es.encode(&mut t, g2);
    let i1 = model.g.decode(&mut t, a, s1);
    let i2 = model.g.decode(&mut t, a, s2);
    let d1 = t.data(i1);
    let d2 = t.data(i2);
    let diff: f64 = d1.iter().zip(d2.iter()).map(|(a, b)| (a - b).abs()).sum();
    assert!(diff > 1e-6, "different structure codes must change the output");
}

#[test]
fn zero_variance_input_stays_finite_through_structure_encoder() {
    let cfg = tiny_config();
    let model = JointModel::new(&cfg, 4);
    let mut t = Tape::new();
    let gray = t.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[1, 1, cfg.data.height, cfg.data.width])));
    let s = model.es.encode(&mut t, gray);
    assert!(t.value(s).iter().all(|v| v.is_finite()));
}

#[test]
fn teacher_forward_shapes_and_feature_dim() {
    let cfg = tiny_config();
    let teacher = Teacher::new(&mut seeded(9, streams::TEACHER), &cfg.model.teacher, 4);
    let mut rng = ChaCha12Rng::seed_from_u64(8);
    let mut t = Tape::new();
    let x = t.constant(rand_tensor(&mut rng, &[2, 3, cfg.data.height, cfg.data.width], 0.0, 1.0));
    let f = teacher.features(&mut t, x, false);
    assert_eq!(t.shape(f), &[2, 16]);
    let logits = teacher.logits(&mut t, x, false);
    assert_eq!(t.shape(logits), &[2, 4]);
}

#[test]
fn same_seed_reconstructs_identical_networks() {
    let cfg = tiny_config();
    let m1 = JointModel::new(&cfg, 4);
    let m2 = JointModel::new(&cfg, 4);
    let p1 = autograd::nn::named_params(&m1, "");
    let p2 = autograd::nn::named_params(&m2, "");
    assert_eq!(p1.len(), p2.len());
    for ((n1, a), (n2, b)) in p1.iter().zip(p2.iter()) {
        assert_eq!(n1, n2);
        assert_eq!(a.to_owned_array(), b.to_owned_array(), "mismatch at {}", n1);
    }
}
