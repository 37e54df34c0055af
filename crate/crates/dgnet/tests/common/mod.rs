//! Shared helpers for the integration suites.
#![allow(dead_code)]

use autograd::nn::Param;
use dgnet::config::Config;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;

/// A desk-profile config shrunk further so per-test forward passes are
/// near-instant. 32x16 input, narrow nets, same topology as desk.
pub fn tiny_config() -> Config {
    let mut c = Config::desk();
    c.data.height = 32;
    c.data.width = 16;
    for (k, v) in [
        ("model.ea.widths", "8,8,16,16"),
        ("model.ea.blocks", "1,1,1,1"),
        ("model.es.widths", "4,4,4,8"),
        ("model.es.res_blocks", "1"),
        ("model.es.aspp_rates", "1,2"),
        ("model.es.aspp_width", "4"),
        ("model.es.code_channels", "8"),
        ("model.g.res_blocks", "2"),
        ("model.g.mlp_hidden", "32"),
        ("model.g.widths", "8,8,8,8"),
        ("model.d.scales", "2"),
        ("model.d.widths", "4,4,4,4,8"),
        ("model.d.res_blocks", "1"),
        ("model.teacher.widths", "8,8,16,16"),
        ("model.teacher.blocks", "1,1,1,1"),
        ("train.batch_ids", "2"),
        ("train.batch_insts", "2"),
    ] {
        c.set(k, v).unwrap();
    }
    c.validate().unwrap();
    c
}

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(lo..hi))
}

/// Central-difference derivative of `f` with respect to one element of `p`.
pub fn fd_param(p: &Param, idx: usize, h: f64, mut f: impl FnMut() -> f64) -> f64 {
    let base = p.to_owned_array();
    let mut up = base.clone();
    up.as_slice_mut().unwrap()[idx] += h;
    p.set_value(up);
    let fp = f();
    let mut dn = base.clone();
    dn.as_slice_mut().unwrap()[idx] -= h;
    p.set_value(dn);
    let fm = f();
    p.set_value(base);
    (fp - fm) / (2.0 * h)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}
