//! Neural-network building blocks on top of the tape: parameters, common
//! layers, normalization transforms, and weight initialization.

pub mod optim;
pub mod store;

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::kernels::ConvSpec;
use crate::tape::{NodeId, Shared, Tape};

/// Learnable (or buffered) tensor with shared ownership. Cloning a `Param`
/// aliases the same storage, which is how optimizers and module trees agree
/// on a single value.
#[derive(Clone)]
pub struct Param {
    inner: Rc<RefCell<Inner>>,
}

struct Inner {
    value: Shared,
    requires_grad: bool,
}

impl Param {
    /// Trainable parameter.
    pub fn new(value: ArrayD<f64>) -> Self {
        Param { inner: Rc::new(RefCell::new(Inner { value: value.into_shared(), requires_grad: true })) }
    }

    /// Persistent state that is saved and restored but never differentiated
    /// (e.g. running statistics).
    pub fn buffer(value: ArrayD<f64>) -> Self {
        Param { inner: Rc::new(RefCell::new(Inner { value: value.into_shared(), requires_grad: false })) }
    }

    pub fn value(&self) -> Shared {
        self.inner.borrow().value.clone()
    }

    pub fn to_owned_array(&self) -> ArrayD<f64> {
        self.inner.borrow().value.to_owned()
    }

    pub fn set_value(&self, value: ArrayD<f64>) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.value.shape(), value.shape(), "param shape is fixed");
        inner.value = value.into_shared();
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, rg: bool) {
        self.inner.borrow_mut().requires_grad = rg;
    }

    /// Identity key: stable for the lifetime of the underlying allocation.
    pub fn key(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }
}

/// Tree of named parameters. `visit` must enumerate parameters in a stable
/// order; serialization and optimizer grouping both rely on it.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
}

/// Collect `(name, param)` pairs in visit order.
pub fn named_params(m: &dyn Module, prefix: &str) -> Vec<(String, Param)> {
    let mut out = Vec::new();
    m.visit(prefix, &mut |name, p| out.push((name.to_string(), p.clone())));
    out
}

/// Trainable parameters only, in visit order.
pub fn trainable_params(m: &dyn Module, prefix: &str) -> Vec<Param> {
    named_params(m, prefix)
        .into_iter()
        .filter(|(_, p)| p.requires_grad())
        .map(|(_, p)| p)
        .collect()
}

/// Extract owned gradient arrays for `params` after a backward pass.
pub fn param_grads(tape: &Tape, grads: &crate::tape::Grads, params: &[Param]) -> Vec<Option<ArrayD<f64>>> {
    params
        .iter()
        .map(|p| {
            tape.leaf_of(p)
                .and_then(|leaf| grads.get(leaf))
                .map(|gid| tape.value(gid).to_owned())
        })
        .collect()
}

// ---- initialization ----

/// He-style normal init for conv weights feeding a (leaky) rectifier:
/// std = sqrt(2 / ((1 + slope^2) * fan_in)).
pub fn kaiming_conv(rng: &mut impl Rng, shape: (usize, usize, usize, usize), slope: f64) -> ArrayD<f64> {
    let (co, ci, kh, kw) = shape;
    let fan_in = (ci * kh * kw) as f64;
    let std = (2.0 / ((1.0 + slope * slope) * fan_in)).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    ArrayD::from_shape_simple_fn(IxDyn(&[co, ci, kh, kw]), || dist.sample(rng))
}

/// He-style normal init for linear weights, shape `[out, in]`.
pub fn kaiming_linear(rng: &mut impl Rng, out: usize, inp: usize, slope: f64) -> ArrayD<f64> {
    let std = (2.0 / ((1.0 + slope * slope) * inp as f64)).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    ArrayD::from_shape_simple_fn(IxDyn(&[out, inp]), || dist.sample(rng))
}

/// Small-variance init for classifier heads.
pub fn classifier_linear(rng: &mut impl Rng, out: usize, inp: usize) -> ArrayD<f64> {
    let dist = Normal::new(0.0, 0.001).unwrap();
    ArrayD::from_shape_simple_fn(IxDyn(&[out, inp]), || dist.sample(rng))
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(shape), 1.0)
}

// ---- layers ----

/// 2-d convolution with optional bias.
pub struct Conv2d {
    pub w: Param,
    pub b: Option<Param>,
    pub spec: ConvSpec,
}

impl Conv2d {
    pub fn new(rng: &mut impl Rng, cin: usize, cout: usize, k: usize, spec: ConvSpec, bias: bool, slope: f64) -> Self {
        Conv2d {
            w: Param::new(kaiming_conv(rng, (cout, cin, k, k), slope)),
            b: if bias { Some(Param::new(zeros(&[cout]))) } else { None },
            spec,
        }
    }

    pub fn forward(&self, t: &mut Tape, x: NodeId) -> NodeId {
        let w = t.param(&self.w);
        let y = t.conv2d(x, w, self.spec);
        match &self.b {
            None => y,
            Some(b) => {
                let cout = b.len();
                let bn = t.param(b);
                let bb = t.reshape(bn, &[1, cout, 1, 1]);
                t.add(y, bb)
            }
        }
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&format!("{}.w", prefix), &self.w);
        if let Some(b) = &self.b {
            f(&format!("{}.b", prefix), b);
        }
    }
}

/// Fully connected layer, weight `[out, in]`.
pub struct Linear {
    pub w: Param,
    pub b: Option<Param>,
}

impl Linear {
    pub fn new(rng: &mut impl Rng, inp: usize, out: usize, bias: bool) -> Self {
        Linear {
            w: Param::new(kaiming_linear(rng, out, inp, 0.0)),
            b: if bias { Some(Param::new(zeros(&[out]))) } else { None },
        }
    }

    /// Classifier variant: near-zero weights so initial logits are flat.
    pub fn classifier(rng: &mut impl Rng, inp: usize, out: usize) -> Self {
        Linear {
            w: Param::new(classifier_linear(rng, out, inp)),
            b: Some(Param::new(zeros(&[out]))),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: NodeId) -> NodeId {
        let w = t.param(&self.w);
        let wt = t.transpose2(w);
        let y = t.matmul(x, wt);
        match &self.b {
            None => y,
            Some(b) => {
                let out = b.len();
                let bn = t.param(b);
                let bb = t.reshape(bn, &[1, out]);
                t.add(y, bb)
            }
        }
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&format!("{}.w", prefix), &self.w);
        if let Some(b) = &self.b {
            f(&format!("{}.b", prefix), b);
        }
    }
}

/// Normalize `x` per sample and channel over the spatial axes, then apply the
/// provided `[N|1, C, 1, 1]`-broadcastable scale and shift nodes. This is the
/// shared core of instance norm and the adaptive variant.
pub fn spatial_norm(t: &mut Tape, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
    let mu = t.mean_axes(x, &[2, 3]);
    let xc = t.sub(x, mu);
    let sq = t.square(xc);
    let var = t.mean_axes(sq, &[2, 3]);
    let veps = t.add_scalar(var, eps);
    let inv = t.pow_scalar(veps, -0.5);
    let xn = t.mul(xc, inv);
    let scaled = t.mul(xn, gamma);
    t.add(scaled, beta)
}

/// Instance normalization with learned per-channel affine.
pub struct InstanceNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

impl InstanceNorm2d {
    pub fn new(c: usize) -> Self {
        InstanceNorm2d { gamma: Param::new(ones(&[c])), beta: Param::new(zeros(&[c])), eps: 1e-5 }
    }

    pub fn forward(&self, t: &mut Tape, x: NodeId) -> NodeId {
        let c = self.gamma.len();
        let g = t.param(&self.gamma);
        let b = t.param(&self.beta);
        let g4 = t.reshape(g, &[1, c, 1, 1]);
        let b4 = t.reshape(b, &[1, c, 1, 1]);
        spatial_norm(t, x, g4, b4, self.eps)
    }
}

impl Module for InstanceNorm2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&format!("{}.gamma", prefix), &self.gamma);
        f(&format!("{}.beta", prefix), &self.beta);
    }
}

/// Batch normalization with running statistics. Train mode normalizes by
/// batch moments and updates the running buffers as a side effect; eval mode
/// uses the buffers as constants.
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(c: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(ones(&[c])),
            beta: Param::new(zeros(&[c])),
            running_mean: Param::buffer(zeros(&[c])),
            running_var: Param::buffer(ones(&[c])),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(&self, t: &mut Tape, x: NodeId, train: bool) -> NodeId {
        let c = self.gamma.len();
        let g = t.param(&self.gamma);
        let b = t.param(&self.beta);
        let g4 = t.reshape(g, &[1, c, 1, 1]);
        let b4 = t.reshape(b, &[1, c, 1, 1]);
        if train {
            let mu = t.mean_axes(x, &[0, 2, 3]);
            let xc = t.sub(x, mu);
            let sq = t.square(xc);
            let var = t.mean_axes(sq, &[0, 2, 3]);
            // Update running stats outside the graph; running variance uses
            // the unbiased estimate as is conventional.
            {
                let sh = t.shape(x);
                let m = (sh[0] * sh[2] * sh[3]) as f64;
                let mu_d = t.value(mu).iter().copied().collect::<Vec<_>>();
                let var_d = t.value(var).iter().copied().collect::<Vec<_>>();
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                let mut rm = self.running_mean.to_owned_array();
                let mut rv = self.running_var.to_owned_array();
                for i in 0..c {
                    rm[i] = (1.0 - self.momentum) * rm[i] + self.momentum * mu_d[i];
                    rv[i] = (1.0 - self.momentum) * rv[i] + self.momentum * var_d[i] * unbias;
                }
                self.running_mean.set_value(rm);
                self.running_var.set_value(rv);
            }
            let veps = t.add_scalar(var, self.eps);
            let inv = t.pow_scalar(veps, -0.5);
            let xn = t.mul(xc, inv);
            let scaled = t.mul(xn, g4);
            t.add(scaled, b4)
        } else {
            let rm = self.running_mean.to_owned_array().into_shape_with_order(IxDyn(&[1, c, 1, 1])).unwrap();
            let rv = self.running_var.to_owned_array().into_shape_with_order(IxDyn(&[1, c, 1, 1])).unwrap();
            let mu = t.constant(rm);
            let var = t.constant(rv);
            let xc = t.sub(x, mu);
            let veps = t.add_scalar(var, self.eps);
            let inv = t.pow_scalar(veps, -0.5);
            let xn = t.mul(xc, inv);
            let scaled = t.mul(xn, g4);
            t.add(scaled, b4)
        }
    }
}

impl Module for BatchNorm2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&format!("{}.gamma", prefix), &self.gamma);
        f(&format!("{}.beta", prefix), &self.beta);
        f(&format!("{}.running_mean", prefix), &self.running_mean);
        f(&format!("{}.running_var", prefix), &self.running_var);
    }
}

/// Layer normalization over (C, H, W) per sample with per-channel affine.
pub struct LayerNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

impl LayerNorm2d {
    pub fn new(c: usize) -> Self {
        LayerNorm2d { gamma: Param::new(ones(&[c])), beta: Param::new(zeros(&[c])), eps: 1e-5 }
    }

    pub fn forward(&self, t: &mut Tape, x: NodeId) -> NodeId {
        let c = self.gamma.len();
        let mu = t.mean_axes(x, &[1, 2, 3]);
        let xc = t.sub(x, mu);
        let sq = t.square(xc);
        let var = t.mean_axes(sq, &[1, 2, 3]);
        let veps = t.add_scalar(var, self.eps);
        let inv = t.pow_scalar(veps, -0.5);
        let xn = t.mul(xc, inv);
        let g = t.param(&self.gamma);
        let b = t.param(&self.beta);
        let g4 = t.reshape(g, &[1, c, 1, 1]);
        let b4 = t.reshape(b, &[1, c, 1, 1]);
        let scaled = t.mul(xn, g4);
        t.add(scaled, b4)
    }
}

impl Module for LayerNorm2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&format!("{}.gamma", prefix), &self.gamma);
        f(&format!("{}.beta", prefix), &self.beta);
    }
}

/// Adaptive instance normalization: spatial whitening with externally
/// supplied per-sample scale and shift (shape `[N, C, 1, 1]` nodes).
pub fn adain(t: &mut Tape, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
    spatial_norm(t, x, gamma, beta, 1e-5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn adain_with_unit_scale_zero_shift_is_instance_norm() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let x = ArrayD::from_shape_simple_fn(IxDyn(&[2, 3, 4, 5]), || rng.gen_range(-2.0..2.0));
        let mut t = Tape::new();
        let xn = t.input(x);
        let g = t.constant(ones(&[1, 3, 1, 1]));
        let b = t.constant(zeros(&[1, 3, 1, 1]));
        let y = adain(&mut t, xn, g, b);
        // Per (sample, channel): mean 0, variance 1 within 1e-4.
        let v = t.value(y);
        for n in 0..2 {
            for c in 0..3 {
                let mut vals = Vec::new();
                for i in 0..4 {
                    for j in 0..5 {
                        vals.push(v[[n, c, i, j]]);
                    }
                }
                let m: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
                let var: f64 = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
                assert!(m.abs() < 1e-4, "mean {}", m);
                assert!((var - 1.0).abs() < 1e-4, "var {}", var);
            }
        }
    }

    #[test]
    fn instance_norm_survives_constant_zero_input() {
        let mut t = Tape::new();
        let x = t.input(zeros(&[1, 2, 3, 3]));
        let norm = InstanceNorm2d::new(2);
        let y = norm.forward(&mut t, x);
        assert!(t.value(y).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn batch_norm_eval_is_per_sample_independent() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let bn = BatchNorm2d::new(2);
        bn.running_mean.set_value(ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.3, -0.1]).unwrap());
        bn.running_var.set_value(ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.5, 0.7]).unwrap());
        let a = ArrayD::from_shape_simple_fn(IxDyn(&[1, 2, 2, 2]), || rng.gen_range(-1.0..1.0));
        let b = ArrayD::from_shape_simple_fn(IxDyn(&[1, 2, 2, 2]), || rng.gen_range(-1.0..1.0));
        let mut both = ArrayD::zeros(IxDyn(&[2, 2, 2, 2]));
        both.index_axis_mut(ndarray::Axis(0), 0).assign(&a.index_axis(ndarray::Axis(0), 0));
        both.index_axis_mut(ndarray::Axis(0), 1).assign(&b.index_axis(ndarray::Axis(0), 0));

        let mut t = Tape::new();
        let xa = t.constant(a);
        let ya = bn.forward(&mut t, xa, false);
        let xb = t.constant(b);
        let yb = bn.forward(&mut t, xb, false);
        let xab = t.constant(both);
        let yab = bn.forward(&mut t, xab, false);
        let va = t.value(ya).to_owned();
        let vb = t.value(yb).to_owned();
        let vab = t.value(yab).to_owned();
        for (i, v) in va.iter().enumerate() {
            assert_eq!(*v, vab.as_slice().unwrap()[i]);
        }
        for (i, v) in vb.iter().enumerate() {
            assert_eq!(*v, vab.as_slice().unwrap()[va.len() + i]);
        }
    }

    #[test]
    fn visit_order_is_stable() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let conv = Conv2d::new(&mut rng, 3, 8, 3, ConvSpec::new(1, 1), true, 0.2);
        let names: Vec<String> = named_params(&conv, "c1").into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["c1.w", "c1.b"]);
    }
}
