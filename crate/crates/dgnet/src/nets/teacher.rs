//! Teacher: a plain backbone classifier trained on real images only. After
//! its own training run it is frozen; during joint training it only supplies
//! soft identity distributions for generated images, and its pooled features
//! double as the embedding space for distribution metrics.

use autograd::nn::{Linear, Module, Param};
use autograd::{NodeId, Tape};
use rand::Rng;

use super::backbone::Backbone;
use crate::config::BackboneCfg;

pub struct Teacher {
    pub backbone: Backbone,
    pub cls: Linear,
}

impl Teacher {
    pub fn new(rng: &mut impl Rng, cfg: &BackboneCfg, classes: usize) -> Teacher {
        let backbone = Backbone::new(rng, cfg, 3);
        let cls = Linear::classifier(rng, backbone.out_channels, classes);
        Teacher { backbone, cls }
    }

    /// Globally pooled feature `[N, C]`; the penultimate representation.
    pub fn features(&self, t: &mut Tape, x: NodeId, train: bool) -> NodeId {
        let f = self.backbone.forward(t, x, train);
        let pooled = t.mean_axes(f, &[2, 3]);
        let sh = t.shape(pooled).to_vec();
        t.reshape(pooled, &[sh[0], sh[1]])
    }

    pub fn logits(&self, t: &mut Tape, x: NodeId, train: bool) -> NodeId {
        let f = self.features(t, x, train);
        self.cls.forward(t, f)
    }

    /// Mark every parameter as non-differentiable; gradients simply never
    /// reach a frozen teacher.
    pub fn freeze(&self) {
        self.visit("", &mut |_, p| p.set_requires_grad(false));
    }
}

impl Module for Teacher {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.backbone.visit(&format!("{}.backbone", prefix), f);
        self.cls.visit(&format!("{}.cls", prefix), f);
    }
}
