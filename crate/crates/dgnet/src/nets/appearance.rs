//! Appearance encoder: residual backbone, adaptive max pooling to a fixed
//! code extent, and two linear feature heads with per-head classifiers. The
//! same instance encodes real and generated images, so identity-relevant
//! gradients from synthesized data land in these weights.

use autograd::nn::{Linear, Module, Param};
use autograd::{NodeId, Tape};
use rand::Rng;

use super::backbone::Backbone;
use super::flatten2;
use crate::config::EaCfg;

pub struct AppearanceEncoder {
    pub backbone: Backbone,
    pub code_h: usize,
    pub code_w: usize,
    pub head_dim: usize,
    pub head_prim: Linear,
    pub head_fine: Linear,
    pub cls_prim: Linear,
    pub cls_fine: Linear,
}

impl AppearanceEncoder {
    pub fn new(rng: &mut impl Rng, cfg: &EaCfg, classes: usize) -> AppearanceEncoder {
        let backbone = Backbone::new(rng, &cfg.backbone, 3);
        let code_dim = backbone.out_channels * cfg.code_h * cfg.code_w;
        AppearanceEncoder {
            head_prim: Linear::new(rng, code_dim, cfg.head_dim, true),
            head_fine: Linear::new(rng, code_dim, cfg.head_dim, true),
            cls_prim: Linear::classifier(rng, cfg.head_dim, classes),
            cls_fine: Linear::classifier(rng, cfg.head_dim, classes),
            backbone,
            code_h: cfg.code_h,
            code_w: cfg.code_w,
            head_dim: cfg.head_dim,
        }
    }

    pub fn code_channels(&self) -> usize {
        self.backbone.out_channels
    }

    /// Appearance code `[N, C_a, code_h, code_w]`. Adaptive pooling fixes
    /// the spatial extent for any input geometry the backbone accepts.
    pub fn encode(&self, t: &mut Tape, x: NodeId, train: bool) -> NodeId {
        let f = self.backbone.forward(t, x, train);
        t.adaptive_max_pool(f, (self.code_h, self.code_w))
    }

    /// Both feature vectors from a code: `(f_prim, f_fine)`, each
    /// `[N, head_dim]`.
    pub fn project(&self, t: &mut Tape, code: NodeId) -> (NodeId, NodeId) {
        let flat = flatten2(t, code);
        (self.head_prim.forward(t, flat), self.head_fine.forward(t, flat))
    }

    pub fn logits_prim(&self, t: &mut Tape, f_prim: NodeId) -> NodeId {
        self.cls_prim.forward(t, f_prim)
    }

    pub fn logits_fine(&self, t: &mut Tape, f_fine: NodeId) -> NodeId {
        self.cls_fine.forward(t, f_fine)
    }

    /// Parameters of the feature heads and classifiers, backbone excluded.
    pub fn head_params(&self) -> Vec<Param> {
        let mut out = Vec::new();
        for m in [&self.head_prim, &self.head_fine, &self.cls_prim, &self.cls_fine] {
            m.visit("", &mut |_, p| {
                if p.requires_grad() {
                    out.push(p.clone());
                }
            });
        }
        out
    }
}

impl Module for AppearanceEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.backbone.visit(&format!("{}.backbone", prefix), f);
        self.head_prim.visit(&format!("{}.head_prim", prefix), f);
        self.head_fine.visit(&format!("{}.head_fine", prefix), f);
        self.cls_prim.visit(&format!("{}.cls_prim", prefix), f);
        self.cls_fine.visit(&format!("{}.cls_fine", prefix), f);
    }
}
