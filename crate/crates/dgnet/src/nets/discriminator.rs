//! Multi-scale patch discriminator. Each scale owns an independent scorer
//! over an average-pooled copy of the input; a scorer downsamples twice, so
//! score maps are 1/4 of their scale's extent. No normalization layers:
//! samples stay independent and the gradient penalty controls sharpness.

use autograd::nn::{Conv2d, Module, Param};
use autograd::{ConvSpec, NodeId, Tape};
use rand::Rng;

use super::LRELU_SLOPE;
use crate::config::DCfg;

struct ResBlockPlain {
    c1: Conv2d,
    c2: Conv2d,
}

impl ResBlockPlain {
    fn new(rng: &mut impl Rng, c: usize) -> ResBlockPlain {
        let spec = ConvSpec::new(1, 1);
        ResBlockPlain {
            c1: Conv2d::new(rng, c, c, 3, spec, true, LRELU_SLOPE),
            c2: Conv2d::new(rng, c, c, 3, spec, true, LRELU_SLOPE),
        }
    }

    fn forward(&self, t: &mut Tape, x: NodeId) -> NodeId {
        let y = self.c1.forward(t, x);
        let y = t.leaky_relu(y, LRELU_SLOPE);
        let y = self.c2.forward(t, y);
        let y = t.leaky_relu(y, LRELU_SLOPE);
        t.add(y, x)
    }
}

impl Module for ResBlockPlain {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.c1.visit(&format!("{}.c1", prefix), f);
        self.c2.visit(&format!("{}.c2", prefix), f);
    }
}

/// Single-scale patch scorer: five convolutions (two stride-2), residual
/// refinement, then a 1-channel logit map at 1/4 extent.
struct PatchDis {
    convs: Vec<Conv2d>,
    blocks: Vec<ResBlockPlain>,
    out: Conv2d,
}

impl PatchDis {
    fn new(rng: &mut impl Rng, widths: &[usize], res_blocks: usize) -> PatchDis {
        assert_eq!(widths.len(), 5, "patch scorer takes five conv widths");
        let w = widths;
        let s1 = ConvSpec::new(1, 1);
        let s2 = ConvSpec::new(2, 1);
        let convs = vec![
            Conv2d::new(rng, 3, w[0], 1, ConvSpec::new(1, 0), true, LRELU_SLOPE),
            Conv2d::new(rng, w[0], w[1], 3, s1, true, LRELU_SLOPE),
            Conv2d::new(rng, w[1], w[2], 3, s2, true, LRELU_SLOPE),
            Conv2d::new(rng, w[2], w[3], 3, s1, true, LRELU_SLOPE),
            Conv2d::new(rng, w[3], w[4], 3, s2, true, LRELU_SLOPE),
        ];
        let blocks = (0..res_blocks).map(|_| ResBlockPlain::new(rng, w[4])).collect();
        let out = Conv2d::new(rng, w[4], 1, 1, ConvSpec::new(1, 0), true, 0.0);
        PatchDis { convs, blocks, out }
    }

    fn forward(&self, t: &mut Tape, x: NodeId) -> NodeId {
        let mut y = x;
        for c in &self.convs {
            y = c.forward(t, y);
            y = t.leaky_relu(y, LRELU_SLOPE);
        }
        for b in &self.blocks {
            y = b.forward(t, y);
        }
        self.out.forward(t, y)
    }
}

impl Module for PatchDis {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&format!("{}.conv{}", prefix, i), f);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{}.res{}", prefix, i), f);
        }
        self.out.visit(&format!("{}.out", prefix), f);
    }
}

pub struct MultiScaleDis {
    scales: Vec<PatchDis>,
}

impl MultiScaleDis {
    pub fn new(rng: &mut impl Rng, cfg: &DCfg) -> MultiScaleDis {
        assert!(cfg.scales >= 1);
        MultiScaleDis {
            scales: (0..cfg.scales).map(|_| PatchDis::new(rng, &cfg.widths, cfg.res_blocks)).collect(),
        }
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    /// Logit maps, one per scale: `[N, 1, H/4, W/4]`, `[N, 1, H/8, W/8]`, ...
    /// The input is average-pooled between rungs.
    pub fn forward(&self, t: &mut Tape, img: NodeId) -> Vec<NodeId> {
        let mut maps = Vec::with_capacity(self.scales.len());
        let mut x = img;
        for (i, d) in self.scales.iter().enumerate() {
            if i > 0 {
                x = t.avg_pool(x, (2, 2));
            }
            maps.push(d.forward(t, x));
        }
        maps
    }

    /// Sum of every logit over every scale; the scalar whose input gradient
    /// the penalty regularizes.
    pub fn score_sum(&self, t: &mut Tape, img: NodeId) -> NodeId {
        let maps = self.forward(t, img);
        let sums: Vec<NodeId> = maps.iter().map(|&m| t.sum_all(m)).collect();
        let mut acc = sums[0];
        for &s in &sums[1..] {
            acc = t.add(acc, s);
        }
        acc
    }
}

impl Module for MultiScaleDis {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, d) in self.scales.iter().enumerate() {
            d.visit(&format!("{}.scale{}", prefix, i), f);
        }
    }
}
