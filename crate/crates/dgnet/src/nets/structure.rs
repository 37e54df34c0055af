//! Structure encoder: a fully convolutional stack over grayscale input.
//! Two stride-2 convolutions fix the code at 1/4 the input extent; every
//! convolution is followed by instance normalization and a leaky rectifier,
//! so batch composition never affects a sample's code. A dilated pyramid
//! widens the receptive field before the final projection.

use autograd::nn::{Conv2d, InstanceNorm2d, Module, Param};
use autograd::{ConvSpec, NodeId, Tape};
use rand::Rng;

use super::LRELU_SLOPE;
use crate::config::EsCfg;

struct ConvIn {
    conv: Conv2d,
    norm: InstanceNorm2d,
}

impl ConvIn {
    fn new(rng: &mut impl Rng, cin: usize, cout: usize, k: usize, stride: usize, dilation: usize) -> ConvIn {
        // (k-1)/2 keeps odd kernels centered and makes the 4x4 stride-2
        // downsamples halve the extent exactly.
        let pad = ((k - 1) / 2) * dilation;
        let spec = ConvSpec::dilated(stride, pad, dilation);
        ConvIn {
            conv: Conv2d::new(rng, cin, cout, k, spec, false, LRELU_SLOPE),
            norm: InstanceNorm2d::new(cout),
        }
    }

    fn forward(&self, t: &mut Tape, x: NodeId) -> NodeId {
        let y = self.conv.forward(t, x);
        let y = self.norm.forward(t, y);
        t.leaky_relu(y, LRELU_SLOPE)
    }
}

impl Module for ConvIn {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv.visit(&format!("{}.conv", prefix), f);
        self.norm.visit(&format!("{}.norm", prefix), f);
    }
}

struct ResBlockIn {
    c1: ConvIn,
    c2: ConvIn,
}

impl ResBlockIn {
    fn new(rng: &mut impl Rng, c: usize) -> ResBlockIn {
        ResBlockIn { c1: ConvIn::new(rng, c, c, 3, 1, 1), c2: ConvIn::new(rng, c, c, 3, 1, 1) }
    }

    fn forward(&self, t: &mut Tape, x: NodeId) -> NodeId {
        let y = self.c1.forward(t, x);
        let y = self.c2.forward(t, y);
        t.add(y, x)
    }
}

impl Module for ResBlockIn {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.c1.visit(&format!("{}.c1", prefix), f);
        self.c2.visit(&format!("{}.c2", prefix), f);
    }
}

pub struct StructureEncoder {
    stem: ConvIn,
    down1: ConvIn,
    down2: ConvIn,
    widen: ConvIn,
    blocks: Vec<ResBlockIn>,
    pyramid: Vec<ConvIn>,
    project: ConvIn,
    pub code_channels: usize,
}

impl StructureEncoder {
    pub fn new(rng: &mut impl Rng, cfg: &EsCfg) -> StructureEncoder {
        assert_eq!(cfg.widths.len(), 4, "structure encoder takes four conv widths");
        let w = &cfg.widths;
        let stem = ConvIn::new(rng, 1, w[0], 7, 1, 1);
        let down1 = ConvIn::new(rng, w[0], w[1], 4, 2, 1);
        let down2 = ConvIn::new(rng, w[1], w[2], 4, 2, 1);
        let widen = ConvIn::new(rng, w[2], w[3], 3, 1, 1);
        let blocks = (0..cfg.res_blocks).map(|_| ResBlockIn::new(rng, w[3])).collect();
        let pyramid: Vec<ConvIn> = cfg
            .aspp_rates
            .iter()
            .map(|&r| ConvIn::new(rng, w[3], cfg.aspp_width, 3, 1, r.max(1)))
            .collect();
        let proj_in = if pyramid.is_empty() { w[3] } else { cfg.aspp_width * pyramid.len() };
        let project = ConvIn::new(rng, proj_in, cfg.code_channels, 1, 1, 1);
        StructureEncoder {
            stem,
            down1,
            down2,
            widen,
            blocks,
            pyramid,
            project,
            code_channels: cfg.code_channels,
        }
    }

    /// Structure code `[N, C_s, H/4, W/4]` from grayscale `[N, 1, H, W]`.
    pub fn encode(&self, t: &mut Tape, gray: NodeId) -> NodeId {
        let sh = t.shape(gray);
        assert_eq!(sh[1], 1, "structure encoder takes single-channel input");
        assert!(sh[2] % 4 == 0 && sh[3] % 4 == 0, "input extent must be divisible by 4");
        let mut y = self.stem.forward(t, gray);
        y = self.down1.forward(t, y);
        y = self.down2.forward(t, y);
        y = self.widen.forward(t, y);
        for b in &self.blocks {
            y = b.forward(t, y);
        }
        if !self.pyramid.is_empty() {
            let branches: Vec<NodeId> = self.pyramid.iter().map(|c| c.forward(t, y)).collect();
            y = t.concat(&branches, 1);
        }
        self.project.forward(t, y)
    }
}

impl Module for StructureEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.stem.visit(&format!("{}.stem", prefix), f);
        self.down1.visit(&format!("{}.down1", prefix), f);
        self.down2.visit(&format!("{}.down2", prefix), f);
        self.widen.visit(&format!("{}.widen", prefix), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{}.res{}", prefix, i), f);
        }
        for (i, p) in self.pyramid.iter().enumerate() {
            p.visit(&format!("{}.pyr{}", prefix, i), f);
        }
        self.project.visit(&format!("{}.project", prefix), f);
    }
}
