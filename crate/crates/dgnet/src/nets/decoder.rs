//! Decoder: residual blocks whose per-channel normalization scale and shift
//! are produced from the appearance code by a small MLP (one (scale, shift)
//! pair per normalization site), followed by two nearest-neighbor
//! upsampling stages and a bounded pixel projection. Layer normalization in
//! the upsampling path keeps samples independent.

use autograd::nn::{adain, Conv2d, LayerNorm2d, Linear, Module, Param};
use autograd::{ConvSpec, NodeId, Tape};
use rand::Rng;

use super::{flatten2, LRELU_SLOPE};
use crate::config::GCfg;

struct AdainResBlock {
    c1: Conv2d,
    c2: Conv2d,
}

impl AdainResBlock {
    fn new(rng: &mut impl Rng, c: usize) -> AdainResBlock {
        let spec = ConvSpec::new(1, 1);
        AdainResBlock {
            c1: Conv2d::new(rng, c, c, 3, spec, false, 0.0),
            c2: Conv2d::new(rng, c, c, 3, spec, false, 0.0),
        }
    }

    /// `styles` carries the two (scale, shift) pairs for this block.
    fn forward(&self, t: &mut Tape, x: NodeId, styles: &[(NodeId, NodeId); 2]) -> NodeId {
        let y = self.c1.forward(t, x);
        let y = adain(t, y, styles[0].0, styles[0].1);
        let y = t.relu(y);
        let y = self.c2.forward(t, y);
        let y = adain(t, y, styles[1].0, styles[1].1);
        t.add(y, x)
    }
}

impl Module for AdainResBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.c1.visit(&format!("{}.c1", prefix), f);
        self.c2.visit(&format!("{}.c2", prefix), f);
    }
}

struct UpConv {
    conv: Conv2d,
    norm: LayerNorm2d,
    upsample: bool,
}

impl UpConv {
    fn new(rng: &mut impl Rng, cin: usize, cout: usize, k: usize, upsample: bool) -> UpConv {
        let pad = k / 2;
        UpConv {
            conv: Conv2d::new(rng, cin, cout, k, ConvSpec::new(1, pad), false, LRELU_SLOPE),
            norm: LayerNorm2d::new(cout),
            upsample,
        }
    }

    fn forward(&self, t: &mut Tape, x: NodeId) -> NodeId {
        let x = if self.upsample { t.upsample_nearest(x, (2, 2)) } else { x };
        let y = self.conv.forward(t, x);
        let y = self.norm.forward(t, y);
        t.leaky_relu(y, LRELU_SLOPE)
    }
}

impl Module for UpConv {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv.visit(&format!("{}.conv", prefix), f);
        self.norm.visit(&format!("{}.norm", prefix), f);
    }
}

pub struct Decoder {
    mlp1: Linear,
    mlp2: Linear,
    blocks: Vec<AdainResBlock>,
    ups: Vec<UpConv>,
    out: Conv2d,
    code_channels: usize,
}

impl Decoder {
    /// `appearance_dim` is the flattened appearance-code length;
    /// `code_channels` the structure code's channel count.
    pub fn new(rng: &mut impl Rng, cfg: &GCfg, appearance_dim: usize, code_channels: usize) -> Decoder {
        assert_eq!(cfg.widths.len(), 4, "decoder takes four conv widths");
        let n_styles = cfg.res_blocks * 2 * 2 * code_channels;
        let w = &cfg.widths;
        Decoder {
            mlp1: Linear::new(rng, appearance_dim, cfg.mlp_hidden, true),
            mlp2: Linear::classifier(rng, cfg.mlp_hidden, n_styles),
            blocks: (0..cfg.res_blocks).map(|_| AdainResBlock::new(rng, code_channels)).collect(),
            ups: vec![
                UpConv::new(rng, code_channels, w[0], cfg.up_kernel, true),
                UpConv::new(rng, w[0], w[1], cfg.up_kernel, true),
                UpConv::new(rng, w[1], w[2], 3, false),
                UpConv::new(rng, w[2], w[3], 3, false),
            ],
            out: Conv2d::new(rng, w[3], 3, 1, ConvSpec::new(1, 0), true, 0.0),
            code_channels,
        }
    }

    /// All per-site (scale, shift) nodes from one appearance code. The MLP's
    /// raw output is offset by one on the scale half so a zero-initialized
    /// head starts at identity modulation.
    fn styles(&self, t: &mut Tape, a: NodeId) -> Vec<(NodeId, NodeId)> {
        let flat = flatten2(t, a);
        let h = self.mlp1.forward(t, flat);
        let h = t.relu(h);
        let raw = self.mlp2.forward(t, h);
        let n = t.shape(raw)[0];
        let c = self.code_channels;
        let mut out = Vec::with_capacity(self.blocks.len() * 2);
        for site in 0..self.blocks.len() * 2 {
            let off = site * 2 * c;
            let g_raw = t.slice_axis(raw, 1, off, c);
            let b_raw = t.slice_axis(raw, 1, off + c, c);
            let g = t.add_scalar(g_raw, 1.0);
            let g = t.reshape(g, &[n, c, 1, 1]);
            let b = t.reshape(b_raw, &[n, c, 1, 1]);
            out.push((g, b));
        }
        out
    }

    /// Synthesize `[N, 3, 4h, 4w]` in [0,1] from an appearance code and a
    /// structure code `[N, C_s, h, w]`.
    pub fn decode(&self, t: &mut Tape, a: NodeId, s: NodeId) -> NodeId {
        let styles = self.styles(t, a);
        let mut y = s;
        for (i, block) in self.blocks.iter().enumerate() {
            let pair = [styles[2 * i], styles[2 * i + 1]];
            y = block.forward(t, y, &pair);
        }
        for up in &self.ups {
            y = up.forward(t, y);
        }
        let y = self.out.forward(t, y);
        let y = t.tanh(y);
        let y = t.add_scalar(y, 1.0);
        t.scale(y, 0.5)
    }
}

impl Module for Decoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.mlp1.visit(&format!("{}.mlp1", prefix), f);
        self.mlp2.visit(&format!("{}.mlp2", prefix), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{}.res{}", prefix, i), f);
        }
        for (i, u) in self.ups.iter().enumerate() {
            u.visit(&format!("{}.up{}", prefix, i), f);
        }
        self.out.visit(&format!("{}.out", prefix), f);
    }
}
