//! Residual classification backbone used by the appearance encoder and the
//! teacher. Built from `BackboneCfg`: basic or bottleneck blocks, a 3x3
//! stride-1 or 7x7 stride-2 stem, optional stem max-pool. Stages halve the
//! spatial extent from the second one on.

use autograd::nn::{BatchNorm2d, Conv2d, Module};
use autograd::{ConvSpec, NodeId, Tape};
use rand::Rng;

use crate::config::BackboneCfg;

struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    fn new(rng: &mut impl Rng, cin: usize, cout: usize, k: usize, stride: usize) -> ConvBn {
        let pad = k / 2;
        ConvBn {
            conv: Conv2d::new(rng, cin, cout, k, ConvSpec::new(stride, pad), false, 0.0),
            bn: BatchNorm2d::new(cout),
        }
    }

    fn forward(&self, t: &mut Tape, x: NodeId, train: bool) -> NodeId {
        let y = self.conv.forward(t, x);
        self.bn.forward(t, y, train)
    }
}

impl Module for ConvBn {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &autograd::nn::Param)) {
        self.conv.visit(&format!("{}.conv", prefix), f);
        self.bn.visit(&format!("{}.bn", prefix), f);
    }
}

/// conv-bn-relu, conv-bn, add shortcut, relu.
struct BasicBlock {
    c1: ConvBn,
    c2: ConvBn,
    down: Option<ConvBn>,
}

impl BasicBlock {
    fn new(rng: &mut impl Rng, cin: usize, cout: usize, stride: usize) -> BasicBlock {
        BasicBlock {
            c1: ConvBn::new(rng, cin, cout, 3, stride),
            c2: ConvBn::new(rng, cout, cout, 3, 1),
            down: if stride != 1 || cin != cout {
                Some(ConvBn::new(rng, cin, cout, 1, stride))
            } else {
                None
            },
        }
    }

    fn forward(&self, t: &mut Tape, x: NodeId, train: bool) -> NodeId {
        let y = self.c1.forward(t, x, train);
        let y = t.relu(y);
        let y = self.c2.forward(t, y, train);
        let sc = match &self.down {
            Some(d) => d.forward(t, x, train),
            None => x,
        };
        let s = t.add(y, sc);
        t.relu(s)
    }
}

impl Module for BasicBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &autograd::nn::Param)) {
        self.c1.visit(&format!("{}.c1", prefix), f);
        self.c2.visit(&format!("{}.c2", prefix), f);
        if let Some(d) = &self.down {
            d.visit(&format!("{}.down", prefix), f);
        }
    }
}

/// 1x1 reduce, 3x3, 1x1 expand (4x), with shortcut.
struct BottleneckBlock {
    c1: ConvBn,
    c2: ConvBn,
    c3: ConvBn,
    down: Option<ConvBn>,
}

impl BottleneckBlock {
    fn new(rng: &mut impl Rng, cin: usize, cout: usize, stride: usize) -> BottleneckBlock {
        let mid = cout / 4;
        BottleneckBlock {
            c1: ConvBn::new(rng, cin, mid, 1, 1),
            c2: ConvBn::new(rng, mid, mid, 3, stride),
            c3: ConvBn::new(rng, mid, cout, 1, 1),
            down: if stride != 1 || cin != cout {
                Some(ConvBn::new(rng, cin, cout, 1, stride))
            } else {
                None
            },
        }
    }

    fn forward(&self, t: &mut Tape, x: NodeId, train: bool) -> NodeId {
        let y = self.c1.forward(t, x, train);
        let y = t.relu(y);
        let y = self.c2.forward(t, y, train);
        let y = t.relu(y);
        let y = self.c3.forward(t, y, train);
        let sc = match &self.down {
            Some(d) => d.forward(t, x, train),
            None => x,
        };
        let s = t.add(y, sc);
        t.relu(s)
    }
}

impl Module for BottleneckBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &autograd::nn::Param)) {
        self.c1.visit(&format!("{}.c1", prefix), f);
        self.c2.visit(&format!("{}.c2", prefix), f);
        self.c3.visit(&format!("{}.c3", prefix), f);
        if let Some(d) = &self.down {
            d.visit(&format!("{}.down", prefix), f);
        }
    }
}

enum Block {
    Basic(BasicBlock),
    Bottleneck(BottleneckBlock),
}

impl Block {
    fn forward(&self, t: &mut Tape, x: NodeId, train: bool) -> NodeId {
        match self {
            Block::Basic(b) => b.forward(t, x, train),
            Block::Bottleneck(b) => b.forward(t, x, train),
        }
    }
}

impl Module for Block {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &autograd::nn::Param)) {
        match self {
            Block::Basic(b) => b.visit(prefix, f),
            Block::Bottleneck(b) => b.visit(prefix, f),
        }
    }
}

pub struct Backbone {
    stem: ConvBn,
    stem_pool: bool,
    stages: Vec<Vec<Block>>,
    pub out_channels: usize,
}

impl Backbone {
    pub fn new(rng: &mut impl Rng, cfg: &BackboneCfg, in_channels: usize) -> Backbone {
        assert_eq!(cfg.widths.len(), cfg.blocks.len(), "one width per stage");
        assert!(!cfg.widths.is_empty());
        // Bottleneck widths are post-expansion; the stem matches the first
        // stage's inner width.
        let stem_out = if cfg.bottleneck { cfg.widths[0] / 4 } else { cfg.widths[0] };
        let stem_stride = if cfg.stem_kernel >= 7 { 2 } else { 1 };
        let stem = ConvBn::new(rng, in_channels, stem_out, cfg.stem_kernel, stem_stride);

        let mut stages = Vec::new();
        let mut cin = stem_out;
        for (si, (&width, &nblocks)) in cfg.widths.iter().zip(cfg.blocks.iter()).enumerate() {
            assert!(nblocks >= 1, "each stage needs at least one block");
            let mut stage = Vec::new();
            for bi in 0..nblocks {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                let block = if cfg.bottleneck {
                    Block::Bottleneck(BottleneckBlock::new(rng, cin, width, stride))
                } else {
                    Block::Basic(BasicBlock::new(rng, cin, width, stride))
                };
                stage.push(block);
                cin = width;
            }
            stages.push(stage);
        }
        Backbone { stem, stem_pool: cfg.stem_pool, stages, out_channels: cin }
    }

    /// Feature map before any pooling, `[N, out_channels, h, w]`.
    pub fn forward(&self, t: &mut Tape, x: NodeId, train: bool) -> NodeId {
        let mut y = self.stem.forward(t, x, train);
        y = t.relu(y);
        if self.stem_pool {
            y = t.max_pool(y, (3, 3), (2, 2), (1, 1));
        }
        for stage in &self.stages {
            for block in stage {
                y = block.forward(t, y, train);
            }
        }
        y
    }
}

impl Module for Backbone {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &autograd::nn::Param)) {
        self.stem.visit(&format!("{}.stem", prefix), f);
        for (si, stage) in self.stages.iter().enumerate() {
            for (bi, block) in stage.iter().enumerate() {
                block.visit(&format!("{}.s{}.b{}", prefix, si, bi), f);
            }
        }
    }
}
