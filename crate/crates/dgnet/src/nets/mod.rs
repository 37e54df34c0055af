//! The four trainable networks plus the frozen teacher.
//!
//! - [`AppearanceEncoder`]: residual backbone feeding both the retrieval
//!   heads and the generator's style input; batch-normalized, shared
//!   between real and generated images.
//! - [`StructureEncoder`]: fully convolutional, instance-normalized; sees
//!   grayscale input so color cannot leak into the structure code.
//! - [`Decoder`]: residual blocks whose normalization statistics are
//!   replaced per sample from the appearance code, then two upsampling
//!   stages back to pixels.
//! - [`MultiScaleDis`]: one patch scorer per input scale, downsampled by
//!   average pooling; no normalization (gradient penalty handles scale).
//! - [`Teacher`]: plain backbone classifier, trained beforehand and frozen
//!   during joint training to source soft identity labels.

pub mod appearance;
pub mod backbone;
pub mod decoder;
pub mod discriminator;
pub mod structure;
pub mod teacher;

pub use appearance::AppearanceEncoder;
pub use backbone::Backbone;
pub use decoder::Decoder;
pub use discriminator::MultiScaleDis;
pub use structure::StructureEncoder;
pub use teacher::Teacher;

use autograd::nn::Module;
use autograd::{NodeId, Tape};

/// `[N, C, H, W]` to `[N, C*H*W]`.
pub fn flatten2(t: &mut Tape, x: NodeId) -> NodeId {
    let sh = t.shape(x).to_vec();
    assert_eq!(sh.len(), 4, "flatten2 expects rank 4");
    t.reshape(x, &[sh[0], sh[1] * sh[2] * sh[3]])
}

/// Leaky slope used everywhere a leaky rectifier appears.
pub const LRELU_SLOPE: f64 = 0.2;

/// Total scalar parameter count of a module tree.
pub fn param_count(m: &dyn Module) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, p| n += p.len());
    n
}
