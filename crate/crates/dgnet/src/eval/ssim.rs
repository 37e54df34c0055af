//! Structural similarity over luminance planes.
//!
//! Gaussian-weighted local statistics (11x11 window, sigma 1.5), stability
//! constants K1 = 0.01 and K2 = 0.03 at dynamic range 1, and the score is
//! averaged over the valid region only (no padding). Two constant planes
//! with values a and b reduce to (2ab + C1) / (a^2 + b^2 + C1) because all
//! local variances vanish.

use ndarray::{Array2, Array3, ArrayView2};

use crate::data::LUMA;
use crate::error::{DgError, Result};

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const RANGE: f64 = 1.0;

/// Normalized 1D Gaussian taps; the 2D window is their outer product.
fn kernel() -> [f64; WINDOW] {
    let mut k = [0.0; WINDOW];
    let mid = (WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable valid-region convolution with the window taps.
fn blur(x: &ArrayView2<f64>, k: &[f64; WINDOW]) -> Array2<f64> {
    let (h, w) = x.dim();
    let mut rows = Array2::<f64>::zeros((h, w - WINDOW + 1));
    for i in 0..h {
        for j in 0..w - WINDOW + 1 {
            let mut acc = 0.0;
            for (o, &kv) in k.iter().enumerate() {
                acc += kv * x[[i, j + o]];
            }
            rows[[i, j]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h - WINDOW + 1, w - WINDOW + 1));
    for j in 0..out.ncols() {
        for i in 0..out.nrows() {
            let mut acc = 0.0;
            for (o, &kv) in k.iter().enumerate() {
                acc += kv * rows[[i + o, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// Mean SSIM between two luminance planes of identical shape.
pub fn ssim_luma(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(DgError::Shape {
            ctx: "ssim".into(),
            expected: format!("{:?}", a.dim()),
            got: format!("{:?}", b.dim()),
        });
    }
    let (h, w) = a.dim();
    if h < WINDOW || w < WINDOW {
        return Err(DgError::Data(format!(
            "ssim needs images of at least {}x{}, got {}x{}",
            WINDOW, WINDOW, h, w
        )));
    }
    let k = kernel();
    let aa = a.mapv(|v| v * v);
    let bb = b.mapv(|v| v * v);
    let ab = a * b;
    let mu_a = blur(&a.view(), &k);
    let mu_b = blur(&b.view(), &k);
    let m_aa = blur(&aa.view(), &k);
    let m_bb = blur(&bb.view(), &k);
    let m_ab = blur(&ab.view(), &k);

    let c1 = (K1 * RANGE) * (K1 * RANGE);
    let c2 = (K2 * RANGE) * (K2 * RANGE);
    let mut total = 0.0;
    for i in 0..mu_a.nrows() {
        for j in 0..mu_a.ncols() {
            let (ma, mb) = (mu_a[[i, j]], mu_b[[i, j]]);
            let va = m_aa[[i, j]] - ma * ma;
            let vb = m_bb[[i, j]] - mb * mb;
            let cov = m_ab[[i, j]] - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            total += num / den;
        }
    }
    Ok(total / (mu_a.nrows() * mu_a.ncols()) as f64)
}

/// SSIM between two `[3, H, W]` images via their luminance planes.
pub fn ssim_images(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(DgError::Shape {
            ctx: "ssim".into(),
            expected: format!("{:?}", a.dim()),
            got: format!("{:?}", b.dim()),
        });
    }
    Ok(ssim_luma(&luminance(a), &luminance(b))?)
}

fn luminance(x: &Array3<f64>) -> Array2<f64> {
    let (_, h, w) = x.dim();
    let mut out = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            out[[i, j]] =
                LUMA[0] * x[[0, i, j]] + LUMA[1] * x[[1, i, j]] + LUMA[2] * x[[2, i, j]];
        }
    }
    out
}

/// Mean pairwise SSIM within each class, averaged over classes that hold at
/// least two images. Lower values mean more visual diversity among images
/// that share a label.
pub fn ssim_intra_class(images: &[Array3<f64>], labels: &[usize]) -> Result<f64> {
    if images.len() != labels.len() {
        return Err(DgError::Data(format!(
            "ssim_intra_class: {} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    let mut class_means = Vec::new();
    for members in groups.values() {
        if members.len() < 2 {
            continue;
        }
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for (pos, &a) in members.iter().enumerate() {
            for &b in &members[pos + 1..] {
                sum += ssim_images(&images[a], &images[b])?;
                pairs += 1;
            }
        }
        class_means.push(sum / pairs as f64);
    }
    if class_means.is_empty() {
        return Err(DgError::Data(
            "ssim_intra_class: no class holds two or more images".into(),
        ));
    }
    Ok(class_means.iter().sum::<f64>() / class_means.len() as f64)
}
