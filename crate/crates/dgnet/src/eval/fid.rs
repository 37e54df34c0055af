//! Fréchet distance between Gaussian fits of two feature clouds:
//! ||mu_r - mu_g||^2 + Tr(S_r + S_g - 2 (S_r S_g)^{1/2}).
//!
//! The matrix square root uses the symmetric reduction
//! Tr((S_r S_g)^{1/2}) = Tr((S_r^{1/2} S_g S_r^{1/2})^{1/2}), so a single
//! symmetric eigendecomposition per step suffices. Sampling noise can push
//! small eigenvalues of the inner product below zero; these are clipped to
//! zero with a warning.

use autograd::Tape;
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, Array4, Axis};

use crate::error::{DgError, Result};
use crate::nets::Teacher;

/// Sample mean and covariance (rows are samples, ddof = 1).
pub fn gaussian_stats(x: &Array2<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let d = x.ncols();
    assert!(n >= 2, "covariance needs at least two samples");
    let mean: Vec<f64> = (0..d).map(|j| x.column(j).sum() / n as f64).collect();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for row in x.axis_iter(Axis(0)) {
        for a in 0..d {
            let da = row[a] - mean[a];
            for b in a..d {
                cov[(a, b)] += da * (row[b] - mean[b]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for a in 0..d {
        for b in a..d {
            cov[(a, b)] /= denom;
            cov[(b, a)] = cov[(a, b)];
        }
    }
    (mean, cov)
}

/// Symmetric PSD square root with negative-eigenvalue clipping.
fn sqrt_psd(m: &DMatrix<f64>, label: &str) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let tol = 1e-10 * eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs())).max(1.0);
    let mut clipped = false;
    let roots: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&v| {
            if v < 0.0 {
                if v < -tol {
                    clipped = true;
                }
                0.0
            } else {
                v.sqrt()
            }
        })
        .collect();
    if clipped {
        log::warn!("{}: non-PSD intermediate; negative eigenvalues clipped", label);
    }
    let d = roots.len();
    let mut scaled = eig.eigenvectors.clone();
    for j in 0..d {
        for i in 0..d {
            scaled[(i, j)] *= roots[j];
        }
    }
    &scaled * eig.eigenvectors.transpose()
}

/// Fréchet distance between the Gaussian fits of two clouds (rows are
/// samples; both clouds need at least two rows and equal dimension).
pub fn fid(real: &Array2<f64>, gen: &Array2<f64>) -> Result<f64> {
    if real.nrows() < 2 || gen.nrows() < 2 {
        return Err(DgError::Data(format!(
            "frechet distance needs >= 2 samples per set, got {} and {}",
            real.nrows(),
            gen.nrows()
        )));
    }
    if real.ncols() != gen.ncols() {
        return Err(DgError::Shape {
            ctx: "fid".into(),
            expected: format!("feature dim {}", real.ncols()),
            got: format!("{}", gen.ncols()),
        });
    }
    let (mu_r, cov_r) = gaussian_stats(real);
    let (mu_g, cov_g) = gaussian_stats(gen);
    let mean_term: f64 = mu_r.iter().zip(&mu_g).map(|(a, b)| (a - b) * (a - b)).sum();

    let root_r = sqrt_psd(&cov_r, "fid: covariance of the real set");
    let inner = &root_r * &cov_g * &root_r;
    let root_inner = sqrt_psd(&inner, "fid: cross-covariance product");

    let trace = cov_r.trace() + cov_g.trace() - 2.0 * root_inner.trace();
    Ok(mean_term + trace)
}

/// Penultimate teacher features for a batch of images, in eval mode; rows
/// are samples. This is the desk-scale stand-in for a pretrained feature
/// extractor, so values are only comparable to scores from the same
/// teacher checkpoint.
pub fn teacher_features(teacher: &Teacher, images: &Array4<f64>, chunk: usize) -> Array2<f64> {
    assert!(chunk > 0);
    let n = images.shape()[0];
    let mut rows: Option<Array2<f64>> = None;
    let mut at = 0usize;
    while at < n {
        let hi = (at + chunk).min(n);
        let part = images.slice(ndarray::s![at..hi, .., .., ..]).to_owned();
        let mut t = Tape::new();
        let x = t.constant(part.into_dyn());
        let f = teacher.features(&mut t, x, false);
        let fd = t.data(f);
        let d = fd.shape()[1];
        let out = rows.get_or_insert_with(|| Array2::zeros((n, d)));
        for i in at..hi {
            for j in 0..d {
                out[[i, j]] = fd[[i - at, j]];
            }
        }
        at = hi;
    }
    rows.expect("at least one sample")
}
