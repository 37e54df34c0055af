//! Raw array kernels behind the tape ops: 2-d convolution (forward plus both
//! backward directions), pooling, and nearest-neighbor upsampling.
//!
//! Convolutions lower to im2col plus a dense matrix product per sample. The
//! column buffer is rebuilt on demand in the backward passes instead of being
//! cached, trading FLOPs for a flat memory profile.

use ndarray::{Array2, Array4, ArrayView4, linalg::general_mat_mul};

/// Geometry of a 2-d convolution. Stride, padding, and dilation are (rows, cols).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub dilation: (usize, usize),
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec { stride: (1, 1), pad: (0, 0), dilation: (1, 1) }
    }
}

impl ConvSpec {
    pub fn new(stride: usize, pad: usize) -> Self {
        ConvSpec { stride: (stride, stride), pad: (pad, pad), dilation: (1, 1) }
    }

    pub fn dilated(stride: usize, pad: usize, dilation: usize) -> Self {
        ConvSpec { stride: (stride, stride), pad: (pad, pad), dilation: (dilation, dilation) }
    }

    /// Effective kernel extent after dilation.
    fn span(&self, k: (usize, usize)) -> (usize, usize) {
        (self.dilation.0 * (k.0 - 1) + 1, self.dilation.1 * (k.1 - 1) + 1)
    }

    /// Output height/width for an input of `in_hw` under kernel `k_hw`.
    /// Returns None when the padded input is smaller than the kernel span.
    pub fn out_hw(&self, in_hw: (usize, usize), k_hw: (usize, usize)) -> Option<(usize, usize)> {
        let (sh, sw) = self.span(k_hw);
        let ph = in_hw.0 + 2 * self.pad.0;
        let pw = in_hw.1 + 2 * self.pad.1;
        if ph < sh || pw < sw {
            return None;
        }
        Some(((ph - sh) / self.stride.0 + 1, (pw - sw) / self.stride.1 + 1))
    }
}

/// Unfold one sample `[Ci, H, W]` (given as a flat slice) into `cols[Ci*kh*kw, Ho*Wo]`.
fn im2col(
    xs: &[f64],
    (cin, h, w): (usize, usize, usize),
    k: (usize, usize),
    spec: &ConvSpec,
    (hout, wout): (usize, usize),
    cols: &mut [f64],
) {
    let (kh, kw) = k;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.pad;
    let (dh, dw) = spec.dilation;
    let how = hout * wout;
    for ci in 0..cin {
        let xc = &xs[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let crow = &mut cols[row * how..(row + 1) * how];
                for ho in 0..hout {
                    let ih = (ho * sh + ki * dh) as isize - ph as isize;
                    let dst = &mut crow[ho * wout..(ho + 1) * wout];
                    if ih < 0 || ih >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let xrow = &xc[ih as usize * w..(ih as usize + 1) * w];
                    for (wo, d) in dst.iter_mut().enumerate() {
                        let iw = (wo * sw + kj * dw) as isize - pw as isize;
                        *d = if iw < 0 || iw >= w as isize { 0.0 } else { xrow[iw as usize] };
                    }
                }
            }
        }
    }
}

/// Fold `cols[Ci*kh*kw, Ho*Wo]` back into one sample, accumulating overlaps.
fn col2im(
    cols: &[f64],
    (cin, h, w): (usize, usize, usize),
    k: (usize, usize),
    spec: &ConvSpec,
    (hout, wout): (usize, usize),
    xs: &mut [f64],
) {
    let (kh, kw) = k;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.pad;
    let (dh, dw) = spec.dilation;
    let how = hout * wout;
    for ci in 0..cin {
        let xc = &mut xs[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let crow = &cols[row * how..(row + 1) * how];
                for ho in 0..hout {
                    let ih = (ho * sh + ki * dh) as isize - ph as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let xrow = &mut xc[ih as usize * w..(ih as usize + 1) * w];
                    for (wo, s) in crow[ho * wout..(ho + 1) * wout].iter().enumerate() {
                        let iw = (wo * sw + kj * dw) as isize - pw as isize;
                        if iw >= 0 && iw < w as isize {
                            xrow[iw as usize] += *s;
                        }
                    }
                }
            }
        }
    }
}

/// y[n] = w · im2col(x[n]); shapes x [N,Ci,H,W], w [Co,Ci,kh,kw] -> [N,Co,Ho,Wo].
pub fn conv2d(x: &ArrayView4<f64>, w: &ArrayView4<f64>, spec: &ConvSpec) -> Array4<f64> {
    let (n, cin, h, wd) = x.dim();
    let (cout, cin_w, kh, kw) = w.dim();
    assert_eq!(cin, cin_w, "conv2d: channel mismatch");
    let (hout, wout) = spec
        .out_hw((h, wd), (kh, kw))
        .unwrap_or_else(|| panic!("conv2d: input {}x{} below kernel span", h, wd));
    let ck = cin * kh * kw;
    let how = hout * wout;
    let w_std = w.as_standard_layout();
    let w_mat = w_std.to_shape((cout, ck)).unwrap();
    let mut y = Array4::<f64>::zeros((n, cout, hout, wout));
    let mut cols = Array2::<f64>::zeros((ck, how));
    let x_std = x.as_standard_layout();
    let xs = x_std.as_slice().unwrap();
    for s in 0..n {
        im2col(&xs[s * cin * h * wd..], (cin, h, wd), (kh, kw), spec, (hout, wout), cols.as_slice_mut().unwrap());
        let mut y_mat = y
            .index_axis_mut(ndarray::Axis(0), s)
            .into_shape_with_order((cout, how))
            .unwrap();
        general_mat_mul(1.0, &w_mat, &cols, 0.0, &mut y_mat);
    }
    y
}

/// Gradient of conv2d w.r.t. its input: g [N,Co,Ho,Wo], w [Co,Ci,kh,kw] -> [N,Ci,H,W].
pub fn conv2d_bwd_input(
    g: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    spec: &ConvSpec,
    in_hw: (usize, usize),
) -> Array4<f64> {
    let (n, cout, hout, wout) = g.dim();
    let (cout_w, cin, kh, kw) = w.dim();
    assert_eq!(cout, cout_w, "conv2d_bwd_input: channel mismatch");
    let (h, wd) = in_hw;
    debug_assert_eq!(spec.out_hw((h, wd), (kh, kw)), Some((hout, wout)));
    let ck = cin * kh * kw;
    let how = hout * wout;
    let w_owned = w.as_standard_layout();
    let w_mat = w_owned.to_shape((cout, ck)).unwrap();
    let mut dx = Array4::<f64>::zeros((n, cin, h, wd));
    let mut cols = Array2::<f64>::zeros((ck, how));
    let g_std = g.as_standard_layout();
    let gs = g_std.as_slice().unwrap();
    let dxs = dx.as_slice_mut().unwrap();
    for s in 0..n {
        let g_mat =
            ndarray::ArrayView2::from_shape((cout, how), &gs[s * cout * how..(s + 1) * cout * how])
                .unwrap();
        general_mat_mul(1.0, &w_mat.t(), &g_mat, 0.0, &mut cols.view_mut());
        col2im(
            cols.as_slice().unwrap(),
            (cin, h, wd),
            (kh, kw),
            spec,
            (hout, wout),
            &mut dxs[s * cin * h * wd..(s + 1) * cin * h * wd],
        );
    }
    dx
}

/// Gradient of conv2d w.r.t. its weight: x [N,Ci,H,W], g [N,Co,Ho,Wo] -> [Co,Ci,kh,kw].
pub fn conv2d_bwd_weight(
    x: &ArrayView4<f64>,
    g: &ArrayView4<f64>,
    spec: &ConvSpec,
    k_hw: (usize, usize),
) -> Array4<f64> {
    let (n, cin, h, wd) = x.dim();
    let (n_g, cout, hout, wout) = g.dim();
    assert_eq!(n, n_g, "conv2d_bwd_weight: batch mismatch");
    let (kh, kw) = k_hw;
    debug_assert_eq!(spec.out_hw((h, wd), (kh, kw)), Some((hout, wout)));
    let ck = cin * kh * kw;
    let how = hout * wout;
    let mut dw = Array2::<f64>::zeros((cout, ck));
    let mut cols = Array2::<f64>::zeros((ck, how));
    let x_std = x.as_standard_layout();
    let xs = x_std.as_slice().unwrap();
    let g_std = g.as_standard_layout();
    let gs = g_std.as_slice().unwrap();
    for s in 0..n {
        im2col(&xs[s * cin * h * wd..], (cin, h, wd), (kh, kw), spec, (hout, wout), cols.as_slice_mut().unwrap());
        let g_mat =
            ndarray::ArrayView2::from_shape((cout, how), &gs[s * cout * how..(s + 1) * cout * how])
                .unwrap();
        general_mat_mul(1.0, &g_mat, &cols.t(), 1.0, &mut dw.view_mut());
    }
    dw.into_shape_with_order((cout, cin, kh, kw)).unwrap()
}

/// Non-overlapping window sum; stride equals the window. Dims must divide evenly.
pub fn sum_pool(x: &ArrayView4<f64>, k: (usize, usize)) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let (kh, kw) = k;
    assert!(h % kh == 0 && w % kw == 0, "sum_pool: {}x{} not divisible by {}x{}", h, w, kh, kw);
    let (ho, wo) = (h / kh, w / kw);
    let mut y = Array4::<f64>::zeros((n, c, ho, wo));
    for nn in 0..n {
        for cc in 0..c {
            let xp = x.index_axis(ndarray::Axis(0), nn);
            let xp = xp.index_axis(ndarray::Axis(0), cc);
            let mut yp = y.index_axis_mut(ndarray::Axis(0), nn);
            let mut yp = yp.index_axis_mut(ndarray::Axis(0), cc);
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for di in 0..kh {
                        for dj in 0..kw {
                            acc += xp[(i * kh + di, j * kw + dj)];
                        }
                    }
                    yp[(i, j)] = acc;
                }
            }
        }
    }
    y
}

/// Nearest-neighbor upsampling by integer factors.
pub fn upsample_nearest(x: &ArrayView4<f64>, k: (usize, usize)) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let (kh, kw) = k;
    let mut y = Array4::<f64>::zeros((n, c, h * kh, w * kw));
    for nn in 0..n {
        for cc in 0..c {
            let xp = x.index_axis(ndarray::Axis(0), nn);
            let xp = xp.index_axis(ndarray::Axis(0), cc);
            let mut yp = y.index_axis_mut(ndarray::Axis(0), nn);
            let mut yp = yp.index_axis_mut(ndarray::Axis(0), cc);
            for i in 0..h * kh {
                for j in 0..w * kw {
                    yp[(i, j)] = xp[(i / kh, j / kw)];
                }
            }
        }
    }
    y
}

/// Strided max pooling with implicit negative-infinity padding. Returns the
/// pooled map and, per output element, the flat index of its source in `x`.
pub fn max_pool_idx(
    x: &ArrayView4<f64>,
    k: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
) -> (Array4<f64>, Vec<usize>) {
    let (n, c, h, w) = x.dim();
    let (kh, kw) = k;
    let (sh, sw) = stride;
    let (ph, pw) = pad;
    let ho = (h + 2 * ph - kh) / sh + 1;
    let wo = (w + 2 * pw - kw) / sw + 1;
    let mut y = Array4::<f64>::zeros((n, c, ho, wo));
    let mut idx = vec![0usize; n * c * ho * wo];
    let x_std = x.as_standard_layout();
    let xs = x_std.as_slice().unwrap();
    let mut o = 0;
    for nn in 0..n {
        for cc in 0..c {
            let base = (nn * c + cc) * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = usize::MAX;
                    for di in 0..kh {
                        let ih = (i * sh + di) as isize - ph as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for dj in 0..kw {
                            let iw = (j * sw + dj) as isize - pw as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let at = base + ih as usize * w + iw as usize;
                            // First in-bounds entry seeds the max so NaN
                            // propagates instead of being silently dropped.
                            if best_at == usize::MAX || xs[at] > best {
                                best = xs[at];
                                best_at = at;
                            }
                        }
                    }
                    assert!(best_at != usize::MAX, "max_pool: window covers no input");
                    y[(nn, cc, i, j)] = best;
                    idx[o] = best_at;
                    o += 1;
                }
            }
        }
    }
    (y, idx)
}

/// Adaptive max pooling to a fixed output grid. Bin i covers
/// [floor(i*in/out), ceil((i+1)*in/out)), which also handles out > in.
pub fn adaptive_max_pool_idx(x: &ArrayView4<f64>, out_hw: (usize, usize)) -> (Array4<f64>, Vec<usize>) {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = out_hw;
    // Bin [floor(i*in/out), ceil((i+1)*in/out)) is nonempty and within range
    // for any in/out pair, including out > in.
    let bin = |i: usize, inp: usize, out: usize| -> (usize, usize) {
        (i * inp / out, ((i + 1) * inp + out - 1) / out)
    };
    let mut y = Array4::<f64>::zeros((n, c, ho, wo));
    let mut idx = vec![0usize; n * c * ho * wo];
    let x_std = x.as_standard_layout();
    let xs = x_std.as_slice().unwrap();
    let mut o = 0;
    for nn in 0..n {
        for cc in 0..c {
            let base = (nn * c + cc) * h * w;
            for i in 0..ho {
                let (hs, he) = bin(i, h, ho);
                for j in 0..wo {
                    let (ws, we) = bin(j, w, wo);
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = usize::MAX;
                    for ih in hs..he {
                        for iw in ws..we {
                            let at = base + ih * w + iw;
                            if best_at == usize::MAX || xs[at] > best {
                                best = xs[at];
                                best_at = at;
                            }
                        }
                    }
                    assert!(best_at != usize::MAX, "adaptive_max_pool: empty bin");
                    y[(nn, cc, i, j)] = best;
                    idx[o] = best_at;
                    o += 1;
                }
            }
        }
    }
    (y, idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let x = Array4::from_shape_fn((1, 1, 3, 3), |(_, _, i, j)| (i * 3 + j) as f64);
        let w = Array4::from_shape_vec((1, 1, 1, 1), vec![1.0]).unwrap();
        let y = conv2d(&x.view(), &w.view(), &ConvSpec::new(1, 0));
        assert_eq!(y, x);
    }

    #[test]
    fn conv_matches_hand_computed_window() {
        // 2x2 input, 2x2 kernel, valid: single dot product.
        let x = Array4::from_shape_vec((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Array4::from_shape_vec((1, 1, 2, 2), vec![10.0, 20.0, 30.0, 40.0]).unwrap();
        let y = conv2d(&x.view(), &w.view(), &ConvSpec::new(1, 0));
        assert_eq!(y[(0, 0, 0, 0)], 1.0 * 10.0 + 2.0 * 20.0 + 3.0 * 30.0 + 4.0 * 40.0);
    }

    #[test]
    fn conv_stride_two_halves_even_dims() {
        let x = Array4::<f64>::zeros((2, 3, 8, 6));
        let w = Array4::<f64>::zeros((5, 3, 3, 3));
        let y = conv2d(&x.view(), &w.view(), &ConvSpec::new(2, 1));
        assert_eq!(y.dim(), (2, 5, 4, 3));
    }

    #[test]
    fn dilated_conv_output_geometry() {
        let x = Array4::<f64>::zeros((1, 2, 16, 8));
        let w = Array4::<f64>::zeros((4, 2, 3, 3));
        // pad = dilation keeps spatial size for 3x3 kernels.
        for d in [1usize, 2, 4] {
            let y = conv2d(&x.view(), &w.view(), &ConvSpec::dilated(1, d, d));
            assert_eq!(y.dim(), (1, 4, 16, 8), "dilation {}", d);
        }
    }

    #[test]
    fn undersized_input_is_rejected() {
        let spec = ConvSpec::new(1, 0);
        assert_eq!(spec.out_hw((2, 2), (3, 3)), None);
        assert_eq!(spec.out_hw((3, 3), (3, 3)), Some((1, 1)));
    }

    #[test]
    fn sum_pool_and_upsample_are_adjoint_shapes() {
        let x = Array4::from_shape_fn((1, 2, 4, 4), |(_, c, i, j)| (c * 16 + i * 4 + j) as f64);
        let y = sum_pool(&x.view(), (2, 2));
        assert_eq!(y.dim(), (1, 2, 2, 2));
        assert_eq!(y[(0, 0, 0, 0)], 0.0 + 1.0 + 4.0 + 5.0);
        let u = upsample_nearest(&y.view(), (2, 2));
        assert_eq!(u.dim(), x.dim());
        assert_eq!(u[(0, 0, 1, 1)], y[(0, 0, 0, 0)]);
    }

    #[test]
    fn max_pool_records_argmax_positions() {
        let x = Array4::from_shape_vec(
            (1, 1, 2, 4),
            vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 8.0, 7.0],
        )
        .unwrap();
        let (y, idx) = max_pool_idx(&x.view(), (2, 2), (2, 2), (0, 0));
        assert_eq!(y, array![[[[5.0, 8.0]]]].into_dyn().into_dimensionality().unwrap());
        assert_eq!(idx, vec![1, 6]);
    }

    #[test]
    fn adaptive_pool_handles_output_larger_than_input() {
        let x = Array4::from_shape_vec((1, 1, 2, 1), vec![3.0, 9.0]).unwrap();
        let (y, _) = adaptive_max_pool_idx(&x.view(), (4, 1));
        assert_eq!(y.dim(), (1, 1, 4, 1));
        assert_eq!(
            y.iter().copied().collect::<Vec<_>>(),
            vec![3.0, 3.0, 9.0, 9.0]
        );
    }

    #[test]
    fn adaptive_pool_to_four_by_one() {
        let x = Array4::from_shape_fn((1, 1, 8, 4), |(_, _, i, j)| (i * 4 + j) as f64);
        let (y, _) = adaptive_max_pool_idx(&x.view(), (4, 1));
        assert_eq!(y.dim(), (1, 1, 4, 1));
        // Each bin spans 2 rows and the full width; max sits at the row end.
        assert_eq!(
            y.iter().copied().collect::<Vec<_>>(),
            vec![7.0, 15.0, 23.0, 31.0]
        );
    }
}
