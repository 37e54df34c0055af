//! Qualitative generation tools: appearance/structure swap grids and code
//! interpolation strips, plus PNG export of tensor images.

use autograd::Tape;
use ndarray::{Array3, Array4, ArrayD, Axis, s};
use std::path::Path;

use crate::data::grayscale;
use crate::error::{DgError, Result};
use crate::model::JointModel;

/// Which latent code sweeps between the two endpoints; the other code is
/// held at its value from the first endpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InterpMode {
    Appearance,
    Structure,
}

/// Decoded tile matrix plus the source images that index it. Rows share an
/// appearance code, columns share a structure code, so when the same list
/// feeds both axes the diagonal is self-reconstruction.
pub struct SwapGrid {
    /// `tiles[r][c]` is decoded from appearance r and structure c, `[3,H,W]`.
    pub tiles: Vec<Vec<Array3<f64>>>,
    /// Appearance sources, one per row.
    pub row_sources: Vec<Array3<f64>>,
    /// Structure sources, one per column.
    pub col_sources: Vec<Array3<f64>>,
}

fn encode_appearance(model: &JointModel, batch: &Array4<f64>) -> ArrayD<f64> {
    let mut t = Tape::new();
    let x = t.constant(batch.clone().into_dyn());
    let code = model.ea.encode(&mut t, x, false);
    t.data(code).to_owned()
}

fn encode_structure(model: &JointModel, batch: &Array4<f64>) -> ArrayD<f64> {
    let mut t = Tape::new();
    let x = t.constant(grayscale(batch).into_dyn());
    let code = model.es.encode(&mut t, x);
    t.data(code).to_owned()
}

fn decode_one(model: &JointModel, a: ArrayD<f64>, s: ArrayD<f64>) -> Array3<f64> {
    let mut t = Tape::new();
    let an = t.constant(a);
    let sn = t.constant(s);
    let out = model.g.decode(&mut t, an, sn);
    let y = t.data(out).to_owned();
    y.index_axis(Axis(0), 0)
        .to_owned()
        .into_dimensionality()
        .expect("decoder emits [N,3,H,W]")
}

fn row_of(code: &ArrayD<f64>, i: usize) -> ArrayD<f64> {
    code.index_axis(Axis(0), i).to_owned().insert_axis(Axis(0))
}

/// Decode every (appearance, structure) pair from two source batches, in
/// eval mode one tile at a time so memory stays flat in the grid area.
pub fn swap_grid(model: &JointModel, rows: &Array4<f64>, cols: &Array4<f64>) -> Result<SwapGrid> {
    if rows.shape()[0] == 0 || cols.shape()[0] == 0 {
        return Err(DgError::Data("swap grid needs at least one source per axis".into()));
    }
    let a_codes = encode_appearance(model, rows);
    let s_codes = encode_structure(model, cols);
    let mut tiles = Vec::with_capacity(rows.shape()[0]);
    for r in 0..rows.shape()[0] {
        let mut line = Vec::with_capacity(cols.shape()[0]);
        for c in 0..cols.shape()[0] {
            line.push(decode_one(model, row_of(&a_codes, r), row_of(&s_codes, c)));
        }
        tiles.push(line);
    }
    let take = |b: &Array4<f64>, i: usize| b.index_axis(Axis(0), i).to_owned();
    Ok(SwapGrid {
        tiles,
        row_sources: (0..rows.shape()[0]).map(|i| take(rows, i)).collect(),
        col_sources: (0..cols.shape()[0]).map(|i| take(cols, i)).collect(),
    })
}

impl SwapGrid {
    pub fn rows(&self) -> usize {
        self.tiles.len()
    }

    pub fn cols(&self) -> usize {
        self.tiles[0].len()
    }

    /// One image holding the whole grid with its sources on the margins:
    /// structure sources across the top, appearance sources down the left,
    /// and a blank top-left corner.
    pub fn mosaic(&self) -> Array3<f64> {
        let (_, h, w) = self.tiles[0][0].dim();
        let (nr, nc) = (self.rows(), self.cols());
        let mut out = Array3::<f64>::ones((3, (nr + 1) * h, (nc + 1) * w));
        let mut put = |img: &Array3<f64>, r: usize, c: usize| {
            out.slice_mut(s![.., r * h..(r + 1) * h, c * w..(c + 1) * w]).assign(img);
        };
        for (c, src) in self.col_sources.iter().enumerate() {
            put(src, 0, c + 1);
        }
        for (r, src) in self.row_sources.iter().enumerate() {
            put(src, r + 1, 0);
        }
        for r in 0..nr {
            for c in 0..nc {
                put(&self.tiles[r][c], r + 1, c + 1);
            }
        }
        out
    }

    /// Color dispersion along each axis: mean variance of per-tile color
    /// histograms across a row (appearance fixed) and across a column
    /// (structure fixed). Disentangled codes keep rows tighter than
    /// columns, since rows share the code that carries color.
    pub fn color_dispersion(&self) -> (f64, f64) {
        let hist: Vec<Vec<Vec<f64>>> = self
            .tiles
            .iter()
            .map(|line| line.iter().map(color_histogram).collect())
            .collect();
        let (nr, nc) = (self.rows(), self.cols());
        let row_var = (0..nr)
            .map(|r| {
                let group: Vec<&Vec<f64>> = (0..nc).map(|c| &hist[r][c]).collect();
                histogram_variance(&group)
            })
            .sum::<f64>()
            / nr as f64;
        let col_var = (0..nc)
            .map(|c| {
                let group: Vec<&Vec<f64>> = (0..nr).map(|r| &hist[r][c]).collect();
                histogram_variance(&group)
            })
            .sum::<f64>()
            / nc as f64;
        (row_var, col_var)
    }
}

/// Normalized 8-bins-per-channel color histogram of a `[3,H,W]` image in
/// [0,1]; out-of-range values land in the edge bins.
fn color_histogram(img: &Array3<f64>) -> Vec<f64> {
    let (_, h, w) = img.dim();
    let mut bins = vec![0.0f64; 24];
    for ch in 0..3 {
        for i in 0..h {
            for j in 0..w {
                let v = img[[ch, i, j]].clamp(0.0, 1.0);
                let b = ((v * 8.0) as usize).min(7);
                bins[ch * 8 + b] += 1.0;
            }
        }
    }
    let total = (h * w) as f64;
    for b in &mut bins {
        *b /= total;
    }
    bins
}

/// Mean over bins of the population variance across the group.
fn histogram_variance(group: &[&Vec<f64>]) -> f64 {
    let n = group.len() as f64;
    let dims = group[0].len();
    let mut acc = 0.0;
    for d in 0..dims {
        let mean = group.iter().map(|g| g[d]).sum::<f64>() / n;
        acc += group.iter().map(|g| (g[d] - mean).powi(2)).sum::<f64>() / n;
    }
    acc / dims as f64
}

/// Elementwise `(1 - t) * c0 + t * c1`.
pub fn lerp(c0: &ArrayD<f64>, c1: &ArrayD<f64>, t: f64) -> ArrayD<f64> {
    c0 * (1.0 - t) + c1 * t
}

/// Decode a strip that sweeps one latent code between two images while the
/// other code stays at its value from the first image. Step k of `steps`
/// sits at t = k / (steps - 1), so the endpoints decode the unmixed codes.
pub fn interpolate(
    model: &JointModel,
    first: &Array3<f64>,
    second: &Array3<f64>,
    steps: usize,
    mode: InterpMode,
) -> Result<Vec<Array3<f64>>> {
    if steps < 2 {
        return Err(DgError::Data(format!(
            "interpolation needs at least 2 steps to place both endpoints, got {}",
            steps
        )));
    }
    let pair = ndarray::stack(Axis(0), &[first.view(), second.view()])
        .expect("endpoints share a shape");
    let a_codes = encode_appearance(model, &pair);
    let s_codes = encode_structure(model, &pair);
    let (a0, a1) = (row_of(&a_codes, 0), row_of(&a_codes, 1));
    let (s0, s1) = (row_of(&s_codes, 0), row_of(&s_codes, 1));
    let mut frames = Vec::with_capacity(steps);
    for k in 0..steps {
        let t = k as f64 / (steps - 1) as f64;
        let (a, s) = match mode {
            InterpMode::Appearance => (lerp(&a0, &a1, t), s0.clone()),
            InterpMode::Structure => (a0.clone(), lerp(&s0, &s1, t)),
        };
        frames.push(decode_one(model, a, s));
    }
    Ok(frames)
}

/// Horizontal concatenation of same-sized `[3,H,W]` frames.
pub fn strip(frames: &[Array3<f64>]) -> Array3<f64> {
    assert!(!frames.is_empty());
    let (_, h, w) = frames[0].dim();
    let mut out = Array3::<f64>::zeros((3, h, w * frames.len()));
    for (k, f) in frames.iter().enumerate() {
        out.slice_mut(s![.., .., k * w..(k + 1) * w]).assign(f);
    }
    out
}

/// Write a `[3,H,W]` tensor in [0,1] as an 8-bit PNG; values are clamped.
pub fn save_png(img: &Array3<f64>, path: &Path) -> Result<()> {
    let (_, h, w) = img.dim();
    let mut rgb = image::RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let px = [0, 1, 2].map(|c| (img[[c, i, j]].clamp(0.0, 1.0) * 255.0).round() as u8);
            rgb.put_pixel(j as u32, i as u32, image::Rgb(px));
        }
    }
    rgb.save(path).map_err(|e| DgError::Image {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}
