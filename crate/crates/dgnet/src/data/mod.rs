//! Dataset loading, image preprocessing, and training batch sampling.
//!
//! Three directory layouts are understood:
//! - `market`: flat folders of `{pid:04}_c{cam}s{seq}_{frame}_{box}.jpg`
//!   files with the usual `bounding_box_train` / `query` / `bounding_box_test`
//!   split subdirectories; a pid of -1 marks junk images, which carry no
//!   class label and are ignored by the sampler and the retrieval protocol;
//! - `folder_per_id`: `root/{pid}/*.png|jpg`, with an optional `c{digits}`
//!   token in the file stem carrying a camera index (0 when absent);
//! - `manifest`: a TSV of `path<TAB>pid<TAB>cam` rows, paths resolved
//!   relative to the manifest file.
//!
//! Items are sorted by path after collection so enumeration order never
//! depends on the directory walk.

pub mod toy;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, ArrayD};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::{DataCfg, Layout};
use crate::error::{DgError, Result};

/// One image entry. `pid` is the raw identity label from the source; `cam`
/// distinguishes capture viewpoints for the retrieval protocol.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Item {
    pub path: PathBuf,
    pub pid: i64,
    pub cam: u32,
}

/// A loaded split: items plus the sorted set of identity classes.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub items: Vec<Item>,
    pub classes: Vec<i64>,
    label_of: HashMap<i64, usize>,
}

impl Dataset {
    fn from_items(mut items: Vec<Item>) -> Dataset {
        items.sort_by(|a, b| a.path.cmp(&b.path));
        let mut classes: Vec<i64> = items.iter().map(|it| it.pid).filter(|&p| p >= 0).collect();
        classes.sort_unstable();
        classes.dedup();
        let label_of = classes.iter().enumerate().map(|(i, &p)| (p, i)).collect();
        Dataset { items, classes, label_of }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Class index of an item; None for junk entries.
    pub fn label(&self, item: &Item) -> Option<usize> {
        self.label_of.get(&item.pid).copied()
    }

    /// Load one directory (or manifest file) in the given layout.
    pub fn load(root: &Path, layout: Layout) -> Result<Dataset> {
        let items = match layout {
            Layout::Market => load_market_dir(root)?,
            Layout::FolderPerId => load_folder_per_id(root)?,
            Layout::Manifest => load_manifest(root)?,
        };
        if items.is_empty() {
            return Err(DgError::Data(format!("no images found under {}", root.display())));
        }
        Ok(Dataset::from_items(items))
    }

    /// Resolve the directory for a named split. Market layouts use the
    /// conventional subdirectories; the other layouts use `root/{split}`
    /// when that directory exists and otherwise fall back to the root.
    pub fn split_dir(root: &Path, layout: Layout, split: &str) -> Result<PathBuf> {
        match layout {
            Layout::Market => {
                let sub = match split {
                    "train" => "bounding_box_train",
                    "query" => "query",
                    "gallery" => "bounding_box_test",
                    other => return Err(DgError::Data(format!("unknown split '{}'", other))),
                };
                Ok(root.join(sub))
            }
            _ => match split {
                "train" | "query" | "gallery" => {
                    let sub = root.join(split);
                    Ok(if sub.is_dir() { sub } else { root.to_path_buf() })
                }
                other => Err(DgError::Data(format!("unknown split '{}'", other))),
            },
        }
    }
}

fn is_image_name(name: &str) -> bool {
    let lower = name.to_ascii_lowercase();
    lower.ends_with(".jpg") || lower.ends_with(".jpeg") || lower.ends_with(".png")
}

/// Parse `{pid}_c{cam}s...` naming. Junk images keep their -1 label; the
/// sampler and retrieval protocol treat them as unlabeled.
fn parse_market_name(path: &Path) -> Result<Item> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| DgError::Data(format!("non-utf8 file name: {}", path.display())))?;
    let mut parts = stem.split('_');
    let pid_tok = parts
        .next()
        .ok_or_else(|| DgError::Data(format!("malformed name '{}': missing id", stem)))?;
    let pid: i64 = pid_tok
        .parse()
        .map_err(|_| DgError::Data(format!("malformed name '{}': bad id '{}'", stem, pid_tok)))?;
    let cam_tok = parts
        .next()
        .ok_or_else(|| DgError::Data(format!("malformed name '{}': missing camera token", stem)))?;
    let cam_str = cam_tok
        .strip_prefix('c')
        .ok_or_else(|| DgError::Data(format!("malformed name '{}': camera token '{}'", stem, cam_tok)))?;
    let digits: String = cam_str.chars().take_while(|c| c.is_ascii_digit()).collect();
    if digits.is_empty() {
        return Err(DgError::Data(format!("malformed name '{}': camera token '{}'", stem, cam_tok)));
    }
    let cam: u32 = digits
        .parse()
        .map_err(|_| DgError::Data(format!("malformed name '{}': camera '{}'", stem, digits)))?;
    Ok(Item { path: path.to_path_buf(), pid, cam })
}

fn load_market_dir(dir: &Path) -> Result<Vec<Item>> {
    let mut out = Vec::new();
    let rd = std::fs::read_dir(dir)
        .map_err(|e| DgError::Data(format!("cannot read {}: {}", dir.display(), e)))?;
    for entry in rd {
        let entry = entry?;
        let path = entry.path();
        if !path.is_file() {
            continue;
        }
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if !is_image_name(&name) {
            continue;
        }
        match parse_market_name(&path) {
            Ok(item) => out.push(item),
            Err(e) => log::warn!("skipping {}: {}", path.display(), e),
        }
    }
    Ok(out)
}

/// Optional `c{digits}` token anywhere in an underscore-separated stem.
fn cam_from_stem(stem: &str) -> u32 {
    for tok in stem.split('_') {
        if let Some(rest) = tok.strip_prefix('c') {
            if !rest.is_empty() && rest.chars().all(|c| c.is_ascii_digit()) {
                if let Ok(v) = rest.parse() {
                    return v;
                }
            }
        }
    }
    0
}

fn load_folder_per_id(root: &Path) -> Result<Vec<Item>> {
    let mut out = Vec::new();
    let rd = std::fs::read_dir(root)
        .map_err(|e| DgError::Data(format!("cannot read {}: {}", root.display(), e)))?;
    for entry in rd {
        let entry = entry?;
        let dir = entry.path();
        if !dir.is_dir() {
            continue;
        }
        let dname = entry.file_name();
        let dname = dname.to_string_lossy();
        let pid: i64 = dname.parse().map_err(|_| {
            DgError::Data(format!("identity folder '{}' is not numeric", dname))
        })?;
        for f in std::fs::read_dir(&dir)? {
            let f = f?;
            let path = f.path();
            let name = f.file_name();
            let name = name.to_string_lossy();
            if !path.is_file() || !is_image_name(&name) {
                continue;
            }
            let stem = path.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
            out.push(Item { path, pid, cam: cam_from_stem(&stem) });
        }
    }
    Ok(out)
}

fn load_manifest(file: &Path) -> Result<Vec<Item>> {
    let text = std::fs::read_to_string(file)
        .map_err(|e| DgError::Data(format!("cannot read manifest {}: {}", file.display(), e)))?;
    let base = file.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split('\t');
        let (p, pid, cam) = match (cols.next(), cols.next(), cols.next()) {
            (Some(p), Some(i), Some(c)) => (p, i, c),
            _ => {
                return Err(DgError::Data(format!(
                    "manifest line {}: expected 'path<TAB>id<TAB>cam', got '{}'",
                    lineno + 1,
                    raw
                )))
            }
        };
        let pid: i64 = pid.trim().parse().map_err(|_| {
            DgError::Data(format!("manifest line {}: bad id '{}'", lineno + 1, pid))
        })?;
        let cam: u32 = cam.trim().parse().map_err(|_| {
            DgError::Data(format!("manifest line {}: bad camera '{}'", lineno + 1, cam))
        })?;
        let path = Path::new(p);
        let path = if path.is_absolute() { path.to_path_buf() } else { base.join(path) };
        out.push(Item { path, pid, cam });
    }
    Ok(out)
}

// ---- preprocessing ----

/// Image-to-tensor conversion: decode, resize to the configured geometry,
/// scale to [0,1], then shift/scale per channel. With the default identity
/// normalization, tensors stay in [0,1].
#[derive(Clone, Debug)]
pub struct Preprocess {
    pub height: usize,
    pub width: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Preprocess {
    pub fn from_cfg(d: &DataCfg) -> Preprocess {
        Preprocess {
            height: d.height,
            width: d.width,
            mean: [d.mean[0], d.mean[1], d.mean[2]],
            std: [d.std[0], d.std[1], d.std[2]],
        }
    }

    pub fn load(&self, path: &Path) -> Result<Array3<f64>> {
        let img = image::open(path).map_err(|e| DgError::Image {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        Ok(self.tensorize(&rgb))
    }

    pub fn tensorize(&self, rgb: &image::RgbImage) -> Array3<f64> {
        let resized;
        let src = if rgb.width() as usize == self.width && rgb.height() as usize == self.height {
            rgb
        } else {
            resized = image::imageops::resize(
                rgb,
                self.width as u32,
                self.height as u32,
                image::imageops::FilterType::Triangle,
            );
            &resized
        };
        let mut out = Array3::<f64>::zeros((3, self.height, self.width));
        for (x, y, p) in src.enumerate_pixels() {
            for c in 0..3 {
                let v = p.0[c] as f64 / 255.0;
                out[(c, y as usize, x as usize)] = (v - self.mean[c]) / self.std[c];
            }
        }
        out
    }

    /// Stack items into a `[N, 3, H, W]` batch tensor.
    pub fn batch(&self, items: &[&Item]) -> Result<Array4<f64>> {
        let mut out = Array4::<f64>::zeros((items.len(), 3, self.height, self.width));
        for (n, it) in items.iter().enumerate() {
            let t = self.load(&it.path)?;
            out.index_axis_mut(ndarray::Axis(0), n).assign(&t);
        }
        Ok(out)
    }
}

/// ITU-R 601 luminance weights shared by the data path and the in-graph
/// grayscale of generated images.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Per-pixel luminance, `[N,3,H,W]` to `[N,1,H,W]` (structure-branch input).
pub fn grayscale(batch: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = batch.dim();
    assert_eq!(c, 3, "grayscale expects 3 channels");
    let mut out = Array4::<f64>::zeros((n, 1, h, w));
    for nn in 0..n {
        for i in 0..h {
            for j in 0..w {
                out[(nn, 0, i, j)] = LUMA[0] * batch[(nn, 0, i, j)]
                    + LUMA[1] * batch[(nn, 1, i, j)]
                    + LUMA[2] * batch[(nn, 2, i, j)];
            }
        }
    }
    out
}

/// Replicate a single channel back to three (for re-applying 3-channel ops
/// to a gray image).
pub fn replicate3(batch: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = batch.dim();
    assert_eq!(c, 1, "replicate3 expects 1 channel");
    let mut out = Array4::<f64>::zeros((n, 3, h, w));
    for ch in 0..3 {
        out.slice_mut(ndarray::s![.., ch..ch + 1, .., ..]).assign(batch);
    }
    out
}

/// Mirror images left-right (train-time augmentation).
pub fn hflip(batch: &Array4<f64>) -> Array4<f64> {
    let mut out = batch.clone();
    out.invert_axis(ndarray::Axis(3));
    out
}

pub fn to_dyn(a: Array4<f64>) -> ArrayD<f64> {
    a.into_dyn()
}

pub fn dyn_to4(a: &ArrayD<f64>) -> Array4<f64> {
    a.to_owned().into_dimensionality().expect("rank-4 tensor")
}

/// Zero-copy view helper for `[N,3,H,W]` data kept dynamic.
pub fn from_dyn_view(a: &ndarray::ArrayViewD<f64>) -> Array4<f64> {
    a.to_owned().into_dimensionality().expect("rank-4 tensor")
}

// ---- training batches ----

/// Indices for one training step: anchors, same-identity partners, and a
/// cross-identity pairing with its labels.
#[derive(Clone, Debug)]
pub struct BatchPlan {
    pub i: Vec<usize>,
    pub t: Vec<usize>,
    pub j: Vec<usize>,
    pub y_i: Vec<usize>,
    pub y_j: Vec<usize>,
}

/// Samples identity-balanced batches: `ids` distinct classes, `insts` images
/// each. The cross-identity partner `x_j` for a slot is the corresponding
/// slot of the next class block, so labels stay within the batch.
pub struct PairSampler {
    per_class: Vec<Vec<usize>>,
    pub ids: usize,
    pub insts: usize,
}

impl PairSampler {
    pub fn new(ds: &Dataset, ids: usize, insts: usize) -> Result<PairSampler> {
        let mut per_class = vec![Vec::new(); ds.num_classes()];
        for (i, it) in ds.items.iter().enumerate() {
            if let Some(l) = ds.label(it) {
                per_class[l].push(i);
            }
        }
        let non_empty = per_class.iter().filter(|v| !v.is_empty()).count();
        if non_empty < ids {
            return Err(DgError::Data(format!(
                "need at least {} identities with images, found {}",
                ids, non_empty
            )));
        }
        Ok(PairSampler { per_class, ids, insts })
    }

    pub fn sample(&self, rng: &mut impl Rng) -> BatchPlan {
        let usable: Vec<usize> = (0..self.per_class.len())
            .filter(|&c| !self.per_class[c].is_empty())
            .collect();
        let mut chosen = usable;
        chosen.shuffle(rng);
        chosen.truncate(self.ids);

        let b = self.ids * self.insts;
        let mut plan = BatchPlan {
            i: Vec::with_capacity(b),
            t: Vec::with_capacity(b),
            j: Vec::with_capacity(b),
            y_i: Vec::with_capacity(b),
            y_j: Vec::with_capacity(b),
        };
        for &class in chosen.iter() {
            let pool = &self.per_class[class];
            for _ in 0..self.insts {
                let xi = pool[rng.gen_range(0..pool.len())];
                // Partner from the same identity, a different image when one
                // exists.
                let xt = if pool.len() > 1 {
                    loop {
                        let c = pool[rng.gen_range(0..pool.len())];
                        if c != xi {
                            break c;
                        }
                    }
                } else {
                    xi
                };
                plan.i.push(xi);
                plan.t.push(xt);
                plan.y_i.push(class);
            }
        }
        // Cross-identity pairing: rotate by one class block.
        for slot in 0..b {
            let part = (slot + self.insts) % b;
            plan.j.push(plan.i[part]);
            plan.y_j.push(plan.y_i[part]);
        }
        plan
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn market_names_parse_and_reject() {
        let it = parse_market_name(Path::new("/d/0002_c1s1_000451_03.jpg")).unwrap();
        assert_eq!((it.pid, it.cam), (2, 1));
        let junk = parse_market_name(Path::new("/d/-1_c3s2_000000_00.jpg")).unwrap();
        assert_eq!((junk.pid, junk.cam), (-1, 3));
        assert!(parse_market_name(Path::new("/d/garbage.jpg")).is_err());
        assert!(parse_market_name(Path::new("/d/0001_x1s1_0_0.jpg")).is_err());
    }

    #[test]
    fn camera_token_is_optional_in_folder_stems() {
        assert_eq!(cam_from_stem("img_c2"), 2);
        assert_eq!(cam_from_stem("005_c13"), 13);
        assert_eq!(cam_from_stem("photo"), 0);
        assert_eq!(cam_from_stem("c"), 0);
        assert_eq!(cam_from_stem("cat_photo"), 0);
    }

    #[test]
    fn grayscale_pure_red_is_luma_weight() {
        let mut b = Array4::<f64>::zeros((1, 3, 2, 2));
        b.index_axis_mut(ndarray::Axis(1), 0).fill(1.0);
        let g = grayscale(&b);
        assert_eq!(g.dim(), (1, 1, 2, 2));
        assert!((g[(0, 0, 0, 0)] - 0.299).abs() < 1e-12);
    }

    #[test]
    fn grayscale_white_stays_one_and_is_idempotent() {
        let b = Array4::<f64>::from_elem((1, 3, 2, 2), 1.0);
        let g = grayscale(&b);
        assert!((g[(0, 0, 0, 0)] - 1.0).abs() < 1e-12);
        // Luma weights sum to 1, so re-applying to a replicated gray image
        // is the identity.
        let mut rng_like = Array4::<f64>::zeros((2, 3, 3, 3));
        for (i, v) in rng_like.iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin().abs();
        }
        let once = grayscale(&rng_like);
        let twice = grayscale(&replicate3(&once));
        for (a, b) in once.iter().zip(twice.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn hflip_mirrors_columns() {
        let mut b = Array4::<f64>::zeros((1, 3, 1, 4));
        for j in 0..4 {
            b[(0, 0, 0, j)] = j as f64;
        }
        let f = hflip(&b);
        assert_eq!(f[(0, 0, 0, 0)], 3.0);
        assert_eq!(f[(0, 0, 0, 3)], 0.0);
        let ff = hflip(&f);
        assert_eq!(ff, b);
    }
}
