//! Synthetic person-like dataset for smoke tests and the desk profile.
//!
//! Each identity gets a fixed torso color, leg color, and body width; each
//! rendered image randomizes background color and figure position, and
//! alternates between two simulated cameras that differ by a global
//! brightness factor. Identity is therefore carried jointly by color
//! (appearance) and silhouette width (structure), while position and
//! background are nuisance variation.
//!
//! Output layout is `folder_per_id` under `train/`, `query/`, and
//! `gallery/` subdirectories, with camera indices embedded in file stems as
//! `c{cam}`. Generation is deterministic: every image derives its own RNG
//! from (seed, split, id, index), so outputs are byte-identical across runs
//! and independent of generation order.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{DgError, Result};

#[derive(Clone, Debug)]
pub struct ToySpec {
    pub ids: usize,
    pub per_id: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl ToySpec {
    pub fn new(ids: usize, per_id: usize, height: usize, width: usize, seed: u64) -> ToySpec {
        ToySpec { ids, per_id, height, width, seed }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToySummary {
    pub ids: usize,
    pub train_images: usize,
    pub query_images: usize,
    pub gallery_images: usize,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn image_rng(seed: u64, split: u64, id: usize, idx: usize) -> ChaCha12Rng {
    let mix = splitmix(seed ^ splitmix(split.wrapping_mul(0x10001).wrapping_add(id as u64) << 16 | idx as u64));
    ChaCha12Rng::seed_from_u64(mix)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor() as i64;
    let f = h - i as f64;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i.rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Stable per-identity attributes.
struct IdStyle {
    torso: [f64; 3],
    legs: [f64; 3],
    /// Body width as a fraction of image width; the structural identity cue.
    width_frac: f64,
}

fn id_style(seed: u64, id: usize) -> IdStyle {
    let mut rng = ChaCha12Rng::seed_from_u64(splitmix(seed.wrapping_add(0xA11CE) ^ (id as u64)));
    // Golden-ratio hue walk keeps identity colors well separated.
    let hue = (id as f64) * 0.618_033_988_749_895 + rng.gen_range(0.0..0.05);
    let torso = hsv_to_rgb(hue, 0.85, 0.95);
    let legs = hsv_to_rgb(hue + 0.37, 0.8, 0.75);
    let widths = [0.30, 0.42, 0.54, 0.66];
    let width_frac = widths[id % widths.len()];
    IdStyle { torso, legs, width_frac }
}

fn render(spec: &ToySpec, style: &IdStyle, rng: &mut ChaCha12Rng, cam: u32) -> image::RgbImage {
    let (h, w) = (spec.height as i64, spec.width as i64);
    let bg = [
        rng.gen_range(0.08..0.30),
        rng.gen_range(0.08..0.30),
        rng.gen_range(0.08..0.30),
    ];
    // Position jitter: structure noise uncorrelated with identity.
    let dx = rng.gen_range(-(w / 10)..=(w / 10));
    let dy = rng.gen_range(-(h / 16)..=(h / 16));
    let body_w = ((style.width_frac * w as f64).round() as i64 + rng.gen_range(-1..=1)).max(3);

    let cx = w / 2 + dx;
    let head_top = h / 8 + dy;
    let head_h = h / 8;
    let torso_top = head_top + head_h;
    let torso_bot = torso_top + (h * 3) / 8;
    let legs_bot = torso_bot + (h * 5) / 16;
    let head_r = (body_w / 3).max(2);
    let skin = [0.92, 0.76, 0.62];

    let gain = if cam == 0 { 1.0 } else { 0.90 };
    let mut img = image::RgbImage::new(spec.width as u32, spec.height as u32);
    for y in 0..h {
        for x in 0..w {
            let mut px = bg;
            let in_body_x = (x - cx).abs() * 2 <= body_w;
            if y >= torso_top && y < torso_bot && in_body_x {
                px = style.torso;
            } else if y >= torso_bot && y < legs_bot && in_body_x {
                px = style.legs;
            } else {
                let hy = head_top + head_h / 2;
                let r2 = (x - cx) * (x - cx) + (y - hy) * (y - hy) * 2;
                if r2 <= head_r * head_r {
                    px = skin;
                }
            }
            let to_u8 = |v: f64| ((v * gain).clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, image::Rgb([to_u8(px[0]), to_u8(px[1]), to_u8(px[2])]));
        }
    }
    img
}

fn write_split(
    root: &Path,
    split: &str,
    split_tag: u64,
    spec: &ToySpec,
    count_per_id: usize,
    cam_of: impl Fn(usize) -> u32,
) -> Result<usize> {
    let mut written = 0;
    for id in 0..spec.ids {
        let dir = root.join(split).join(format!("{:03}", id));
        std::fs::create_dir_all(&dir)?;
        let style = id_style(spec.seed, id);
        for idx in 0..count_per_id {
            let cam = cam_of(idx);
            let mut rng = image_rng(spec.seed, split_tag, id, idx);
            let img = render(spec, &style, &mut rng, cam);
            let path = dir.join(format!("{:03}_c{}.png", idx, cam));
            img.save(&path).map_err(|e| DgError::Image {
                path: path.clone(),
                detail: e.to_string(),
            })?;
            written += 1;
        }
    }
    Ok(written)
}

/// Generate the full toy corpus. Refuses to write into a non-empty
/// directory unless `force` is set.
pub fn generate(root: &Path, spec: &ToySpec, force: bool) -> Result<ToySummary> {
    // One identity is allowed: such a corpus supports same-identity
    // reconstruction only, and the batch sampler refuses cross-identity
    // training on it with its own message.
    if spec.ids < 1 {
        return Err(DgError::Data("toy corpus needs at least 1 identity".into()));
    }
    if spec.per_id < 2 {
        return Err(DgError::Data("toy corpus needs at least 2 images per identity".into()));
    }
    if root.exists() {
        let non_empty = std::fs::read_dir(root)?.next().is_some();
        if non_empty && !force {
            return Err(DgError::Data(format!(
                "refusing to write into non-empty {} (use --force to override)",
                root.display()
            )));
        }
    }
    std::fs::create_dir_all(root)?;

    // Train alternates cameras per image. Queries are all camera 0; the
    // gallery alternates, so every query has both same-camera entries (which
    // the retrieval protocol must exclude) and cross-camera positives.
    let train = write_split(root, "train", 1, spec, spec.per_id, |idx| (idx % 2) as u32)?;
    let query = write_split(root, "query", 2, spec, 2, |_| 0)?;
    let gallery = write_split(root, "gallery", 3, spec, spec.per_id, |idx| ((idx + 1) % 2) as u32)?;

    Ok(ToySummary {
        ids: spec.ids,
        train_images: train,
        query_images: query,
        gallery_images: gallery,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn styles_are_stable_and_distinct() {
        let a = id_style(7, 0);
        let b = id_style(7, 0);
        assert_eq!(a.torso, b.torso);
        assert_eq!(a.width_frac, b.width_frac);
        let c = id_style(7, 1);
        assert!(a.torso != c.torso || a.width_frac != c.width_frac);
    }

    #[test]
    fn render_is_deterministic_per_key() {
        let spec = ToySpec::new(2, 2, 32, 16, 99);
        let style = id_style(99, 1);
        let im1 = render(&spec, &style, &mut image_rng(99, 1, 1, 0), 0);
        let im2 = render(&spec, &style, &mut image_rng(99, 1, 1, 0), 0);
        assert_eq!(im1.as_raw(), im2.as_raw());
        let im3 = render(&spec, &style, &mut image_rng(99, 1, 1, 1), 0);
        assert_ne!(im1.as_raw(), im3.as_raw());
    }
}
