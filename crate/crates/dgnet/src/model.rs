//! Model assembly, parameter grouping, and checkpoint serialization.

use std::path::Path;

use autograd::nn::store::Archive;
use autograd::nn::{named_params, trainable_params, Module, Param};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::config::Config;
use crate::error::{DgError, Result};
use crate::nets::{AppearanceEncoder, Decoder, MultiScaleDis, StructureEncoder, Teacher};

/// Every subsystem draws from its own stream of the root seed, so adding
/// randomness to one leaves the others' sequences untouched.
pub mod streams {
    pub const EA: u64 = 1;
    pub const ES: u64 = 2;
    pub const G: u64 = 3;
    pub const D: u64 = 4;
    pub const TEACHER: u64 = 5;
    pub const SAMPLER: u64 = 6;
    pub const AUGMENT: u64 = 7;
}

pub fn seeded(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Serialize an RNG's exact position into archive meta under `prefix`.
pub fn save_rng(ar: &mut Archive, prefix: &str, rng: &ChaCha12Rng) {
    let seed = rng.get_seed();
    let hex: String = seed.iter().map(|b| format!("{:02x}", b)).collect();
    ar.put_meta(&format!("{}.seed", prefix), &hex);
    ar.put_meta(&format!("{}.stream", prefix), &rng.get_stream().to_string());
    let pos = rng.get_word_pos();
    ar.put_meta(&format!("{}.pos_hi", prefix), &((pos >> 64) as u64).to_string());
    ar.put_meta(&format!("{}.pos_lo", prefix), &(pos as u64).to_string());
}

pub fn load_rng(ar: &Archive, prefix: &str) -> Result<ChaCha12Rng> {
    let take = |k: String| {
        ar.get_meta(&k)
            .map(|s| s.to_string())
            .ok_or_else(|| DgError::Checkpoint(format!("missing rng field '{}'", k)))
    };
    let hex = take(format!("{}.seed", prefix))?;
    if hex.len() != 64 || !hex.chars().all(|c| c.is_ascii_hexdigit()) {
        return Err(DgError::Checkpoint(format!("bad rng seed encoding under '{}'", prefix)));
    }
    let mut seed = [0u8; 32];
    for (i, chunk) in hex.as_bytes().chunks(2).enumerate() {
        let s = std::str::from_utf8(chunk).unwrap();
        seed[i] = u8::from_str_radix(s, 16).unwrap();
    }
    let stream: u64 = take(format!("{}.stream", prefix))?
        .parse()
        .map_err(|_| DgError::Checkpoint(format!("bad rng stream under '{}'", prefix)))?;
    let hi: u64 = take(format!("{}.pos_hi", prefix))?
        .parse()
        .map_err(|_| DgError::Checkpoint(format!("bad rng position under '{}'", prefix)))?;
    let lo: u64 = take(format!("{}.pos_lo", prefix))?
        .parse()
        .map_err(|_| DgError::Checkpoint(format!("bad rng position under '{}'", prefix)))?;
    let mut rng = ChaCha12Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(((hi as u128) << 64) | lo as u128);
    Ok(rng)
}

/// Write every named parameter (trainable and buffers) under `prefix`.
pub fn save_module(ar: &mut Archive, m: &dyn Module, prefix: &str) {
    for (name, p) in named_params(m, prefix) {
        ar.put_tensor(&name, p.to_owned_array());
    }
}

/// Restore every named parameter under `prefix`, strict on presence and
/// shape.
pub fn load_module(ar: &Archive, m: &dyn Module, prefix: &str) -> Result<()> {
    for (name, p) in named_params(m, prefix) {
        let tensor = ar
            .get_tensor(&name)
            .ok_or_else(|| DgError::Checkpoint(format!("missing tensor '{}'", name)))?;
        if tensor.shape() != p.shape().as_slice() {
            return Err(DgError::Checkpoint(format!(
                "tensor '{}' has shape {:?}, expected {:?}",
                name,
                tensor.shape(),
                p.shape()
            )));
        }
        p.set_value(tensor.clone());
    }
    Ok(())
}

/// The jointly trained networks plus bookkeeping shared by the trainer and
/// the evaluation paths.
pub struct JointModel {
    pub ea: AppearanceEncoder,
    pub es: StructureEncoder,
    pub g: Decoder,
    pub d: MultiScaleDis,
    pub classes: usize,
}

impl JointModel {
    pub fn new(cfg: &Config, classes: usize) -> JointModel {
        let seed = cfg.train.seed;
        let ea = AppearanceEncoder::new(&mut seeded(seed, streams::EA), &cfg.model.ea, classes);
        let es = StructureEncoder::new(&mut seeded(seed, streams::ES), &cfg.model.es);
        let appearance_dim = ea.code_channels() * cfg.model.ea.code_h * cfg.model.ea.code_w;
        let g = Decoder::new(
            &mut seeded(seed, streams::G),
            &cfg.model.g,
            appearance_dim,
            cfg.model.es.code_channels,
        );
        let d = MultiScaleDis::new(&mut seeded(seed, streams::D), &cfg.model.d);
        JointModel { ea, es, g, d, classes }
    }

    /// Heavy-ball group: the shared appearance encoder (heads included).
    pub fn ea_params(&self) -> Vec<Param> {
        trainable_params(&self.ea, "ea")
    }

    /// Adaptive-method generator group: structure encoder plus decoder.
    pub fn gen_params(&self) -> Vec<Param> {
        let mut v = trainable_params(&self.es, "es");
        v.extend(trainable_params(&self.g, "g"));
        v
    }

    pub fn dis_params(&self) -> Vec<Param> {
        trainable_params(&self.d, "d")
    }

    pub fn save_into(&self, ar: &mut Archive) {
        ar.put_meta("classes", &self.classes.to_string());
        save_module(ar, &self.ea, "ea");
        save_module(ar, &self.es, "es");
        save_module(ar, &self.g, "g");
        save_module(ar, &self.d, "d");
    }

    pub fn load_from(&self, ar: &Archive) -> Result<()> {
        load_module(ar, &self.ea, "ea")?;
        load_module(ar, &self.es, "es")?;
        load_module(ar, &self.g, "g")?;
        load_module(ar, &self.d, "d")
    }
}

impl Module for JointModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        let p = |s: &str| if prefix.is_empty() { s.to_string() } else { format!("{}.{}", prefix, s) };
        self.ea.visit(&p("ea"), f);
        self.es.visit(&p("es"), f);
        self.g.visit(&p("g"), f);
        self.d.visit(&p("d"), f);
    }
}

pub fn archive_classes(ar: &Archive) -> Result<usize> {
    ar.get_meta("classes")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| DgError::Checkpoint("archive lacks a class count".into()))
}

/// Verify an archive belongs to the current model geometry.
pub fn check_fingerprint(ar: &Archive, cfg: &Config, path: &Path) -> Result<()> {
    match ar.get_meta("fingerprint") {
        Some(fp) if fp == cfg.fingerprint() => Ok(()),
        Some(fp) => Err(DgError::Checkpoint(format!(
            "{} was written with model fingerprint {}, current config gives {}",
            path.display(),
            fp,
            cfg.fingerprint()
        ))),
        None => Err(DgError::Checkpoint(format!("{} lacks a fingerprint", path.display()))),
    }
}

/// Load the model weights (and class count) from a joint training
/// checkpoint, without the optimizer and RNG state that `Trainer::resume`
/// restores.
pub fn load_joint(path: &Path, cfg: &Config) -> Result<(JointModel, usize)> {
    let ar = Archive::load(path).map_err(|e| DgError::Checkpoint(format!("{}: {}", path.display(), e)))?;
    match ar.get_meta("kind") {
        Some("joint") => {}
        other => {
            return Err(DgError::Checkpoint(format!(
                "{} holds a {:?} archive, expected a joint training checkpoint",
                path.display(),
                other.unwrap_or("unlabeled")
            )))
        }
    }
    check_fingerprint(&ar, cfg, path)?;
    let classes = archive_classes(&ar)?;
    let model = JointModel::new(cfg, classes);
    model.load_from(&ar)?;
    Ok((model, classes))
}

/// Build a teacher for the current config (its own init stream).
pub fn new_teacher(cfg: &Config, classes: usize) -> Teacher {
    Teacher::new(&mut seeded(cfg.train.seed, streams::TEACHER), &cfg.model.teacher, classes)
}

pub fn save_teacher(ar: &mut Archive, teacher: &Teacher, cfg: &Config, classes: usize) {
    ar.put_meta("kind", "teacher");
    ar.put_meta("classes", &classes.to_string());
    ar.put_meta("fingerprint", cfg.fingerprint());
    save_module(ar, teacher, "teacher");
}

pub fn load_teacher(path: &Path, cfg: &Config) -> Result<(Teacher, usize)> {
    let ar = Archive::load(path).map_err(|e| DgError::Checkpoint(format!("{}: {}", path.display(), e)))?;
    match ar.get_meta("kind") {
        Some("teacher") => {}
        other => {
            return Err(DgError::Checkpoint(format!(
                "{} holds a {:?} archive, expected a teacher",
                path.display(),
                other.unwrap_or("unlabeled")
            )))
        }
    }
    check_fingerprint(&ar, cfg, path)?;
    let classes = archive_classes(&ar)?;
    let teacher = new_teacher(cfg, classes);
    load_module(&ar, &teacher, "teacher")?;
    Ok((teacher, classes))
}
