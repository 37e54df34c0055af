//! Run configuration: two built-in profiles (`desk` for minute-scale CPU
//! runs, `full` for the published-scale setup), a flat `key = value` file
//! dialect with dotted section names, and an architecture fingerprint that
//! ties checkpoints to the shapes that produced them.
//!
//! Precedence, lowest to highest: profile defaults, config file entries in
//! file order, explicit overrides (CLI flags / `--set`).

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{DgError, Result};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Profile {
    Desk,
    Full,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Full => "full",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "full" => Ok(Profile::Full),
            other => Err(DgError::Config(format!("unknown profile '{}'", other))),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Layout {
    Market,
    FolderPerId,
    Manifest,
}

impl Layout {
    pub fn name(self) -> &'static str {
        match self {
            Layout::Market => "market",
            Layout::FolderPerId => "folder_per_id",
            Layout::Manifest => "manifest",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "market" => Ok(Layout::Market),
            "folder_per_id" => Ok(Layout::FolderPerId),
            "manifest" => Ok(Layout::Manifest),
            other => Err(DgError::Config(format!("unknown layout '{}'", other))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DataCfg {
    pub root: String,
    pub layout: Layout,
    pub height: usize,
    pub width: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Random horizontal flip at train time; eval paths never flip.
    pub hflip: bool,
}

/// Identity-branch backbone description (also used for the teacher).
#[derive(Clone, Debug)]
pub struct BackboneCfg {
    pub widths: Vec<usize>,
    pub blocks: Vec<usize>,
    pub bottleneck: bool,
    pub stem_kernel: usize,
    pub stem_pool: bool,
}

#[derive(Clone, Debug)]
pub struct EaCfg {
    pub backbone: BackboneCfg,
    pub code_h: usize,
    pub code_w: usize,
    pub head_dim: usize,
}

#[derive(Clone, Debug)]
pub struct EsCfg {
    pub widths: Vec<usize>,
    pub res_blocks: usize,
    pub aspp_rates: Vec<usize>,
    pub aspp_width: usize,
    pub code_channels: usize,
}

#[derive(Clone, Debug)]
pub struct GCfg {
    pub res_blocks: usize,
    pub mlp_hidden: usize,
    pub up_kernel: usize,
    pub widths: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct DCfg {
    pub scales: usize,
    pub widths: Vec<usize>,
    pub res_blocks: usize,
}

#[derive(Clone, Debug)]
pub struct ModelCfg {
    pub ea: EaCfg,
    pub es: EsCfg,
    pub g: GCfg,
    pub d: DCfg,
    pub teacher: BackboneCfg,
}

#[derive(Clone, Debug)]
pub struct LossCfg {
    pub lambda_img: f64,
    pub lambda_id: f64,
    pub lambda_prim: f64,
    pub alpha: f64,
    pub warmup_start: u64,
    pub warmup_len: u64,
    pub r1_gamma: f64,
}

#[derive(Clone, Debug)]
pub struct TrainCfg {
    pub iters: u64,
    pub batch_ids: usize,
    pub batch_insts: usize,
    pub lr_encoder: f64,
    pub sgd_momentum: f64,
    pub lr_adam: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub seed: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,
    pub d_phase_encoders: bool,
    pub detach_gen_for_reid: bool,
    pub teacher_iters: u64,
    pub teacher_lr: f64,
    pub teacher_batch: usize,
}

#[derive(Clone, Debug)]
pub struct EvalCfg {
    pub beta: f64,
    pub fid_max_samples: usize,
    pub gen_count: usize,
}

#[derive(Clone, Debug)]
pub struct Config {
    pub profile: Profile,
    pub data: DataCfg,
    pub model: ModelCfg,
    pub loss: LossCfg,
    pub train: TrainCfg,
    pub eval: EvalCfg,
}

impl Config {
    pub fn desk() -> Self {
        Config {
            profile: Profile::Desk,
            data: DataCfg {
                root: String::new(),
                layout: Layout::FolderPerId,
                height: 64,
                width: 32,
                mean: vec![0.0, 0.0, 0.0],
                std: vec![1.0, 1.0, 1.0],
                hflip: true,
            },
            model: ModelCfg {
                ea: EaCfg {
                    backbone: BackboneCfg {
                        widths: vec![16, 32, 64, 128],
                        blocks: vec![1, 1, 1, 1],
                        bottleneck: false,
                        stem_kernel: 3,
                        stem_pool: false,
                    },
                    code_h: 4,
                    code_w: 1,
                    head_dim: 512,
                },
                es: EsCfg {
                    widths: vec![8, 16, 16, 32],
                    res_blocks: 4,
                    aspp_rates: vec![1, 2, 4],
                    aspp_width: 8,
                    code_channels: 32,
                },
                g: GCfg { res_blocks: 4, mlp_hidden: 128, up_kernel: 5, widths: vec![16, 8, 8, 8] },
                d: DCfg { scales: 3, widths: vec![8, 8, 8, 8, 16], res_blocks: 4 },
                teacher: BackboneCfg {
                    widths: vec![16, 32, 64, 128],
                    blocks: vec![1, 1, 1, 1],
                    bottleneck: false,
                    stem_kernel: 3,
                    stem_pool: false,
                },
            },
            loss: LossCfg {
                lambda_img: 5.0,
                lambda_id: 0.5,
                lambda_prim: 2.0,
                alpha: 0.2,
                warmup_start: 200,
                warmup_len: 40,
                r1_gamma: 10.0,
            },
            train: TrainCfg {
                iters: 2000,
                batch_ids: 2,
                batch_insts: 2,
                lr_encoder: 0.002,
                sgd_momentum: 0.9,
                lr_adam: 1e-4,
                adam_beta1: 0.0,
                adam_beta2: 0.999,
                seed: 0,
                log_every: 10,
                checkpoint_every: 500,
                d_phase_encoders: true,
                detach_gen_for_reid: false,
                teacher_iters: 1200,
                teacher_lr: 0.01,
                teacher_batch: 8,
            },
            eval: EvalCfg { beta: 0.5, fid_max_samples: 256, gen_count: 64 },
        }
    }

    pub fn full() -> Self {
        Config {
            profile: Profile::Full,
            data: DataCfg {
                root: String::new(),
                layout: Layout::Market,
                height: 256,
                width: 128,
                mean: vec![0.0, 0.0, 0.0],
                std: vec![1.0, 1.0, 1.0],
                hflip: true,
            },
            model: ModelCfg {
                ea: EaCfg {
                    backbone: BackboneCfg {
                        widths: vec![256, 512, 1024, 2048],
                        blocks: vec![3, 4, 6, 3],
                        bottleneck: true,
                        stem_kernel: 7,
                        stem_pool: true,
                    },
                    code_h: 4,
                    code_w: 1,
                    head_dim: 512,
                },
                es: EsCfg {
                    widths: vec![16, 32, 32, 64],
                    res_blocks: 4,
                    aspp_rates: vec![2, 4, 8],
                    aspp_width: 32,
                    code_channels: 128,
                },
                g: GCfg { res_blocks: 4, mlp_hidden: 512, up_kernel: 5, widths: vec![64, 32, 32, 32] },
                d: DCfg { scales: 3, widths: vec![32, 32, 32, 32, 64], res_blocks: 4 },
                teacher: BackboneCfg {
                    widths: vec![256, 512, 1024, 2048],
                    blocks: vec![3, 4, 6, 3],
                    bottleneck: true,
                    stem_kernel: 7,
                    stem_pool: true,
                },
            },
            loss: LossCfg {
                lambda_img: 5.0,
                lambda_id: 0.5,
                lambda_prim: 2.0,
                alpha: 0.2,
                warmup_start: 30000,
                warmup_len: 4000,
                r1_gamma: 10.0,
            },
            train: TrainCfg {
                iters: 100_000,
                batch_ids: 4,
                batch_insts: 2,
                lr_encoder: 0.002,
                sgd_momentum: 0.9,
                lr_adam: 1e-4,
                adam_beta1: 0.0,
                adam_beta2: 0.999,
                seed: 0,
                log_every: 100,
                checkpoint_every: 5000,
                d_phase_encoders: true,
                detach_gen_for_reid: false,
                teacher_iters: 20000,
                teacher_lr: 0.01,
                teacher_batch: 8,
            },
            eval: EvalCfg { beta: 0.5, fid_max_samples: 2048, gen_count: 256 },
        }
    }

    pub fn named(name: &str) -> Result<Self> {
        Ok(match Profile::from_name(name)? {
            Profile::Desk => Config::desk(),
            Profile::Full => Config::full(),
        })
    }
}

mod kv {
    use super::{Layout, Result};

    pub fn p_string(s: &str) -> Result<String> {
        Ok(s.to_string())
    }
    pub fn f_string(v: &str) -> String {
        v.to_string()
    }
    pub fn p_usize(s: &str) -> Result<usize> {
        s.parse().map_err(|_| super::DgError::Config(format!("expected integer, got '{}'", s)))
    }
    pub fn f_usize(v: &usize) -> String {
        v.to_string()
    }
    pub fn p_u64(s: &str) -> Result<u64> {
        s.parse().map_err(|_| super::DgError::Config(format!("expected integer, got '{}'", s)))
    }
    pub fn f_u64(v: &u64) -> String {
        v.to_string()
    }
    pub fn p_f64(s: &str) -> Result<f64> {
        s.parse().map_err(|_| super::DgError::Config(format!("expected number, got '{}'", s)))
    }
    pub fn f_f64(v: &f64) -> String {
        let mut s = format!("{}", v);
        if !s.contains('.') && !s.contains('e') && !s.contains("inf") && !s.contains("NaN") {
            s.push_str(".0");
        }
        s
    }
    pub fn p_bool(s: &str) -> Result<bool> {
        match s {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(super::DgError::Config(format!("expected bool, got '{}'", other))),
        }
    }
    pub fn f_bool(v: &bool) -> String {
        v.to_string()
    }
    pub fn p_vec_usize(s: &str) -> Result<Vec<usize>> {
        s.split(',').map(|p| p_usize(p.trim())).collect()
    }
    pub fn f_vec_usize(v: &[usize]) -> String {
        v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
    }
    pub fn p_vec_f64(s: &str) -> Result<Vec<f64>> {
        s.split(',').map(|p| p_f64(p.trim())).collect()
    }
    pub fn f_vec_f64(v: &[f64]) -> String {
        v.iter().map(|x| f_f64(x)).collect::<Vec<_>>().join(",")
    }
    pub fn p_layout(s: &str) -> Result<Layout> {
        Layout::from_name(s)
    }
    pub fn f_layout(v: &Layout) -> String {
        v.name().to_string()
    }
}

/// Expands once per configurable field: `cb!(key, parse_fn, format_fn, place)`.
macro_rules! for_each_field {
    ($self:ident, $cb:ident) => {
        $cb!("data.root", p_string, f_string, $self.data.root);
        $cb!("data.layout", p_layout, f_layout, $self.data.layout);
        $cb!("data.height", p_usize, f_usize, $self.data.height);
        $cb!("data.width", p_usize, f_usize, $self.data.width);
        $cb!("data.mean", p_vec_f64, f_vec_f64, $self.data.mean);
        $cb!("data.std", p_vec_f64, f_vec_f64, $self.data.std);
        $cb!("data.hflip", p_bool, f_bool, $self.data.hflip);
        $cb!("model.ea.widths", p_vec_usize, f_vec_usize, $self.model.ea.backbone.widths);
        $cb!("model.ea.blocks", p_vec_usize, f_vec_usize, $self.model.ea.backbone.blocks);
        $cb!("model.ea.bottleneck", p_bool, f_bool, $self.model.ea.backbone.bottleneck);
        $cb!("model.ea.stem_kernel", p_usize, f_usize, $self.model.ea.backbone.stem_kernel);
        $cb!("model.ea.stem_pool", p_bool, f_bool, $self.model.ea.backbone.stem_pool);
        $cb!("model.ea.code_h", p_usize, f_usize, $self.model.ea.code_h);
        $cb!("model.ea.code_w", p_usize, f_usize, $self.model.ea.code_w);
        $cb!("model.ea.head_dim", p_usize, f_usize, $self.model.ea.head_dim);
        $cb!("model.es.widths", p_vec_usize, f_vec_usize, $self.model.es.widths);
        $cb!("model.es.res_blocks", p_usize, f_usize, $self.model.es.res_blocks);
        $cb!("model.es.aspp_rates", p_vec_usize, f_vec_usize, $self.model.es.aspp_rates);
        $cb!("model.es.aspp_width", p_usize, f_usize, $self.model.es.aspp_width);
        $cb!("model.es.code_channels", p_usize, f_usize, $self.model.es.code_channels);
        $cb!("model.g.res_blocks", p_usize, f_usize, $self.model.g.res_blocks);
        $cb!("model.g.mlp_hidden", p_usize, f_usize, $self.model.g.mlp_hidden);
        $cb!("model.g.up_kernel", p_usize, f_usize, $self.model.g.up_kernel);
        $cb!("model.g.widths", p_vec_usize, f_vec_usize, $self.model.g.widths);
        $cb!("model.d.scales", p_usize, f_usize, $self.model.d.scales);
        $cb!("model.d.widths", p_vec_usize, f_vec_usize, $self.model.d.widths);
        $cb!("model.d.res_blocks", p_usize, f_usize, $self.model.d.res_blocks);
        $cb!("model.teacher.widths", p_vec_usize, f_vec_usize, $self.model.teacher.widths);
        $cb!("model.teacher.blocks", p_vec_usize, f_vec_usize, $self.model.teacher.blocks);
        $cb!("model.teacher.bottleneck", p_bool, f_bool, $self.model.teacher.bottleneck);
        $cb!("model.teacher.stem_kernel", p_usize, f_usize, $self.model.teacher.stem_kernel);
        $cb!("model.teacher.stem_pool", p_bool, f_bool, $self.model.teacher.stem_pool);
        $cb!("loss.lambda_img", p_f64, f_f64, $self.loss.lambda_img);
        $cb!("loss.lambda_id", p_f64, f_f64, $self.loss.lambda_id);
        $cb!("loss.lambda_prim", p_f64, f_f64, $self.loss.lambda_prim);
        $cb!("loss.alpha", p_f64, f_f64, $self.loss.alpha);
        $cb!("loss.warmup_start", p_u64, f_u64, $self.loss.warmup_start);
        $cb!("loss.warmup_len", p_u64, f_u64, $self.loss.warmup_len);
        $cb!("loss.r1_gamma", p_f64, f_f64, $self.loss.r1_gamma);
        $cb!("train.iters", p_u64, f_u64, $self.train.iters);
        $cb!("train.batch_ids", p_usize, f_usize, $self.train.batch_ids);
        $cb!("train.batch_insts", p_usize, f_usize, $self.train.batch_insts);
        $cb!("train.lr_encoder", p_f64, f_f64, $self.train.lr_encoder);
        $cb!("train.sgd_momentum", p_f64, f_f64, $self.train.sgd_momentum);
        $cb!("train.lr_adam", p_f64, f_f64, $self.train.lr_adam);
        $cb!("train.adam_beta1", p_f64, f_f64, $self.train.adam_beta1);
        $cb!("train.adam_beta2", p_f64, f_f64, $self.train.adam_beta2);
        $cb!("train.seed", p_u64, f_u64, $self.train.seed);
        $cb!("train.log_every", p_u64, f_u64, $self.train.log_every);
        $cb!("train.checkpoint_every", p_u64, f_u64, $self.train.checkpoint_every);
        $cb!("train.d_phase_encoders", p_bool, f_bool, $self.train.d_phase_encoders);
        $cb!("train.detach_gen_for_reid", p_bool, f_bool, $self.train.detach_gen_for_reid);
        $cb!("train.teacher_iters", p_u64, f_u64, $self.train.teacher_iters);
        $cb!("train.teacher_lr", p_f64, f_f64, $self.train.teacher_lr);
        $cb!("train.teacher_batch", p_usize, f_usize, $self.train.teacher_batch);
        $cb!("eval.beta", p_f64, f_f64, $self.eval.beta);
        $cb!("eval.fid_max_samples", p_usize, f_usize, $self.eval.fid_max_samples);
        $cb!("eval.gen_count", p_usize, f_usize, $self.eval.gen_count);
    };
}

impl Config {
    /// Set one field by its dotted key. Unknown keys and malformed values are
    /// errors; `profile` is not settable here (it selects the defaults and is
    /// resolved by `load`).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        use kv::*;
        macro_rules! apply {
            ($k:literal, $p:ident, $f:ident, $place:expr) => {
                if key == $k {
                    $place = $p(value)?;
                    return Ok(());
                }
            };
        }
        for_each_field!(self, apply);
        Err(DgError::Config(format!("unknown config key '{}'", key)))
    }

    /// Value of one field by its dotted key, formatted canonically.
    pub fn get(&self, key: &str) -> Option<String> {
        use kv::*;
        macro_rules! read {
            ($k:literal, $p:ident, $f:ident, $place:expr) => {
                if key == $k {
                    return Some($f(&$place));
                }
            };
        }
        for_each_field!(self, read);
        None
    }

    /// Canonical `key = value` lines, sorted by key, profile first.
    pub fn to_lines(&self) -> Vec<String> {
        use kv::*;
        let mut lines: Vec<String> = Vec::new();
        macro_rules! emit {
            ($k:literal, $p:ident, $f:ident, $place:expr) => {
                lines.push(format!("{} = {}", $k, $f(&$place)));
            };
        }
        for_each_field!(self, emit);
        lines.sort();
        lines.insert(0, format!("profile = {}", self.profile.name()));
        lines
    }

    pub fn to_string_canonical(&self) -> String {
        let mut s = String::new();
        for line in self.to_lines() {
            let _ = writeln!(s, "{}", line);
        }
        s
    }

    /// Apply `key = value` lines from a file body. `#` starts a comment;
    /// blank lines are skipped; a `profile` line is ignored here (the caller
    /// resolves it before constructing the base config).
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| DgError::Config(format!("line {}: expected 'key = value', got '{}'", lineno + 1, raw.trim())))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "profile" {
                continue;
            }
            self.set(key, value)
                .map_err(|e| DgError::Config(format!("line {}: {}", lineno + 1, e)))?;
        }
        Ok(())
    }

    /// Scan file text for a `profile` line without applying anything else.
    pub fn profile_in_text(text: &str) -> Option<String> {
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if let Some((key, value)) = line.split_once('=') {
                if key.trim() == "profile" {
                    return Some(value.trim().to_string());
                }
            }
        }
        None
    }

    /// Resolve a config from an optional file, an optional profile override,
    /// and explicit key overrides, in documented precedence order.
    pub fn load(file: Option<&Path>, profile_flag: Option<&str>, overrides: &[(String, String)]) -> Result<Config> {
        let text = match file {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| {
                DgError::Config(format!("cannot read config file {}: {}", p.display(), e))
            })?),
            None => None,
        };
        let profile_name = profile_flag
            .map(|s| s.to_string())
            .or_else(|| text.as_deref().and_then(Config::profile_in_text))
            .unwrap_or_else(|| "desk".to_string());
        let mut cfg = Config::named(&profile_name)?;
        if let Some(t) = &text {
            cfg.apply_text(t)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.height % 4 != 0 || self.data.width % 4 != 0 {
            return Err(DgError::Config(format!(
                "data.height and data.width must be divisible by 4 for the structure branch, got {}x{}",
                self.data.height, self.data.width
            )));
        }
        if self.model.ea.backbone.widths.len() != self.model.ea.backbone.blocks.len() {
            return Err(DgError::Config("model.ea.widths and model.ea.blocks lengths differ".into()));
        }
        if self.model.teacher.widths.len() != self.model.teacher.blocks.len() {
            return Err(DgError::Config("model.teacher.widths and model.teacher.blocks lengths differ".into()));
        }
        if self.model.es.widths.len() != 4 {
            return Err(DgError::Config("model.es.widths must list 4 stem widths".into()));
        }
        if self.model.g.widths.len() != 4 {
            return Err(DgError::Config("model.g.widths must list 4 decoder widths".into()));
        }
        if self.model.d.widths.len() != 5 {
            return Err(DgError::Config("model.d.widths must list 5 conv widths".into()));
        }
        if self.model.d.scales == 0 {
            return Err(DgError::Config("model.d.scales must be at least 1".into()));
        }
        if self.data.mean.len() != 3 || self.data.std.len() != 3 {
            return Err(DgError::Config("data.mean and data.std must have 3 entries".into()));
        }
        if self.train.batch_ids < 2 {
            return Err(DgError::Config("train.batch_ids must be at least 2 (cross-identity pairs)".into()));
        }
        if self.train.batch_insts < 1 {
            return Err(DgError::Config("train.batch_insts must be at least 1".into()));
        }
        Ok(())
    }

    /// Hex digest over the architecture-determining keys (`model.*` and the
    /// input geometry). Checkpoints store it; loading verifies it.
    pub fn fingerprint(&self) -> String {
        let arch: Vec<String> = self
            .to_lines()
            .into_iter()
            .filter(|l| l.starts_with("model.") || l.starts_with("data.height") || l.starts_with("data.width"))
            .collect();
        let mut h = Sha256::new();
        h.update(arch.join("\n").as_bytes());
        let out = h.finalize();
        let mut s = String::with_capacity(64);
        for b in out {
            let _ = write!(s, "{:02x}", b);
        }
        s
    }

    pub fn batch_size(&self) -> usize {
        self.train.batch_ids * self.train.batch_insts
    }
}
