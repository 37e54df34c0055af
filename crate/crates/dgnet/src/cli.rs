//! Command-line surface: toy-corpus synthesis, teacher and joint training,
//! swap-grid generation, code interpolation, and the two evaluation modes.
//!
//! Every artifact-writing command resolves its configuration in the fixed
//! precedence defaults < config file < flags, takes an exclusive lock on the
//! output directory, and writes the fully resolved config (plus its model
//! fingerprint) next to the artifacts. Reruns with identical inputs produce
//! byte-identical outputs.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use autograd::nn::store::Archive;
use autograd::Tape;
use clap::{Args, Parser, Subcommand};
use ndarray::{Array3, Array4, Axis};

use crate::config::Config;
use crate::data::toy::{generate as write_toy, ToySpec};
use crate::data::{grayscale, Dataset, Item, Preprocess};
use crate::error::{DgError, Result};
use crate::eval::generate::save_png;
use crate::eval::{
    extract, fid, interpolate, rank_queries, render_table, ssim_intra_class, ssim_luma,
    swap_grid, teacher_features, write_report, InterpMode,
};
use crate::model::{self, JointModel};
use crate::nets::Teacher;
use crate::trainer::{teacher_accuracy, train_teacher, Trainer};

#[derive(Parser)]
#[command(
    name = "dgnet",
    version,
    about = "Joint person re-identification and image synthesis lab"
)]
pub struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Config resolution flags shared by every command that builds networks.
#[derive(Args, Debug)]
struct ConfArgs {
    /// Config file with one `key = value` per line (`#` comments).
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Base defaults before file and flags: desk or full.
    #[arg(long, value_name = "NAME")]
    profile: Option<String>,
    /// Root seed; shorthand for --set train.seed=N.
    #[arg(long)]
    seed: Option<u64>,
    /// Override one config key, repeatable: --set loss.r1_gamma=5.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfArgs {
    /// Resolve defaults < file < flags. `extra` carries command-specific
    /// shorthand flags and lands after --set pairs, so the more specific
    /// flag wins when both name the same key.
    fn resolve(&self, extra: &[(String, String)]) -> Result<Config> {
        let mut overrides: Vec<(String, String)> = Vec::new();
        for s in &self.sets {
            let (k, v) = s.split_once('=').ok_or_else(|| {
                DgError::Config(format!("--set expects KEY=VALUE, got '{}'", s))
            })?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        if let Some(seed) = self.seed {
            overrides.push(("train.seed".into(), seed.to_string()));
        }
        overrides.extend_from_slice(extra);
        Config::load(self.config.as_deref(), self.profile.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a deterministic synthetic corpus (train/query/gallery splits).
    MakeToy {
        /// Dataset root to create.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Number of identities.
        #[arg(long, default_value_t = 4)]
        ids: usize,
        /// Images per identity in the train and gallery splits.
        #[arg(long = "per-id", default_value_t = 8)]
        per_id: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train the frozen identity classifier that provides soft labels.
    TrainTeacher {
        #[command(flatten)]
        conf: ConfArgs,
        /// Output directory for teacher.ckpt, the log, and the report.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Iterations; shorthand for --set train.teacher_iters=N.
        #[arg(long)]
        iters: Option<u64>,
    },
    /// Joint training of the encoders, decoder, and discriminator.
    Train {
        #[command(flatten)]
        conf: ConfArgs,
        /// Output directory for checkpoints and the metrics log.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Teacher checkpoint; when absent a teacher is trained first and
        /// saved as OUT/teacher.ckpt.
        #[arg(long, value_name = "FILE")]
        teacher: Option<PathBuf>,
        /// Resume from a joint checkpoint and append to the metrics log.
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Iterations; shorthand for --set train.iters=N.
        #[arg(long)]
        iters: Option<u64>,
    },
    /// Decode an appearance-by-structure swap grid into one mosaic image.
    Generate {
        #[command(flatten)]
        conf: ConfArgs,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Joint checkpoint; defaults to OUT/model.ckpt.
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Grid extent, rows x columns.
        #[arg(long, default_value = "4x4", value_name = "RxC")]
        grid: String,
    },
    /// Sweep one latent code between two images and save the strip.
    Interpolate {
        #[command(flatten)]
        conf: ConfArgs,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Joint checkpoint; defaults to OUT/model.ckpt.
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Number of frames including both endpoints.
        #[arg(long, default_value_t = 8)]
        steps: usize,
        /// Which code moves: appearance or structure.
        #[arg(long, default_value = "appearance", value_name = "NAME")]
        mode: String,
    },
    /// Retrieval metrics over the query and gallery splits.
    EvalReid {
        #[command(flatten)]
        conf: ConfArgs,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Joint checkpoint; defaults to OUT/model.ckpt.
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
    },
    /// Generative metrics: feature-distribution distance, within-identity
    /// diversity, and reconstruction quality.
    EvalGen {
        #[command(flatten)]
        conf: ConfArgs,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Joint checkpoint; defaults to OUT/model.ckpt.
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Teacher checkpoint for the feature embedder; defaults to
        /// OUT/teacher.ckpt.
        #[arg(long, value_name = "FILE")]
        teacher: Option<PathBuf>,
    },
}

/// Exclusive marker on an output directory; removed on drop. A second
/// process (or a crashed run's leftover) shows up as a clear error instead
/// of interleaved artifacts.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<DirLock> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("run.lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(DgError::Locked(path))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Serialize the resolved config and its fingerprint next to the artifacts.
/// The file round-trips through --config; the fingerprint line is a comment.
fn write_resolved(cfg: &Config, dir: &Path) -> Result<()> {
    let mut text = cfg.to_string_canonical();
    text.push_str(&format!("# fingerprint = {}\n", cfg.fingerprint()));
    std::fs::write(dir.join("config.resolved"), text)?;
    Ok(())
}

/// Dataset root: config value first, DGNET_DATA_ROOT as the fallback.
fn data_root(cfg: &Config) -> Result<PathBuf> {
    if !cfg.data.root.is_empty() {
        return Ok(PathBuf::from(&cfg.data.root));
    }
    match std::env::var("DGNET_DATA_ROOT") {
        Ok(v) if !v.is_empty() => Ok(PathBuf::from(v)),
        _ => Err(DgError::Config(
            "data.root is not set; pass --set data.root=DIR or export DGNET_DATA_ROOT".into(),
        )),
    }
}

fn load_split(cfg: &Config, split: &str) -> Result<Dataset> {
    let root = data_root(cfg)?;
    let dir = Dataset::split_dir(&root, cfg.data.layout, split)?;
    Dataset::load(&dir, cfg.data.layout)
}

fn checkpoint_path(flag: Option<PathBuf>, out: &Path, name: &str) -> Result<PathBuf> {
    let path = flag.unwrap_or_else(|| out.join(name));
    if !path.is_file() {
        return Err(DgError::Checkpoint(format!("checkpoint not found: {}", path.display())));
    }
    Ok(path)
}

fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let bad = || DgError::Config(format!("--grid expects RxC (e.g. 4x4), got '{}'", s));
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let rows: usize = r.trim().parse().map_err(|_| bad())?;
    let cols: usize = c.trim().parse().map_err(|_| bad())?;
    if rows == 0 || cols == 0 {
        return Err(bad());
    }
    Ok((rows, cols))
}

fn parse_mode(s: &str) -> Result<InterpMode> {
    match s {
        "appearance" => Ok(InterpMode::Appearance),
        "structure" => Ok(InterpMode::Structure),
        other => Err(DgError::Config(format!(
            "--mode must be 'appearance' or 'structure', got '{}'",
            other
        ))),
    }
}

/// First item of each identity, in identity order.
fn representatives(ds: &Dataset) -> Vec<&Item> {
    ds.classes
        .iter()
        .filter_map(|&pid| ds.items.iter().find(|it| it.pid == pid))
        .collect()
}

fn report_and_print(out: &Path, pairs: &[(String, String)]) -> Result<()> {
    write_report(&out.join("report.tsv"), pairs)?;
    print!("{}", render_table(pairs));
    Ok(())
}

fn kv(k: &str, v: impl ToString) -> (String, String) {
    (k.to_string(), v.to_string())
}

pub fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .try_init()
        .ok();
    match Cli::parse().cmd {
        Cmd::MakeToy { out, ids, per_id, height, width, seed, force } => {
            cmd_make_toy(&out, ids, per_id, height, width, seed, force)
        }
        Cmd::TrainTeacher { conf, out, iters } => cmd_train_teacher(&conf, &out, iters),
        Cmd::Train { conf, out, teacher, checkpoint, iters } => {
            cmd_train(&conf, &out, teacher, checkpoint, iters)
        }
        Cmd::Generate { conf, out, checkpoint, grid } => {
            cmd_generate(&conf, &out, checkpoint, &grid)
        }
        Cmd::Interpolate { conf, out, checkpoint, steps, mode } => {
            cmd_interpolate(&conf, &out, checkpoint, steps, &mode)
        }
        Cmd::EvalReid { conf, out, checkpoint } => cmd_eval_reid(&conf, &out, checkpoint),
        Cmd::EvalGen { conf, out, checkpoint, teacher } => {
            cmd_eval_gen(&conf, &out, checkpoint, teacher)
        }
    }
}

fn cmd_make_toy(
    out: &Path,
    ids: usize,
    per_id: usize,
    height: usize,
    width: usize,
    seed: u64,
    force: bool,
) -> Result<()> {
    let spec = ToySpec::new(ids, per_id, height, width, seed);
    let summary = write_toy(out, &spec, force)?;
    // The generation parameters next to the data: reruns with this file's
    // values reproduce the corpus byte for byte.
    let meta = format!(
        "ids = {}\nper_id = {}\nheight = {}\nwidth = {}\nseed = {}\n",
        ids, per_id, height, width, seed
    );
    std::fs::write(out.join("toy.meta"), meta)?;
    print!(
        "{}",
        render_table(&[
            kv("identities", summary.ids),
            kv("train_images", summary.train_images),
            kv("query_images", summary.query_images),
            kv("gallery_images", summary.gallery_images),
            kv("root", out.display()),
        ])
    );
    Ok(())
}

fn cmd_train_teacher(conf: &ConfArgs, out: &Path, iters: Option<u64>) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(n) = iters {
        extra.push(kv("train.teacher_iters", n));
    }
    let cfg = conf.resolve(&extra)?;
    let ds = load_split(&cfg, "train")?;
    let _lock = DirLock::acquire(out)?;
    write_resolved(&cfg, out)?;

    let mut log = BufWriter::new(File::create(out.join("teacher_log.tsv"))?);
    let teacher = train_teacher(&cfg, &ds, &mut log)?;
    log.flush()?;

    let mut ar = Archive::new();
    model::save_teacher(&mut ar, &teacher, &cfg, ds.num_classes());
    ar.save(&out.join("teacher.ckpt"))?;

    let pre = Preprocess::from_cfg(&cfg.data);
    let acc = teacher_accuracy(&teacher, &ds, &pre, 16)?;
    report_and_print(
        out,
        &[
            kv("teacher_iters", cfg.train.teacher_iters),
            kv("train_images", ds.len()),
            kv("classes", ds.num_classes()),
            kv("train_accuracy", acc),
        ],
    )
}

fn cmd_train(
    conf: &ConfArgs,
    out: &Path,
    teacher_flag: Option<PathBuf>,
    resume_from: Option<PathBuf>,
    iters: Option<u64>,
) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(n) = iters {
        extra.push(kv("train.iters", n));
    }
    let cfg = conf.resolve(&extra)?;
    let ds = load_split(&cfg, "train")?;
    let _lock = DirLock::acquire(out)?;
    write_resolved(&cfg, out)?;

    let teacher: Teacher = match &teacher_flag {
        Some(p) => {
            let (t, classes) = model::load_teacher(p, &cfg)?;
            if classes != ds.num_classes() {
                return Err(DgError::Checkpoint(format!(
                    "teacher {} knows {} classes, the train split has {}",
                    p.display(),
                    classes,
                    ds.num_classes()
                )));
            }
            t
        }
        None => {
            let mut tlog = BufWriter::new(File::create(out.join("teacher_log.tsv"))?);
            let t = train_teacher(&cfg, &ds, &mut tlog)?;
            tlog.flush()?;
            t
        }
    };
    // The teacher always lands next to the model so evaluation runs can
    // default to it.
    let mut ar = Archive::new();
    model::save_teacher(&mut ar, &teacher, &cfg, ds.num_classes());
    ar.save(&out.join("teacher.ckpt"))?;

    let resumed = resume_from.is_some();
    let mut tr = match &resume_from {
        Some(p) => Trainer::resume(cfg.clone(), ds, teacher, p)?,
        None => {
            let model = JointModel::new(&cfg, ds.num_classes());
            Trainer::new(cfg.clone(), ds, model, teacher)?
        }
    };

    let mut opts = OpenOptions::new();
    opts.create(true).write(true);
    if resumed {
        opts.append(true);
    } else {
        opts.truncate(true);
    }
    let mut log = BufWriter::new(opts.open(out.join("metrics.tsv"))?);
    tr.run(cfg.train.iters, &mut log, Some(out))?;
    log.flush()?;
    tr.save_checkpoint(&out.join("model.ckpt"))?;

    print!(
        "{}",
        render_table(&[
            kv("iterations", cfg.train.iters),
            kv("model", out.join("model.ckpt").display()),
            kv("metrics", out.join("metrics.tsv").display()),
        ])
    );
    Ok(())
}

fn cmd_generate(conf: &ConfArgs, out: &Path, ckpt: Option<PathBuf>, grid: &str) -> Result<()> {
    let cfg = conf.resolve(&[])?;
    let (rows, cols) = parse_grid(grid)?;
    let ds = load_split(&cfg, "train")?;
    let _lock = DirLock::acquire(out)?;
    write_resolved(&cfg, out)?;
    let ckpt = checkpoint_path(ckpt, out, "model.ckpt")?;
    let (model, _) = model::load_joint(&ckpt, &cfg)?;

    let reps = representatives(&ds);
    let need = rows.max(cols);
    if reps.len() < need {
        return Err(DgError::Data(format!(
            "a {}x{} grid needs {} identities, the train split has {}",
            rows,
            cols,
            need,
            reps.len()
        )));
    }
    let pre = Preprocess::from_cfg(&cfg.data);
    let row_batch = pre.batch(&reps[..rows])?;
    let col_batch = pre.batch(&reps[..cols])?;
    let g = swap_grid(&model, &row_batch, &col_batch)?;
    save_png(&g.mosaic(), &out.join("mosaic.png"))?;
    let (row_var, col_var) = g.color_dispersion();
    report_and_print(
        out,
        &[
            kv("rows", rows),
            kv("cols", cols),
            kv("row_color_dispersion", row_var),
            kv("col_color_dispersion", col_var),
            kv("mosaic", out.join("mosaic.png").display()),
        ],
    )
}

fn cmd_interpolate(
    conf: &ConfArgs,
    out: &Path,
    ckpt: Option<PathBuf>,
    steps: usize,
    mode: &str,
) -> Result<()> {
    let cfg = conf.resolve(&[])?;
    let mode = parse_mode(mode)?;
    let ds = load_split(&cfg, "train")?;
    let _lock = DirLock::acquire(out)?;
    write_resolved(&cfg, out)?;
    let ckpt = checkpoint_path(ckpt, out, "model.ckpt")?;
    let (model, _) = model::load_joint(&ckpt, &cfg)?;

    // Endpoints: the first two identities when available, otherwise the
    // first two images of the single identity.
    let reps = representatives(&ds);
    let (a, b) = if reps.len() >= 2 {
        (reps[0], reps[1])
    } else if ds.len() >= 2 {
        (&ds.items[0], &ds.items[1])
    } else {
        return Err(DgError::Data("interpolation needs at least two images".into()));
    };
    let pre = Preprocess::from_cfg(&cfg.data);
    let first = pre.load(&a.path)?;
    let second = pre.load(&b.path)?;
    let frames = interpolate(&model, &first, &second, steps, mode)?;
    save_png(&crate::eval::generate::strip(&frames), &out.join("strip.png"))?;
    report_and_print(
        out,
        &[
            kv("steps", steps),
            kv("mode", if mode == InterpMode::Appearance { "appearance" } else { "structure" }),
            kv("from", a.path.display()),
            kv("to", b.path.display()),
            kv("strip", out.join("strip.png").display()),
        ],
    )
}

fn cmd_eval_reid(conf: &ConfArgs, out: &Path, ckpt: Option<PathBuf>) -> Result<()> {
    let cfg = conf.resolve(&[])?;
    let query = load_split(&cfg, "query")?;
    let gallery = load_split(&cfg, "gallery")?;
    let _lock = DirLock::acquire(out)?;
    write_resolved(&cfg, out)?;
    let ckpt = checkpoint_path(ckpt, out, "model.ckpt")?;
    let (model, _) = model::load_joint(&ckpt, &cfg)?;

    let pre = Preprocess::from_cfg(&cfg.data);
    let q_items: Vec<&Item> = query.items.iter().collect();
    let g_items: Vec<&Item> = gallery.items.iter().collect();
    let q = extract(&model.ea, &pre, &q_items, cfg.eval.beta, 16)?;
    let g = extract(&model.ea, &pre, &g_items, cfg.eval.beta, 16)?;
    q.save(&out.join("query_emb.bin"), &out.join("query_emb.tsv"))?;
    g.save(&out.join("gallery_emb.bin"), &out.join("gallery_emb.tsv"))?;

    let res = rank_queries(&q, &g, 10)?;
    let rank_at = |k: usize| res.cmc[(k - 1).min(res.cmc.len() - 1)];
    report_and_print(
        out,
        &[
            kv("queries", res.ap.len()),
            kv("skipped", res.skipped),
            kv("gallery_size", gallery.len()),
            kv("embedding_dim", q.vecs.ncols()),
            kv("rank1", rank_at(1)),
            kv("rank5", rank_at(5)),
            kv("rank10", rank_at(10)),
            kv("map", res.map),
        ],
    )
}

/// Cross-identity partner for each item: the next item (cyclically) with a
/// different identity.
fn cross_partner(items: &[Item], i: usize) -> Option<usize> {
    (1..items.len()).map(|o| (i + o) % items.len()).find(|&j| items[j].pid != items[i].pid)
}

fn cmd_eval_gen(
    conf: &ConfArgs,
    out: &Path,
    ckpt: Option<PathBuf>,
    teacher_flag: Option<PathBuf>,
) -> Result<()> {
    let cfg = conf.resolve(&[])?;
    let ds = load_split(&cfg, "train")?;
    let _lock = DirLock::acquire(out)?;
    write_resolved(&cfg, out)?;
    let ckpt_path = checkpoint_path(ckpt, out, "model.ckpt")?;
    let (model, _) = model::load_joint(&ckpt_path, &cfg)?;
    let teacher_path = checkpoint_path(teacher_flag, out, "teacher.ckpt")?;
    let (teacher, _) = model::load_teacher(&teacher_path, &cfg)?;

    let pre = Preprocess::from_cfg(&cfg.data);
    let n_gen = cfg.eval.gen_count.min(ds.len());
    if n_gen == 0 {
        return Err(DgError::Data("no images to evaluate".into()));
    }

    // Cross-identity swaps: appearance from item i, structure from the next
    // item of a different identity. Self-reconstructions feed the
    // reconstruction scores.
    let mut gen_imgs: Vec<Array3<f64>> = Vec::with_capacity(n_gen);
    let mut gen_labels: Vec<usize> = Vec::with_capacity(n_gen);
    let mut recon_l1 = 0.0;
    let mut recon_ssim = 0.0;
    let chunk = 8usize;
    let mut at = 0usize;
    while at < n_gen {
        let hi = (at + chunk).min(n_gen);
        let idx: Vec<usize> = (at..hi).collect();
        let xi: Vec<&Item> = idx.iter().map(|&i| &ds.items[i]).collect();
        let xj: Vec<&Item> = idx
            .iter()
            .map(|&i| {
                let j = cross_partner(&ds.items, i).ok_or_else(|| {
                    DgError::Data(
                        "cross-identity generation needs at least two identities".into(),
                    )
                })?;
                Ok(&ds.items[j])
            })
            .collect::<Result<_>>()?;
        let bi = pre.batch(&xi)?;
        let bj = pre.batch(&xj)?;

        let mut t = Tape::new();
        let xin = t.constant(bi.clone().into_dyn());
        let a = model.ea.encode(&mut t, xin, false);
        let sj_in = t.constant(grayscale(&bj).into_dyn());
        let sj = model.es.encode(&mut t, sj_in);
        let cross = model.g.decode(&mut t, a, sj);
        let si_in = t.constant(grayscale(&bi).into_dyn());
        let si = model.es.encode(&mut t, si_in);
        let own = model.g.decode(&mut t, a, si);
        let cross_d = t.data(cross).to_owned();
        let own_d = t.data(own).to_owned();

        for (n, &i) in idx.iter().enumerate() {
            let img: Array3<f64> = cross_d
                .index_axis(Axis(0), n)
                .to_owned()
                .into_dimensionality()
                .expect("decoder emits [N,3,H,W]");
            gen_imgs.push(img);
            gen_labels.push(ds.label(&ds.items[i]).unwrap_or(0));

            let rec: Array3<f64> = own_d
                .index_axis(Axis(0), n)
                .to_owned()
                .into_dimensionality()
                .expect("decoder emits [N,3,H,W]");
            let real: Array3<f64> = bi.index_axis(Axis(0), n).to_owned();
            recon_l1 += real
                .iter()
                .zip(rec.iter())
                .map(|(x, y)| (x - y).abs())
                .sum::<f64>()
                / real.len() as f64;
            let real_luma = grayscale(&real.clone().insert_axis(Axis(0)))
                .index_axis(Axis(0), 0)
                .index_axis(Axis(0), 0)
                .to_owned();
            let rec_luma = grayscale(&rec.insert_axis(Axis(0)))
                .index_axis(Axis(0), 0)
                .index_axis(Axis(0), 0)
                .to_owned();
            recon_ssim += ssim_luma(&real_luma, &rec_luma)?;
        }
        at = hi;
    }
    recon_l1 /= n_gen as f64;
    recon_ssim /= n_gen as f64;

    // Feature clouds under the frozen teacher.
    let n_real = cfg.eval.fid_max_samples.min(ds.len());
    let real_items: Vec<&Item> = ds.items.iter().take(n_real).collect();
    let real_batch = pre.batch(&real_items)?;
    let real_f = teacher_features(&teacher, &real_batch, 16);
    let mut gen_batch = Array4::<f64>::zeros((n_gen, 3, pre.height, pre.width));
    for (n, img) in gen_imgs.iter().enumerate() {
        gen_batch.index_axis_mut(Axis(0), n).assign(img);
    }
    let gen_f = teacher_features(&teacher, &gen_batch, 16);
    let fid_value = fid(&real_f, &gen_f)?;

    let diversity = ssim_intra_class(&gen_imgs, &gen_labels)?;
    report_and_print(
        out,
        &[
            kv("generated", n_gen),
            kv("real_reference", n_real),
            kv("fid", fid_value),
            kv("intra_class_ssim", diversity),
            kv("recon_l1", recon_l1),
            kv("recon_ssim", recon_ssim),
        ],
    )
}
