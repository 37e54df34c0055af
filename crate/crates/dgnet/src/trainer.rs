//! Alternating joint optimization and teacher pretraining.
//!
//! Each iteration runs two phases over one sampled batch. The generator
//! phase updates the appearance encoder, structure encoder, and decoder
//! against the full weighted objective; the generated images it produces
//! are re-encoded by the same appearance encoder within the step. The
//! discriminator phase scores that batch's fakes as fixed data: it updates
//! the discriminator against the adversarial loss plus an R1 penalty, and
//! (by default) also lets both encoders re-fit their codes on the detached
//! fakes. The appearance encoder is trained by heavy-ball gradient descent
//! and everything else by the adaptive-moment method; the two groups never
//! mix.

use std::io::Write;
use std::path::Path;

use autograd::nn::optim::{Adam, SgdMomentum};
use autograd::nn::store::Archive;
use autograd::nn::{param_grads, trainable_params, Param};
use autograd::{NodeId, Tape};
use ndarray::{Array4, ArrayD, Axis};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::config::Config;
use crate::data::{grayscale, Dataset, PairSampler, Preprocess};
use crate::error::{DgError, Result};
use crate::model::{self, load_rng, save_rng, seeded, streams, JointModel};
use crate::nets::Teacher;
use crate::objectives::{self, weights_at, GenNodes, LossReport, Weights};

/// One iteration's worth of images and labels. `xi` carries the appearance
/// sources, `xt` same-identity partners, `xj` cross-identity partners.
pub struct TrainBatch {
    pub xi: Array4<f64>,
    pub xt: Array4<f64>,
    pub xj: Array4<f64>,
    pub y_i: Vec<usize>,
    pub y_j: Vec<usize>,
}

pub struct Trainer {
    pub cfg: Config,
    pub model: JointModel,
    pub teacher: Teacher,
    pub ds: Dataset,
    pre: Preprocess,
    sampler: PairSampler,
    opt_ea: SgdMomentum,
    opt_es: Adam,
    opt_g: Adam,
    opt_d: Adam,
    rng_sampler: ChaCha12Rng,
    rng_augment: ChaCha12Rng,
    /// Completed iterations; the next step runs at this index.
    pub iter: u64,
}

impl Trainer {
    pub fn new(cfg: Config, ds: Dataset, model: JointModel, teacher: Teacher) -> Result<Trainer> {
        if model.classes != ds.num_classes() {
            return Err(DgError::Data(format!(
                "model built for {} classes but dataset has {}",
                model.classes,
                ds.num_classes()
            )));
        }
        teacher.freeze();
        let pre = Preprocess::from_cfg(&cfg.data);
        let sampler = PairSampler::new(&ds, cfg.train.batch_ids, cfg.train.batch_insts)?;
        let opt_ea = SgdMomentum::new(model.ea_params(), cfg.train.lr_encoder, cfg.train.sgd_momentum);
        let opt_es = Adam::new(
            trainable_params(&model.es, "es"),
            cfg.train.lr_adam,
            cfg.train.adam_beta1,
            cfg.train.adam_beta2,
        );
        let opt_g = Adam::new(
            trainable_params(&model.g, "g"),
            cfg.train.lr_adam,
            cfg.train.adam_beta1,
            cfg.train.adam_beta2,
        );
        let opt_d = Adam::new(
            model.dis_params(),
            cfg.train.lr_adam,
            cfg.train.adam_beta1,
            cfg.train.adam_beta2,
        );
        let rng_sampler = seeded(cfg.train.seed, streams::SAMPLER);
        let rng_augment = seeded(cfg.train.seed, streams::AUGMENT);
        Ok(Trainer {
            cfg,
            model,
            teacher,
            ds,
            pre,
            sampler,
            opt_ea,
            opt_es,
            opt_g,
            opt_d,
            rng_sampler,
            rng_augment,
            iter: 0,
        })
    }

    /// Sample and load the next batch, applying train-time augmentation.
    pub fn next_batch(&mut self) -> Result<TrainBatch> {
        let plan = self.sampler.sample(&mut self.rng_sampler);
        let xi = self.gather(&plan.i)?;
        let xt = self.gather(&plan.t)?;
        let xj = self.gather(&plan.j)?;
        Ok(TrainBatch { xi, xt, xj, y_i: plan.y_i, y_j: plan.y_j })
    }

    fn gather(&mut self, idxs: &[usize]) -> Result<Array4<f64>> {
        let items: Vec<&crate::data::Item> = idxs.iter().map(|&i| &self.ds.items[i]).collect();
        let mut x = self.pre.batch(&items)?;
        if self.cfg.data.hflip {
            for n in 0..x.shape()[0] {
                if self.rng_augment.gen::<bool>() {
                    x.index_axis_mut(Axis(0), n).invert_axis(Axis(2));
                }
            }
        }
        Ok(x)
    }

    /// Teacher's soft-label logits for a generated batch. Frozen weights,
    /// running statistics, separate tape: nothing reaches the student graph
    /// except the values.
    fn teacher_logits(&self, fake: ArrayD<f64>) -> ArrayD<f64> {
        let mut tt = Tape::new();
        let x = tt.constant(fake);
        let z = self.teacher.logits(&mut tt, x, false);
        tt.data(z).to_owned()
    }

    /// Generator phase: one update of appearance encoder, structure encoder,
    /// and decoder. Returns the generated cross-identity batch for the
    /// discriminator phase. The discriminator is read, never written.
    pub fn gen_phase(
        &mut self,
        b: &TrainBatch,
        w: &Weights,
        report: &mut LossReport,
    ) -> Result<ArrayD<f64>> {
        let mut t = Tape::new();
        let xi_n = t.constant(b.xi.clone().into_dyn());
        let xt_n = t.constant(b.xt.clone().into_dyn());
        let gi_n = t.constant(grayscale(&b.xi).into_dyn());
        let gj_n = t.constant(grayscale(&b.xj).into_dyn());

        let code_i = self.model.ea.encode(&mut t, xi_n, true);
        let code_t = self.model.ea.encode(&mut t, xt_n, true);
        let s_i = self.model.es.encode(&mut t, gi_n);
        let s_j = self.model.es.encode(&mut t, gj_n);

        let x_ii = self.model.g.decode(&mut t, code_i, s_i);
        let x_ti = self.model.g.decode(&mut t, code_t, s_i);
        let x_ji = self.model.g.decode(&mut t, code_i, s_j);

        let img_self = objectives::l1_loss(&mut t, x_ii, xi_n);
        let img_cross = objectives::l1_loss(&mut t, x_ti, xi_n);

        // Online feeding: the freshly generated batch goes straight back
        // through the shared appearance encoder.
        let xji_feed = if self.cfg.train.detach_gen_for_reid { t.detach(x_ji) } else { x_ji };
        let code_rec = self.model.ea.encode(&mut t, xji_feed, true);
        let code_a = objectives::l1_loss(&mut t, code_rec, code_i);

        let gray_ji = objectives::tape_grayscale(&mut t, x_ji);
        let s_rec = self.model.es.encode(&mut t, gray_ji);
        let code_s = objectives::l1_loss(&mut t, s_rec, s_j);

        let (fp_i, _) = self.model.ea.project(&mut t, code_i);
        let zp_i = self.model.ea.logits_prim(&mut t, fp_i);
        let id_self = objectives::cross_entropy(&mut t, zp_i, &b.y_i);

        let (fp_x, ff_x) = self.model.ea.project(&mut t, code_rec);
        let zp_x = self.model.ea.logits_prim(&mut t, fp_x);
        let id_cross = objectives::cross_entropy(&mut t, zp_x, &b.y_i);

        let fake_maps = self.model.d.forward(&mut t, x_ji);
        let adv_gn = objectives::adv_g(&mut t, &fake_maps);

        let (prim_n, fine_n) = if w.lambda_prim > 0.0 {
            let soft = self.teacher_logits(t.data(x_ji).to_owned());
            let prim = objectives::kl_to_teacher(&mut t, zp_x, &soft);
            let zf_x = self.model.ea.logits_fine(&mut t, ff_x);
            let fine = objectives::cross_entropy(&mut t, zf_x, &b.y_j);
            (Some(prim), Some(fine))
        } else {
            (None, None)
        };

        let nodes = GenNodes {
            img_self,
            img_cross,
            code_a,
            code_s,
            id_self,
            id_cross,
            adv_g: adv_gn,
            prim: prim_n,
            fine: fine_n,
        };
        let total = objectives::total_gen(&mut t, &nodes, w);

        report.img_self = t.data(img_self)[[0]];
        report.img_cross = t.data(img_cross)[[0]];
        report.code_a = t.data(code_a)[[0]];
        report.code_s = t.data(code_s)[[0]];
        report.id_self = t.data(id_self)[[0]];
        report.id_cross = t.data(id_cross)[[0]];
        report.adv_g = t.data(adv_gn)[[0]];
        report.prim = prim_n.map_or(0.0, |n| t.data(n)[[0]]);
        report.fine = fine_n.map_or(0.0, |n| t.data(n)[[0]]);
        report.total = t.data(total)[[0]];
        let fake = t.data(x_ji).to_owned();
        self.check_finite(report)?;

        let ea_p = self.opt_ea.params().to_vec();
        let es_p = self.opt_es.params().to_vec();
        let g_p = self.opt_g.params().to_vec();
        let mut targets: Vec<NodeId> = Vec::new();
        for p in ea_p.iter().chain(es_p.iter()).chain(g_p.iter()) {
            if let Some(leaf) = t.leaf_of(p) {
                targets.push(leaf);
            }
        }
        let grads = t.backward(total, &targets);
        self.opt_ea.step(&param_grads(&t, &grads, &ea_p));
        self.opt_es.step(&param_grads(&t, &grads, &es_p));
        self.opt_g.step(&param_grads(&t, &grads, &g_p));
        Ok(fake)
    }

    /// Discriminator phase over the same batch. Fakes enter as fixed data,
    /// so nothing reaches the decoder: it must be bit-identical afterwards.
    /// With `train.d_phase_encoders` set, both encoders also re-encode the
    /// detached fakes and take one update from the code reconstruction
    /// losses, mirroring the generator phase's encoding terms.
    pub fn dis_phase(
        &mut self,
        b: &TrainBatch,
        fake: &ArrayD<f64>,
        report: &mut LossReport,
    ) -> Result<()> {
        let mut t = Tape::new();
        let xi_n = t.input(b.xi.clone().into_dyn());
        let fake_n = t.constant(fake.clone());

        let real_maps = self.model.d.forward(&mut t, xi_n);
        let fake_maps = self.model.d.forward(&mut t, fake_n);
        let adv_dn = objectives::adv_d(&mut t, &real_maps, &fake_maps);

        // R1 on the real batch: penalize the gradient of the summed scores.
        let mut score = None;
        for &m in &real_maps {
            let s = t.sum_all(m);
            score = Some(match score {
                None => s,
                Some(acc) => t.add(acc, s),
            });
        }
        let score = score.expect("at least one scale");
        let r1 = objectives::r1_penalty(&mut t, score, xi_n, self.cfg.loss.r1_gamma);

        let mut d_total = t.add(adv_dn, r1);
        let mut code_nodes = None;
        if self.cfg.train.d_phase_encoders {
            let code_i = self.model.ea.encode(&mut t, xi_n, true);
            let code_rec = self.model.ea.encode(&mut t, fake_n, true);
            let code_a = objectives::l1_loss(&mut t, code_rec, code_i);

            let gj_n = t.constant(grayscale(&b.xj).into_dyn());
            let s_j = self.model.es.encode(&mut t, gj_n);
            let gray_fake = objectives::tape_grayscale(&mut t, fake_n);
            let s_rec = self.model.es.encode(&mut t, gray_fake);
            let code_s = objectives::l1_loss(&mut t, s_rec, s_j);

            d_total = t.add(d_total, code_a);
            d_total = t.add(d_total, code_s);
            code_nodes = Some((code_a, code_s));
        }

        report.adv_d = t.data(adv_dn)[[0]];
        report.r1 = t.data(r1)[[0]];
        if let Some((ca, cs)) = code_nodes {
            report.code_a_d = t.data(ca)[[0]];
            report.code_s_d = t.data(cs)[[0]];
        }
        report.d_total = t.data(d_total)[[0]];
        self.check_finite(report)?;

        let d_p = self.opt_d.params().to_vec();
        let mut live: Vec<Param> = d_p.clone();
        if self.cfg.train.d_phase_encoders {
            live.extend(self.opt_ea.params().iter().cloned());
            live.extend(self.opt_es.params().iter().cloned());
        }
        let targets: Vec<NodeId> = live.iter().filter_map(|p| t.leaf_of(p)).collect();
        let grads = t.backward(d_total, &targets);
        self.opt_d.step(&param_grads(&t, &grads, &d_p));
        if self.cfg.train.d_phase_encoders {
            let ea_p = self.opt_ea.params().to_vec();
            let es_p = self.opt_es.params().to_vec();
            self.opt_ea.step(&param_grads(&t, &grads, &ea_p));
            self.opt_es.step(&param_grads(&t, &grads, &es_p));
        }
        Ok(())
    }

    fn check_finite(&self, report: &LossReport) -> Result<()> {
        let bad = report.non_finite_terms();
        if bad.is_empty() {
            return Ok(());
        }
        let mut dump = String::new();
        for line in report.lines(self.iter) {
            dump.push_str(&line);
            dump.push('\n');
        }
        Err(DgError::NonFinite {
            iter: self.iter,
            detail: format!("non-finite terms {:?}; full report:\n{}", bad, dump),
        })
    }

    /// One full iteration: generator phase then discriminator phase.
    pub fn step(&mut self) -> Result<LossReport> {
        let w = weights_at(self.iter, &self.cfg.loss);
        let mut report = LossReport {
            lambda_prim: w.lambda_prim,
            lambda_fine: w.lambda_fine,
            ..Default::default()
        };
        let batch = self.next_batch()?;
        let fake = self.gen_phase(&batch, &w, &mut report)?;
        self.dis_phase(&batch, &fake, &mut report)?;
        self.iter += 1;
        Ok(report)
    }

    /// Run until `until` iterations are complete, appending metrics lines
    /// and writing checkpoints at the configured cadences.
    pub fn run(&mut self, until: u64, log: &mut dyn Write, ckpt_dir: Option<&Path>) -> Result<()> {
        while self.iter < until {
            let at = self.iter;
            let report = self.step()?;
            if self.cfg.train.log_every > 0 && at % self.cfg.train.log_every == 0 {
                for line in report.lines(at) {
                    writeln!(log, "{}", line)?;
                }
            }
            if let Some(dir) = ckpt_dir {
                let cadence = self.cfg.train.checkpoint_every;
                if cadence > 0 && self.iter % cadence == 0 {
                    self.save_checkpoint(&dir.join(format!("checkpoint_{:07}.ckpt", self.iter)))?;
                }
            }
        }
        log.flush()?;
        Ok(())
    }

    /// Everything needed to continue bit-exactly: weights and running
    /// statistics, all four optimizer states, both RNG positions, and the
    /// iteration counter, keyed by the config fingerprint.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut ar = Archive::new();
        ar.put_meta("kind", "joint");
        ar.put_meta("iter", self.iter);
        ar.put_meta("fingerprint", self.cfg.fingerprint());
        self.model.save_into(&mut ar);
        for (name, tensor) in self
            .opt_ea
            .state("opt_ea")
            .into_iter()
            .chain(self.opt_es.state("opt_es"))
            .chain(self.opt_g.state("opt_g"))
            .chain(self.opt_d.state("opt_d"))
        {
            ar.put_tensor(&name, tensor);
        }
        save_rng(&mut ar, "rng_sampler", &self.rng_sampler);
        save_rng(&mut ar, "rng_augment", &self.rng_augment);
        ar.save(path)?;
        Ok(())
    }

    /// Rebuild a trainer from a checkpoint written by `save_checkpoint`.
    pub fn resume(cfg: Config, ds: Dataset, teacher: Teacher, path: &Path) -> Result<Trainer> {
        let ar = Archive::load(path)?;
        match ar.get_meta("kind") {
            Some("joint") => {}
            other => {
                return Err(DgError::Checkpoint(format!(
                    "{}: expected a joint checkpoint, found {:?}",
                    path.display(),
                    other
                )))
            }
        }
        model::check_fingerprint(&ar, &cfg, path)?;
        let classes = model::archive_classes(&ar)?;
        let joint = JointModel::new(&cfg, classes);
        joint.load_from(&ar)?;
        let mut tr = Trainer::new(cfg, ds, joint, teacher)?;
        let lookup = |name: &str| ar.get_tensor(name).cloned();
        for (opt, prefix) in [
            (&mut tr.opt_ea as &mut dyn OptState, "opt_ea"),
            (&mut tr.opt_es, "opt_es"),
            (&mut tr.opt_g, "opt_g"),
            (&mut tr.opt_d, "opt_d"),
        ] {
            opt.restore(prefix, &lookup)
                .map_err(|e| DgError::Checkpoint(format!("{}: {}", path.display(), e)))?;
        }
        tr.rng_sampler = load_rng(&ar, "rng_sampler")?;
        tr.rng_augment = load_rng(&ar, "rng_augment")?;
        tr.iter = ar
            .get_meta("iter")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DgError::Checkpoint(format!("{}: missing iter", path.display())))?;
        Ok(tr)
    }

    /// Gradient magnitude reaching the appearance-encoder heads through the
    /// generated image alone: the real-image terms are dropped and only the
    /// losses evaluated on the synthesized batch are kept, at the given
    /// teacher-term weights. Returns the largest absolute head gradient.
    pub fn feedback_probe(&mut self, b: &TrainBatch, w: &Weights) -> Result<f64> {
        assert!(w.lambda_prim > 0.0, "probe requires an open warmup gate");
        let mut t = Tape::new();
        let xi_n = t.constant(b.xi.clone().into_dyn());
        let gj_n = t.constant(grayscale(&b.xj).into_dyn());

        let code_i = self.model.ea.encode(&mut t, xi_n, true);
        let s_j = self.model.es.encode(&mut t, gj_n);
        let x_ji = self.model.g.decode(&mut t, code_i, s_j);

        let code_rec = self.model.ea.encode(&mut t, x_ji, true);
        let (fp_x, ff_x) = self.model.ea.project(&mut t, code_rec);
        let zp_x = self.model.ea.logits_prim(&mut t, fp_x);
        let zf_x = self.model.ea.logits_fine(&mut t, ff_x);

        let soft = self.teacher_logits(t.data(x_ji).to_owned());
        let prim = objectives::kl_to_teacher(&mut t, zp_x, &soft);
        let fine = objectives::cross_entropy(&mut t, zf_x, &b.y_j);
        let pw = t.scale(prim, w.lambda_prim);
        let fw = t.scale(fine, w.lambda_fine);
        let total = t.add(pw, fw);

        let heads = self.model.ea.head_params();
        let targets: Vec<NodeId> = heads.iter().filter_map(|p| t.leaf_of(p)).collect();
        let grads = t.backward(total, &targets);
        let mut peak = 0.0f64;
        for g in param_grads(&t, &grads, &heads).into_iter().flatten() {
            for v in g.iter() {
                peak = peak.max(v.abs());
            }
        }
        Ok(peak)
    }
}

/// Optimizer-state restoration, unified over both methods for resume.
trait OptState {
    fn restore(&mut self, prefix: &str, f: &dyn Fn(&str) -> Option<ArrayD<f64>>) -> std::result::Result<(), String>;
}

impl OptState for SgdMomentum {
    fn restore(&mut self, prefix: &str, f: &dyn Fn(&str) -> Option<ArrayD<f64>>) -> std::result::Result<(), String> {
        self.load_state(prefix, f)
    }
}

impl OptState for Adam {
    fn restore(&mut self, prefix: &str, f: &dyn Fn(&str) -> Option<ArrayD<f64>>) -> std::result::Result<(), String> {
        self.load_state(prefix, f)
    }
}

/// Train the baseline identity classifier that later provides soft labels.
/// Uniform sampling over labeled images, cross-entropy, heavy-ball descent.
/// The returned network is frozen.
pub fn train_teacher(cfg: &Config, ds: &Dataset, log: &mut dyn Write) -> Result<Teacher> {
    let labeled: Vec<usize> = ds
        .items
        .iter()
        .enumerate()
        .filter(|(_, it)| ds.label(it).is_some())
        .map(|(i, _)| i)
        .collect();
    if labeled.is_empty() {
        return Err(DgError::Data("no labeled images to train the teacher on".into()));
    }
    let teacher = model::new_teacher(cfg, ds.num_classes());
    let params = trainable_params(&teacher, "teacher");
    let mut opt = SgdMomentum::new(params.clone(), cfg.train.teacher_lr, cfg.train.sgd_momentum);
    let mut rng = seeded(cfg.train.seed, streams::TEACHER);
    let pre = Preprocess::from_cfg(&cfg.data);

    for it in 0..cfg.train.teacher_iters {
        let picks: Vec<usize> =
            (0..cfg.train.teacher_batch).map(|_| labeled[rng.gen_range(0..labeled.len())]).collect();
        let items: Vec<&crate::data::Item> = picks.iter().map(|&i| &ds.items[i]).collect();
        let labels: Vec<usize> = items.iter().map(|it| ds.label(it).unwrap()).collect();
        let mut x = pre.batch(&items)?;
        if cfg.data.hflip {
            for n in 0..x.shape()[0] {
                if rng.gen::<bool>() {
                    x.index_axis_mut(Axis(0), n).invert_axis(Axis(2));
                }
            }
        }
        let mut t = Tape::new();
        let xn = t.constant(x.into_dyn());
        let z = teacher.logits(&mut t, xn, true);
        let loss = objectives::cross_entropy(&mut t, z, &labels);
        let lv = t.data(loss)[[0]];
        if !lv.is_finite() {
            return Err(DgError::NonFinite { iter: it, detail: format!("teacher loss {}", lv) });
        }
        let targets: Vec<NodeId> = params.iter().filter_map(|p| t.leaf_of(p)).collect();
        let grads = t.backward(loss, &targets);
        opt.step(&param_grads(&t, &grads, &params));
        if cfg.train.log_every > 0 && it % cfg.train.log_every == 0 {
            writeln!(log, "{}\tteacher_ce\t{}", it, lv)?;
        }
    }
    log.flush()?;
    teacher.freeze();
    Ok(teacher)
}

/// Fraction of labeled images the teacher classifies correctly, evaluated
/// with running statistics and no augmentation.
pub fn teacher_accuracy(teacher: &Teacher, ds: &Dataset, pre: &Preprocess, chunk: usize) -> Result<f64> {
    assert!(chunk > 0);
    let labeled: Vec<&crate::data::Item> =
        ds.items.iter().filter(|it| ds.label(it).is_some()).collect();
    if labeled.is_empty() {
        return Err(DgError::Data("no labeled images".into()));
    }
    let mut correct = 0usize;
    for group in labeled.chunks(chunk) {
        let x = pre.batch(group)?;
        let mut t = Tape::new();
        let xn = t.constant(x.into_dyn());
        let z = teacher.logits(&mut t, xn, false);
        let zd = t.data(z);
        for (row, it) in group.iter().enumerate() {
            let k = zd.shape()[1];
            let mut best = 0usize;
            for j in 1..k {
                if zd[[row, j]] > zd[[row, best]] {
                    best = j;
                }
            }
            if best == ds.label(it).unwrap() {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / labeled.len() as f64)
}
