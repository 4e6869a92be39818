//! The training loop: per-iteration D, C and G updates under two
//! independently controlled noise intensities, optimizers, evaluation and
//! checkpointing.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{invalid_key, ConfigError, ExperimentConfig};
use crate::datasets::{BatchSampler, DataKind, Dataset, DatasetError, LabeledBatch, Scaling};
use crate::diffusion::{standard_normal, DiffusionError, DiffusionSchedule};
use crate::intensity::{IntensityController, IntensityError, OverfitEstimator, UPDATE_PERIOD};
use crate::metrics::{self, Embedding, MetricError, MetricsReport};
use crate::networks::{Classifier, Discriminator, Generator, NetworkConfig, NetworkError, OutputActivation, ParamSet};
use crate::objectives::{
    loss_classifier_total, loss_d_ns, loss_generator_total, ContrastReference, LossWeights, ObjectiveError,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {term} at iteration {k}")]
    NonFinite { term: &'static str, k: usize },
    #[error("optimizer: {0}")]
    Optimizer(String),
    #[error("checkpoint does not match configuration: {0}")]
    Mismatch(String),
    #[error("io ({path}): {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Intensity(#[from] IntensityError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io { path: path.display().to_string(), source }
}

/// Whether timesteps are drawn once per row or once per batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestepMode {
    PerSample,
    PerBatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub k_max: usize,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub lr_c: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay_c: f64,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
    pub timestep_mode: TimestepMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k_max: 4000,
            batch_size: 64,
            lr_g: 2e-3,
            lr_d: 2e-3,
            lr_c: 1e-3,
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay_c: 0.01,
            eval_every: 1000,
            checkpoint_every: 1000,
            seed: 0,
            timestep_mode: TimestepMode::PerSample,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_classes: usize) -> Result<(), ConfigError> {
        if self.k_max == 0 || self.k_max % UPDATE_PERIOD != 0 {
            return Err(invalid_key("train.k_max", format!("{} is not a positive multiple of {UPDATE_PERIOD}", self.k_max)));
        }
        if self.batch_size < 2 * num_classes {
            return Err(invalid_key(
                "train.batch_size",
                format!("{} is below 2 x {num_classes} classes", self.batch_size),
            ));
        }
        for (key, lr) in [("train.lr_g", self.lr_g), ("train.lr_d", self.lr_d), ("train.lr_c", self.lr_c)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(invalid_key(key, format!("{lr} is not a non-negative number")));
            }
        }
        for (key, b) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(invalid_key(key, format!("{b} outside [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(invalid_key("train.eps", "must be positive"));
        }
        if !(self.weight_decay_c >= 0.0 && self.weight_decay_c.is_finite()) {
            return Err(invalid_key("train.weight_decay_c", "must be non-negative"));
        }
        if self.eval_every == 0 {
            return Err(invalid_key("train.eval_every", "must be positive"));
        }
        if self.checkpoint_every == 0 {
            return Err(invalid_key("train.checkpoint_every", "must be positive"));
        }
        Ok(())
    }
}

/// First and second moment buffers plus the step count for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.tensors().map(|t| Tensor::zeros(t.shape())).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Adam with bias correction.
pub fn adam(params: &mut ParamSet, grads: &[Tensor], state: &mut AdamState, hp: AdamHyper) -> Result<(), TrainError> {
    adamw(params, grads, state, hp, 0.0)
}

/// Adam with decoupled weight decay: `p ← p − lr·(m̂/(√v̂ + ε) + wd·p)`.
pub fn adamw(
    params: &mut ParamSet,
    grads: &[Tensor],
    state: &mut AdamState,
    hp: AdamHyper,
    weight_decay: f64,
) -> Result<(), TrainError> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(TrainError::Optimizer(format!(
            "{} parameters, {} gradients, {}/{} moment buffers",
            params.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    for (i, (p, g)) in params.tensors().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() || p.shape() != state.v[i].shape() {
            return Err(TrainError::Optimizer(format!("shape mismatch at parameter {i}: {:?} vs {:?}", p.shape(), g.shape())));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (i, (p, g)) in params.tensors_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * gv;
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * gv * gv;
            let update = (m[j] / c1) / ((v[j] / c2).sqrt() + hp.eps);
            *pv -= hp.lr * (update + weight_decay * *pv);
        }
    }
    Ok(())
}

/// Losses and controller readings for one iteration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepReport {
    /// Iteration index the step ran at.
    pub k: usize,
    pub intensity_d: f64,
    pub intensity_c: f64,
    pub r_d: f64,
    pub loss_d: f64,
    pub loss_c: f64,
    pub loss_c_cont: Option<f64>,
    pub loss_c_cls: Option<f64>,
    pub loss_g: f64,
    pub loss_g_adv: f64,
    pub loss_g_cont: Option<f64>,
    pub loss_g_cls: Option<f64>,
}

/// One evaluation: the step that preceded it and the metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub k: usize,
    pub step: StepReport,
    pub metrics: MetricsReport,
}

fn opt_field(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:?}"))
}

impl EvalRow {
    pub fn csv_header(num_classes: usize) -> String {
        let mut h: Vec<String> = [
            "k",
            "intensity_d",
            "intensity_c",
            "r_d",
            "loss_d",
            "loss_c",
            "loss_c_cont",
            "loss_c_cls",
            "loss_g",
            "loss_g_adv",
            "loss_g_cont",
            "loss_g_cls",
        ]
        .map(String::from)
        .to_vec();
        h.extend(MetricsReport::csv_header(num_classes));
        h.join(",")
    }

    pub fn csv_line(&self) -> String {
        let s = &self.step;
        let mut f = vec![
            self.k.to_string(),
            format!("{:?}", s.intensity_d),
            format!("{:?}", s.intensity_c),
            format!("{:?}", s.r_d),
            format!("{:?}", s.loss_d),
            format!("{:?}", s.loss_c),
            opt_field(s.loss_c_cont),
            opt_field(s.loss_c_cls),
            format!("{:?}", s.loss_g),
            format!("{:?}", s.loss_g_adv),
            opt_field(s.loss_g_cont),
            opt_field(s.loss_g_cls),
        ];
        f.extend(self.metrics.csv_fields());
        f.join(",")
    }
}

fn finite(v: Var<'_>, term: &'static str, k: usize) -> Result<f64, TrainError> {
    let x = v.item();
    if x.is_finite() {
        Ok(x)
    } else {
        Err(TrainError::NonFinite { term, k })
    }
}

/// Complete mutable training state. Every field is written to checkpoints.
#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: ExperimentConfig,
    schedule: DiffusionSchedule,
    pub gen: Generator,
    pub disc: Discriminator,
    pub cls: Classifier,
    pub opt_g: AdamState,
    pub opt_d: AdamState,
    pub opt_c: AdamState,
    pub ctrl_d: IntensityController,
    pub ctrl_c: IntensityController,
    pub estimator: OverfitEstimator,
    sampler: BatchSampler,
    rng: ChaCha8Rng,
    k: usize,
    best: Option<(usize, f64)>,
    last: StepReport,
}

const SAMPLER_SALT: u64 = 0x5A3D_1E55_0C1A_55E5;

impl Trainer {
    pub fn new(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<Self, TrainError> {
        cfg.validate()?;
        cfg.train.validate(dataset.num_classes())?;
        let schedule = cfg.diffusion.schedule()?;
        let (ctrl_d, ctrl_c) = cfg.intensity.controllers(cfg.train.k_max)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let (c, dim, t) = (dataset.num_classes(), dataset.data_dim(), cfg.diffusion.t_steps);
        let gen = Generator::new(&cfg.network, c, dim, &mut rng);
        let disc = Discriminator::new(&cfg.network, c, dim, t, &mut rng);
        let cls = Classifier::new(&cfg.network, c, dim, t, &mut rng);
        let sampler = BatchSampler::new(dataset, cfg.train.seed ^ SAMPLER_SALT)?;
        Ok(Self {
            opt_g: AdamState::new(&gen.params),
            opt_d: AdamState::new(&disc.params),
            opt_c: AdamState::new(&cls.params),
            cfg: cfg.clone(),
            schedule,
            gen,
            disc,
            cls,
            ctrl_d,
            ctrl_c,
            estimator: cfg.intensity.estimator(),
            sampler,
            rng,
            k: 0,
            best: None,
            last: StepReport::default(),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    /// Iterations completed so far.
    pub fn iteration(&self) -> usize {
        self.k
    }

    /// `(k, fd)` of the best evaluation so far.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }

    fn hyper(&self, lr: f64) -> AdamHyper {
        let t = &self.cfg.train;
        AdamHyper { lr, beta1: t.beta1, beta2: t.beta2, eps: t.eps }
    }

    fn draw_timesteps(&mut self, intensity: f64, n: usize) -> Result<Vec<usize>, TrainError> {
        Ok(match self.cfg.train.timestep_mode {
            TimestepMode::PerSample => (0..n)
                .map(|_| self.schedule.sample_timestep(intensity, &mut self.rng).map(|s| s.t))
                .collect::<Result<_, _>>()?,
            TimestepMode::PerBatch => {
                vec![self.schedule.sample_timestep(intensity, &mut self.rng)?.t; n]
            }
        })
    }

    fn uniform_labels(&mut self, n: usize) -> Vec<usize> {
        let c = self.gen.num_classes();
        (0..n).map(|_| self.rng.random_range(0..c)).collect()
    }

    /// Draws the next class-balanced batch and trains on it.
    pub fn step(&mut self, dataset: &Dataset) -> Result<StepReport, TrainError> {
        let batch = self.sampler.next_batch(dataset, self.cfg.train.batch_size);
        self.train_step(&batch)
    }

    /// One iteration: D step, C step, G step, then the controllers.
    pub fn train_step(&mut self, batch: &LabeledBatch) -> Result<StepReport, TrainError> {
        let k = self.k;
        let mut report = StepReport {
            k,
            intensity_d: self.ctrl_d.value(),
            intensity_c: self.ctrl_c.value(),
            ..Default::default()
        };
        self.discriminator_step(batch, &mut report)?;
        self.classifier_step(batch, &mut report)?;
        self.generator_step(batch, &mut report)?;
        report.r_d = self.estimator.r_d();
        self.ctrl_d.step_discriminator(report.r_d, k)?;
        self.ctrl_c.step_classifier(k)?;
        self.k += 1;
        self.last = report.clone();
        Ok(report)
    }

    /// Discriminator on noised reals and noised (frozen-generator) fakes.
    pub fn discriminator_step(&mut self, batch: &LabeledBatch, report: &mut StepReport) -> Result<(), TrainError> {
        let (k, n) = (self.k, batch.labels.len());
        let t_d = self.ctrl_d.value();
        let z = standard_normal(&[n, self.gen.d_z()], &mut self.rng);
        let labels_f = self.uniform_labels(n);
        let fake = self.gen.generate(&z, &labels_f)?;
        let ts_real = self.draw_timesteps(t_d, n)?;
        let ts_fake = self.draw_timesteps(t_d, n)?;
        let tape = Tape::new();
        let bound = self.disc.params.bind(&tape, true);
        let x_real = self.schedule.noise_rows(tape.constant(batch.x.clone()), &ts_real, &mut self.rng)?;
        let x_fake = self.schedule.noise_rows(tape.constant(fake), &ts_fake, &mut self.rng)?;
        let real_logits = self.disc.forward(&bound, x_real, &ts_real, &batch.labels)?;
        let fake_logits = self.disc.forward(&bound, x_fake, &ts_fake, &labels_f)?;
        let loss = loss_d_ns(real_logits, fake_logits)?;
        report.loss_d = finite(loss, "loss_d_ns", k)?;
        tape.backward(loss)?;
        let grads = self.disc.params.grads(&bound);
        let hp = self.hyper(self.cfg.train.lr_d);
        adam(&mut self.disc.params, &grads, &mut self.opt_d, hp)?;
        self.estimator.record_real_logits(&real_logits.to_tensor())?;
        Ok(())
    }

    /// Classifier on noised reals only.
    pub fn classifier_step(&mut self, batch: &LabeledBatch, report: &mut StepReport) -> Result<(), TrainError> {
        let (k, n) = (self.k, batch.labels.len());
        let t_c = self.ctrl_c.value();
        let ts = self.draw_timesteps(t_c, n)?;
        let tape = Tape::new();
        let bound = self.cls.params.bind(&tape, true);
        let x = self.schedule.noise_rows(tape.constant(batch.x.clone()), &ts, &mut self.rng)?;
        let out = self.cls.forward(&bound, x, &ts)?;
        let parts = loss_classifier_total(out.f_high, out.f_cls, &batch.labels, &self.cfg.loss)?;
        report.loss_c_cont = parts.contrastive.map(|v| finite(v, "loss_supcon (classifier)", k)).transpose()?;
        report.loss_c_cls = parts.classification.map(|v| finite(v, "loss_cls (classifier)", k)).transpose()?;
        report.loss_c = finite(parts.total, "classifier loss", k)?;
        tape.backward(parts.total)?;
        let grads = self.cls.params.grads(&bound);
        let hp = self.hyper(self.cfg.train.lr_c);
        adamw(&mut self.cls.params, &grads, &mut self.opt_c, hp, self.cfg.train.weight_decay_c)?;
        Ok(())
    }

    /// Generator through frozen D (at t_D) and frozen C (at t_C).
    pub fn generator_step(&mut self, batch: &LabeledBatch, report: &mut StepReport) -> Result<(), TrainError> {
        let (k, n) = (self.k, batch.labels.len());
        let (t_d, t_c) = (self.ctrl_d.value(), self.ctrl_c.value());
        let z = standard_normal(&[n, self.gen.d_z()], &mut self.rng);
        let labels_f = self.uniform_labels(n);
        let ts_d = self.draw_timesteps(t_d, n)?;
        let ts_c = self.draw_timesteps(t_c, n)?;
        let weights: &LossWeights = &self.cfg.loss;
        let with_reals = weights.gen_contrast_with_reals && weights.lambda_g < 1.0;
        let ts_ref = if with_reals { self.draw_timesteps(t_c, n)? } else { Vec::new() };
        let tape = Tape::new();
        let g_bound = self.gen.params.bind(&tape, true);
        let d_bound = self.disc.params.bind(&tape, false);
        let c_bound = self.cls.params.bind(&tape, false);
        let fake = self.gen.forward(&g_bound, tape.constant(z), &labels_f)?;
        let fake_d = self.schedule.noise_rows(fake, &ts_d, &mut self.rng)?;
        let logits = self.disc.forward(&d_bound, fake_d, &ts_d, &labels_f)?;
        let fake_c = self.schedule.noise_rows(fake, &ts_c, &mut self.rng)?;
        let out = self.cls.forward(&c_bound, fake_c, &ts_c)?;
        let reference = if with_reals {
            let x = self.schedule.noise_rows(tape.constant(batch.x.clone()), &ts_ref, &mut self.rng)?;
            let r = self.cls.forward(&c_bound, x, &ts_ref)?;
            Some(ContrastReference { f_high: r.f_high, labels: &batch.labels })
        } else {
            None
        };
        let parts = loss_generator_total(logits, out.f_high, out.f_cls, &labels_f, reference, &self.cfg.loss)?;
        report.loss_g_adv = finite(parts.adversarial.expect("always evaluated"), "loss_g_adv", k)?;
        report.loss_g_cont = parts.contrastive.map(|v| finite(v, "loss_supcon (generator)", k)).transpose()?;
        report.loss_g_cls = parts.classification.map(|v| finite(v, "loss_cls (generator)", k)).transpose()?;
        report.loss_g = finite(parts.total, "generator loss", k)?;
        tape.backward(parts.total)?;
        let grads = self.gen.params.grads(&g_bound);
        let hp = self.hyper(self.cfg.train.lr_g);
        adam(&mut self.gen.params, &grads, &mut self.opt_g, hp)?;
        Ok(())
    }

    /// Metrics on fresh conditional samples against a class-balanced real
    /// subset. Uses its own seeded generator, so evaluating never perturbs
    /// training.
    pub fn evaluate(&self, dataset: &Dataset) -> Result<MetricsReport, TrainError> {
        evaluate_generator(&self.gen, dataset, &self.cfg)
    }

    /// Trains up to `k_max`, evaluating every `eval_every` and writing
    /// `metrics.csv`, periodic checkpoints, `best.ckpt` and `final.ckpt`
    /// into `out_dir` when given. Resumes from the current iteration.
    pub fn run(
        &mut self,
        dataset: &Dataset,
        out_dir: Option<&Path>,
        mut on_eval: impl FnMut(&EvalRow),
    ) -> Result<Vec<EvalRow>, TrainError> {
        let mut csv = match out_dir {
            Some(dir) => Some(self.open_metrics(dir, dataset.num_classes())?),
            None => None,
        };
        let mut rows = Vec::new();
        let train = self.cfg.train.clone();
        while self.k < train.k_max {
            self.step(dataset)?;
            let k = self.k;
            if k % train.eval_every == 0 {
                let metrics = self.evaluate(dataset)?;
                let row = EvalRow { k, step: self.last.clone(), metrics };
                let improved = self.best.is_none_or(|(_, fd)| row.metrics.fd < fd);
                if improved {
                    self.best = Some((k, row.metrics.fd));
                }
                if let (Some(dir), Some(out)) = (out_dir, csv.as_mut()) {
                    let path = dir.join("metrics.csv");
                    writeln!(out, "{}", row.csv_line()).and_then(|_| out.flush()).map_err(|e| io_err(&path, e))?;
                    if improved {
                        self.to_checkpoint(dataset).save(&dir.join("best.ckpt"))?;
                    }
                }
                on_eval(&row);
                rows.push(row);
            }
            if let Some(dir) = out_dir {
                if k % train.checkpoint_every == 0 {
                    self.to_checkpoint(dataset).save(&dir.join(format!("ckpt-{k:07}.ckpt")))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.to_checkpoint(dataset).save(&dir.join("final.ckpt"))?;
        }
        Ok(rows)
    }

    fn open_metrics(&self, dir: &Path, num_classes: usize) -> Result<BufWriter<File>, TrainError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let path = dir.join("metrics.csv");
        let fresh = self.k == 0 || !path.exists();
        let file = if fresh {
            File::create(&path)
        } else {
            OpenOptions::new().append(true).open(&path)
        }
        .map_err(|e| io_err(&path, e))?;
        let mut out = BufWriter::new(file);
        if fresh {
            writeln!(out, "{}", EvalRow::csv_header(num_classes)).map_err(|e| io_err(&path, e))?;
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, dataset: &Dataset) -> Checkpoint {
        let mut ck = Checkpoint::default();
        write_meta(&mut ck, &self.cfg.network, dataset, self.cfg.diffusion.t_steps);
        for params in [&self.gen.params, &self.disc.params, &self.cls.params] {
            for (name, t) in params.iter() {
                ck.push(name, t.clone());
            }
        }
        for (prefix, opt) in [("opt.gen", &self.opt_g), ("opt.disc", &self.opt_d), ("opt.cls", &self.opt_c)] {
            for (i, (m, v)) in opt.m.iter().zip(&opt.v).enumerate() {
                ck.push(format!("{prefix}.m.{i}"), m.clone());
                ck.push(format!("{prefix}.v.{i}"), v.clone());
            }
            ck.push(format!("{prefix}.step"), Tensor::scalar(opt.step as f64));
        }
        ck.push("ctrl.d", Tensor::vector(vec![self.ctrl_d.value(), self.ctrl_d.adjustments() as f64]));
        ck.push("ctrl.c", Tensor::vector(vec![self.ctrl_c.value(), self.ctrl_c.adjustments() as f64]));
        ck.push("estimator.window", Tensor::vector(self.estimator.window().collect()));
        ck.push("sampler.draws", Tensor::vector(self.sampler.draws().iter().map(|&d| d as f64).collect()));
        ck.push("sampler.batches", Tensor::scalar(self.sampler.batches() as f64));
        ck.push("state.k", Tensor::scalar(self.k as f64));
        let best = self.best.map_or(vec![f64::NAN, 0.0], |(k, fd)| vec![fd, k as f64]);
        ck.push("state.best", Tensor::vector(best));
        ck.push("rng", Tensor::vector(encode_rng(&self.rng)));
        ck
    }

    /// Rebuilds the trainer saved by [`Trainer::to_checkpoint`] under the
    /// same configuration and dataset.
    pub fn from_checkpoint(cfg: &ExperimentConfig, dataset: &Dataset, ck: &Checkpoint) -> Result<Self, TrainError> {
        let mut tr = Self::new(cfg, dataset)?;
        let meta = CheckpointMeta::read(ck)?;
        if meta.network != cfg.network {
            return Err(TrainError::Mismatch("network section differs".into()));
        }
        if meta.num_classes != dataset.num_classes() || meta.data_dim != dataset.data_dim() {
            return Err(TrainError::Mismatch("dataset shape differs".into()));
        }
        if meta.t_steps != cfg.diffusion.t_steps {
            return Err(TrainError::Mismatch("diffusion.t_steps differs".into()));
        }
        for params in [&mut tr.gen.params, &mut tr.disc.params, &mut tr.cls.params] {
            load_params(params, ck)?;
        }
        for (prefix, opt) in [("opt.gen", &mut tr.opt_g), ("opt.disc", &mut tr.opt_d), ("opt.cls", &mut tr.opt_c)] {
            for i in 0..opt.m.len() {
                opt.m[i] = shaped(ck, &format!("{prefix}.m.{i}"), opt.m[i].shape())?;
                opt.v[i] = shaped(ck, &format!("{prefix}.v.{i}"), opt.v[i].shape())?;
            }
            opt.step = count(ck.get(&format!("{prefix}.step"))?.item())?;
        }
        for (name, ctrl) in [("ctrl.d", &mut tr.ctrl_d), ("ctrl.c", &mut tr.ctrl_c)] {
            let v = ck.get(name)?.data();
            if v.len() != 2 {
                return Err(TrainError::Mismatch(format!("`{name}` must hold 2 values")));
            }
            ctrl.restore(v[0], count(v[1])? as usize);
        }
        tr.estimator = cfg.intensity.estimator();
        for &v in ck.get("estimator.window")?.data() {
            tr.estimator.push(v);
        }
        let draws: Vec<u64> = ck.get("sampler.draws")?.data().iter().map(|&d| count(d)).collect::<Result<_, _>>()?;
        if draws.len() != dataset.num_classes() {
            return Err(TrainError::Mismatch("sampler.draws length".into()));
        }
        tr.sampler.restore(&draws, count(ck.get("sampler.batches")?.item())?);
        tr.k = count(ck.get("state.k")?.item())? as usize;
        let best = ck.get("state.best")?.data();
        tr.best = (best.len() == 2 && !best[0].is_nan()).then(|| (best[1] as usize, best[0]));
        tr.rng = decode_rng(ck.get("rng")?.data())?;
        Ok(tr)
    }
}

fn count(v: f64) -> Result<u64, TrainError> {
    if v >= 0.0 && v.fract() == 0.0 && v < 9.007_199_254_740_992e15 {
        Ok(v as u64)
    } else {
        Err(TrainError::Mismatch(format!("{v} is not a count")))
    }
}

fn shaped(ck: &Checkpoint, name: &str, shape: &[usize]) -> Result<Tensor, TrainError> {
    let t = ck.get(name)?;
    if t.shape() != shape {
        return Err(TrainError::Mismatch(format!("`{name}` has shape {:?}, expected {shape:?}", t.shape())));
    }
    Ok(t.clone())
}

fn load_params(params: &mut ParamSet, ck: &Checkpoint) -> Result<(), TrainError> {
    let mut src = ParamSet::default();
    for (name, t) in params.iter() {
        src.push(name, shaped(ck, name, t.shape())?);
    }
    params.load(&src)?;
    Ok(())
}

/// ChaCha state as 32-bit halves, each exact in an `f64`.
fn encode_rng(rng: &ChaCha8Rng) -> Vec<f64> {
    let mut words: Vec<u32> = rng
        .get_seed()
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let stream = rng.get_stream();
    words.extend([stream as u32, (stream >> 32) as u32]);
    let pos = rng.get_word_pos();
    words.extend((0..4).map(|i| (pos >> (32 * i)) as u32));
    words.into_iter().map(f64::from).collect()
}

fn decode_rng(v: &[f64]) -> Result<ChaCha8Rng, TrainError> {
    if v.len() != 14 {
        return Err(TrainError::Mismatch("rng state must hold 14 words".into()));
    }
    let words: Vec<u32> = v
        .iter()
        .map(|&w| count(w).and_then(|c| u32::try_from(c).map_err(|_| TrainError::Mismatch("rng word".into()))))
        .collect::<Result<_, _>>()?;
    let mut seed = [0u8; 32];
    for (i, w) in words[..8].iter().enumerate() {
        seed[4 * i..4 * i + 4].copy_from_slice(&w.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(u64::from(words[8]) | (u64::from(words[9]) << 32));
    let pos = (0..4).fold(0u128, |acc, i| acc | (u128::from(words[10 + i]) << (32 * i)));
    rng.set_word_pos(pos);
    Ok(rng)
}

/// What a checkpoint records about the data and architecture, enough to
/// rebuild and use the generator without a config.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub kind: DataKind,
    pub num_classes: usize,
    pub data_dim: usize,
    pub t_steps: usize,
    pub network: NetworkConfig,
    pub scaling: Option<Scaling>,
}

fn write_meta(ck: &mut Checkpoint, net: &NetworkConfig, dataset: &Dataset, t_steps: usize) {
    let (kind, side) = match dataset.kind() {
        DataKind::Points => (0.0, 0.0),
        DataKind::Glyphs { side } => (1.0, side as f64),
        DataKind::Table => (2.0, 0.0),
    };
    ck.push(
        "meta.data",
        Tensor::vector(vec![kind, side, dataset.num_classes() as f64, dataset.data_dim() as f64, t_steps as f64]),
    );
    let act = match net.output_activation {
        OutputActivation::Tanh => 0.0,
        OutputActivation::Linear => 1.0,
    };
    ck.push(
        "meta.network",
        Tensor::vector(vec![
            net.hidden_layers as f64,
            net.hidden_units as f64,
            net.leaky_slope,
            net.d_z as f64,
            net.d_e as f64,
            net.d_t as f64,
            net.d_h as f64,
            act,
            f64::from(u8::from(net.class_conditional_discriminator)),
        ]),
    );
    if let Some(s) = dataset.scaling() {
        ck.push("meta.scaling.min", Tensor::vector(s.min.clone()));
        ck.push("meta.scaling.max", Tensor::vector(s.max.clone()));
    }
}

impl CheckpointMeta {
    pub fn read(ck: &Checkpoint) -> Result<Self, TrainError> {
        let d = ck.get("meta.data")?.data();
        let n = ck.get("meta.network")?.data();
        if d.len() != 5 || n.len() != 9 {
            return Err(TrainError::Mismatch("malformed meta entries".into()));
        }
        let kind = match d[0] as u8 {
            0 => DataKind::Points,
            1 => DataKind::Glyphs { side: count(d[1])? as usize },
            _ => DataKind::Table,
        };
        let network = NetworkConfig {
            hidden_layers: count(n[0])? as usize,
            hidden_units: count(n[1])? as usize,
            leaky_slope: n[2],
            d_z: count(n[3])? as usize,
            d_e: count(n[4])? as usize,
            d_t: count(n[5])? as usize,
            d_h: count(n[6])? as usize,
            output_activation: if n[7] == 0.0 { OutputActivation::Tanh } else { OutputActivation::Linear },
            class_conditional_discriminator: n[8] != 0.0,
        };
        let scaling = if ck.contains("meta.scaling.min") {
            Some(Scaling {
                min: ck.get("meta.scaling.min")?.data().to_vec(),
                max: ck.get("meta.scaling.max")?.data().to_vec(),
            })
        } else {
            None
        };
        Ok(Self {
            kind,
            num_classes: count(d[2])? as usize,
            data_dim: count(d[3])? as usize,
            t_steps: count(d[4])? as usize,
            network,
            scaling,
        })
    }

    /// Maps generated samples back to source units where a scaling exists.
    pub fn denormalize(&self, x: &Tensor) -> Tensor {
        match &self.scaling {
            None => x.clone(),
            Some(s) => {
                let cols = x.cols();
                let data = x.data().iter().enumerate().map(|(i, &v)| s.inverse(i % cols, v)).collect();
                Tensor::new(x.shape().to_vec(), data).expect("same shape")
            }
        }
    }
}

/// Rebuilds the generator stored in a checkpoint.
pub fn generator_from_checkpoint(ck: &Checkpoint) -> Result<(Generator, CheckpointMeta), TrainError> {
    let meta = CheckpointMeta::read(ck)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut gen = Generator::new(&meta.network, meta.num_classes, meta.data_dim, &mut rng);
    load_params(&mut gen.params, ck)?;
    Ok((gen, meta))
}

/// Evaluation shared by training and the `eval` command.
pub fn evaluate_generator(gen: &Generator, dataset: &Dataset, cfg: &ExperimentConfig) -> Result<MetricsReport, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.seed);
    let c = dataset.num_classes();
    let per_class = cfg.eval.samples / c;
    let mut real_idx = Vec::with_capacity(per_class * c);
    for class in 0..c {
        let mut idx = dataset.class_indices(class);
        idx.shuffle(&mut rng);
        real_idx.extend(idx.into_iter().take(per_class));
    }
    let real = dataset.gather(&real_idx);
    let labels: Vec<usize> = (0..c).flat_map(|class| std::iter::repeat_n(class, per_class)).collect();
    let z = standard_normal(&[labels.len(), gen.d_z()], &mut rng);
    let fake = gen.generate(&z, &labels)?;
    let embedding = Embedding::new(cfg.eval.embedding_kind(dataset.data_dim()), dataset.data_dim(), cfg.eval.embedding_seed);
    let gmm = cfg.dataset.gmm_spec().filter(|_| dataset.kind() == DataKind::Points);
    Ok(metrics::evaluate(&embedding, (&real.x, &real.labels), (&fake, &labels), c, cfg.eval.k, gmm.as_ref())?)
}
