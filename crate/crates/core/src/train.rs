//! Training: example synthesis, Adam, cosine schedule and the training loop.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::bayer::{augment_bayer, pack, unify_bayer, BayerImage, IspParams};
use crate::dataset::{load_raw_dir, make_pairs, split, synthetic_dataset, NamedImage, Pair};
use crate::error::{config_err, shape_err, Error, Result};
use crate::fanet::{forward, Model, ModelConfig, ModelWeights};
use crate::losses::{LossConfig, LossMode, Objective, Teacher};
use crate::metrics::{self, denoise_frame, evaluate, prepare, raw_psnr, Denoiser, MetricReport};
use crate::noise::{
    ksigma, sample_noise, sample_training_params_with, NoiseParams, SensorNoiseModel,
};
use crate::rng;
use crate::tensor::{Graph, Tensor};

const STREAM_INIT: u64 = 1;
const STREAM_PICK: u64 = 2;
const STREAM_EXAMPLE: u64 = 3;
const STREAM_EVAL: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directories of clean RAW frames (`*.pgm` plus sidecars). When empty a
    /// synthetic dataset is generated instead.
    #[serde(default)]
    pub roots: Vec<PathBuf>,
    #[serde(default = "d_count")]
    pub synthetic_count: usize,
    #[serde(default = "d_side")]
    pub synthetic_height: usize,
    #[serde(default = "d_side")]
    pub synthetic_width: usize,
    #[serde(default)]
    pub synthetic_seed: u64,
}

fn d_count() -> usize {
    64
}
fn d_side() -> usize {
    192
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            roots: Vec::new(),
            synthetic_count: d_count(),
            synthetic_height: d_side(),
            synthetic_width: d_side(),
            synthetic_seed: 0,
        }
    }
}

/// Training noise range; `b` follows the sensor's log-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default = "d_a_min")]
    pub a_min: f64,
    #[serde(default = "d_a_max")]
    pub a_max: f64,
    /// Calibrated sensor model JSON; the built-in model when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensor: Option<PathBuf>,
}

fn d_a_min() -> f64 {
    1e-4
}
fn d_a_max() -> f64 {
    1e-2
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            a_min: d_a_min(),
            a_max: d_a_max(),
            sensor: None,
        }
    }
}

impl NoiseConfig {
    pub fn sensor_model(&self) -> Result<SensorNoiseModel> {
        let base = match &self.sensor {
            Some(p) => serde_json::from_str::<SensorNoiseModel>(&fs::read_to_string(p)?)?,
            None => SensorNoiseModel::default(),
        };
        base.validate()?;
        base.with_a_range(self.a_min, self.a_max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "ModelConfig::teacher")]
    pub teacher_model: ModelConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub isp: IspParams,
    #[serde(default = "d_patch")]
    pub patch: usize,
    #[serde(default = "d_batch")]
    pub batch: usize,
    #[serde(default = "d_iterations")]
    pub iterations: usize,
    #[serde(default = "d_lr")]
    pub max_lr: f64,
    #[serde(default = "d_clip")]
    pub grad_clip: f64,
    #[serde(default)]
    pub seed: u64,
    /// Intermediate checkpoint cadence in iterations; 0 keeps only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "d_log_every")]
    pub log_every: usize,
    /// Held-out evaluation cadence; 0 evaluates only at the end.
    #[serde(default = "d_eval_every")]
    pub eval_every: usize,
    #[serde(default = "d_out")]
    pub out_dir: PathBuf,
}

fn d_patch() -> usize {
    128
}
fn d_batch() -> usize {
    16
}
fn d_iterations() -> usize {
    5000
}
fn d_lr() -> f64 {
    1e-4
}
fn d_clip() -> f64 {
    1.0
}
fn d_log_every() -> usize {
    50
}
fn d_eval_every() -> usize {
    1000
}
fn d_out() -> PathBuf {
    PathBuf::from("runs/train")
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            teacher_model: ModelConfig::teacher(),
            loss: LossConfig::default(),
            noise: NoiseConfig::default(),
            isp: IspParams::default(),
            patch: d_patch(),
            batch: d_batch(),
            iterations: d_iterations(),
            max_lr: d_lr(),
            grad_clip: d_clip(),
            seed: 0,
            checkpoint_every: 0,
            log_every: d_log_every(),
            eval_every: d_eval_every(),
            out_dir: d_out(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.teacher_model.validate()?;
        self.isp.validate()?;
        if self.batch < 1 {
            return Err(config_err!("batch must be >= 1, got {}", self.batch));
        }
        for m in [&self.model, &self.teacher_model] {
            if self.patch == 0 || !self.patch.is_multiple_of(m.bayer_multiple()) {
                return Err(config_err!(
                    "patch must be a positive multiple of {} for a {}-scale model, got {}",
                    m.bayer_multiple(),
                    m.scales,
                    self.patch
                ));
            }
        }
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            return Err(config_err!("max_lr must be > 0, got {}", self.max_lr));
        }
        if !(self.grad_clip > 0.0) {
            return Err(config_err!("grad_clip must be > 0, got {}", self.grad_clip));
        }
        if !(self.noise.a_min > 0.0 && self.noise.a_min < self.noise.a_max) {
            return Err(config_err!(
                "noise.a_min must be > 0 and < noise.a_max, got ({}, {})",
                self.noise.a_min,
                self.noise.a_max
            ));
        }
        if self.data.roots.is_empty() && self.data.synthetic_count == 0 {
            return Err(config_err!(
                "data.synthetic_count must be >= 1 when data.roots is empty"
            ));
        }
        if self.data.roots.is_empty()
            && (self.data.synthetic_height < self.patch + 2
                || self.data.synthetic_width < self.patch + 2)
        {
            return Err(config_err!(
                "data.synthetic_height/width must be at least patch + 2 = {}",
                self.patch + 2
            ));
        }
        self.loss.validate()
    }
}

/// One training pair in the packed k-sigma domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub input: Tensor,
    pub target: Tensor,
    pub noise: NoiseParams,
}

/// Unify, random even-offset crop, Bayer augmentation, noise draw, noise
/// synthesis, k-sigma of both noisy input and clean target, packing.
pub fn make_example(
    clean: &BayerImage,
    patch: usize,
    noise: &SensorNoiseModel,
    seed: u64,
) -> Result<Example> {
    if patch == 0 || !patch.is_multiple_of(2) {
        return Err(config_err!("patch must be even and positive, got {patch}"));
    }
    let u = unify_bayer(clean)?;
    // augmentation may lose one 2x2 row/column when re-unifying
    let need = patch + 2;
    if u.height() < need || u.width() < need {
        return Err(shape_err!(
            "{}x{} image is too small for a {patch} patch (needs {need})",
            u.height(),
            u.width()
        ));
    }
    let mut r = rng::seeded(seed);
    let y0 = 2 * r.random_range(0..=(u.height() - need) / 2);
    let x0 = 2 * r.random_range(0..=(u.width() - need) / 2);
    let crop = u.crop(y0, x0, need, need)?;
    let (fh, fv, tr) = (r.random_bool(0.5), r.random_bool(0.5), r.random_bool(0.5));
    let aug = augment_bayer(&crop, fh, fv, tr)?.crop(0, 0, patch, patch)?;
    let p = sample_training_params_with(noise, &mut r);
    let noisy = sample_noise(&aug, &p, r.random())?;
    Ok(Example {
        input: ksigma(&pack(&noisy)?, &p)?,
        target: ksigma(&pack(&aug)?, &p)?,
        noise: p,
    })
}

/// A stacked minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub input: Tensor,
    pub target: Tensor,
    pub noise: Vec<NoiseParams>,
}

impl Batch {
    pub fn from_examples(examples: Vec<Example>) -> Result<Self> {
        let input = Tensor::stack(&examples.iter().map(|e| e.input.clone()).collect::<Vec<_>>())?;
        let target = Tensor::stack(
            &examples
                .iter()
                .map(|e| e.target.clone())
                .collect::<Vec<_>>(),
        )?;
        Ok(Self {
            input,
            target,
            noise: examples.iter().map(|e| e.noise).collect(),
        })
    }
}

/// Batch for iteration `iter`; depends only on the seed and the index.
pub fn make_batch(
    images: &[NamedImage],
    patch: usize,
    batch: usize,
    noise: &SensorNoiseModel,
    seed: u64,
    iter: usize,
) -> Result<Batch> {
    if images.is_empty() {
        return Err(config_err!("no training images"));
    }
    let examples = (0..batch)
        .map(|j| {
            let k = (iter * batch + j) as u64;
            let idx = (rng::derive(seed, STREAM_PICK, k) % images.len() as u64) as usize;
            make_example(
                &images[idx].image,
                patch,
                noise,
                rng::derive(seed, STREAM_EXAMPLE, k),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Batch::from_examples(examples)
}

/// Bias-corrected Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(weights: &ModelWeights) -> Self {
        let zeros: BTreeMap<String, Vec<f32>> = weights
            .iter()
            .map(|(k, t)| (k.to_string(), vec![0.0; t.numel()]))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub fn adam_step(
    weights: &mut ModelWeights,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        let w = weights
            .get(name)
            .ok_or_else(|| shape_err!("gradient for unknown parameter {name}"))?;
        if w.dims() != g.dims() {
            return Err(shape_err!(
                "{name}: gradient {:?} vs weight {:?}",
                g.dims(),
                w.dims()
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, g) in grads {
        let m = state
            .m
            .get_mut(name)
            .ok_or_else(|| shape_err!("no optimizer state for {name}"))?;
        let v = state
            .v
            .get_mut(name)
            .ok_or_else(|| shape_err!("no optimizer state for {name}"))?;
        let w = weights.get_mut(name).expect("checked above");
        for (((wi, &gi), mi), vi) in w
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let gi = gi as f64;
            *mi = (b1 * *mi as f64 + (1.0 - b1) * gi) as f32;
            *vi = (b2 * *vi as f64 + (1.0 - b2) * gi * gi) as f32;
            let mh = *mi as f64 / c1;
            let vh = *vi as f64 / c2;
            *wi = (*wi as f64 - lr * mh / (vh.sqrt() + state.eps)) as f32;
        }
    }
    Ok(())
}

/// `max_lr * (1 + cos(pi * iter / total)) / 2`.
pub fn cosine_lr(iter: usize, total: usize, max_lr: f64) -> Result<f64> {
    if total == 0 {
        return Err(config_err!("cosine schedule needs total > 0"));
    }
    if iter > total {
        return Err(config_err!(
            "iteration {iter} beyond schedule length {total}"
        ));
    }
    Ok(max_lr * 0.5 * (1.0 + (std::f64::consts::PI * iter as f64 / total as f64).cos()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f32,
    pub grad_norm: f64,
}

/// Model, optimizer state and objective for step-by-step training.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    pub objective: Objective,
    pub grad_clip: f64,
}

impl Trainer {
    pub fn new(model: Model, objective: Objective, grad_clip: f64) -> Self {
        let adam = AdamState::new(&model.weights);
        Self {
            model,
            adam,
            objective,
            grad_clip,
        }
    }

    /// Weighted loss of the current model on `batch`, without updating.
    pub fn loss(&self, batch: &Batch) -> Result<f32> {
        let mut g = Graph::new();
        let p = self.model.weights.bind(&mut g, false);
        let x = g.constant(batch.input.clone());
        let y = g.constant(batch.target.clone());
        let f = forward(&mut g, &self.model.config, &p, x)?;
        let l = self.objective.loss(&mut g, f.output, y, x, &batch.noise)?;
        Ok(g.value(l).data()[0])
    }

    /// Forward, backward, global-norm clip, Adam update. Fails on any
    /// non-finite loss or parameter.
    pub fn step(&mut self, batch: &Batch, lr: f64) -> Result<StepStats> {
        let (loss, mut grads) = {
            let mut g = Graph::new();
            let p = self.model.weights.bind(&mut g, true);
            let x = g.constant(batch.input.clone());
            let y = g.constant(batch.target.clone());
            let f = forward(&mut g, &self.model.config, &p, x)?;
            let l = self.objective.loss(&mut g, f.output, y, x, &batch.noise)?;
            let loss = g.value(l).data()[0];
            if !loss.is_finite() {
                return Err(Error::Training(format!("non-finite loss {loss}")));
            }
            g.backward(l)?;
            let grads: BTreeMap<String, Tensor> = p
                .iter()
                .map(|(k, v)| (k.to_string(), g.grad_or_zeros(v)))
                .collect();
            (loss, grads)
        };
        let norm = grads
            .values()
            .flat_map(|t| t.data())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Training(format!("non-finite gradient norm {norm}")));
        }
        if norm > self.grad_clip {
            let s = (self.grad_clip / norm) as f32;
            for t in grads.values_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
        adam_step(&mut self.model.weights, &grads, &mut self.adam, lr)?;
        if !self.model.weights.is_finite() {
            return Err(Error::Training("parameters became non-finite".into()));
        }
        Ok(StepStats {
            loss,
            grad_norm: norm,
        })
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEntry {
    Step {
        iter: usize,
        loss: f32,
        lr: f64,
        grad_norm: f64,
    },
    Eval {
        iter: usize,
        #[serde(with = "metrics::psnr_serde")]
        raw_psnr: f64,
        #[serde(with = "metrics::psnr_serde")]
        input_raw_psnr: f64,
    },
    /// Teacher output on clean inputs against those inputs.
    Identity {
        #[serde(with = "metrics::psnr_serde")]
        clean_psnr: f64,
    },
    Checkpoint {
        iter: usize,
        path: PathBuf,
    },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub model: Model,
    pub entries: Vec<LogEntry>,
    /// Final held-out report, when a held-out split exists.
    pub report: Option<MetricReport>,
}

impl TrainOutcome {
    pub fn last_eval(&self) -> Option<(f64, f64)> {
        self.entries.iter().rev().find_map(|e| match e {
            LogEntry::Eval {
                raw_psnr,
                input_raw_psnr,
                ..
            } => Some((*raw_psnr, *input_raw_psnr)),
            _ => None,
        })
    }
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_DIR: &str = "final";
pub const PARTIAL_DIR: &str = "partial";
pub const REPORT_STEM: &str = "heldout_report";

/// Clean frames from the configured roots, or the synthetic set.
pub fn load_images(data: &DataConfig) -> Result<Vec<NamedImage>> {
    if data.roots.is_empty() {
        return synthetic_dataset(
            data.synthetic_count,
            data.synthetic_height,
            data.synthetic_width,
            data.synthetic_seed,
        );
    }
    let mut all = Vec::new();
    for root in &data.roots {
        all.extend(load_raw_dir(root)?);
    }
    if all.is_empty() {
        return Err(config_err!("no *.pgm frames under {:?}", data.roots));
    }
    Ok(all)
}

struct Log {
    out: BufWriter<File>,
    entries: Vec<LogEntry>,
}

impl Log {
    fn push(&mut self, e: LogEntry) -> Result<()> {
        serde_json::to_writer(&mut self.out, &e)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        self.entries.push(e);
        Ok(())
    }
}

/// Mean RAW PSNR of the model output and of the noisy input on `pairs`.
pub fn heldout_raw_psnr(model: &Model, pairs: &[Pair]) -> Result<(f64, f64)> {
    let m = model.config.bayer_multiple();
    let (mut out, mut inp) = (0.0, 0.0);
    for pair in pairs {
        let p = metrics::noise_of(&pair.noisy, None)?;
        let noisy = prepare(&pair.noisy, m)?;
        let clean = prepare(&pair.clean, m)?;
        let y = denoise_frame(model, &noisy, &p)?;
        out += raw_psnr(&y, &clean)?;
        inp += raw_psnr(&noisy, &clean)?;
    }
    let n = pairs.len() as f64;
    Ok((out / n, inp / n))
}

fn run(cfg: &TrainConfig, model_cfg: &ModelConfig, objective: Objective) -> Result<TrainOutcome> {
    let noise = cfg.noise.sensor_model()?;
    let (train_set, held) = split(load_images(&cfg.data)?);
    if train_set.is_empty() {
        return Err(config_err!("the held-out split left no training images"));
    }
    let pairs = make_pairs(&held, &noise, rng::derive(cfg.seed, STREAM_EVAL, 0))?;
    fs::create_dir_all(&cfg.out_dir)?;
    let log_path = cfg.out_dir.join(LOG_FILE);
    let mut log = Log {
        out: BufWriter::new(File::create(&log_path)?),
        entries: Vec::new(),
    };
    let model = Model::init(model_cfg.clone(), rng::derive(cfg.seed, STREAM_INIT, 0))?;
    let mut trainer = Trainer::new(model, objective, cfg.grad_clip);
    let total = cfg.iterations;
    for it in 0..total {
        let step =
            make_batch(&train_set, cfg.patch, cfg.batch, &noise, cfg.seed, it).and_then(|b| {
                trainer
                    .step(&b, cosine_lr(it, total, cfg.max_lr)?)
                    .map(|s| (s, b))
            });
        let stats = match step {
            Ok((s, _)) => s,
            Err(e) => {
                let partial = cfg.out_dir.join(PARTIAL_DIR);
                trainer.model.save(&partial)?;
                return Err(Error::Training(format!(
                    "iteration {it}: {e}; last good weights in {}",
                    partial.display()
                )));
            }
        };
        let done = it + 1;
        if cfg.log_every > 0 && (done % cfg.log_every == 0 || done == total) {
            log.push(LogEntry::Step {
                iter: done,
                loss: stats.loss,
                lr: cosine_lr(it, total, cfg.max_lr)?,
                grad_norm: stats.grad_norm,
            })?;
        }
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 && done != total && !pairs.is_empty() {
            let (raw_psnr, input_raw_psnr) = heldout_raw_psnr(&trainer.model, &pairs)?;
            log.push(LogEntry::Eval {
                iter: done,
                raw_psnr,
                input_raw_psnr,
            })?;
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done != total {
            let path = cfg
                .out_dir
                .join("checkpoints")
                .join(format!("iter_{done:06}"));
            trainer.model.save(&path)?;
            log.push(LogEntry::Checkpoint { iter: done, path })?;
        }
    }
    let checkpoint = cfg.out_dir.join(FINAL_DIR);
    trainer.model.save(&checkpoint)?;
    log.push(LogEntry::Checkpoint {
        iter: total,
        path: checkpoint.clone(),
    })?;
    let report = if pairs.is_empty() {
        None
    } else {
        let r = evaluate(
            &Denoiser::Single(trainer.model.clone()),
            &pairs,
            &cfg.isp,
            None,
        )?;
        log.push(LogEntry::Eval {
            iter: total,
            raw_psnr: r.model.raw_psnr,
            input_raw_psnr: r.input.raw_psnr,
        })?;
        r.write(&cfg.out_dir, REPORT_STEM)?;
        Some(r)
    };
    Ok(TrainOutcome {
        checkpoint,
        log: log_path,
        model: trainer.model,
        entries: log.entries,
        report,
    })
}

fn load_teacher(loss: &LossConfig) -> Result<Option<Teacher>> {
    if !loss.mode.needs_teacher() {
        return Ok(None);
    }
    let path = loss
        .teacher
        .as_ref()
        .ok_or_else(|| config_err!("loss.teacher is required for mode {:?}", loss.mode))?;
    let model = Model::load(path)?;
    Ok(Some(match &loss.layers {
        Some(l) => Teacher::with_layers(model, l.clone())?,
        None => Teacher::new(model),
    }))
}

/// Trains `cfg.model` with `cfg.loss`, writing the log, checkpoints and a
/// held-out report under `cfg.out_dir`.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let objective = Objective::new(cfg.loss.clone(), load_teacher(&cfg.loss)?, cfg.isp.clone())?;
    run(cfg, &cfg.model, objective)
}

/// Trains `cfg.teacher_model` with the Charbonnier loss, then logs how much
/// the teacher alters clean inputs.
pub fn train_teacher(cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    cfg.loss = LossConfig {
        weight: cfg
            .loss
            .weight
            .filter(|_| cfg.loss.mode == LossMode::Charbonnier),
        ..LossConfig::new(LossMode::Charbonnier)
    };
    cfg.validate()?;
    let objective = Objective::new(cfg.loss.clone(), None, cfg.isp.clone())?;
    let teacher_cfg = cfg.teacher_model.clone();
    let mut outcome = run(&cfg, &teacher_cfg, objective)?;
    let noise = cfg.noise.sensor_model()?;
    let (train_set, held) = split(load_images(&cfg.data)?);
    let probe = if held.is_empty() { &train_set } else { &held };
    let clean_psnr = clean_identity_psnr(&outcome.model, probe, &noise, cfg.seed)?;
    let mut f = fs::OpenOptions::new().append(true).open(&outcome.log)?;
    let e = LogEntry::Identity { clean_psnr };
    serde_json::to_writer(&mut f, &e)?;
    f.write_all(b"\n")?;
    outcome.entries.push(e);
    Ok(outcome)
}

/// Mean RAW PSNR between clean frames and the model's output on them, using
/// noise levels drawn from `noise` for the k-sigma transform.
pub fn clean_identity_psnr(
    model: &Model,
    images: &[NamedImage],
    noise: &SensorNoiseModel,
    seed: u64,
) -> Result<f64> {
    if images.is_empty() {
        return Err(config_err!("no images to probe"));
    }
    let m = model.config.bayer_multiple();
    let mut total = 0.0;
    for (i, img) in images.iter().enumerate() {
        let clean = prepare(&img.image, m)?;
        let p = sample_training_params_with(
            noise,
            &mut rng::seeded(rng::derive(seed, STREAM_EVAL, 1 + i as u64)),
        );
        let out = denoise_frame(model, &clean, &p)?;
        let v = raw_psnr(&out, &clean)?;
        total += if v.is_finite() { v } else { 100.0 };
    }
    Ok(total / images.len() as f64)
}

/// Reads a JSONL training log.
pub fn read_log(path: &Path) -> Result<Vec<LogEntry>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayer::{unpack, CfaPattern};
    use crate::dataset::clean_raw;
    use crate::noise::NoiseParams;

    fn tiny_cfg(dir: &Path) -> TrainConfig {
        TrainConfig {
            data: DataConfig {
                synthetic_count: 12,
                synthetic_height: 40,
                synthetic_width: 40,
                ..DataConfig::default()
            },
            patch: 16,
            batch: 2,
            iterations: 6,
            max_lr: 1e-3,
            log_every: 2,
            eval_every: 3,
            out_dir: dir.to_path_buf(),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn cosine_schedule_closed_forms() {
        assert_eq!(cosine_lr(0, 100, 1e-4).unwrap(), 1e-4);
        assert!(cosine_lr(100, 100, 1e-4).unwrap().abs() < 1e-20);
        assert!((cosine_lr(50, 100, 1e-4).unwrap() - 5e-5).abs() < 1e-18);
        assert!(cosine_lr(0, 0, 1e-4).is_err());
        let mut prev = f64::INFINITY;
        for i in 0..=100 {
            let v = cosine_lr(i, 100, 1e-4).unwrap();
            assert!(v <= prev && (0.0..=1e-4).contains(&v));
            prev = v;
        }
    }

    fn scalar_weights(v: f32) -> ModelWeights {
        let cfg = ModelConfig::default();
        let mut map: BTreeMap<String, Tensor> = ModelWeights::<f32>::init(&cfg, 0)
            .unwrap()
            .iter()
            .map(|(k, t)| (k.to_string(), t.clone()))
            .collect();
        map.insert("head.b".into(), Tensor::full([4, 1, 1, 1], v));
        ModelWeights::from_map(&cfg, map).unwrap()
    }

    #[test]
    fn adam_closed_forms() {
        let mut w = scalar_weights(0.5);
        let mut st = AdamState::new(&w);
        let before = w.clone();
        let zero: BTreeMap<String, Tensor> = w
            .iter()
            .map(|(k, t)| (k.to_string(), Tensor::zeros(t.dims())))
            .collect();
        adam_step(&mut w, &zero, &mut st, 1e-4).unwrap();
        assert_eq!(w, before);

        let mut w = scalar_weights(0.5);
        let mut st = AdamState::new(&w);
        let g: BTreeMap<String, Tensor> =
            [("head.b".to_string(), Tensor::full([4, 1, 1, 1], 1.0))].into();
        adam_step(&mut w, &g, &mut st, 1e-4).unwrap();
        let v1 = w.get("head.b").unwrap().data()[0] as f64;
        assert!((0.5 - v1 - 1e-4).abs() < 1e-7, "{v1}");

        // second identical step: hand recursion
        adam_step(&mut w, &g, &mut st, 1e-4).unwrap();
        let (m2, v2) = (0.9 * 0.1 + 0.1, 0.999 * 0.001 + 0.001);
        let step2 = 1e-4 * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        let want = 0.5 - 1e-4 * 1.0 / (1.0 + 1e-8) - step2;
        assert!((w.get("head.b").unwrap().data()[0] as f64 - want).abs() < 1e-7);

        let bad: BTreeMap<String, Tensor> =
            [("head.b".to_string(), Tensor::zeros([2, 1, 1, 1]))].into();
        assert!(adam_step(&mut w, &bad, &mut st, 1e-4).is_err());
    }

    #[test]
    fn make_example_pipeline_audit() {
        let img = clean_raw(4, 40, 44).unwrap();
        let model = SensorNoiseModel::default();
        let a = make_example(&img, 16, &model, 9).unwrap();
        assert_eq!(a, make_example(&img, 16, &model, 9).unwrap());
        assert_eq!(a.input.dims(), [1, 4, 8, 8]);

        // replay the same draws by hand
        let mut r = rng::seeded(9);
        let need = 18;
        let y0 = 2 * r.random_range(0..=(40 - need) / 2);
        let x0 = 2 * r.random_range(0..=(44 - need) / 2);
        let (fh, fv, tr) = (r.random_bool(0.5), r.random_bool(0.5), r.random_bool(0.5));
        let crop = img.crop(y0, x0, need, need).unwrap();
        let patch = augment_bayer(&crop, fh, fv, tr)
            .unwrap()
            .crop(0, 0, 16, 16)
            .unwrap();
        let p = sample_training_params_with(&model, &mut r);
        assert_eq!(p, a.noise);
        assert_eq!(a.target, ksigma(&pack(&patch).unwrap(), &p).unwrap());

        let quiet = model.with_a_range(1e-9, 1e-9).unwrap();
        let q = make_example(&img, 16, &quiet, 3).unwrap();
        let (s, _) = q.noise.ksigma_coeffs().unwrap();
        // noise std in k-sigma units is sqrt(T); relative to the signal it vanishes
        let rel = q.input.max_abs_diff(&q.target) / (s as f32);
        assert!(rel < 1e-3, "{rel}");

        let small = BayerImage::from_fn(16, 16, CfaPattern::Rggb, |_, _| 0.5);
        assert!(matches!(
            make_example(&small, 16, &model, 1),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn examples_unpack_to_rggb_patches() {
        let img = clean_raw(8, 48, 48).unwrap();
        let e = make_example(&img, 16, &SensorNoiseModel::default(), 2).unwrap();
        let t = crate::noise::ksigma_inv(&e.target, &e.noise).unwrap();
        let raw = unpack(&t).unwrap();
        assert!(raw.data().iter().all(|v| (-1e-3..=1.001).contains(v)));
    }

    #[test]
    fn config_validation_names_fields() {
        let d = tempfile::tempdir().unwrap();
        let mut c = tiny_cfg(d.path());
        c.batch = 0;
        assert!(c
            .validate()
            .unwrap_err()
            .to_string()
            .contains("batch must be >= 1"));
        let mut c = tiny_cfg(d.path());
        c.patch = 12;
        assert!(c.validate().unwrap_err().to_string().contains("patch"));
        let mut c = tiny_cfg(d.path());
        c.noise.a_min = 1e-2;
        c.noise.a_max = 1e-3;
        assert!(c.validate().unwrap_err().to_string().contains("a_min"));
    }

    #[test]
    fn zero_iterations_write_initial_checkpoint() {
        let d = tempfile::tempdir().unwrap();
        let mut c = tiny_cfg(d.path());
        c.iterations = 0;
        let out = train(&c).unwrap();
        let loaded = Model::load(&out.checkpoint).unwrap();
        let init = Model::init(c.model.clone(), rng::derive(c.seed, STREAM_INIT, 0)).unwrap();
        assert_eq!(loaded, init);
        assert!(!d.path().join("checkpoints").exists());
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let mut c1 = tiny_cfg(d1.path());
        c1.checkpoint_every = 3;
        let mut c2 = c1.clone();
        c2.out_dir = d2.path().to_path_buf();
        let a = train(&c1).unwrap();
        let b = train(&c2).unwrap();
        assert_eq!(a.model.weights.checksum(), b.model.weights.checksum());
        assert_eq!(
            fs::read(a.checkpoint.join("weights.fdt")).unwrap(),
            fs::read(b.checkpoint.join("weights.fdt")).unwrap()
        );
        assert!(d1.path().join("checkpoints/iter_000003").exists());
        let log = read_log(&a.log).unwrap();
        assert!(log
            .iter()
            .any(|e| matches!(e, LogEntry::Eval { iter: 3, .. })));
        assert_eq!(
            log.iter()
                .filter(|e| matches!(e, LogEntry::Step { .. }))
                .count(),
            3
        );
        assert!(a.report.is_some());
        let mut c3 = c1.clone();
        c3.seed = 1;
        c3.out_dir = d2.path().join("other");
        assert_ne!(
            train(&c3).unwrap().model.weights.checksum(),
            a.model.weights.checksum()
        );
    }

    #[test]
    fn fixed_batch_loss_decreases_for_most_seeds() {
        let images = synthetic_dataset(4, 48, 48, 3).unwrap();
        let noise = SensorNoiseModel::default();
        let mut improved = 0;
        for seed in 0..10u64 {
            let batch = make_batch(&images, 32, 4, &noise, seed, 0).unwrap();
            let model = Model::init(ModelConfig::default(), seed).unwrap();
            let obj = Objective::new(LossConfig::default(), None, IspParams::default()).unwrap();
            let mut t = Trainer::new(model, obj, 1.0);
            let first = t.loss(&batch).unwrap();
            for i in 0..50 {
                t.step(&batch, cosine_lr(i, 50, 1e-4).unwrap()).unwrap();
            }
            if t.loss(&batch).unwrap() < first {
                improved += 1;
            }
        }
        assert!(improved >= 9, "{improved}/10");
    }

    #[test]
    fn nan_guard_aborts_and_keeps_partial_weights() {
        let d = tempfile::tempdir().unwrap();
        let mut c = tiny_cfg(d.path());
        c.model.input_scale = f32::MIN_POSITIVE;
        c.iterations = 2;
        let mut w = ModelWeights::init(&c.model, 0).unwrap();
        w.set("head.w", Tensor::full(w.get("head.w").unwrap().dims(), 1.0))
            .unwrap();
        let model = Model {
            config: c.model.clone(),
            weights: w,
        };
        let obj = Objective::new(LossConfig::default(), None, IspParams::default()).unwrap();
        let mut t = Trainer::new(model, obj, 1.0);
        let images = synthetic_dataset(2, 40, 40, 0).unwrap();
        let b = make_batch(&images, 16, 1, &c.noise.sensor_model().unwrap(), 0, 0).unwrap();
        assert!(matches!(t.step(&b, 1e-3), Err(Error::Training(_))));
        let _ = NoiseParams::new(1e-3, 1e-6).unwrap();
    }
}
