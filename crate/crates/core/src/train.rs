//! SGD pre-training with linear warmup and cosine decay.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{make_views, sample_speed_pair, AudioFeaturizer, AugmentConfig, SpeedFactor, ViewSet};
use crate::autodiff::Tape;
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::loss::{affinity_tape, soft_info_nce_tape, vanilla_info_nce_tape, AffinityMatrix, LossConfig};
use crate::model::{Model, ModelConfig, ViewInputs};
use crate::rng::Rng;
use crate::tensor::Tensor;

const INIT_STREAM: u64 = 0x1417;
const SHUFFLE_STREAM: u64 = 0x5107;
const SPEED_STREAM: u64 = 0x5eed;
const VIEW_STREAM: u64 = 0x7133;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Single speed-1 views, plain InfoNCE.
    #[serde(rename = "infonce_noaug")]
    InfoNceNoAug,
    /// Four co-augmented view pairs weighted equally.
    #[serde(rename = "infonce_speed")]
    InfoNceSpeed,
    /// Four view pairs weighted by the learned cross-affinity.
    #[serde(rename = "soft_infonce")]
    SoftInfoNce,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::InfoNceNoAug, Variant::InfoNceSpeed, Variant::SoftInfoNce];

    pub fn name(self) -> &'static str {
        match self {
            Variant::InfoNceNoAug => "infonce_noaug",
            Variant::InfoNceSpeed => "infonce_speed",
            Variant::SoftInfoNce => "soft_infonce",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == s)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    pub final_lr_ratio: f64,
    pub momentum: f64,
    pub seed: u64,
    pub variant: Variant,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            peak_lr: 0.01,
            warmup_epochs: 3,
            final_lr_ratio: 0.15625,
            momentum: 0.9,
            seed: 0,
            variant: Variant::SoftInfoNce,
            checkpoint_every: 0,
            augment: AugmentConfig::default(),
            loss: LossConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return Err(Error::invalid(format!(
                "train.warmup_epochs ({}) must be below train.epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("train.batch_size must be at least 2"));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::invalid("train.peak_lr must be positive"));
        }
        if !(self.final_lr_ratio >= 0.0 && self.final_lr_ratio.is_finite()) {
            return Err(Error::invalid("train.final_lr_ratio must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("train.momentum must be in [0, 1)"));
        }
        self.augment.validate()?;
        self.loss.validate()?;
        self.model.validate()?;
        Ok(())
    }

    pub fn steps_per_epoch(&self, clips: usize) -> usize {
        clips / self.batch_size
    }
}

/// Learning rate at global `step`: linear from `peak/10` to `peak` over the
/// warmup steps, then cosine down to `peak * final_lr_ratio` at the last step.
pub fn lr_at(config: &TrainConfig, step: usize, steps_per_epoch: usize) -> f64 {
    let peak = config.peak_lr;
    let warm = config.warmup_epochs * steps_per_epoch;
    let total = config.epochs * steps_per_epoch;
    if step < warm {
        let start = peak / 10.0;
        return start + (peak - start) * step as f64 / warm as f64;
    }
    let floor = peak * config.final_lr_ratio;
    let span = total.saturating_sub(1).saturating_sub(warm);
    if span == 0 {
        return peak;
    }
    let t = ((step - warm) as f64 / span as f64).min(1.0);
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// SGD with heavy-ball momentum: `v = μ v + g; p -= lr v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub velocity: Vec<Tensor>,
    pub steps: usize,
}

impl Sgd {
    pub fn new(params: &[&Tensor], momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            steps: 0,
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != self.velocity.len() {
            return Err(Error::invalid(format!(
                "sgd: {} params, {} grads, {} velocities",
                params.len(),
                grads.len(),
                self.velocity.len()
            )));
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() || p.shape() != v.shape() {
                return Err(Error::shape("sgd_step", &[p.shape(), g.shape(), v.shape()]));
            }
            for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = self.momentum * *vi + gi;
                *pi -= lr * *vi;
            }
        }
        self.steps += 1;
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Batch-mean `λ[p][q]`; absent for single-view training.
    pub lambda: Option<[[f64; 2]; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_ms: Option<f64>,
}

/// How the four view-pair terms are weighted on the soft path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    /// Cross-affinity `λ` from the model.
    Learned,
    /// Constant 0.25 each.
    Uniform,
}

/// Receives training progress.
pub trait Observer {
    fn record(&mut self, record: &MetricsRecord) -> Result<()>;

    fn epoch_end(&mut self, _epoch: usize, _model: &Model) -> Result<()> {
        Ok(())
    }
}

impl Observer for Vec<MetricsRecord> {
    fn record(&mut self, record: &MetricsRecord) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

/// Discards everything.
pub struct NoObserver;

impl Observer for NoObserver {
    fn record(&mut self, _record: &MetricsRecord) -> Result<()> {
        Ok(())
    }
}

/// Training state: model, optimizer and the fixed per-run settings.
pub struct Trainer {
    config: TrainConfig,
    model: Model,
    opt: Sgd,
    featurizer: AudioFeaturizer,
    weighting: Weighting,
    record_timing: bool,
    steps_per_epoch: usize,
}

impl Trainer {
    pub fn new(dataset: &Dataset, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if dataset.len() < config.batch_size {
            return Err(Error::invalid(format!(
                "dataset has {} clips, fewer than batch_size {}",
                dataset.len(),
                config.batch_size
            )));
        }
        let featurizer = AudioFeaturizer::new(config.augment.audio_window)?;
        if config.model.audio_in != featurizer.dim() {
            return Err(Error::invalid(format!(
                "model.audio_in ({}) must equal the feature size {}",
                config.model.audio_in,
                featurizer.dim()
            )));
        }
        let video_in = config.augment.video_window * dataset.layout.frame_dim;
        if config.model.video_in != video_in {
            return Err(Error::invalid(format!(
                "model.video_in ({}) must equal video_window * frame_dim = {video_in}",
                config.model.video_in
            )));
        }
        let mut rng = Rng::stream(config.seed, &[INIT_STREAM]);
        let model = Model::init(&config.model, config.loss.mapping, &mut rng)?;
        let opt = Sgd::new(&model.parameters(), config.momentum);
        Ok(Trainer {
            config: config.clone(),
            model,
            opt,
            featurizer,
            weighting: Weighting::Learned,
            record_timing: false,
            steps_per_epoch: config.steps_per_epoch(dataset.len()),
        })
    }

    pub fn set_weighting(&mut self, weighting: Weighting) {
        self.weighting = weighting;
    }

    /// Include wall time in records. Off by default so logs are reproducible.
    pub fn set_record_timing(&mut self, on: bool) {
        self.record_timing = on;
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch * self.config.epochs
    }

    /// Train for every epoch with the configured schedule.
    pub fn run(&mut self, dataset: &Dataset, observer: &mut dyn Observer) -> Result<()> {
        let cfg = self.config.clone();
        let spe = self.steps_per_epoch;
        self.run_with_schedule(dataset, &|step| lr_at(&cfg, step, spe), observer)
    }

    pub fn run_with_schedule(
        &mut self,
        dataset: &Dataset,
        lr: &dyn Fn(usize) -> f64,
        observer: &mut dyn Observer,
    ) -> Result<()> {
        for epoch in 0..self.config.epochs {
            let order = epoch_order(self.config.seed, epoch, dataset.len());
            for b in 0..self.steps_per_epoch {
                let n = self.config.batch_size;
                let step = epoch * self.steps_per_epoch + b;
                let record = self.step(dataset, epoch, b, &order[b * n..(b + 1) * n], lr(step))?;
                observer.record(&record)?;
            }
            observer.epoch_end(epoch, &self.model)?;
        }
        Ok(())
    }

    /// Views for batch `b` of `epoch`: one speed pair for the batch and an
    /// independent stream per batch slot.
    pub fn batch_views(&self, dataset: &Dataset, epoch: usize, b: usize, clips: &[usize]) -> Result<Vec<ViewSet>> {
        let seed = self.config.seed;
        let aug = &self.config.augment;
        let (tau1, tau2) = match self.config.variant {
            Variant::InfoNceNoAug => (SpeedFactor::ONE, SpeedFactor::ONE),
            _ => sample_speed_pair(&mut Rng::stream(seed, &[SPEED_STREAM, epoch as u64, b as u64]), aug),
        };
        clips
            .par_iter()
            .enumerate()
            .map(|(slot, &idx)| {
                let mut rng = Rng::stream(seed, &[VIEW_STREAM, epoch as u64, b as u64, slot as u64]);
                make_views(&dataset.clips[idx], idx, tau1, tau2, &mut rng, aug)
            })
            .collect()
    }

    fn step(&mut self, dataset: &Dataset, epoch: usize, b: usize, clips: &[usize], lr: f64) -> Result<MetricsRecord> {
        let start = Instant::now();
        let global = epoch * self.steps_per_epoch + b;
        let views = self.batch_views(dataset, epoch, b, clips)?;
        let n = views.len();
        let single = self.config.variant == Variant::InfoNceNoAug;
        let inputs = ViewInputs::from_viewsets_limited(&views, &self.featurizer, if single { 1 } else { 2 })?;

        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape, true)?;
        let fw = bound.forward(&mut tape, &inputs)?;
        let cfg = &self.config.loss;
        let (loss, lambda) = if single {
            (vanilla_info_nce_tape(&mut tape, fw.z_a[0], fw.z_v[0], cfg)?, None)
        } else {
            let learned = self.config.variant == Variant::SoftInfoNce && self.weighting == Weighting::Learned;
            let lam = if learned {
                let l = affinity_tape(&mut tape, &fw.y_a, &fw.y_v, &bound.mapping)?;
                if cfg.detach_affinity {
                    tape.detach(l)
                } else {
                    l
                }
            } else {
                tape.constant(Tensor::full(&[n, 4], 0.25))
            };
            (soft_info_nce_tape(&mut tape, &fw.z_a, &fw.z_v, lam, cfg)?, Some(lam))
        };
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: global,
                lr,
                loss: loss_value,
            });
        }
        let mean_lambda = match lambda {
            Some(l) => Some(AffinityMatrix::mean(&AffinityMatrix::from_rows(tape.value(l))?).0),
            None => None,
        };

        let mut grads = tape.backward(loss)?;
        let grads: Vec<Tensor> = bound
            .leaves()
            .iter()
            .map(|&v| grads.take(v).expect("every leaf has a gradient"))
            .collect();
        self.opt.step(self.model.parameters_mut(), &grads, lr)?;

        Ok(MetricsRecord {
            step: global,
            epoch,
            lr,
            loss: loss_value,
            lambda: mean_lambda,
            wall_time_ms: self.record_timing.then(|| start.elapsed().as_secs_f64() * 1e3),
        })
    }
}

/// Clip order for `epoch`: a seeded shuffle of `0..len`.
pub fn epoch_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    Rng::stream(seed, &[SHUFFLE_STREAM, epoch as u64]).shuffle(&mut order);
    order
}

/// Train a fresh model on `dataset`.
pub fn pretrain(dataset: &Dataset, config: &TrainConfig, observer: &mut dyn Observer) -> Result<Model> {
    let mut t = Trainer::new(dataset, config)?;
    t.run(dataset, observer)?;
    Ok(t.into_model())
}
