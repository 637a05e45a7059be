//! Cross-modal retrieval, linear probes on frozen representations and the
//! per-class affinity report.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{
    make_views, resample_audio, subsample_video, AudioFeaturizer, AugmentConfig, SpeedFactor, ViewSet,
};
use crate::autodiff::Tape;
use crate::datagen::{alias_class, Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::loss::batch_affinities;
use crate::model::{interleave_views, BatchEmbeddings, Model, ViewInputs};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const RECALL_KS: [usize; 4] = [1, 5, 10, 20];

const REPORT_STREAM: u64 = 0xaff1;
const PROBE_STREAM: u64 = 0x9708;

/// Speed-1 windows from offset 0 of every clip.
pub fn eval_viewsets(dataset: &Dataset, aug: &AugmentConfig) -> Result<Vec<ViewSet>> {
    dataset
        .clips
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let a = resample_audio(&c.audio, SpeedFactor::ONE, aug.audio_window, 0)?;
            let v = subsample_video(&c.video, SpeedFactor::ONE, aug.video_window, 0)?;
            Ok(ViewSet {
                audio_views: [a.clone(), a],
                video_views: [v.clone(), v],
                tau1: SpeedFactor::ONE,
                tau2: SpeedFactor::ONE,
                clip_index: i,
                label: c.class,
            })
        })
        .collect()
}

/// Representations and projections of the evaluation views, `M x d` each.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub y_a: Tensor,
    pub y_v: Tensor,
    pub z_a: Tensor,
    pub z_v: Tensor,
    pub labels: Vec<usize>,
}

pub fn embed(model: &Model, dataset: &Dataset, aug: &AugmentConfig) -> Result<Embeddings> {
    if dataset.is_empty() {
        return Err(Error::invalid("evaluation needs a non-empty dataset"));
    }
    let featurizer = AudioFeaturizer::new(aug.audio_window)?;
    let views = eval_viewsets(dataset, aug)?;
    let inputs = ViewInputs::from_viewsets_limited(&views, &featurizer, 1)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false)?;
    let fw = bound.forward(&mut tape, &inputs)?;
    Ok(Embeddings {
        y_a: tape.value(fw.y_a[0]).clone(),
        y_v: tape.value(fw.y_v[0]).clone(),
        z_a: tape.value(fw.z_a[0]).clone(),
        z_v: tape.value(fw.z_v[0]).clone(),
        labels: dataset.clips.iter().map(|c| c.class).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalDirection {
    VideoToAudio,
    AudioToVideo,
}

impl RetrievalDirection {
    pub fn name(self) -> &'static str {
        match self {
            RetrievalDirection::VideoToAudio => "video_to_audio",
            RetrievalDirection::AudioToVideo => "audio_to_video",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub direction: RetrievalDirection,
    /// `(k, R@k)` pairs in increasing `k`.
    pub recall: Vec<(usize, f64)>,
    pub num_queries: usize,
}

impl RetrievalResult {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|(kk, _)| *kk == k).map(|r| r.1)
    }
}

/// Rank of gallery item `target` for one row of similarities: the number of
/// items scoring higher, plus equal-scoring items at a lower index.
fn rank_of(sims: &[f64], target: usize) -> usize {
    let t = sims[target];
    sims.iter()
        .enumerate()
        .filter(|&(j, &s)| s > t || (s == t && j < target))
        .count()
}

/// Query `i` is a hit at `k` when gallery item `i` ranks within the top `k`
/// by dot product.
pub fn recall_at_k(queries: &Tensor, gallery: &Tensor, ks: &[usize]) -> Result<Vec<(usize, f64)>> {
    if queries.rank() != 2 || queries.shape() != gallery.shape() {
        return Err(Error::shape("retrieval", &[queries.shape(), gallery.shape()]));
    }
    let m = queries.shape()[0];
    let d = queries.shape()[1];
    let ranks: Vec<usize> = (0..m)
        .into_par_iter()
        .map(|i| {
            let q = queries.row(i);
            let sims: Vec<f64> = (0..m)
                .map(|j| gallery.row(j).iter().zip(q).take(d).map(|(a, b)| a * b).sum())
                .collect();
            rank_of(&sims, i)
        })
        .collect();
    Ok(ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r < k).count() as f64 / m as f64))
        .collect())
}

/// Video-to-audio and audio-to-video retrieval on `z` of speed-1 views.
pub fn retrieval(model: &Model, test: &Dataset, aug: &AugmentConfig) -> Result<Vec<RetrievalResult>> {
    let e = embed(model, test, aug)?;
    retrieval_from(&e.z_v, &e.z_a)
}

/// Retrieval between paired video and audio embeddings.
pub fn retrieval_from(video: &Tensor, audio: &Tensor) -> Result<Vec<RetrievalResult>> {
    let m = video.shape()[0];
    Ok(vec![
        RetrievalResult {
            direction: RetrievalDirection::VideoToAudio,
            recall: recall_at_k(video, audio, &RECALL_KS)?,
            num_queries: m,
        },
        RetrievalResult {
            direction: RetrievalDirection::AudioToVideo,
            recall: recall_at_k(audio, video, &RECALL_KS)?,
            num_queries: m,
        },
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 100,
            lr: 0.1,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeModality {
    Audio,
    Video,
    Concat,
}

impl ProbeModality {
    pub fn name(self) -> &'static str {
        match self {
            ProbeModality::Audio => "audio",
            ProbeModality::Video => "video",
            ProbeModality::Concat => "concat",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub modality: ProbeModality,
    pub accuracy: f64,
    pub classes: usize,
}

/// Multinomial logistic regression on standardized features, trained by
/// minibatch SGD from zero weights; returns top-1 accuracy on `test`.
pub fn probe_accuracy(
    train: &Tensor,
    train_labels: &[usize],
    test: &Tensor,
    test_labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<f64> {
    if train.rank() != 2 || test.rank() != 2 || train.shape()[1] != test.shape()[1] {
        return Err(Error::shape("linear_probe", &[train.shape(), test.shape()]));
    }
    if train.shape()[0] != train_labels.len() || test.shape()[0] != test_labels.len() || test_labels.is_empty() {
        return Err(Error::invalid("linear_probe: label count does not match features"));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::invalid("linear_probe: batch_size and lr must be positive"));
    }
    let mut seen = vec![false; classes];
    for &l in train_labels {
        if l >= classes {
            return Err(Error::invalid(format!("linear_probe: label {l} out of range")));
        }
        seen[l] = true;
    }
    if let Some(c) = seen.iter().position(|&s| !s) {
        return Err(Error::invalid(format!("linear_probe: class {c} absent from the training split")));
    }

    let (m, d) = (train.shape()[0], train.shape()[1]);
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for i in 0..m {
        for (k, x) in train.row(i).iter().enumerate() {
            mean[k] += x / m as f64;
        }
    }
    for i in 0..m {
        for (k, x) in train.row(i).iter().enumerate() {
            std[k] += (x - mean[k]).powi(2) / m as f64;
        }
    }
    for s in &mut std {
        *s = s.sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    }
    let standardize = |t: &Tensor| -> Vec<Vec<f64>> {
        (0..t.shape()[0])
            .map(|i| t.row(i).iter().enumerate().map(|(k, x)| (x - mean[k]) / std[k]).collect())
            .collect()
    };
    let xtr = standardize(train);
    let xte = standardize(test);

    // weights classes x (d + 1), last column the bias
    let width = d + 1;
    let mut w = vec![0.0; classes * width];
    let logits = |w: &[f64], x: &[f64]| -> Vec<f64> {
        (0..classes)
            .map(|c| {
                let row = &w[c * width..(c + 1) * width];
                row[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + row[d]
            })
            .collect()
    };
    let mut order: Vec<usize> = (0..m).collect();
    for epoch in 0..cfg.epochs {
        Rng::stream(seed, &[PROBE_STREAM, epoch as u64]).shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; classes * width];
            for &i in batch {
                let mut p = logits(&w, &xtr[i]);
                let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                p.iter_mut().for_each(|v| *v = (*v - max).exp());
                let z: f64 = p.iter().sum();
                for c in 0..classes {
                    let err = p[c] / z - if c == train_labels[i] { 1.0 } else { 0.0 };
                    let g = &mut grad[c * width..(c + 1) * width];
                    for k in 0..d {
                        g[k] += err * xtr[i][k];
                    }
                    g[d] += err;
                }
            }
            let scale = cfg.lr / batch.len() as f64;
            w.iter_mut().zip(&grad).for_each(|(wi, gi)| *wi -= scale * gi);
        }
    }

    let correct = xte
        .iter()
        .zip(test_labels)
        .filter(|(x, &label)| {
            let l = logits(&w, x);
            // first maximum wins
            let pred = l
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (c, &v)| if v > acc.1 { (c, v) } else { acc })
                .0;
            pred == label
        })
        .count();
    Ok(correct as f64 / test_labels.len() as f64)
}

fn concat_columns(a: &Tensor, b: &Tensor) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..a.shape()[0]).map(|i| [a.row(i), b.row(i)].concat()).collect();
    Tensor::from_rows(&rows).expect("matching row counts")
}

/// Probe audio `y`, video `y` and their concatenation.
pub fn linear_probe(
    model: &Model,
    train: &Dataset,
    test: &Dataset,
    aug: &AugmentConfig,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<Vec<ProbeResult>> {
    let classes = train.layout.num_classes;
    let tr = embed(model, train, aug)?;
    let te = embed(model, test, aug)?;
    let pairs = [
        (ProbeModality::Audio, tr.y_a.clone(), te.y_a.clone()),
        (ProbeModality::Video, tr.y_v.clone(), te.y_v.clone()),
        (
            ProbeModality::Concat,
            concat_columns(&tr.y_a, &tr.y_v),
            concat_columns(&te.y_a, &te.y_v),
        ),
    ];
    pairs
        .into_iter()
        .map(|(modality, a, b)| {
            Ok(ProbeResult {
                modality,
                accuracy: probe_accuracy(&a, &tr.labels, &b, &te.labels, classes, cfg, seed)?,
                classes,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityRow {
    pub class: usize,
    pub speed: u32,
    pub aliased: bool,
    /// Mean `λ[sped audio, orig video]`.
    pub mean_lambda_sped: f64,
    /// Mean `λ[orig audio, orig video]`.
    pub mean_lambda_orig: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityReport {
    pub rows: Vec<AffinityRow>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

impl AffinityReport {
    /// Median of `mean_lambda_sped` over aliased and non-aliased rows.
    pub fn sped_medians(&self) -> (Option<f64>, Option<f64>) {
        let pick = |aliased: bool| {
            median(
                self.rows
                    .iter()
                    .filter(|r| r.aliased == aliased)
                    .map(|r| r.mean_lambda_sped)
                    .collect(),
            )
        };
        (pick(true), pick(false))
    }
}

/// For every class and speed `s`, the mean affinity between the orig video
/// view and the audio view sped by `s` (and the orig audio view), over that
/// class's clips. A pair is aliased when the sped tone lands on another
/// class's tone.
pub fn affinity_report(
    model: &Model,
    dataset: &Dataset,
    spec: &DatasetSpec,
    aug: &AugmentConfig,
    speeds: &[SpeedFactor],
    seed: u64,
) -> Result<AffinityReport> {
    if let Some(s) = speeds.iter().find(|s| s.get() > aug.max_speed) {
        return Err(Error::invalid(format!(
            "speed {s} exceeds the configured maximum {}",
            aug.max_speed
        )));
    }
    if dataset.is_empty() {
        return Err(Error::invalid("affinity report needs a non-empty dataset"));
    }
    let featurizer = AudioFeaturizer::new(aug.audio_window)?;
    let forced = AugmentConfig {
        keep_original: true,
        ..aug.clone()
    };
    let classes = dataset.layout.num_classes;
    let mut rows = Vec::with_capacity(classes * speeds.len());
    for &s in speeds {
        let views: Vec<ViewSet> = dataset
            .clips
            .par_iter()
            .enumerate()
            .map(|(i, clip)| {
                let mut rng = Rng::stream(seed, &[REPORT_STREAM, s.get() as u64, i as u64]);
                make_views(clip, i, s, SpeedFactor::ONE, &mut rng, &forced)
            })
            .collect::<Result<_>>()?;
        let lams = {
            let inputs = ViewInputs::from_viewsets(&views, &featurizer)?;
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, false)?;
            let fw = bound.forward(&mut tape, &inputs)?;
            let y = |vars: &[crate::autodiff::Var]| {
                interleave_views(&vars.iter().map(|&v| tape.value(v)).collect::<Vec<_>>())
            };
            let batch = BatchEmbeddings {
                y_a: y(&fw.y_a),
                y_v: y(&fw.y_v),
                z_a: y(&fw.z_a),
                z_v: y(&fw.z_v),
            };
            batch_affinities(&batch, &model.mapping)?
        };
        for class in 0..classes {
            let members: Vec<usize> = (0..views.len()).filter(|&i| views[i].label == class).collect();
            if members.is_empty() {
                continue;
            }
            let mean = |p: usize| members.iter().map(|&i| lams[i].get(p, 0)).sum::<f64>() / members.len() as f64;
            rows.push(AffinityRow {
                class,
                speed: s.get(),
                aliased: matches!(alias_class(class, s, spec), Some(c) if c != class),
                mean_lambda_sped: mean(1),
                mean_lambda_orig: mean(0),
            });
        }
    }
    rows.sort_by_key(|r| (r.class, r.speed));
    Ok(AffinityReport { rows })
}

pub fn retrieval_csv(results: &[RetrievalResult]) -> String {
    let mut out = String::from("direction,k,recall\n");
    for r in results {
        for &(k, v) in &r.recall {
            let _ = writeln!(out, "{},{k},{v}", r.direction.name());
        }
    }
    out
}

pub fn probe_csv(results: &[ProbeResult]) -> String {
    let mut out = String::from("modality,accuracy,classes\n");
    for r in results {
        let _ = writeln!(out, "{},{},{}", r.modality.name(), r.accuracy, r.classes);
    }
    out
}

pub fn affinity_csv(report: &AffinityReport) -> String {
    let mut out = String::from("class,speed,alias,mean_lambda_sped,mean_lambda_orig\n");
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.class, r.speed, r.aliased, r.mean_lambda_sped, r.mean_lambda_orig
        );
    }
    out
}
