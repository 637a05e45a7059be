//! Synthetic paired audio-video corpus with a built-in semantic shift.
//!
//! Class `c` sounds like a pure tone at `f0 * g^c` and looks like a static,
//! class-specific frame pattern. With the default ratio `g = sqrt(2)`,
//! playing class `c` at speed `2^k` gives exactly the tone of class `c + 2k`,
//! while the video is unchanged: the audio changes meaning, the video does
//! not.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{FrameSeq, SpeedFactor, Waveform};
use crate::error::{Error, Result};
use crate::rng::Rng;

const PATTERN_STREAM: u64 = 0x7061_7474; // "patt"

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub clips_per_class_train: usize,
    pub clips_per_class_test: usize,
    pub raw_audio_len: usize,
    pub sample_rate: u32,
    pub raw_video_frames: usize,
    pub frame_dim: usize,
    pub base_freq: f64,
    pub freq_ratio: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_classes: 8,
            clips_per_class_train: 64,
            clips_per_class_test: 16,
            raw_audio_len: 4096,
            sample_rate: 2048,
            raw_video_frames: 48,
            frame_dim: 16,
            base_freq: 16.0,
            freq_ratio: std::f64::consts::SQRT_2,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    /// Check counts and that the highest tone stays below Nyquist when
    /// played at `max_speed`.
    pub fn validate(&self, max_speed: u32) -> Result<()> {
        let counts = [
            ("num_classes", self.num_classes),
            ("clips_per_class_train", self.clips_per_class_train),
            ("clips_per_class_test", self.clips_per_class_test),
            ("raw_audio_len", self.raw_audio_len),
            ("raw_video_frames", self.raw_video_frames),
            ("frame_dim", self.frame_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid(format!("dataset.{name} must be positive")));
            }
        }
        if self.sample_rate == 0 {
            return Err(Error::invalid("dataset.sample_rate must be positive"));
        }
        if self.num_classes > self.frame_dim {
            return Err(Error::invalid(format!(
                "dataset.num_classes ({}) exceeds frame_dim ({}); patterns cannot be orthogonal",
                self.num_classes, self.frame_dim
            )));
        }
        if !(self.base_freq > 0.0 && self.freq_ratio > 1.0 && self.noise_std >= 0.0) {
            return Err(Error::invalid(
                "dataset.base_freq > 0, freq_ratio > 1 and noise_std >= 0 required",
            ));
        }
        let top = self.class_freq(self.num_classes - 1) * max_speed as f64;
        if top >= self.sample_rate as f64 / 2.0 {
            return Err(Error::invalid(format!(
                "highest tone {top:.1} Hz at speed {max_speed} is not below Nyquist ({} Hz)",
                self.sample_rate / 2
            )));
        }
        Ok(())
    }

    pub fn class_freq(&self, class: usize) -> f64 {
        self.base_freq * self.freq_ratio.powi(class as i32)
    }

    pub fn clips_per_class(&self, split: Split) -> usize {
        match split {
            Split::Train => self.clips_per_class_train,
            Split::Test => self.clips_per_class_test,
        }
    }

    pub fn layout(&self) -> DatasetLayout {
        DatasetLayout {
            num_classes: self.num_classes,
            raw_audio_len: self.raw_audio_len,
            raw_video_frames: self.raw_video_frames,
            frame_dim: self.frame_dim,
            sample_rate: self.sample_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn stream_id(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.svac",
            Split::Test => "test.svac",
        }
    }
}

/// One aligned audio-video pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub class: usize,
    pub audio: Waveform,
    pub video: FrameSeq,
}

/// The dimensions a dataset file records in its header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetLayout {
    pub num_classes: usize,
    pub raw_audio_len: usize,
    pub raw_video_frames: usize,
    pub frame_dim: usize,
    pub sample_rate: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub layout: DatasetLayout,
    pub clips: Vec<Clip>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.layout.num_classes];
        for c in &self.clips {
            h[c.class] += 1;
        }
        h
    }
}

/// Clip synthesizer holding the per-class video patterns.
#[derive(Debug, Clone)]
pub struct Generator {
    spec: DatasetSpec,
    patterns: Vec<Vec<f64>>,
}

impl Generator {
    pub fn new(spec: &DatasetSpec) -> Result<Self> {
        spec.validate(1)?;
        Ok(Generator {
            spec: spec.clone(),
            patterns: class_patterns(spec),
        })
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    /// Video pattern of each class: mutually orthogonal, norm `sqrt(frame_dim)`.
    pub fn patterns(&self) -> &[Vec<f64>] {
        &self.patterns
    }

    /// Tone at the class frequency plus white noise; static class pattern
    /// plus per-frame noise. Values are rounded to `f32` so a dataset file
    /// holds them exactly.
    pub fn synth_clip(&self, class: usize, rng: &mut Rng) -> Result<Clip> {
        let spec = &self.spec;
        if class >= spec.num_classes {
            return Err(Error::invalid(format!(
                "class {class} out of range for {} classes",
                spec.num_classes
            )));
        }
        let freq = spec.class_freq(class);
        let rate = spec.sample_rate as f64;
        let samples = (0..spec.raw_audio_len)
            .map(|t| {
                let tone = (2.0 * std::f64::consts::PI * freq * t as f64 / rate).sin();
                to_f32(tone + spec.noise_std * rng.normal())
            })
            .collect();
        let pattern = &self.patterns[class];
        let mut frames = Vec::with_capacity(spec.raw_video_frames * spec.frame_dim);
        for _ in 0..spec.raw_video_frames {
            frames.extend(pattern.iter().map(|&p| to_f32(p + spec.noise_std * rng.normal())));
        }
        Ok(Clip {
            class,
            audio: Waveform::new(samples, spec.sample_rate),
            video: FrameSeq::new(spec.frame_dim, frames)?,
        })
    }

    /// Clip `index` of `split`; clips are ordered class-major.
    pub fn clip_at(&self, split: Split, index: usize) -> Result<Clip> {
        let class = index / self.spec.clips_per_class(split);
        let mut rng = Rng::stream(self.spec.seed, &[split.stream_id(), index as u64]);
        self.synth_clip(class, &mut rng)
    }

    pub fn dataset(&self, split: Split) -> Result<Dataset> {
        let total = self.spec.num_classes * self.spec.clips_per_class(split);
        let clips = (0..total)
            .into_par_iter()
            .map(|i| self.clip_at(split, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            layout: self.spec.layout(),
            clips,
        })
    }
}

fn to_f32(x: f64) -> f64 {
    x as f32 as f64
}

fn class_patterns(spec: &DatasetSpec) -> Vec<Vec<f64>> {
    let mut rng = Rng::stream(spec.seed, &[PATTERN_STREAM]);
    let scale = (spec.frame_dim as f64).sqrt();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(spec.num_classes);
    while basis.len() < spec.num_classes {
        let mut v: Vec<f64> = (0..spec.frame_dim).map(|_| rng.normal()).collect();
        // Gram-Schmidt against the patterns so far
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    basis
        .into_iter()
        .map(|b| b.into_iter().map(|x| x * scale).collect())
        .collect()
}

pub fn generate_dataset(spec: &DatasetSpec, split: Split) -> Result<Dataset> {
    Generator::new(spec)?.dataset(split)
}

/// The class whose speed-1 tone equals `class`'s tone played at speed `s`,
/// if the frequency ladder maps it onto another rung in range.
pub fn alias_class(class: usize, s: SpeedFactor, spec: &DatasetSpec) -> Option<usize> {
    let rungs = (s.get() as f64).ln() / spec.freq_ratio.ln();
    let whole = rungs.round();
    if (rungs - whole).abs() > 1e-9 {
        return None;
    }
    let target = class + whole as usize;
    (target < spec.num_classes).then_some(target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{dominant_bin, resample_audio, AudioFeaturizer};

    fn sp(v: u32) -> SpeedFactor {
        SpeedFactor::new(v).unwrap()
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn alias_examples() {
        let spec = DatasetSpec::default();
        assert_eq!(alias_class(2, sp(4), &spec), Some(6));
        assert_eq!(alias_class(5, sp(4), &spec), None);
        assert_eq!(alias_class(3, sp(2), &spec), Some(5));
        assert_eq!(alias_class(1, sp(3), &spec), None);
        for c in 0..8 {
            assert_eq!(alias_class(c, SpeedFactor::ONE, &spec), Some(c));
        }
    }

    #[test]
    fn alias_frequency_identity() {
        // f0 * sqrt2^2 * 4 == f0 * sqrt2^6
        let spec = DatasetSpec::default();
        let sped = spec.class_freq(2) * 4.0;
        assert!((sped - spec.class_freq(6)).abs() < 1e-9);
    }

    #[test]
    fn class_zero_dominant_bin() {
        let gen = Generator::new(&DatasetSpec::default()).unwrap();
        let clip = gen.clip_at(Split::Train, 0).unwrap();
        assert_eq!(clip.class, 0);
        let f = AudioFeaturizer::new(512).unwrap();
        let w = resample_audio(&clip.audio, SpeedFactor::ONE, 512, 0).unwrap();
        assert_eq!(dominant_bin(&f.features(&w.samples).unwrap()), 4);
    }

    #[test]
    fn clips_are_deterministic() {
        let gen = Generator::new(&DatasetSpec::default()).unwrap();
        assert_eq!(gen.clip_at(Split::Train, 77).unwrap(), gen.clip_at(Split::Train, 77).unwrap());
        assert_ne!(gen.clip_at(Split::Train, 77).unwrap(), gen.clip_at(Split::Test, 77).unwrap());
    }

    #[test]
    fn frames_within_a_clip_are_similar() {
        let gen = Generator::new(&DatasetSpec::default()).unwrap();
        for i in [0, 100, 300, 511] {
            let clip = gen.clip_at(Split::Train, i).unwrap();
            let frames: Vec<&[f64]> = clip.video.frames().collect();
            for a in 0..frames.len() {
                for b in a + 1..frames.len() {
                    assert!(cosine(frames[a], frames[b]) > 0.9);
                }
            }
        }
    }

    #[test]
    fn patterns_are_orthogonal() {
        let gen = Generator::new(&DatasetSpec::default()).unwrap();
        let p = gen.patterns();
        for a in 0..p.len() {
            for b in 0..p.len() {
                let c = cosine(&p[a], &p[b]);
                if a == b {
                    assert!((c - 1.0).abs() < 1e-12);
                } else {
                    assert!(c.abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn video_class_recoverable_by_nearest_pattern() {
        let spec = DatasetSpec::default();
        let gen = Generator::new(&spec).unwrap();
        let ds = gen.dataset(Split::Train).unwrap();
        let mut correct = 0;
        for clip in &ds.clips {
            let mean: Vec<f64> = (0..spec.frame_dim)
                .map(|d| clip.video.frames().map(|f| f[d]).sum::<f64>() / clip.video.len() as f64)
                .collect();
            let best = (0..spec.num_classes)
                .max_by(|&a, &b| {
                    cosine(&mean, &gen.patterns()[a]).total_cmp(&cosine(&mean, &gen.patterns()[b]))
                })
                .unwrap();
            correct += usize::from(best == clip.class);
        }
        assert!(correct as f64 / ds.len() as f64 >= 0.99);
    }

    #[test]
    fn default_sizes_and_histogram() {
        let spec = DatasetSpec::default();
        let train = generate_dataset(&spec, Split::Train).unwrap();
        assert_eq!(train.len(), 512);
        assert_eq!(train.class_histogram(), vec![64; 8]);
        assert!(train.clips.iter().all(|c| c.audio.len() == 4096 && c.video.len() == 48));
        let test = generate_dataset(&spec, Split::Test).unwrap();
        assert_eq!(test.len(), 128);
    }

    #[test]
    fn validation_catches_nyquist_and_counts() {
        let spec = DatasetSpec::default();
        assert!(spec.validate(4).is_ok());
        // 181 Hz * 6 > 1024 Hz
        assert!(spec.validate(6).is_err());
        let bad = DatasetSpec {
            frame_dim: 4,
            ..spec.clone()
        };
        assert!(bad.validate(1).is_err());
        let bad = DatasetSpec {
            clips_per_class_test: 0,
            ..spec
        };
        assert!(bad.validate(1).is_err());
    }
}
