//! Speed co-augmentation of paired audio and video, and the audio featurizer.
//!
//! Speeding up a signal by an integer factor `s` is a strided read: window
//! sample `k` is raw sample `offset + k * s`. No anti-alias filter is applied;
//! the synthetic corpus is band-limited so the stride is exact.

use std::fmt;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::datagen::Clip;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Number of DFT bins kept by the featurizer (bins `1..=NUM_BINS`).
pub const NUM_BINS: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Waveform {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// A sequence of fixed-width feature frames, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSeq {
    frame_dim: usize,
    data: Vec<f64>,
}

impl FrameSeq {
    pub fn new(frame_dim: usize, data: Vec<f64>) -> Result<Self> {
        if frame_dim == 0 || data.len() % frame_dim != 0 {
            return Err(Error::invalid(format!(
                "frame data of length {} does not split into frames of {frame_dim}",
                data.len()
            )));
        }
        Ok(FrameSeq { frame_dim, data })
    }

    pub fn from_frames<F: AsRef<[f64]>>(frames: &[F]) -> Result<Self> {
        let dim = frames.first().map(|f| f.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(dim * frames.len());
        for f in frames {
            if f.as_ref().len() != dim {
                return Err(Error::invalid("frames of unequal dimension"));
            }
            data.extend_from_slice(f.as_ref());
        }
        FrameSeq::new(dim, data)
    }

    pub fn frame_dim(&self) -> usize {
        self.frame_dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.frame_dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.data[i * self.frame_dim..(i + 1) * self.frame_dim]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.frame_dim)
    }

    /// Row-major flattening, the video encoder's input layout.
    pub fn flat(&self) -> &[f64] {
        &self.data
    }
}

/// Integer playback-speed multiplier, at least 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SpeedFactor(u32);

impl SpeedFactor {
    pub const ONE: SpeedFactor = SpeedFactor(1);

    pub fn new(value: u32) -> Result<Self> {
        if value == 0 {
            return Err(Error::invalid("speed factor must be at least 1"));
        }
        Ok(SpeedFactor(value))
    }

    pub fn get(self) -> u32 {
        self.0
    }

    fn stride(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for SpeedFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Largest speed in the speed set `{1, ..., max_speed}`.
    pub max_speed: u32,
    /// Audio window in samples.
    pub audio_window: usize,
    /// Video window in frames.
    pub video_window: usize,
    /// Keep a speed-1 view next to the sped one. When false, both views of a
    /// modality are independent sped crops.
    pub keep_original: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_speed: 4,
            audio_window: 512,
            video_window: 8,
            keep_original: true,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_speed < 1 {
            return Err(Error::invalid("augment.max_speed must be at least 1"));
        }
        if self.audio_window < 2 * NUM_BINS {
            return Err(Error::invalid(format!(
                "augment.audio_window must be at least {} to cover {NUM_BINS} bins",
                2 * NUM_BINS
            )));
        }
        if self.video_window < 1 {
            return Err(Error::invalid("augment.video_window must be at least 1"));
        }
        Ok(())
    }

    pub fn speeds(&self) -> impl Iterator<Item = SpeedFactor> {
        (1..=self.max_speed).map(SpeedFactor)
    }

    /// Raw length a stream needs so a `window` read at `max_speed` fits.
    pub fn required_len(window: usize, speed: SpeedFactor) -> usize {
        (window - 1) * speed.stride() + 1
    }
}

/// The four co-augmented views of one clip: `{orig, sped}` audio by
/// `{orig, sped}` video.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub audio_views: [Waveform; 2],
    pub video_views: [FrameSeq; 2],
    pub tau1: SpeedFactor,
    pub tau2: SpeedFactor,
    pub clip_index: usize,
    pub label: usize,
}

/// Independent uniform draws of the audio and video speeds.
pub fn sample_speed_pair(rng: &mut Rng, config: &AugmentConfig) -> (SpeedFactor, SpeedFactor) {
    let s = config.max_speed as usize;
    let tau1 = 1 + rng.uniform_int(s).expect("max_speed >= 1");
    let tau2 = 1 + rng.uniform_int(s).expect("max_speed >= 1");
    (SpeedFactor(tau1 as u32), SpeedFactor(tau2 as u32))
}

fn check_window(what: &str, len: usize, s: SpeedFactor, window: usize, offset: usize) -> Result<()> {
    if window == 0 {
        return Err(Error::invalid(format!("{what}: window must be at least 1")));
    }
    let needed = offset + AugmentConfig::required_len(window, s);
    if needed > len {
        return Err(Error::invalid(format!(
            "{what}: window {window} at speed {s} from offset {offset} needs raw length {needed}, have {len}"
        )));
    }
    Ok(())
}

/// `out[k] = w[offset + k * s]`. The sample rate is unchanged: the content is
/// sped up, not the clock.
pub fn resample_audio(w: &Waveform, s: SpeedFactor, window: usize, offset: usize) -> Result<Waveform> {
    check_window("resample_audio", w.len(), s, window, offset)?;
    let samples = (0..window).map(|k| w.samples[offset + k * s.stride()]).collect();
    Ok(Waveform::new(samples, w.sample_rate))
}

pub fn subsample_video(f: &FrameSeq, s: SpeedFactor, window: usize, offset: usize) -> Result<FrameSeq> {
    check_window("subsample_video", f.len(), s, window, offset)?;
    let mut data = Vec::with_capacity(window * f.frame_dim);
    for k in 0..window {
        data.extend_from_slice(f.frame(offset + k * s.stride()));
    }
    FrameSeq::new(f.frame_dim, data)
}

fn random_offset(rng: &mut Rng, what: &str, len: usize, window: usize, s: SpeedFactor) -> Result<usize> {
    let span = AugmentConfig::required_len(window, s);
    if span > len {
        return Err(Error::invalid(format!(
            "{what}: window {window} at speed {s} needs raw length {span}, have {len}"
        )));
    }
    rng.uniform_int(len - span + 1)
}

/// Build the four views of `clip`. Each view gets its own offset, drawn in
/// the order audio-orig, audio-sped, video-orig, video-sped.
pub fn make_views(
    clip: &Clip,
    clip_index: usize,
    tau1: SpeedFactor,
    tau2: SpeedFactor,
    rng: &mut Rng,
    config: &AugmentConfig,
) -> Result<ViewSet> {
    let (aw, vw) = (config.audio_window, config.video_window);
    let first_audio = if config.keep_original { SpeedFactor::ONE } else { tau1 };
    let first_video = if config.keep_original { SpeedFactor::ONE } else { tau2 };

    let o = random_offset(rng, "audio", clip.audio.len(), aw, first_audio)?;
    let a0 = resample_audio(&clip.audio, first_audio, aw, o)?;
    let o = random_offset(rng, "audio", clip.audio.len(), aw, tau1)?;
    let a1 = resample_audio(&clip.audio, tau1, aw, o)?;
    let o = random_offset(rng, "video", clip.video.len(), vw, first_video)?;
    let v0 = subsample_video(&clip.video, first_video, vw, o)?;
    let o = random_offset(rng, "video", clip.video.len(), vw, tau2)?;
    let v1 = subsample_video(&clip.video, tau2, vw, o)?;

    Ok(ViewSet {
        audio_views: [a0, a1],
        video_views: [v0, v1],
        tau1,
        tau2,
        clip_index,
        label: clip.class,
    })
}

/// Log-magnitude spectrum over DFT bins `1..=NUM_BINS` of a fixed window.
#[derive(Clone)]
pub struct AudioFeaturizer {
    window: usize,
    fft: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for AudioFeaturizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AudioFeaturizer")
            .field("window", &self.window)
            .finish()
    }
}

impl AudioFeaturizer {
    pub fn new(window: usize) -> Result<Self> {
        if window < 2 * NUM_BINS {
            return Err(Error::invalid(format!(
                "featurizer window {window} is shorter than {}",
                2 * NUM_BINS
            )));
        }
        let fft = FftPlanner::new().plan_fft_forward(window);
        Ok(AudioFeaturizer { window, fft })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn dim(&self) -> usize {
        NUM_BINS
    }

    /// `ln(1 + |X_k|)` for `k = 1..=NUM_BINS`; entry `k - 1` holds bin `k`.
    pub fn features(&self, samples: &[f64]) -> Result<Vec<f64>> {
        if samples.len() != self.window {
            return Err(Error::invalid(format!(
                "audio_features: window of {} samples expected, got {}",
                self.window,
                samples.len()
            )));
        }
        let mut buf: Vec<Complex<f64>> = samples.iter().map(|&x| Complex::new(x, 0.0)).collect();
        self.fft.process(&mut buf);
        Ok(buf[1..=NUM_BINS].iter().map(|c| c.norm().ln_1p()).collect())
    }
}

pub fn audio_features(w: &Waveform, window: usize) -> Result<Vec<f64>> {
    AudioFeaturizer::new(window)?.features(&w.samples)
}

/// Direct O(n^2) DFT magnitudes for bins `1..=bins`; the reference the FFT
/// path is checked against.
pub fn naive_dft_magnitudes(samples: &[f64], bins: usize) -> Vec<f64> {
    let n = samples.len() as f64;
    (1..=bins)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, &x) in samples.iter().enumerate() {
                let angle = -2.0 * std::f64::consts::PI * (k * t) as f64 / n;
                re += x * angle.cos();
                im += x * angle.sin();
            }
            (re * re + im * im).sqrt()
        })
        .collect()
}

/// DFT bin number (not index) of the largest feature.
pub fn dominant_bin(features: &[f64]) -> usize {
    features
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
        + 1
}
