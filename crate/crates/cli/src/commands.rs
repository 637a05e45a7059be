use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use svaclr_core::augment::NUM_BINS;
use svaclr_core::datagen::Generator;
use svaclr_core::eval::{
    affinity_csv, affinity_report, linear_probe, probe_csv, retrieval, retrieval_csv,
};
use svaclr_core::io::{decode_checkpoint, decode_dataset, encode_checkpoint, encode_dataset};
use svaclr_core::train::{Observer, Trainer};
use svaclr_core::verify::gradient_suite;
use svaclr_core::{AugmentConfig, Dataset, MetricsRecord, Model, Result as CoreResult, SpeedFactor, Split, Variant};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::{write_file, Common};

pub const MODEL_FILE: &str = "model.svck";
pub const METRICS_FILE: &str = "metrics.jsonl";

fn configure(common: &Common, data: Option<&Path>) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::locate(common.config.as_deref(), data)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.train.seed = 0;
    }
    Ok(cfg)
}

fn set_max_speed(cfg: &mut RunConfig, max_speed: Option<u32>) {
    if let Some(s) = max_speed {
        cfg.train.augment.max_speed = s;
    }
}

fn output_dir(common: &Common, cfg: &mut RunConfig) -> Result<PathBuf, CliError> {
    let out = common
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set output_dir".into()))?;
    fs::create_dir_all(&out).map_err(|source| CliError::Io {
        path: out.clone(),
        source,
    })?;
    cfg.output_dir = Some(out.clone());
    Ok(out)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_split(data: &Path, split: Split) -> Result<Dataset, CliError> {
    let path = data.join(split.file_name());
    decode_dataset(&read_bytes(&path)?).map_err(|source| CliError::File { path, source })
}

fn read_model(path: &Path) -> Result<Model, CliError> {
    decode_checkpoint(&read_bytes(path)?).map_err(|source| CliError::File {
        path: path.to_path_buf(),
        source,
    })
}

/// Window lengths must fit the raw streams at the largest speed.
fn check_windows(aug: &AugmentConfig, audio_len: usize, video_frames: usize) -> Result<(), CliError> {
    aug.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let s = SpeedFactor::new(aug.max_speed)?;
    let audio = AugmentConfig::required_len(aug.audio_window, s);
    let video = AugmentConfig::required_len(aug.video_window, s);
    if audio > audio_len || video > video_frames {
        return Err(CliError::Config(format!(
            "windows at speed {s} need {audio} samples and {video} frames; clips have {audio_len} and {video_frames}"
        )));
    }
    Ok(())
}

fn check_model(model: &Model, aug: &AugmentConfig, frame_dim: usize) -> Result<(), CliError> {
    let c = &model.config;
    if c.audio_in != NUM_BINS || c.video_in != aug.video_window * frame_dim {
        return Err(CliError::Config(format!(
            "checkpoint expects inputs ({}, {}) but the config yields ({NUM_BINS}, {})",
            c.audio_in,
            c.video_in,
            aug.video_window * frame_dim
        )));
    }
    Ok(())
}

pub fn generate(common: &Common, max_speed: Option<u32>) -> Result<(), CliError> {
    let mut cfg = configure(common, None)?;
    set_max_speed(&mut cfg, max_speed);
    let mut cfg = cfg.resolve()?;
    let spec = &cfg.dataset;
    spec.validate(cfg.train.augment.max_speed)
        .map_err(|e| CliError::Config(e.to_string()))?;
    check_windows(&cfg.train.augment, spec.raw_audio_len, spec.raw_video_frames)?;
    let out = output_dir(common, &mut cfg)?;
    let generator = Generator::new(&cfg.dataset)?;
    for split in [Split::Train, Split::Test] {
        let ds = generator.dataset(split)?;
        write_file(&out.join(split.file_name()), &encode_dataset(&ds)?)?;
        println!("{}: {} clips", split.file_name(), ds.len());
    }
    cfg.write(&out)
}

/// Streams metrics to JSONL and writes periodic checkpoints.
struct RunLog {
    metrics: BufWriter<File>,
    out: PathBuf,
    every: usize,
}

impl Observer for RunLog {
    fn record(&mut self, record: &MetricsRecord) -> CoreResult<()> {
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(self.metrics, "{line}")?;
        Ok(())
    }

    fn epoch_end(&mut self, epoch: usize, model: &Model) -> CoreResult<()> {
        if self.every > 0 && (epoch + 1) % self.every == 0 {
            let path = self.out.join(format!("epoch_{:03}.svck", epoch + 1));
            fs::write(path, encode_checkpoint(model)?)?;
        }
        Ok(())
    }
}

pub fn pretrain(
    common: &Common,
    data: &Path,
    variant: Option<&str>,
    max_speed: Option<u32>,
    record_timing: bool,
) -> Result<(), CliError> {
    let mut cfg = configure(common, Some(data))?;
    if let Some(v) = variant {
        cfg.train.variant = Variant::parse(v).ok_or_else(|| {
            CliError::Config(format!(
                "unknown variant {v:?}; expected infonce_noaug, infonce_speed or soft_infonce"
            ))
        })?;
    }
    set_max_speed(&mut cfg, max_speed);
    let mut cfg = cfg.resolve()?;
    if let Err(e) = cfg.dataset.validate(cfg.train.augment.max_speed) {
        eprintln!("warning: {e}; sped audio will alias above Nyquist");
    }
    let train = read_split(data, Split::Train)?;
    check_windows(&cfg.train.augment, train.layout.raw_audio_len, train.layout.raw_video_frames)?;
    let out = output_dir(common, &mut cfg)?;
    cfg.write(&out)?;

    let metrics_path = out.join(METRICS_FILE);
    let file = File::create(&metrics_path).map_err(|source| CliError::Io {
        path: metrics_path.clone(),
        source,
    })?;
    let mut log = RunLog {
        metrics: BufWriter::new(file),
        out: out.clone(),
        every: cfg.train.checkpoint_every,
    };
    let mut trainer = Trainer::new(&train, &cfg.train)?;
    trainer.set_record_timing(record_timing);
    let result = trainer.run(&train, &mut log);
    log.metrics.flush().map_err(|source| CliError::Io {
        path: metrics_path,
        source,
    })?;
    result?;
    write_file(&out.join(MODEL_FILE), &encode_checkpoint(trainer.model())?)?;
    println!(
        "{}: {} steps, wrote {}",
        cfg.train.variant,
        trainer.total_steps(),
        out.join(MODEL_FILE).display()
    );
    Ok(())
}

pub fn eval(common: &Common, data: &Path, checkpoint: &Path, with_retrieval: bool) -> Result<(), CliError> {
    let cfg = configure(common, Some(data))?;
    let mut cfg = cfg.resolve()?;
    let model = read_model(checkpoint)?;
    let test = read_split(data, Split::Test)?;
    let train = read_split(data, Split::Train)?;
    let aug = cfg.train.augment.clone();
    check_model(&model, &aug, test.layout.frame_dim)?;
    let out = output_dir(common, &mut cfg)?;
    if with_retrieval {
        let results = retrieval(&model, &test, &aug)?;
        let csv = retrieval_csv(&results);
        write_file(&out.join("retrieval.csv"), csv.as_bytes())?;
        print!("{csv}");
    }
    let probes = linear_probe(&model, &train, &test, &aug, &cfg.probe, cfg.seed)?;
    let csv = probe_csv(&probes);
    write_file(&out.join("probe.csv"), csv.as_bytes())?;
    print!("{csv}");
    cfg.write(&out)
}

pub fn affinity(
    common: &Common,
    data: &Path,
    checkpoint: &Path,
    speeds: Option<Vec<u32>>,
    max_speed: Option<u32>,
) -> Result<(), CliError> {
    let mut cfg = configure(common, Some(data))?;
    set_max_speed(&mut cfg, max_speed);
    let mut cfg = cfg.resolve()?;
    let aug = cfg.train.augment.clone();
    let speeds = speeds.unwrap_or_else(|| (1..=aug.max_speed).collect());
    let speeds = speeds
        .into_iter()
        .map(SpeedFactor::new)
        .collect::<CoreResult<Vec<_>>>()?;
    let model = read_model(checkpoint)?;
    let test = read_split(data, Split::Test)?;
    check_model(&model, &aug, test.layout.frame_dim)?;
    let report = affinity_report(&model, &test, &cfg.dataset, &aug, &speeds, cfg.seed)?;
    let out = output_dir(common, &mut cfg)?;
    let csv = affinity_csv(&report);
    write_file(&out.join("affinity.csv"), csv.as_bytes())?;
    print!("{csv}");
    cfg.write(&out)
}

pub fn gradcheck(seed: u64, instances: usize) -> Result<(), CliError> {
    let reports = gradient_suite(seed, instances, 2)?;
    let mut failed = 0;
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<36} instance {:>2}  max rel err {:.3e}  {status}", r.name, r.instance, r.max_rel_err);
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        return Err(CliError::CheckFailed(format!("{failed} of {} gradient checks failed", reports.len())));
    }
    println!("all {} gradient checks passed", reports.len());
    Ok(())
}
