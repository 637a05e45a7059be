//! Binary dataset and checkpoint files. Both are little-endian with a
//! four-byte magic and a `u32` version.

use std::fs;
use std::path::Path;

use crate::augment::{FrameSeq, Waveform};
use crate::datagen::{Clip, Dataset, DatasetLayout};
use crate::error::{Error, FileKind, FormatError, Result};
use crate::loss::MappingKind;
use crate::model::{Model, ModelConfig};
use crate::rng::Rng;

pub const DATASET_MAGIC: [u8; 4] = *b"SVAC";
pub const DATASET_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    kind: FileKind,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], kind: FileKind) -> Self {
        Reader { bytes, pos: 0, kind }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let needed = self.pos.checked_add(n).ok_or_else(|| self.mismatch("length overflow"))?;
        if needed > self.bytes.len() {
            return Err(Error::format(
                self.kind,
                FormatError::Truncated {
                    needed,
                    available: self.bytes.len(),
                },
            ));
        }
        let out = &self.bytes[self.pos..needed];
        self.pos = needed;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.mismatch("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.mismatch("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn header(&mut self, magic: [u8; 4], version: u32) -> Result<()> {
        let found: [u8; 4] = self.take(4)?.try_into().expect("4 bytes");
        if found != magic {
            return Err(Error::format(self.kind, FormatError::BadMagic { expected: magic, found }));
        }
        let v = self.u32()?;
        if v != version {
            return Err(Error::format(
                self.kind,
                FormatError::UnsupportedVersion {
                    expected: version,
                    found: v,
                },
            ));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.mismatch(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }

    fn mismatch(&self, msg: impl Into<String>) -> Error {
        Error::format(self.kind, FormatError::DimensionMismatch(msg.into()))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serialize a dataset. Samples are stored as `f32`.
pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let l = &ds.layout;
    let per_clip = 4 + 4 * (l.raw_audio_len + l.raw_video_frames * l.frame_dim);
    let mut out = Vec::with_capacity(32 + ds.len() * per_clip);
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    for v in [
        ds.len(),
        l.num_classes,
        l.raw_audio_len,
        l.raw_video_frames,
        l.frame_dim,
        l.sample_rate as usize,
    ] {
        put_u32(&mut out, v)?;
    }
    for clip in &ds.clips {
        if clip.audio.len() != l.raw_audio_len
            || clip.video.len() != l.raw_video_frames
            || clip.video.frame_dim() != l.frame_dim
            || clip.class >= l.num_classes
        {
            return Err(Error::invalid("clip does not match the dataset layout"));
        }
        put_u32(&mut out, clip.class)?;
        for &s in &clip.audio.samples {
            out.extend_from_slice(&(s as f32).to_le_bytes());
        }
        for &x in clip.video.flat() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes, FileKind::Dataset);
    r.header(DATASET_MAGIC, DATASET_VERSION)?;
    let num_clips = r.u32()? as usize;
    let layout = DatasetLayout {
        num_classes: r.u32()? as usize,
        raw_audio_len: r.u32()? as usize,
        raw_video_frames: r.u32()? as usize,
        frame_dim: r.u32()? as usize,
        sample_rate: r.u32()?,
    };
    if layout.num_classes == 0
        || layout.raw_audio_len == 0
        || layout.raw_video_frames == 0
        || layout.frame_dim == 0
        || layout.sample_rate == 0
    {
        return Err(r.mismatch(format!("zero dimension in header {layout:?}")));
    }
    let mut clips = Vec::with_capacity(num_clips.min(1 << 16));
    for i in 0..num_clips {
        let class = r.u32()? as usize;
        if class >= layout.num_classes {
            return Err(r.mismatch(format!(
                "clip {i} has class {class} but the header declares {} classes",
                layout.num_classes
            )));
        }
        let audio = Waveform::new(r.f32s(layout.raw_audio_len)?, layout.sample_rate);
        let video = FrameSeq::new(layout.frame_dim, r.f32s(layout.raw_video_frames * layout.frame_dim)?)?;
        clips.push(Clip { class, audio, video });
    }
    r.finish()?;
    Ok(Dataset { layout, clips })
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

fn mapping_tag(kind: MappingKind) -> u32 {
    match kind {
        MappingKind::Identity => 0,
        MappingKind::Linear => 1,
        MappingKind::Nonlinear => 2,
    }
}

/// Serialize a model: its config, mapping kind and every parameter tensor in
/// declaration order as `f64`.
pub fn encode_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let c = &model.config;
    let params = model.parameters();
    let mut out = Vec::with_capacity(64 + 8 * model.parameter_count() + 12 * params.len());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [c.audio_in, c.video_in, c.encoder_hidden, c.repr_dim, c.proj_hidden, c.proj_dim] {
        put_u32(&mut out, v)?;
    }
    out.extend_from_slice(&mapping_tag(model.mapping.kind()).to_le_bytes());
    out.extend_from_slice(&c.init_scale.to_le_bytes());
    put_u32(&mut out, params.len())?;
    for t in params {
        put_u32(&mut out, t.rank())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader::new(bytes, FileKind::Checkpoint);
    r.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let kind = match r.u32()? {
        0 => MappingKind::Identity,
        1 => MappingKind::Linear,
        2 => MappingKind::Nonlinear,
        t => return Err(r.mismatch(format!("unknown mapping tag {t}"))),
    };
    let config = ModelConfig {
        audio_in: dims[0],
        video_in: dims[1],
        encoder_hidden: dims[2],
        repr_dim: dims[3],
        proj_hidden: dims[4],
        proj_dim: dims[5],
        init_scale: r.f64()?,
    };
    config.validate().map_err(|e| r.mismatch(e.to_string()))?;
    // the skeleton fixes the expected shapes; its values are overwritten
    let mut model = Model::init(&config, kind, &mut Rng::new(0))?;
    let count = r.u32()? as usize;
    let expected = model.parameters().len();
    if count != expected {
        return Err(r.mismatch(format!("{count} tensors, expected {expected}")));
    }
    for (i, p) in model.parameters_mut().into_iter().enumerate() {
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        if shape != p.shape() {
            return Err(r.mismatch(format!("tensor {i} has shape {shape:?}, expected {:?}", p.shape())));
        }
        let data = r.f64s(p.len())?;
        p.data_mut().copy_from_slice(&data);
    }
    r.finish()?;
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    decode_checkpoint(&fs::read(path)?)
}
