//! Speed co-augmented audio-visual contrastive pre-training at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`autodiff`], [`rng`]: dense `f64` tensors, a reverse-mode
//!   tape and a bit-exact seeded generator.
//! - [`augment`]: speed co-augmentation by resampling and the DFT audio
//!   featurizer.
//! - [`datagen`]: a synthetic paired corpus whose audio classes alias into
//!   one another when sped up.
//! - [`model`]: MLP encoders and projectors.
//! - [`loss`]: InfoNCE, the cross-affinity weights and SoftInfoNCE.
//! - [`train`]: SGD with warmup and cosine decay.
//! - [`eval`]: cross-modal retrieval, linear probing and the affinity report.
//! - [`io`]: dataset and checkpoint file formats.

pub mod augment;
pub mod autodiff;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod io;
pub mod loss;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use augment::{AugmentConfig, AudioFeaturizer, FrameSeq, SpeedFactor, ViewSet, Waveform};
pub use autodiff::{grad_check, Gradients, Op, Tape, Var};
pub use datagen::{Clip, Dataset, DatasetLayout, DatasetSpec, Split};
pub use error::{Error, FileKind, FormatError, Result};
pub use eval::{AffinityReport, ProbeResult, RetrievalResult};
pub use loss::{AffinityMatrix, Direction, LossConfig, MappingKind};
pub use model::{BatchEmbeddings, Model, ModelConfig};
pub use rng::Rng;
pub use tensor::Tensor;
pub use train::{MetricsRecord, TrainConfig, Variant};
