//! Audio and video encoders, their projectors, and the learnable mapping used
//! by the cross-affinity module. All are small MLPs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{AudioFeaturizer, ViewSet};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::loss::MappingKind;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub audio_in: usize,
    pub video_in: usize,
    pub encoder_hidden: usize,
    pub repr_dim: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            audio_in: 128,
            video_in: 128,
            encoder_hidden: 128,
            repr_dim: 64,
            proj_hidden: 64,
            proj_dim: 32,
            init_scale: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("audio_in", self.audio_in),
            ("video_in", self.video_in),
            ("encoder_hidden", self.encoder_hidden),
            ("repr_dim", self.repr_dim),
            ("proj_hidden", self.proj_hidden),
            ("proj_dim", self.proj_dim),
        ];
        for (name, d) in dims {
            if d == 0 {
                return Err(Error::invalid(format!("model.{name} must be at least 1")));
            }
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::invalid("model.init_scale must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// `y = act(x W^T + b)` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// Layers `dims[0] -> dims[1] -> ...`; ReLU between layers, none after
    /// the last. Weights uniform in `±scale/sqrt(fan_in)`, biases zero.
    pub fn init(dims: &[usize], bias: bool, scale: f64, rng: &mut Rng) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = scale / (fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| if bound > 0.0 { rng.uniform(-bound, bound) } else { 0.0 })
                    .collect();
                Linear {
                    weight: Tensor::raw(vec![fan_out, fan_in], data),
                    bias: bias.then(|| Tensor::zeros(&[fan_out])),
                    activation: if i + 2 < dims.len() {
                        Activation::Relu
                    } else {
                        Activation::Identity
                    },
                }
            })
            .collect();
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.shape()[0]
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            if let Some(b) = &l.bias {
                out.push(b);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            if let Some(b) = &mut l.bias {
                out.push(b);
            }
        }
        out
    }

    fn bind(&self, tape: &mut Tape, trainable: bool, leaves: &mut Vec<Var>) -> Result<BoundMlp> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let bind = |tape: &mut Tape, t: &Tensor| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            };
            let w = bind(tape, &l.weight);
            leaves.push(w);
            let b = l.bias.as_ref().map(|b| {
                let v = bind(tape, b);
                leaves.push(v);
                v
            });
            let wt = tape.transpose(w)?;
            layers.push((wt, b, l.activation));
        }
        Ok(BoundMlp { layers })
    }

    /// Bind using existing tape values for the parameters, taken from
    /// `params` in [`Mlp::params`] order.
    fn bind_vars(&self, tape: &mut Tape, params: &mut impl Iterator<Item = Var>) -> Result<BoundMlp> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let w = params.next().ok_or_else(|| Error::invalid("bind_vars: too few parameter vars"))?;
            let b = match &l.bias {
                Some(_) => Some(params.next().ok_or_else(|| Error::invalid("bind_vars: too few parameter vars"))?),
                None => None,
            };
            if tape.value(w).shape() != l.weight.shape() {
                return Err(Error::shape("bind_vars", &[tape.value(w).shape(), l.weight.shape()]));
            }
            layers.push((tape.transpose(w)?, b, l.activation));
        }
        Ok(BoundMlp { layers })
    }
}

/// An [`Mlp`] whose parameters live on a tape.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    layers: Vec<(Var, Option<Var>, Activation)>,
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for &(wt, b, act) in &self.layers {
            h = tape.matmul(h, wt)?;
            if let Some(b) = b {
                h = tape.add(h, b)?;
            }
            if act == Activation::Relu {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}

/// The map `l(.)` applied to representations before the affinity product.
#[derive(Debug, Clone, PartialEq)]
pub enum Mapping {
    Identity,
    /// A single bias-free `repr x repr` matrix.
    Linear(Mlp),
    /// Two layers `repr -> repr -> repr` with a ReLU between.
    Nonlinear(Mlp),
}

impl Mapping {
    /// Linear mappings start at the identity matrix; nonlinear ones use the
    /// standard uniform init.
    pub fn init(kind: MappingKind, repr_dim: usize, scale: f64, rng: &mut Rng) -> Self {
        match kind {
            MappingKind::Identity => Mapping::Identity,
            MappingKind::Linear => Mapping::Linear(Mlp {
                layers: vec![Linear {
                    weight: Tensor::eye(repr_dim),
                    bias: None,
                    activation: Activation::Identity,
                }],
            }),
            MappingKind::Nonlinear => {
                Mapping::Nonlinear(Mlp::init(&[repr_dim, repr_dim, repr_dim], true, scale, rng))
            }
        }
    }

    pub fn kind(&self) -> MappingKind {
        match self {
            Mapping::Identity => MappingKind::Identity,
            Mapping::Linear(_) => MappingKind::Linear,
            Mapping::Nonlinear(_) => MappingKind::Nonlinear,
        }
    }

    fn mlp(&self) -> Option<&Mlp> {
        match self {
            Mapping::Identity => None,
            Mapping::Linear(m) | Mapping::Nonlinear(m) => Some(m),
        }
    }

    fn mlp_mut(&mut self) -> Option<&mut Mlp> {
        match self {
            Mapping::Identity => None,
            Mapping::Linear(m) | Mapping::Nonlinear(m) => Some(m),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.mlp().map(Mlp::params).unwrap_or_default()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.mlp_mut().map(Mlp::params_mut).unwrap_or_default()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool, leaves: &mut Vec<Var>) -> Result<BoundMapping> {
        Ok(match self.mlp() {
            None => BoundMapping(None),
            Some(m) => BoundMapping(Some(m.bind(tape, trainable, leaves)?)),
        })
    }
}

impl Mapping {
    /// Like [`Mapping::bind`] with the parameters supplied as vars.
    pub fn bind_vars(&self, tape: &mut Tape, params: &[Var]) -> Result<BoundMapping> {
        let mut it = params.iter().copied();
        let out = match self.mlp() {
            None => BoundMapping(None),
            Some(m) => BoundMapping(Some(m.bind_vars(tape, &mut it)?)),
        };
        if it.next().is_some() {
            return Err(Error::invalid("bind_vars: too many parameter vars"));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct BoundMapping(Option<BoundMlp>);

impl BoundMapping {
    pub fn identity() -> Self {
        BoundMapping(None)
    }

    pub fn apply(&self, tape: &mut Tape, y: Var) -> Result<Var> {
        match &self.0 {
            None => Ok(y),
            Some(m) => m.forward(tape, y),
        }
    }
}

/// Encoders `g` (audio) and `f` (video), projectors `h_a`, `h_v`, and the
/// cross-affinity mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub audio_encoder: Mlp,
    pub video_encoder: Mlp,
    pub audio_projector: Mlp,
    pub video_projector: Mlp,
    pub mapping: Mapping,
}

impl Model {
    pub fn init(config: &ModelConfig, mapping: MappingKind, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = config;
        let s = c.init_scale;
        let audio_encoder = Mlp::init(&[c.audio_in, c.encoder_hidden, c.repr_dim], true, s, rng);
        let video_encoder = Mlp::init(&[c.video_in, c.encoder_hidden, c.repr_dim], true, s, rng);
        let audio_projector = Mlp::init(&[c.repr_dim, c.proj_hidden, c.proj_dim], true, s, rng);
        let video_projector = Mlp::init(&[c.repr_dim, c.proj_hidden, c.proj_dim], true, s, rng);
        let mapping = Mapping::init(mapping, c.repr_dim, s, rng);
        Ok(Model {
            config: config.clone(),
            audio_encoder,
            video_encoder,
            audio_projector,
            video_projector,
            mapping,
        })
    }

    /// Parameters in declaration order: audio encoder, video encoder, audio
    /// projector, video projector, mapping; weight before bias per layer.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = self.audio_encoder.params();
        out.extend(self.video_encoder.params());
        out.extend(self.audio_projector.params());
        out.extend(self.video_projector.params());
        out.extend(self.mapping.params());
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.audio_encoder.params_mut();
        out.extend(self.video_encoder.params_mut());
        out.extend(self.audio_projector.params_mut());
        out.extend(self.video_projector.params_mut());
        out.extend(self.mapping.params_mut());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    /// Put every parameter on `tape`. With `trainable`, each is a leaf and
    /// [`BoundModel::leaves`] lists them in declaration order.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundModel> {
        let mut leaves = Vec::new();
        let audio_encoder = self.audio_encoder.bind(tape, trainable, &mut leaves)?;
        let video_encoder = self.video_encoder.bind(tape, trainable, &mut leaves)?;
        let audio_projector = self.audio_projector.bind(tape, trainable, &mut leaves)?;
        let video_projector = self.video_projector.bind(tape, trainable, &mut leaves)?;
        let mapping = self.mapping.bind(tape, trainable, &mut leaves)?;
        Ok(BoundModel {
            audio_encoder,
            video_encoder,
            audio_projector,
            video_projector,
            mapping,
            leaves,
        })
    }

    /// Bind with every parameter supplied as a var, in [`Model::parameters`]
    /// order. The caller owns the vars, so gradients can be taken with
    /// respect to them.
    pub fn bind_vars(&self, tape: &mut Tape, params: &[Var]) -> Result<BoundModel> {
        let mut it = params.iter().copied();
        let audio_encoder = self.audio_encoder.bind_vars(tape, &mut it)?;
        let video_encoder = self.video_encoder.bind_vars(tape, &mut it)?;
        let audio_projector = self.audio_projector.bind_vars(tape, &mut it)?;
        let video_projector = self.video_projector.bind_vars(tape, &mut it)?;
        let rest: Vec<Var> = it.collect();
        let mapping = self.mapping.bind_vars(tape, &rest)?;
        Ok(BoundModel {
            audio_encoder,
            video_encoder,
            audio_projector,
            video_projector,
            mapping,
            leaves: params.to_vec(),
        })
    }

    fn check_input(&self, x: &Tensor, want: usize, what: &'static str) -> Result<()> {
        if x.rank() != 2 || x.shape()[1] != want {
            return Err(Error::shape(what, &[x.shape(), &[want]]));
        }
        Ok(())
    }

    /// Representations `y_a` for a batch of feature rows.
    pub fn encode_audio(&self, features: &Tensor) -> Result<Tensor> {
        self.check_input(features, self.config.audio_in, "encode_audio")?;
        self.eval_with(features, |t, b, x| b.audio_encoder.forward(t, x))
    }

    /// Representations `y_v` for a batch of flattened frame windows.
    pub fn encode_video(&self, frames: &Tensor) -> Result<Tensor> {
        self.check_input(frames, self.config.video_in, "encode_video")?;
        self.eval_with(frames, |t, b, x| b.video_encoder.forward(t, x))
    }

    pub fn project_audio(&self, y: &Tensor) -> Result<Tensor> {
        self.check_input(y, self.config.repr_dim, "project")?;
        self.eval_with(y, |t, b, x| b.project_audio(t, x))
    }

    pub fn project_video(&self, y: &Tensor) -> Result<Tensor> {
        self.check_input(y, self.config.repr_dim, "project")?;
        self.eval_with(y, |t, b, x| b.project_video(t, x))
    }

    fn eval_with(
        &self,
        x: &Tensor,
        f: impl FnOnce(&mut Tape, &BoundModel, Var) -> Result<Var>,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let xv = tape.constant(x.clone());
        let out = f(&mut tape, &bound, xv)?;
        Ok(tape.value(out).clone())
    }

    /// Encode and project all four views of every viewset.
    pub fn forward_batch(&self, viewsets: &[ViewSet], featurizer: &AudioFeaturizer) -> Result<BatchEmbeddings> {
        if viewsets.len() < 2 {
            return Err(Error::invalid("forward_batch needs at least 2 viewsets"));
        }
        let inputs = ViewInputs::from_viewsets(viewsets, featurizer)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let vars = bound.forward(&mut tape, &inputs)?;
        Ok(vars.embeddings(&tape))
    }
}

/// A [`Model`] bound onto a tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub audio_encoder: BoundMlp,
    pub video_encoder: BoundMlp,
    pub audio_projector: BoundMlp,
    pub video_projector: BoundMlp,
    pub mapping: BoundMapping,
    leaves: Vec<Var>,
}

impl BoundModel {
    pub fn leaves(&self) -> &[Var] {
        &self.leaves
    }

    pub fn project_audio(&self, tape: &mut Tape, y: Var) -> Result<Var> {
        let h = self.audio_projector.forward(tape, y)?;
        tape.l2_normalize(h, 1)
    }

    pub fn project_video(&self, tape: &mut Tape, y: Var) -> Result<Var> {
        let h = self.video_projector.forward(tape, y)?;
        tape.l2_normalize(h, 1)
    }

    /// Encode and project each view of `inputs`.
    pub fn forward(&self, tape: &mut Tape, inputs: &ViewInputs) -> Result<ForwardVars> {
        let mut out = Vec::with_capacity(inputs.views());
        for p in 0..inputs.views() {
            let xa = tape.constant(inputs.audio[p].clone());
            let xv = tape.constant(inputs.video[p].clone());
            let ya = self.audio_encoder.forward(tape, xa)?;
            let yv = self.video_encoder.forward(tape, xv)?;
            let za = self.project_audio(tape, ya)?;
            let zv = self.project_video(tape, yv)?;
            out.push((ya, yv, za, zv));
        }
        Ok(ForwardVars {
            y_a: out.iter().map(|o| o.0).collect(),
            y_v: out.iter().map(|o| o.1).collect(),
            z_a: out.iter().map(|o| o.2).collect(),
            z_v: out.iter().map(|o| o.3).collect(),
        })
    }
}

/// Encoder inputs, one `N x dim` matrix per view slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewInputs {
    pub audio: Vec<Tensor>,
    pub video: Vec<Tensor>,
}

impl ViewInputs {
    pub fn views(&self) -> usize {
        self.audio.len()
    }

    pub fn clips(&self) -> usize {
        self.audio[0].shape()[0]
    }

    /// Featurize both views of every viewset.
    pub fn from_viewsets(viewsets: &[ViewSet], featurizer: &AudioFeaturizer) -> Result<Self> {
        Self::from_viewsets_limited(viewsets, featurizer, 2)
    }

    /// Like [`ViewInputs::from_viewsets`] but keeps only the first `views`
    /// view slots.
    pub fn from_viewsets_limited(
        viewsets: &[ViewSet],
        featurizer: &AudioFeaturizer,
        views: usize,
    ) -> Result<Self> {
        let per_clip: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = viewsets
            .par_iter()
            .map(|vs| {
                let audio = vs.audio_views[..views]
                    .iter()
                    .map(|w| featurizer.features(&w.samples))
                    .collect::<Result<Vec<_>>>()?;
                let video = vs.video_views[..views].iter().map(|f| f.flat().to_vec()).collect();
                Ok((audio, video))
            })
            .collect::<Result<_>>()?;
        let mut audio = Vec::with_capacity(views);
        let mut video = Vec::with_capacity(views);
        for p in 0..views {
            let a: Vec<&[f64]> = per_clip.iter().map(|c| c.0[p].as_slice()).collect();
            let v: Vec<&[f64]> = per_clip.iter().map(|c| c.1[p].as_slice()).collect();
            audio.push(Tensor::from_rows(&a)?);
            video.push(Tensor::from_rows(&v)?);
        }
        Ok(ViewInputs { audio, video })
    }
}

/// Per-view tape handles for representations `y` and projections `z`.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub y_a: Vec<Var>,
    pub y_v: Vec<Var>,
    pub z_a: Vec<Var>,
    pub z_v: Vec<Var>,
}

impl ForwardVars {
    pub fn embeddings(&self, tape: &Tape) -> BatchEmbeddings {
        let stack = |vars: &[Var]| interleave_views(&vars.iter().map(|&v| tape.value(v)).collect::<Vec<_>>());
        BatchEmbeddings {
            y_a: stack(&self.y_a),
            y_v: stack(&self.y_v),
            z_a: stack(&self.z_a),
            z_v: stack(&self.z_v),
        }
    }
}

/// Representations and projections laid out `N x views x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEmbeddings {
    pub y_a: Tensor,
    pub y_v: Tensor,
    pub z_a: Tensor,
    pub z_v: Tensor,
}

impl BatchEmbeddings {
    pub fn clips(&self) -> usize {
        self.z_a.shape()[0]
    }
}

/// `[N x d; V]` -> `N x V x d`.
pub fn interleave_views(views: &[&Tensor]) -> Tensor {
    let (n, d) = (views[0].shape()[0], views[0].shape()[1]);
    let mut data = Vec::with_capacity(n * views.len() * d);
    for i in 0..n {
        for v in views {
            data.extend_from_slice(v.row(i));
        }
    }
    Tensor::raw(vec![n, views.len(), d], data)
}

/// `N x V x d` -> view `p` as `N x d`.
pub fn view_of(batch: &Tensor, p: usize) -> Result<Tensor> {
    if batch.rank() != 3 || p >= batch.shape()[1] {
        return Err(Error::shape("view_of", &[batch.shape()]));
    }
    let (n, views, d) = (batch.shape()[0], batch.shape()[1], batch.shape()[2]);
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        let start = (i * views + p) * d;
        data.extend_from_slice(&batch.data()[start..start + d]);
    }
    Tensor::new(vec![n, d], data)
}
