//! Finite-difference checks of every loss path and of the full model.

use crate::autodiff::{grad_check, Tape, Var, DEFAULT_GRAD_CHECK_EPS};
use crate::error::Result;
use crate::loss::{affinity_tape, soft_info_nce_tape, vanilla_info_nce_tape, Direction, LossConfig, MappingKind};
use crate::model::{Mapping, Model, ModelConfig, ViewInputs};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Largest relative error accepted by [`CheckReport::passed`].
pub const GRAD_TOLERANCE: f64 = 1e-6;

const SUITE_STREAM: u64 = 0x9c4e;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub instance: usize,
    pub max_rel_err: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRAD_TOLERANCE
    }
}

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::raw(shape.to_vec(), (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect())
}

const MAPPINGS: [MappingKind; 3] = [MappingKind::Identity, MappingKind::Linear, MappingKind::Nonlinear];

fn mapping_name(kind: MappingKind) -> &'static str {
    match kind {
        MappingKind::Identity => "identity",
        MappingKind::Linear => "linear",
        MappingKind::Nonlinear => "nonlinear",
    }
}

/// A mapping with perturbed (not identity) linear weights so that the check
/// exercises a generic point.
fn mapping_for(kind: MappingKind, dim: usize, rng: &mut Rng) -> Mapping {
    let mut m = Mapping::init(kind, dim, 1.0, rng);
    for p in m.params_mut() {
        for x in p.data_mut() {
            *x += 0.3 * rng.uniform(-1.0, 1.0);
        }
    }
    m
}

/// Run every check on `instances` random `n_clips` batches derived from
/// `seed`.
pub fn gradient_suite(seed: u64, instances: usize, n_clips: usize) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    for instance in 0..instances {
        let mut rng = Rng::stream(seed, &[SUITE_STREAM, instance as u64]);
        let mut push = |name: String, err: f64| {
            out.push(CheckReport {
                name,
                instance,
                max_rel_err: err,
            })
        };
        let (n, repr, proj) = (n_clips, 4, 3);
        let eta = 0.5;

        let za = random(&mut rng, &[n, proj]);
        let zv = random(&mut rng, &[n, proj]);
        let cfg = LossConfig {
            eta,
            ..LossConfig::default()
        };
        let err = grad_check(
            |t, v| {
                let a = t.l2_normalize(v[0], 1)?;
                let b = t.l2_normalize(v[1], 1)?;
                vanilla_info_nce_tape(t, a, b, &cfg)
            },
            &[za, zv],
            DEFAULT_GRAD_CHECK_EPS,
        )?;
        push("vanilla_info_nce".into(), err);

        for kind in MAPPINGS {
            let mapping = mapping_for(kind, repr, &mut rng);
            let mut inputs: Vec<Tensor> = (0..4).map(|_| random(&mut rng, &[n, repr])).collect();
            // fixed random read-out; the plain sum of λ is constant
            let weights = random(&mut rng, &[n, 4]);
            inputs.extend(mapping.params().into_iter().cloned());
            let err = grad_check(
                |t, v| {
                    let bound = mapping.bind_vars(t, &v[4..])?;
                    let lam = affinity_tape(t, &v[0..2], &v[2..4], &bound)?;
                    let w = t.constant(weights.clone());
                    let s = t.mul(lam, w)?;
                    t.sum_all(s)
                },
                &inputs,
                DEFAULT_GRAD_CHECK_EPS,
            )?;
            push(format!("cross_affinity/{}", mapping_name(kind)), err);

            // z inputs go between y and the mapping parameters
            for _ in 0..4 {
                inputs.insert(4, random(&mut rng, &[n, proj]));
            }
            for direction in [Direction::Both, Direction::AudioToVideo, Direction::VideoToAudio] {
                let cfg = LossConfig {
                    eta,
                    direction,
                    mapping: kind,
                    ..LossConfig::default()
                };
                let err = grad_check(
                    |t, v| {
                        let bound = mapping.bind_vars(t, &v[8..])?;
                        let lam = affinity_tape(t, &v[0..2], &v[2..4], &bound)?;
                        let z: Vec<Var> = v[4..8].iter().map(|&x| t.l2_normalize(x, 1)).collect::<Result<_>>()?;
                        soft_info_nce_tape(t, &z[0..2], &z[2..4], lam, &cfg)
                    },
                    &inputs,
                    DEFAULT_GRAD_CHECK_EPS,
                )?;
                let dir = match direction {
                    Direction::Both => "both",
                    Direction::AudioToVideo => "audio_to_video",
                    Direction::VideoToAudio => "video_to_audio",
                };
                push(format!("soft_info_nce/{}/{dir}", mapping_name(kind)), err);
            }
        }

        let mcfg = ModelConfig {
            audio_in: 6,
            video_in: 5,
            encoder_hidden: 5,
            repr_dim: repr,
            proj_hidden: 4,
            proj_dim: proj,
            init_scale: 1.0,
        };
        let mut model = Model::init(&mcfg, MappingKind::Nonlinear, &mut rng)?;
        // nonzero biases keep the ReLU layers away from all-dead rows
        for p in model.parameters_mut() {
            for x in p.data_mut() {
                *x += 0.5 * rng.uniform(-1.0, 1.0);
            }
        }
        let views = ViewInputs {
            audio: vec![random(&mut rng, &[n, 6]), random(&mut rng, &[n, 6])],
            video: vec![random(&mut rng, &[n, 5]), random(&mut rng, &[n, 5])],
        };
        let params: Vec<Tensor> = model.parameters().into_iter().cloned().collect();
        let err = grad_check(
            |t: &mut Tape, v| {
                let bound = model.bind_vars(t, v)?;
                let fw = bound.forward(t, &views)?;
                let lam = affinity_tape(t, &fw.y_a, &fw.y_v, &bound.mapping)?;
                soft_info_nce_tape(t, &fw.z_a, &fw.z_v, lam, &cfg)
            },
            &params,
            DEFAULT_GRAD_CHECK_EPS,
        )?;
        push("model/soft_info_nce".into(), err);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_a_few_instances() {
        let reports = gradient_suite(7, 2, 3).unwrap();
        assert_eq!(reports.len(), 2 * (1 + 3 * 4 + 1));
        for r in &reports {
            assert!(r.passed(), "{r:?}");
        }
    }
}
