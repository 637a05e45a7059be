#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use svaclr_core::datagen::Generator;
use svaclr_core::eval::eval_viewsets;
use svaclr_core::io::{encode_checkpoint, encode_dataset};
use svaclr_core::model::{Mlp, ViewInputs};
use svaclr_core::{AudioFeaturizer, AugmentConfig, DatasetSpec, MappingKind, Model, ModelConfig, Rng, Split, Tensor};

pub fn svaclr() -> Command {
    Command::new(env!("CARGO_BIN_EXE_svaclr"))
}

pub fn run(args: &[&str]) -> Output {
    svaclr().args(args).output().expect("spawn svaclr")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

pub fn fixture_spec() -> DatasetSpec {
    DatasetSpec {
        clips_per_class_train: 1,
        clips_per_class_test: 1,
        noise_std: 0.0,
        ..DatasetSpec::default()
    }
}

/// Gauss-Jordan inverse with partial pivoting.
fn invert(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = m
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| f64::from(u8::from(i == j))));
            r
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        let d = a[col][col];
        assert!(d.abs() > 1e-12, "singular Gram matrix");
        for x in a[col].iter_mut() {
            *x /= d;
        }
        for r in 0..n {
            if r != col {
                let f = a[r][col];
                if f != 0.0 {
                    let pivot_row = a[col].clone();
                    for (x, pv) in a[r].iter_mut().zip(pivot_row) {
                        *x -= f * pv;
                    }
                }
            }
        }
    }
    a.into_iter().map(|r| r[n..].to_vec()).collect()
}

/// Encoder taking input row `i` of `x` to the basis vector `e_i`: the hidden
/// layer holds `[x x_i, -x x_i]` and the read-out applies the Gram inverse.
fn one_hot_encoder(enc: &mut Mlp, x: &Tensor) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let rows: Vec<Vec<f64>> = (0..n).map(|i| x.row(i).to_vec()).collect();
    let gram: Vec<Vec<f64>> = rows
        .iter()
        .map(|a| rows.iter().map(|b| a.iter().zip(b).map(|(u, v)| u * v).sum()).collect())
        .collect();
    let inv = invert(&gram);
    let mut w1 = Vec::with_capacity(2 * n * d);
    for sign in [1.0, -1.0] {
        for r in &rows {
            w1.extend(r.iter().map(|v| sign * v));
        }
    }
    let mut w2 = Vec::with_capacity(n * 2 * n);
    for row in &inv {
        w2.extend(row.iter().copied());
        w2.extend(row.iter().map(|v| -v));
    }
    enc.layers[0].weight = Tensor::new(vec![2 * n, d], w1).unwrap();
    enc.layers[1].weight = Tensor::new(vec![n, 2 * n], w2).unwrap();
    for layer in &mut enc.layers {
        if let Some(b) = layer.bias.as_mut() {
            b.data_mut().fill(0.0);
        }
    }
}

fn identity_projector(proj: &mut Mlp) {
    for layer in &mut proj.layers {
        let n = layer.weight.shape()[0];
        layer.weight = Tensor::eye(n);
        if let Some(b) = layer.bias.as_mut() {
            b.data_mut().fill(0.0);
        }
    }
}

/// One noise-free clip per class, and a hand-built checkpoint whose test
/// embeddings are the basis vectors `e_i` for both modalities. Returns the
/// data directory and the checkpoint path.
pub fn one_hot_fixture(root: &Path) -> (PathBuf, PathBuf) {
    let data = root.join("fixture");
    std::fs::create_dir_all(&data).unwrap();
    let spec = fixture_spec();
    let gen = Generator::new(&spec).unwrap();
    let train = gen.dataset(Split::Train).unwrap();
    let test = gen.dataset(Split::Test).unwrap();
    std::fs::write(data.join("train.svac"), encode_dataset(&train).unwrap()).unwrap();
    std::fs::write(data.join("test.svac"), encode_dataset(&test).unwrap()).unwrap();
    let config = serde_json::json!({ "dataset": spec });
    std::fs::write(data.join("config.json"), serde_json::to_string_pretty(&config).unwrap()).unwrap();

    let aug = AugmentConfig::default();
    let views = eval_viewsets(&test, &aug).unwrap();
    let inputs = ViewInputs::from_viewsets_limited(&views, &AudioFeaturizer::new(aug.audio_window).unwrap(), 1).unwrap();
    let n = test.len();
    let cfg = ModelConfig {
        audio_in: inputs.audio[0].shape()[1],
        video_in: inputs.video[0].shape()[1],
        encoder_hidden: 2 * n,
        repr_dim: n,
        proj_hidden: n,
        proj_dim: n,
        init_scale: 1.0,
    };
    let mut model = Model::init(&cfg, MappingKind::Identity, &mut Rng::new(0)).unwrap();
    one_hot_encoder(&mut model.audio_encoder, &inputs.audio[0]);
    one_hot_encoder(&mut model.video_encoder, &inputs.video[0]);
    identity_projector(&mut model.audio_projector);
    identity_projector(&mut model.video_projector);

    let ckpt = data.join("one_hot.svck");
    std::fs::write(&ckpt, encode_checkpoint(&model).unwrap()).unwrap();
    (data, ckpt)
}

/// Parse `direction,k,recall` rows.
pub fn parse_retrieval(csv: &str) -> Vec<(String, usize, f64)> {
    csv.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect()
}
