//! InfoNCE, the per-clip cross-affinity weights `λ` and SoftInfoNCE.
//!
//! Batched losses work on tape values laid out one `N x d` matrix per view.
//! The eager functions (`info_nce_term`, `soft_info_nce`, ...) evaluate the
//! same quantities by direct summation and double as test oracles.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{view_of, BatchEmbeddings, BoundMapping, Mapping};
use crate::tensor::Tensor;

/// Added to a logit to drop it from a softmax; `exp` underflows to zero.
const MASKED: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    AudioToVideo,
    VideoToAudio,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingKind {
    Identity,
    Linear,
    Nonlinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Temperature.
    pub eta: f64,
    pub direction: Direction,
    pub mapping: MappingKind,
    pub detach_affinity: bool,
    pub include_same_clip_other_view_as_negative: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            eta: 0.1,
            direction: Direction::Both,
            mapping: MappingKind::Identity,
            detach_affinity: false,
            include_same_clip_other_view_as_negative: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid(format!("loss.eta must be positive, got {}", self.eta)));
        }
        Ok(())
    }
}

/// `λ[p][q]` for audio view `p` and video view `q` of one clip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffinityMatrix(pub [[f64; 2]; 2]);

impl AffinityMatrix {
    pub const UNIFORM: AffinityMatrix = AffinityMatrix([[0.25; 2]; 2]);

    pub fn get(&self, p: usize, q: usize) -> f64 {
        self.0[p][q]
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().flatten().sum()
    }

    /// Rows of an `N x 4` tensor with column `2p + q`.
    pub fn from_rows(lambda: &Tensor) -> Result<Vec<AffinityMatrix>> {
        if lambda.rank() != 2 || lambda.shape()[1] != 4 {
            return Err(Error::shape("affinity", &[lambda.shape(), &[0, 4]]));
        }
        Ok((0..lambda.shape()[0])
            .map(|i| {
                let r = lambda.row(i);
                AffinityMatrix([[r[0], r[1]], [r[2], r[3]]])
            })
            .collect())
    }

    pub fn to_rows(items: &[AffinityMatrix]) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = items.iter().map(|a| a.0.iter().flatten().copied().collect()).collect();
        Tensor::from_rows(&rows)
    }

    pub fn mean(items: &[AffinityMatrix]) -> AffinityMatrix {
        let mut m = [[0.0; 2]; 2];
        for a in items {
            for p in 0..2 {
                for q in 0..2 {
                    m[p][q] += a.0[p][q];
                }
            }
        }
        let n = items.len().max(1) as f64;
        m.iter_mut().flatten().for_each(|x| *x /= n);
        AffinityMatrix(m)
    }
}

fn check_batch(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::invalid(format!("contrastive loss needs N >= 2 clips, got {n}")));
    }
    Ok(())
}

/// Per-clip InfoNCE terms for every (query view, key view) pair.
///
/// `queries` and `keys` hold one `N x d` matrix per view. Entry `[p][q]` is
/// the `[N]` vector of `-log softmax` at the positive `(i, q)` where the
/// candidates are every key view of every clip. Other key views of clip `i`
/// are dropped unless `include_same_clip` is set.
pub fn view_pair_terms(
    tape: &mut Tape,
    queries: &[Var],
    keys: &[Var],
    eta: f64,
    include_same_clip: bool,
) -> Result<Vec<Vec<Var>>> {
    let views = keys.len();
    let n = tape.value(keys[0]).shape()[0];
    check_batch(n)?;
    let all_keys = tape.concat(keys, 0)?;
    let all_keys_t = tape.transpose(all_keys)?;
    let width = views * n;

    let mut pick = Vec::with_capacity(views);
    let mut mask = Vec::with_capacity(views);
    for q in 0..views {
        let mut pk = Tensor::zeros(&[n, width]);
        let mut mk = Tensor::zeros(&[n, width]);
        for i in 0..n {
            pk.data_mut()[i * width + q * n + i] = 1.0;
            for other in (0..views).filter(|&o| o != q) {
                mk.data_mut()[i * width + other * n + i] = MASKED;
            }
        }
        pick.push(tape.constant(pk));
        mask.push((!include_same_clip && views > 1).then(|| tape.constant(mk)));
    }

    let mut out = Vec::with_capacity(queries.len());
    for &zq in queries {
        let sims = tape.matmul(zq, all_keys_t)?;
        let logits = tape.scale(sims, 1.0 / eta)?;
        let mut row = Vec::with_capacity(views);
        for q in 0..views {
            let masked = match mask[q] {
                Some(m) => tape.add(logits, m)?,
                None => logits,
            };
            let logp = tape.log_softmax(masked, 1)?;
            let picked = tape.mul(logp, pick[q])?;
            let s = tape.sum(picked, 1)?;
            row.push(tape.scale(s, -1.0)?);
        }
        out.push(row);
    }
    Ok(out)
}

/// `N x 4` affinity weights: softmax over the flattened `l(y_a^p) · l(y_v^q)`.
pub fn affinity_tape(tape: &mut Tape, y_a: &[Var], y_v: &[Var], mapping: &BoundMapping) -> Result<Var> {
    if y_a.len() != 2 || y_v.len() != 2 {
        return Err(Error::invalid("affinity needs two audio and two video views"));
    }
    let la = [mapping.apply(tape, y_a[0])?, mapping.apply(tape, y_a[1])?];
    let lv = [mapping.apply(tape, y_v[0])?, mapping.apply(tape, y_v[1])?];
    let n = tape.value(la[0]).shape()[0];
    let mut cols = Vec::with_capacity(4);
    for a in la {
        for v in lv {
            let prod = tape.mul(a, v)?;
            let dot = tape.sum(prod, 1)?;
            cols.push(tape.reshape(dot, &[n, 1])?);
        }
    }
    let logits = tape.concat(&cols, 1)?;
    tape.softmax(logits, 1)
}

/// Stack four `[N]` term vectors into `N x 4` with column `2p + q`.
fn stack_terms(tape: &mut Tape, terms: [[Var; 2]; 2]) -> Result<Var> {
    let mut cols = Vec::with_capacity(4);
    for row in terms {
        for t in row {
            let n = tape.value(t).len();
            cols.push(tape.reshape(t, &[n, 1])?);
        }
    }
    tape.concat(&cols, 1)
}

/// SoftInfoNCE on the tape. `z_a`, `z_v` hold the two views; `lambda` is
/// `N x 4`.
pub fn soft_info_nce_tape(
    tape: &mut Tape,
    z_a: &[Var],
    z_v: &[Var],
    lambda: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let n = tape.value(z_a[0]).shape()[0];
    if tape.value(lambda).shape() != [n, 4] {
        return Err(Error::shape("soft_info_nce", &[tape.value(lambda).shape(), &[n, 4]]));
    }
    let include = cfg.include_same_clip_other_view_as_negative;
    let mut parts = Vec::with_capacity(2);
    if matches!(cfg.direction, Direction::AudioToVideo | Direction::Both) {
        let t = view_pair_terms(tape, z_a, z_v, cfg.eta, include)?;
        parts.push(stack_terms(tape, [[t[0][0], t[0][1]], [t[1][0], t[1][1]]])?);
    }
    if matches!(cfg.direction, Direction::VideoToAudio | Direction::Both) {
        // video view q queries audio view p; weight stays λ[p][q]
        let t = view_pair_terms(tape, z_v, z_a, cfg.eta, include)?;
        parts.push(stack_terms(tape, [[t[0][0], t[1][0]], [t[0][1], t[1][1]]])?);
    }
    let scale = 1.0 / (n * parts.len()) as f64;
    let mut total = None;
    for terms in parts {
        let weighted = tape.mul(lambda, terms)?;
        let s = tape.sum_all(weighted)?;
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    tape.scale(total.expect("at least one direction"), scale)
}

/// Single-view InfoNCE with `N - 1` negatives, averaged over clips.
pub fn vanilla_info_nce_tape(tape: &mut Tape, z_a: Var, z_v: Var, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let n = tape.value(z_a).shape()[0];
    let mut parts = Vec::with_capacity(2);
    if matches!(cfg.direction, Direction::AudioToVideo | Direction::Both) {
        parts.push(view_pair_terms(tape, &[z_a], &[z_v], cfg.eta, false)?[0][0]);
    }
    if matches!(cfg.direction, Direction::VideoToAudio | Direction::Both) {
        parts.push(view_pair_terms(tape, &[z_v], &[z_a], cfg.eta, false)?[0][0]);
    }
    let joined = tape.concat(&parts, 0)?;
    let s = tape.sum_all(joined)?;
    tape.scale(s, 1.0 / (n * parts.len()) as f64)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_views(z: &Tensor, what: &'static str) -> Result<(usize, usize, usize)> {
    if z.rank() != 3 {
        return Err(Error::shape(what, &[z.shape()]));
    }
    Ok((z.shape()[0], z.shape()[1], z.shape()[2]))
}

/// One InfoNCE term by direct summation: query `z_q[i][p]`, positive
/// `z_k[i][q]`, negatives every key view of every other clip.
pub fn info_nce_term(
    z_query: &Tensor,
    z_key: &Tensor,
    i: usize,
    p: usize,
    q: usize,
    cfg: &LossConfig,
) -> Result<f64> {
    cfg.validate()?;
    let (n, vq, d) = check_views(z_query, "info_nce_term")?;
    let (nk, vk, dk) = check_views(z_key, "info_nce_term")?;
    if n != nk || d != dk {
        return Err(Error::shape("info_nce_term", &[z_query.shape(), z_key.shape()]));
    }
    check_batch(n)?;
    if i >= n || p >= vq || q >= vk {
        return Err(Error::invalid(format!("index ({i}, {p}, {q}) out of range")));
    }
    let at = |z: &Tensor, j: usize, v: usize, views: usize| -> Vec<f64> {
        let start = (j * views + v) * d;
        z.data()[start..start + d].to_vec()
    };
    let query = at(z_query, i, p, vq);
    let positive = dot(&query, &at(z_key, i, q, vk)) / cfg.eta;
    let mut logits = vec![positive];
    for j in 0..n {
        for v in 0..vk {
            let same_clip = j == i;
            if same_clip && (v == q || !cfg.include_same_clip_other_view_as_negative) {
                continue;
            }
            logits.push(dot(&query, &at(z_key, j, v, vk)) / cfg.eta);
        }
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(lse - positive)
}

/// SoftInfoNCE by direct summation over clips and view pairs.
pub fn soft_info_nce(batch: &BatchEmbeddings, affinities: &[AffinityMatrix], cfg: &LossConfig) -> Result<f64> {
    let n = batch.clips();
    if affinities.len() != n || batch.z_a.shape()[1] != 2 {
        return Err(Error::shape("soft_info_nce", &[&[affinities.len(), 2, 2], batch.z_a.shape()]));
    }
    let mut dirs = 0;
    let mut total = 0.0;
    if matches!(cfg.direction, Direction::AudioToVideo | Direction::Both) {
        dirs += 1;
        for (i, lam) in affinities.iter().enumerate() {
            for p in 0..2 {
                for q in 0..2 {
                    total += lam.get(p, q) * info_nce_term(&batch.z_a, &batch.z_v, i, p, q, cfg)?;
                }
            }
        }
    }
    if matches!(cfg.direction, Direction::VideoToAudio | Direction::Both) {
        dirs += 1;
        for (i, lam) in affinities.iter().enumerate() {
            for p in 0..2 {
                for q in 0..2 {
                    total += lam.get(p, q) * info_nce_term(&batch.z_v, &batch.z_a, i, q, p, cfg)?;
                }
            }
        }
    }
    Ok(total / (n * dirs) as f64)
}

/// Single-view InfoNCE on view 0 of each modality.
pub fn vanilla_info_nce(batch: &BatchEmbeddings, cfg: &LossConfig) -> Result<f64> {
    let za = view_of(&batch.z_a, 0)?;
    let zv = view_of(&batch.z_v, 0)?;
    let n = za.shape()[0];
    let single = |z: &Tensor| z.reshaped(&[n, 1, z.shape()[1]]);
    let (za, zv) = (single(&za)?, single(&zv)?);
    let mut dirs = 0;
    let mut total = 0.0;
    if matches!(cfg.direction, Direction::AudioToVideo | Direction::Both) {
        dirs += 1;
        for i in 0..n {
            total += info_nce_term(&za, &zv, i, 0, 0, cfg)?;
        }
    }
    if matches!(cfg.direction, Direction::VideoToAudio | Direction::Both) {
        dirs += 1;
        for i in 0..n {
            total += info_nce_term(&zv, &za, i, 0, 0, cfg)?;
        }
    }
    Ok(total / (n * dirs) as f64)
}

/// `λ` for one clip from its `2 x repr_dim` audio and video representations.
pub fn cross_affinity(y_a_views: &Tensor, y_v_views: &Tensor, mapping: &Mapping) -> Result<AffinityMatrix> {
    if y_a_views.rank() != 2 || y_a_views.shape() != y_v_views.shape() || y_a_views.shape()[0] != 2 {
        return Err(Error::shape("cross_affinity", &[y_a_views.shape(), y_v_views.shape()]));
    }
    let d = y_a_views.shape()[1];
    let mut tape = Tape::new();
    let bound = mapping.bind(&mut tape, false, &mut Vec::new())?;
    let row = |tape: &mut Tape, t: &Tensor, r: usize| tape.constant(Tensor::raw(vec![1, d], t.row(r).to_vec()));
    let ya = [row(&mut tape, y_a_views, 0), row(&mut tape, y_a_views, 1)];
    let yv = [row(&mut tape, y_v_views, 0), row(&mut tape, y_v_views, 1)];
    let lam = affinity_tape(&mut tape, &ya, &yv, &bound)?;
    Ok(AffinityMatrix::from_rows(tape.value(lam))?[0])
}

/// `λ` for every clip of a batch.
pub fn batch_affinities(batch: &BatchEmbeddings, mapping: &Mapping) -> Result<Vec<AffinityMatrix>> {
    let mut tape = Tape::new();
    let bound = mapping.bind(&mut tape, false, &mut Vec::new())?;
    let ya = [
        tape.constant(view_of(&batch.y_a, 0)?),
        tape.constant(view_of(&batch.y_a, 1)?),
    ];
    let yv = [
        tape.constant(view_of(&batch.y_v, 0)?),
        tape.constant(view_of(&batch.y_v, 1)?),
    ];
    let lam = affinity_tape(&mut tape, &ya, &yv, &bound)?;
    AffinityMatrix::from_rows(tape.value(lam))
}
