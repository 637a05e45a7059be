//! Operation kinds: forward kernels and vector-Jacobian products.

use crate::error::{Error, Result};
use crate::tensor::{axis_split, check_axis, matmul_raw, MatLayout, Tensor};

/// Every differentiable operation the tape can record.
///
/// `Add`, `Sub` and `Mul` broadcast their right operand: it may have lower
/// rank (aligned to trailing axes) or size-1 axes. The left operand always
/// fixes the output shape.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    MatMul,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Relu,
    Exp,
    Log,
    Softmax { axis: usize },
    LogSoftmax { axis: usize },
    L2Normalize { axis: usize },
    /// `None` reduces over every element to shape `[1]`.
    Sum { axis: Option<usize> },
    Mean { axis: Option<usize> },
    Transpose,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    Reshape(Vec<usize>),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Relu => "relu",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Transpose => "transpose",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
        }
    }

    fn check_arity(&self, n: usize) -> Result<()> {
        let ok = match self {
            Op::MatMul | Op::Add | Op::Sub | Op::Mul => n == 2,
            Op::Concat { .. } => n >= 1,
            _ => n == 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("{}: wrong number of inputs ({n})", self.name())))
        }
    }

    pub fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        self.check_arity(inputs.len())?;
        let x = inputs[0];
        match self {
            Op::MatMul => {
                let b = inputs[1];
                let (m, k, n) = matmul_dims(x, b)?;
                Ok(Tensor::raw(
                    vec![m, n],
                    matmul_raw(x.data(), b.data(), m, k, n, MatLayout::NN),
                ))
            }
            Op::Add => broadcast_binary("add", x, inputs[1], |a, b| a + b),
            Op::Sub => broadcast_binary("sub", x, inputs[1], |a, b| a - b),
            Op::Mul => broadcast_binary("mul", x, inputs[1], |a, b| a * b),
            Op::Scale(c) => Ok(x.map(|v| v * c)),
            Op::Relu => Ok(x.map(|v| v.max(0.0))),
            Op::Exp => Ok(x.map(f64::exp)),
            Op::Log => {
                if let Some(bad) = x.data().iter().find(|&&v| !(v > 0.0)) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: format!("non-positive input {bad}"),
                    });
                }
                Ok(x.map(f64::ln))
            }
            Op::Softmax { axis } => {
                check_axis("softmax", x.shape(), *axis)?;
                Ok(softmax_along(x, *axis, false))
            }
            Op::LogSoftmax { axis } => {
                check_axis("log_softmax", x.shape(), *axis)?;
                Ok(softmax_along(x, *axis, true))
            }
            Op::L2Normalize { axis } => {
                check_axis("l2_normalize", x.shape(), *axis)?;
                let norms = norms_along(x, *axis);
                if let Some(pos) = norms.iter().position(|&n| !(n > 0.0)) {
                    return Err(Error::Domain {
                        op: "l2_normalize",
                        detail: format!("zero-norm slice at position {pos}"),
                    });
                }
                let (outer, len, inner) = axis_split(x.shape(), *axis);
                let mut out = x.data().to_vec();
                for o in 0..outer {
                    for i in 0..inner {
                        let n = norms[o * inner + i];
                        for j in 0..len {
                            out[(o * len + j) * inner + i] /= n;
                        }
                    }
                }
                Ok(Tensor::raw(x.shape().to_vec(), out))
            }
            Op::Sum { axis } => reduce_sum("sum", x, *axis, false),
            Op::Mean { axis } => reduce_sum("mean", x, *axis, true),
            Op::Transpose => {
                if x.rank() != 2 {
                    return Err(Error::shape("transpose", &[x.shape()]));
                }
                Ok(transpose(x))
            }
            Op::Concat { axis } => concat(inputs, *axis),
            Op::Slice { axis, start, end } => {
                check_axis("slice", x.shape(), *axis)?;
                if start >= end || *end > x.shape()[*axis] {
                    return Err(Error::invalid(format!(
                        "slice: range {start}..{end} invalid for axis of size {}",
                        x.shape()[*axis]
                    )));
                }
                Ok(slice(x, *axis, *start, *end))
            }
            Op::Reshape(shape) => x.reshaped(shape),
        }
    }

    /// Gradients for each input given the upstream gradient of the output.
    /// Entries for inputs with `needs[i] == false` are left as `None`.
    pub(crate) fn vjp(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let one = |t: Tensor| vec![Some(t)];
        match self {
            Op::MatMul => {
                let b = inputs[1];
                let (m, k, n) = (x.shape()[0], x.shape()[1], b.shape()[1]);
                let da = needs[0].then(|| {
                    Tensor::raw(
                        vec![m, k],
                        matmul_raw(grad.data(), b.data(), m, n, k, MatLayout::NT),
                    )
                });
                let db = needs[1].then(|| {
                    Tensor::raw(
                        vec![k, n],
                        matmul_raw(x.data(), grad.data(), k, m, n, MatLayout::TN),
                    )
                });
                vec![da, db]
            }
            Op::Add => vec![
                needs[0].then(|| grad.clone()),
                needs[1].then(|| reduce_to(grad, inputs[1].shape())),
            ],
            Op::Sub => vec![
                needs[0].then(|| grad.clone()),
                needs[1].then(|| reduce_to(grad, inputs[1].shape()).map(|v| -v)),
            ],
            Op::Mul => {
                let b = inputs[1];
                let da = needs[0].then(|| {
                    broadcast_binary("mul", grad, b, |g, bv| g * bv).expect("shape checked")
                });
                let db = needs[1].then(|| {
                    let gx = Tensor::raw(
                        grad.shape().to_vec(),
                        grad.data().iter().zip(x.data()).map(|(g, a)| g * a).collect(),
                    );
                    reduce_to(&gx, b.shape())
                });
                vec![da, db]
            }
            Op::Scale(c) => one(grad.map(|g| g * c)),
            Op::Relu => one(zip_map(grad, x, |g, v| if v > 0.0 { g } else { 0.0 })),
            Op::Exp => one(zip_map(grad, output, |g, y| g * y)),
            Op::Log => one(zip_map(grad, x, |g, v| g / v)),
            Op::Softmax { axis } => {
                // dx = y * (g - <g, y>)
                let (outer, len, inner) = axis_split(x.shape(), *axis);
                let (g, y) = (grad.data(), output.data());
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                one(Tensor::raw(x.shape().to_vec(), dx))
            }
            Op::LogSoftmax { axis } => {
                // dx = g - softmax * sum(g)
                let (outer, len, inner) = axis_split(x.shape(), *axis);
                let (g, y) = (grad.data(), output.data());
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let total: f64 = (0..len).map(|j| g[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] = g[at(j)] - y[at(j)].exp() * total;
                        }
                    }
                }
                one(Tensor::raw(x.shape().to_vec(), dx))
            }
            Op::L2Normalize { axis } => {
                // dx = (g - y <g, y>) / |x|
                let norms = norms_along(x, *axis);
                let (outer, len, inner) = axis_split(x.shape(), *axis);
                let (g, y) = (grad.data(), output.data());
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let n = norms[o * inner + i];
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] = (g[at(j)] - y[at(j)] * dot) / n;
                        }
                    }
                }
                one(Tensor::raw(x.shape().to_vec(), dx))
            }
            Op::Sum { axis } => one(expand_reduced(grad, x.shape(), *axis, 1.0)),
            Op::Mean { axis } => {
                let count = match axis {
                    Some(a) => x.shape()[*a],
                    None => x.len(),
                };
                one(expand_reduced(grad, x.shape(), *axis, 1.0 / count as f64))
            }
            Op::Transpose => one(transpose(grad)),
            Op::Concat { axis } => {
                let mut start = 0;
                inputs
                    .iter()
                    .zip(needs)
                    .map(|(t, &need)| {
                        let end = start + t.shape()[*axis];
                        let piece = need.then(|| slice(grad, *axis, start, end));
                        start = end;
                        piece
                    })
                    .collect()
            }
            Op::Slice { axis, start, end } => {
                let (outer, len, inner) = axis_split(x.shape(), *axis);
                let width = end - start;
                let mut dx = vec![0.0; x.len()];
                let g = grad.data();
                for o in 0..outer {
                    for j in 0..width {
                        let src = (o * width + j) * inner;
                        let dst = (o * len + start + j) * inner;
                        dx[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
                    }
                }
                one(Tensor::raw(x.shape().to_vec(), dx))
            }
            Op::Reshape(_) => one(Tensor::raw(x.shape().to_vec(), grad.data().to_vec())),
        }
    }
}

fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape("matmul", &[a.shape(), b.shape()]));
    }
    Ok((a.shape()[0], a.shape()[1], b.shape()[1]))
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::raw(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

/// Strides of `rhs` viewed in `lhs` coordinates (zero on broadcast axes), or
/// `None` if `rhs` does not broadcast to `lhs`.
fn broadcast_strides(lhs: &[usize], rhs: &[usize]) -> Option<Vec<usize>> {
    if rhs.len() > lhs.len() {
        return None;
    }
    let pad = lhs.len() - rhs.len();
    let mut strides = vec![0; lhs.len()];
    let mut stride = 1;
    for ax in (0..lhs.len()).rev() {
        let dim = if ax < pad { 1 } else { rhs[ax - pad] };
        if dim == lhs[ax] {
            strides[ax] = if dim == 1 { 0 } else { stride };
        } else if dim != 1 {
            return None;
        }
        stride *= dim;
    }
    Some(strides)
}

/// Visit every lhs flat index with its broadcast rhs offset.
fn for_each_broadcast(lhs: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let total: usize = lhs.iter().product();
    let mut idx = vec![0usize; lhs.len()];
    let mut off = 0usize;
    for flat in 0..total {
        f(flat, off);
        for ax in (0..lhs.len()).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < lhs[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return Ok(zip_map(a, b, f));
    }
    let strides =
        broadcast_strides(a.shape(), b.shape()).ok_or_else(|| Error::shape(op, &[a.shape(), b.shape()]))?;
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; a.len()];
    for_each_broadcast(a.shape(), &strides, |i, j| out[i] = f(ad[i], bd[j]));
    Ok(Tensor::raw(a.shape().to_vec(), out))
}

/// Sum a broadcast gradient back down to the operand's own shape.
fn reduce_to(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let strides = broadcast_strides(grad.shape(), shape).expect("shape checked in forward");
    let g = grad.data();
    let mut out = vec![0.0; shape.iter().product()];
    for_each_broadcast(grad.shape(), &strides, |i, j| out[j] += g[i]);
    Tensor::raw(shape.to_vec(), out)
}

fn softmax_along(x: &Tensor, axis: usize, log: bool) -> Tensor {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| d[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = (0..len).map(|j| (d[at(j)] - max).exp()).sum();
            if log {
                let lse = total.ln();
                for j in 0..len {
                    out[at(j)] = d[at(j)] - max - lse;
                }
            } else {
                for j in 0..len {
                    out[at(j)] = (d[at(j)] - max).exp() / total;
                }
            }
        }
    }
    Tensor::raw(x.shape().to_vec(), out)
}

fn norms_along(x: &Tensor, axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let d = x.data();
    let mut norms = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let sq: f64 = (0..len)
                .map(|j| {
                    let v = d[(o * len + j) * inner + i];
                    v * v
                })
                .sum();
            norms[o * inner + i] = sq.sqrt();
        }
    }
    norms
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn reduce_sum(op: &'static str, x: &Tensor, axis: Option<usize>, mean: bool) -> Result<Tensor> {
    match axis {
        None => {
            let total: f64 = x.data().iter().sum();
            Ok(Tensor::scalar(if mean { total / x.len() as f64 } else { total }))
        }
        Some(axis) => {
            check_axis(op, x.shape(), axis)?;
            let (outer, len, inner) = axis_split(x.shape(), axis);
            let d = x.data();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for j in 0..len {
                    let row = &d[(o * len + j) * inner..(o * len + j + 1) * inner];
                    for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                        *acc += v;
                    }
                }
            }
            if mean {
                out.iter_mut().for_each(|v| *v /= len as f64);
            }
            Ok(Tensor::raw(reduced_shape(x.shape(), axis), out))
        }
    }
}

fn expand_reduced(grad: &Tensor, shape: &[usize], axis: Option<usize>, factor: f64) -> Tensor {
    match axis {
        None => Tensor::full(shape, grad.item() * factor),
        Some(axis) => {
            let (outer, len, inner) = axis_split(shape, axis);
            let g = grad.data();
            let mut out = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for j in 0..len {
                    let dst = (o * len + j) * inner;
                    for i in 0..inner {
                        out[dst + i] = g[o * inner + i] * factor;
                    }
                }
            }
            Tensor::raw(shape.to_vec(), out)
        }
    }
}

fn transpose(x: &Tensor) -> Tensor {
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let d = x.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    Tensor::raw(vec![c, r], out)
}

fn concat(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = inputs[0];
    check_axis("concat", first.shape(), axis)?;
    for t in &inputs[1..] {
        let compatible = t.rank() == first.rank()
            && t.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(ax, (a, b))| ax == axis || a == b);
        if !compatible {
            return Err(Error::shape("concat", &[first.shape(), t.shape()]));
        }
    }
    let total: usize = inputs.iter().map(|t| t.shape()[axis]).sum();
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    let (outer, _, inner) = axis_split(first.shape(), axis);
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for t in inputs {
            let width = t.shape()[axis] * inner;
            out.extend_from_slice(&t.data()[o * width..(o + 1) * width]);
        }
    }
    Ok(Tensor::raw(shape, out))
}

fn slice(x: &Tensor, axis: usize, start: usize, end: usize) -> Tensor {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let width = end - start;
    let d = x.data();
    let mut out = Vec::with_capacity(outer * width * inner);
    for o in 0..outer {
        let from = (o * len + start) * inner;
        out.extend_from_slice(&d[from..from + width * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = width;
    Tensor::raw(shape, out)
}
