//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Build a graph eagerly on a [`Tape`], then call [`Tape::backward`] on a
//! scalar node. [`grad_check`] compares the tape's gradients against
//! central finite differences.

mod op;
mod tape;

pub use op::Op;
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_GRAD_CHECK_EPS: f64 = 1e-6;

/// Maximum relative error between autodiff and central-difference gradients
/// of the scalar function `f` at `inputs`.
///
/// `f` receives a fresh tape and one var per input. The error for each
/// coordinate is `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("grad_check: eps must be positive"));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    check_finite(tape.value(root))?;
    let grads = tape.backward(root)?;

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let r = f(&mut t, &vs)?;
        check_finite(t.value(r))?;
        Ok(t.value(r).item())
    };

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("leaf gradient");
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn check_finite(t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("function value {:?}", t.data())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    /// Scalar head with fixed random coefficients so every output coordinate
    /// contributes a distinct weight.
    fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
        let shape = tape.value(v).shape().to_vec();
        let mut rng = Rng::new(seed);
        let w = tape.constant(random(&mut rng, &shape));
        let p = tape.mul(v, w)?;
        tape.sum_all(p)
    }

    fn check_unary(op: Op, shape: &[usize], positive: bool) {
        let mut rng = Rng::new(11);
        let mut x = random(&mut rng, shape);
        if positive {
            x = x.map(|v| v.abs() + 0.5);
        }
        let err = grad_check(
            |t, v| {
                let y = t.apply(op.clone(), &[v[0]])?;
                weighted_sum(t, y, 99)
            },
            &[x],
            DEFAULT_GRAD_CHECK_EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "{op:?}: {err}");
    }

    #[test]
    fn forward_examples() {
        let a = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let out = Op::MatMul.forward(&[&a, &Tensor::eye(2)]).unwrap();
        assert_eq!(out, a);

        let sm = Op::Softmax { axis: 0 }.forward(&[&Tensor::zeros(&[4])]).unwrap();
        assert_eq!(sm.data(), &[0.25; 4]);

        let n = Op::L2Normalize { axis: 0 }
            .forward(&[&Tensor::vector(vec![3.0, 4.0])])
            .unwrap();
        assert!((n.data()[0] - 0.6).abs() < 1e-15 && (n.data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn errors_name_the_op() {
        let a = Tensor::zeros(&[2, 3]);
        let err = Op::MatMul.forward(&[&a, &a]).unwrap_err();
        assert!(err.to_string().contains("matmul"));
        assert!(err.to_string().contains("[2, 3]"));
        let err = Op::Log.forward(&[&Tensor::vector(vec![1.0, 0.0])]).unwrap_err();
        assert!(matches!(err, Error::Domain { op: "log", .. }));
        let err = Op::L2Normalize { axis: 0 }
            .forward(&[&Tensor::zeros(&[3])])
            .unwrap_err();
        assert!(matches!(err, Error::Domain { .. }));
    }

    #[test]
    fn backward_square_sum() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sq = t.mul(x, x).unwrap();
        let r = t.sum_all(sq).unwrap();
        let g = t.backward(r).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn mean_of_softmax_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.3, -1.2, 2.0, 0.7]));
        let s = t.softmax(x, 0).unwrap();
        let r = t.mean_all(s).unwrap();
        let g = t.backward(r).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|v| v.abs() < 1e-16));
    }

    #[test]
    fn neg_log_softmax_first_matches_finite_differences() {
        // Oracle: central differences of -ln(e^x0 / (e^x0 + e^x1)) at [1, 0].
        let f = |x0: f64, x1: f64| -(x0.exp() / (x0.exp() + x1.exp())).ln();
        let eps = 1e-6;
        let n0 = (f(1.0 + eps, 0.0) - f(1.0 - eps, 0.0)) / (2.0 * eps);
        let n1 = (f(1.0, eps) - f(1.0, -eps)) / (2.0 * eps);
        assert!((n0 + 0.26894).abs() < 1e-5 && (n1 - 0.26894).abs() < 1e-5);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 0.0]));
        let s = t.softmax(x, 0).unwrap();
        let p = t.slice(s, 0, 0, 1).unwrap();
        let l = t.log(p).unwrap();
        let r = t.scale(l, -1.0).unwrap();
        let g = t.backward(r).unwrap();
        let g = g.get(x).unwrap().data();
        assert!((g[0] - n0).abs() < 1e-8 && (g[1] - n1).abs() < 1e-8);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[2]));
        assert!(matches!(t.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn grad_check_trivial_cases() {
        let mut rng = Rng::new(3);
        let x = random(&mut rng, &[3]);
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum_all(sq)
            },
            &[x.clone()],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
        let err = grad_check(|t, _| Ok(t.constant(Tensor::scalar(4.0))), &[x], 1e-6).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_every_unary_op() {
        check_unary(Op::Scale(-2.5), &[3, 4], false);
        check_unary(Op::Relu, &[3, 4], false);
        check_unary(Op::Exp, &[3, 4], false);
        check_unary(Op::Log, &[3, 4], true);
        for axis in 0..3 {
            check_unary(Op::Softmax { axis }, &[2, 3, 4], false);
            check_unary(Op::LogSoftmax { axis }, &[2, 3, 4], false);
            check_unary(Op::L2Normalize { axis }, &[2, 3, 4], false);
            check_unary(Op::Sum { axis: Some(axis) }, &[2, 3, 4], false);
            check_unary(Op::Mean { axis: Some(axis) }, &[2, 3, 4], false);
        }
        check_unary(Op::Sum { axis: None }, &[3, 2], false);
        check_unary(Op::Mean { axis: None }, &[3, 2], false);
        check_unary(Op::Transpose, &[3, 5], false);
        check_unary(Op::Slice { axis: 1, start: 1, end: 3 }, &[3, 4, 2], false);
        check_unary(Op::Reshape(vec![6, 2]), &[3, 4], false);
    }

    #[test]
    fn grad_check_binary_and_concat_ops() {
        let mut rng = Rng::new(5);
        let cases: Vec<(Op, Vec<usize>, Vec<usize>)> = vec![
            (Op::MatMul, vec![3, 4], vec![4, 2]),
            (Op::Add, vec![3, 4], vec![3, 4]),
            (Op::Add, vec![3, 4], vec![4]),
            (Op::Sub, vec![3, 4], vec![3, 1]),
            (Op::Mul, vec![2, 3, 4], vec![1, 3, 1]),
            (Op::Mul, vec![3, 4], vec![3, 4]),
            (Op::Concat { axis: 0 }, vec![2, 3], vec![4, 3]),
            (Op::Concat { axis: 1 }, vec![2, 3], vec![2, 1]),
        ];
        for (op, sa, sb) in cases {
            let a = random(&mut rng, &sa);
            let b = random(&mut rng, &sb);
            let err = grad_check(
                |t, v| {
                    let y = t.apply(op.clone(), &[v[0], v[1]])?;
                    weighted_sum(t, y, 7)
                },
                &[a, b],
                DEFAULT_GRAD_CHECK_EPS,
            )
            .unwrap();
            assert!(err < 1e-6, "{op:?}: {err}");
        }
    }

    #[test]
    fn backward_is_linear_over_independent_subgraphs() {
        let x0 = Tensor::vector(vec![0.4, -0.9, 1.3]);
        let f = |t: &mut Tape, x: Var| -> Result<Var> {
            let e = t.exp(x)?;
            t.sum_all(e)
        };
        let g = |t: &mut Tape, x: Var| -> Result<Var> {
            let s = t.softmax(x, 0)?;
            let sq = t.mul(s, x)?;
            t.sum_all(sq)
        };
        let grad_of = |which: u8| {
            let mut t = Tape::new();
            let x = t.leaf(x0.clone());
            let r = match which {
                0 => f(&mut t, x).unwrap(),
                1 => g(&mut t, x).unwrap(),
                _ => {
                    let a = f(&mut t, x).unwrap();
                    let b = g(&mut t, x).unwrap();
                    t.add(a, b).unwrap()
                }
            };
            t.backward(r).unwrap().get(x).unwrap().clone()
        };
        let (gf, gg, gsum) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..3 {
            assert_eq!(gsum.data()[i], gf.data()[i] + gg.data()[i]);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let x = t.leaf(Tensor::vector(vec![3.0, 4.0]));
        let p = t.mul(c, x).unwrap();
        let r = t.sum_all(p).unwrap();
        let g = t.backward(r).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 2.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(-30.0f64..30.0, n)
        }

        proptest! {
            #[test]
            fn softmax_rows_are_distributions(v in values(12)) {
                let x = Tensor::new(vec![3, 4], v).unwrap();
                let s = Op::Softmax { axis: 1 }.forward(&[&x]).unwrap();
                for r in 0..3 {
                    let row = s.row(r);
                    prop_assert!(row.iter().all(|&p| p > 0.0));
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }

            #[test]
            fn l2_normalize_gives_unit_rows(v in values(12)) {
                let x = Tensor::new(vec![4, 3], v).unwrap();
                prop_assume!((0..4).all(|r| x.row(r).iter().any(|a| a.abs() > 1e-3)));
                let n = Op::L2Normalize { axis: 1 }.forward(&[&x]).unwrap();
                for r in 0..4 {
                    let norm: f64 = n.row(r).iter().map(|a| a * a).sum::<f64>().sqrt();
                    prop_assert!((norm - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
