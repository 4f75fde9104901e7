//! Finite-difference verification of analytic gradients. Runs at 64-bit
//! precision; the default probe step is 1e-5.

use super::{NumericsError, Tape, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Compare the tape gradient of a scalar-valued function against central
/// finite differences, coordinate by coordinate, over every parameter.
///
/// Returns the max over coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`. Errors when the function
/// value is non-finite at any probe point.
pub fn grad_check<F>(params: &[Tensor<f64>], step: f64, f: F) -> Result<f64, NumericsError>
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Var<f64>,
{
    let eval = |thetas: &[Tensor<f64>]| -> Result<f64, NumericsError> {
        let tape = Tape::new();
        let vars: Vec<Var<f64>> = thetas.iter().map(|t| tape.param(t.clone())).collect();
        let y = f(&tape, &vars);
        let v = y.value();
        assert_eq!(v.len(), 1, "grad_check requires a scalar-valued function");
        let x = v.data()[0];
        if !x.is_finite() {
            return Err(NumericsError::NonFinite { context: "grad_check probe" });
        }
        Ok(x)
    };

    // Analytic gradients at the base point.
    let tape = Tape::new();
    let vars: Vec<Var<f64>> = params.iter().map(|t| tape.param(t.clone())).collect();
    let y = f(&tape, &vars);
    assert_eq!(y.value().len(), 1, "grad_check requires a scalar-valued function");
    if !y.value().data()[0].is_finite() {
        return Err(NumericsError::NonFinite { context: "grad_check base point" });
    }
    let grads = y.backward()?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| grads.wrt(v)).collect();

    let mut max_err = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        for ci in 0..p.len() {
            let mut plus: Vec<Tensor<f64>> = params.to_vec();
            let mut minus: Vec<Tensor<f64>> = params.to_vec();
            plus[pi].data_mut()[ci] += step;
            minus[pi].data_mut()[ci] -= step;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let a = analytic[pi].data()[ci];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ef;
    use crate::seeding;
    use rand::Rng;

    #[test]
    fn quadratic_has_near_zero_error() {
        let x = Tensor::from_f64(vec![1], &[3.0]).unwrap();
        let err = grad_check(&[x], DEFAULT_STEP, |_, vars| vars[0].square()).unwrap();
        assert!(err < 1e-9, "err = {err}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::from_f64(vec![3], &[1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(&[x], DEFAULT_STEP, |tape, vars| {
            let zero = tape.constant(Tensor::zeros(vec![3]));
            vars[0].mul(&zero).sum_all()
        })
        .unwrap();
        assert!(err < 1e-12);
    }

    #[test]
    fn every_primitive_op_passes_on_random_inputs() {
        for seed in 0..20u64 {
            let mut rng = seeding::rng(seed, "opcheck", 0);
            let mut rnd = |shape: Vec<usize>, lo: f64, hi: f64| -> Tensor<f64> {
                let n: usize = shape.iter().product();
                Tensor::from_f64(shape, &(0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>()).unwrap()
            };

            let a = rnd(vec![3, 4], -2.0, 2.0);
            let b = rnd(vec![3, 4], -2.0, 2.0);
            let err = grad_check(&[a, b], DEFAULT_STEP, |_, v| v[0].mul(&v[1]).add(&v[0]).sub(&v[1]).sum_all()).unwrap();
            assert!(err < 1e-4, "elementwise err {err}");

            let a = rnd(vec![2, 3], -1.0, 1.0);
            let b = rnd(vec![3, 4], -1.0, 1.0);
            let err = grad_check(&[a, b], DEFAULT_STEP, |_, v| v[0].matmul(&v[1]).sum_all()).unwrap();
            assert!(err < 1e-4, "matmul err {err}");

            let a = rnd(vec![2, 3], -1.0, 1.0);
            let b = rnd(vec![4, 3], -1.0, 1.0);
            let err = grad_check(&[a, b], DEFAULT_STEP, |_, v| v[0].matmul_nt(&v[1]).mean_all()).unwrap();
            assert!(err < 1e-4, "matmul_nt err {err}");

            let x = rnd(vec![3, 5], -1.0, 1.0);
            let w = rnd(vec![5, 2], -1.0, 1.0);
            let bb = rnd(vec![2], -1.0, 1.0);
            let err = grad_check(&[x, w, bb], DEFAULT_STEP, |_, v| v[0].affine(&v[1], &v[2]).sum_all()).unwrap();
            assert!(err < 1e-4, "affine err {err}");

            let x = rnd(vec![2, 2, 5, 5], -1.0, 1.0);
            let w = rnd(vec![3, 2, 3, 3], -1.0, 1.0);
            let bb = rnd(vec![3], -0.5, 0.5);
            let err = grad_check(&[x, w, bb], DEFAULT_STEP, |_, v| {
                v[0].conv2d(&v[1], &v[2], (2, 1), (1, 1)).relu().sum_all()
            })
            .unwrap();
            assert!(err < 1e-4, "conv2d err {err}");

            // keep activations away from the relu kink
            let x = rnd(vec![6], 0.2, 1.5);
            let err = grad_check(&[x], DEFAULT_STEP, |_, v| {
                v[0].relu().sigmoid().ln_().exp_().tanh_act().sum_all()
            })
            .unwrap();
            assert!(err < 1e-4, "activation chain err {err}");

            let x = rnd(vec![3, 4], -3.0, 3.0);
            let err = grad_check(&[x], DEFAULT_STEP, |_, v| v[0].logsumexp_rows().sum_all()).unwrap();
            assert!(err < 1e-4, "logsumexp err {err}");

            let a = rnd(vec![5], -1.0, 1.0);
            let b = rnd(vec![5], -1.0, 1.0);
            let err = grad_check(&[a, b], DEFAULT_STEP, |_, v| v[0].dot(&v[1])).unwrap();
            assert!(err < 1e-4, "dot err {err}");

            let x = rnd(vec![3, 4], 0.3, 1.5);
            let err = grad_check(&[x], DEFAULT_STEP, |_, v| {
                let n = v[0].l2_normalize_rows().unwrap();
                n.row_sum().mean_all()
            })
            .unwrap();
            assert!(err < 1e-4, "l2_normalize err {err}");

            let a = rnd(vec![2, 3], -1.0, 1.0);
            let b = rnd(vec![2, 2], -1.0, 1.0);
            let err = grad_check(&[a, b], DEFAULT_STEP, |_, v| {
                v[0].concat_cols(&v[1]).slice_cols(1, 3).sum_all()
            })
            .unwrap();
            assert!(err < 1e-4, "concat/slice err {err}");

            let a = rnd(vec![2, 3], -1.0, 1.0);
            let b = rnd(vec![1, 3], -1.0, 1.0);
            let err = grad_check(&[a, b], DEFAULT_STEP, |_, v| v[0].concat_rows(&v[1]).mean_all()).unwrap();
            assert!(err < 1e-4, "concat_rows err {err}");

            let x = rnd(vec![4], -1.0, 1.0);
            let err = grad_check(&[x], DEFAULT_STEP, |_, v| v[0].broadcast_col(3).mul_scalar(0.5).sum_all()).unwrap();
            assert!(err < 1e-4, "broadcast err {err}");

            let x = rnd(vec![3, 4], -1.0, 1.0);
            let err = grad_check(&[x], DEFAULT_STEP, |_, v| v[0].select_cols(&[1, 3, 0]).sum_all()).unwrap();
            assert!(err < 1e-4, "select err {err}");

            // clamp/minimum probed away from their kinks
            let a = rnd(vec![4], -0.4, 0.4);
            let b = rnd(vec![4], 0.6, 1.4);
            let err = grad_check(&[a, b], DEFAULT_STEP, |_, v| {
                v[0].clamp(-0.5, 0.5).minimum(&v[1]).sum_all()
            })
            .unwrap();
            assert!(err < 1e-4, "clamp/min err {err}");
        }
    }

    #[test]
    fn composition_matches_chain_rule() {
        // d/dx of f(g(x)) with f = sum of squares, g = sigmoid
        for seed in 0..20u64 {
            let mut rng = seeding::rng(seed, "chain", 1);
            let x =
                Tensor::from_f64(vec![6], &(0..6).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>()).unwrap();
            let err = grad_check(&[x], DEFAULT_STEP, |_, v| v[0].sigmoid().square().sum_all()).unwrap();
            assert!(err < 1e-4);
        }
    }

    #[test]
    fn nonfinite_loss_is_an_error() {
        let x = Tensor::from_f64(vec![1], &[-1.0]).unwrap();
        // ln of a negative number is NaN
        let r = grad_check(&[x], DEFAULT_STEP, |_, v| v[0].ln_());
        assert!(r.is_err());
        let _ = ef::<f64>(0.0);
    }
}
