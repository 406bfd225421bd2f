//! Central finite-difference oracles for tape gradients.

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn rel_err<T: Scalar>(analytic: T, numeric: T) -> f64 {
    let a = analytic.to_f64_lossy();
    let n = numeric.to_f64_lossy();
    (a - n).abs() / a.abs().max(1.0)
}

fn eval_scalar<T: Scalar>(f: &impl Fn(&mut Tape<T>, Var) -> Result<Var>, x: &Tensor<T>) -> Result<T> {
    let mut tape = Tape::inference();
    let v = tape.leaf(x.clone(), false)?;
    let out = f(&mut tape, v)?;
    let value = tape.value(out);
    if !value.is_scalar() {
        return Err(Error::NonScalarLoss(value.shape().to_vec()));
    }
    Ok(value.item())
}

/// Max over coordinates of `|analytic − central difference| / max(1, |analytic|)`
/// for a scalar function of one tensor.
pub fn gradient_check<T, F>(f: F, x: &Tensor<T>, h: T) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    if h <= T::zero() {
        return Err(Error::Contract("finite-difference step must be positive".into()));
    }
    let first = eval_scalar(&f, x)?;
    let second = eval_scalar(&f, x)?;
    if first.to_f64_lossy().to_bits() != second.to_f64_lossy().to_bits() {
        return Err(Error::OracleInvalid(first.to_f64_lossy(), second.to_f64_lossy()));
    }

    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true)?;
    let out = f(&mut tape, v)?;
    tape.backward(out)?;
    let analytic = tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let two_h = h + h;
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        worst = worst.max(rel_err(analytic.data()[i], (plus - minus) / two_h));
    }
    Ok(worst)
}

/// Per-parameter max relative error for a loss built from `store`.
///
/// `loss` must be deterministic; it is evaluated `2·(number of scalars) + 3`
/// times, so keep the model small.
pub fn check_param_gradients<T, F>(store: &ParamStore<T>, loss: F, h: T) -> Result<Vec<(String, f64)>>
where
    T: Scalar,
    F: Fn(&ParamStore<T>, &mut Tape<T>) -> Result<Var>,
{
    let value_of = |s: &ParamStore<T>| -> Result<T> {
        let mut tape = Tape::inference();
        let out = loss(s, &mut tape)?;
        Ok(tape.value(out).item())
    };
    let a = value_of(store)?;
    let b = value_of(store)?;
    if a.to_f64_lossy().to_bits() != b.to_f64_lossy().to_bits() {
        return Err(Error::OracleInvalid(a.to_f64_lossy(), b.to_f64_lossy()));
    }

    let mut with_grads = store.clone();
    with_grads.zero_grads();
    let mut tape = Tape::new();
    let out = loss(&with_grads, &mut tape)?;
    tape.backward(out)?;
    tape.accumulate_param_grads(&mut with_grads)?;

    let two_h = h + h;
    let mut probe = store.clone();
    let mut report = Vec::with_capacity(store.len());
    for (id, p) in store.iter() {
        let analytic = with_grads.get(id).grad.clone().unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        let mut worst = 0.0f64;
        for i in 0..p.value.len() {
            let orig = p.value.data()[i];
            probe.get_mut(id).value.data_mut()[i] = orig + h;
            let plus = value_of(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig - h;
            let minus = value_of(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig;
            worst = worst.max(rel_err(analytic.data()[i], (plus - minus) / two_h));
        }
        report.push((p.name.clone(), worst));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let sq = |t: &mut Tape<f64>, v: Var| {
            let s = t.mul(v, v)?;
            t.sum(s)
        };
        let err = gradient_check(sq, &x, 1e-5).unwrap();
        assert!(err < 1e-7, "{err}");

        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), true).unwrap();
        let out = sq(&mut tape, v).unwrap();
        tape.backward(out).unwrap();
        assert_eq!(tape.grad(v).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::new(vec![2], vec![0.3, -0.1]).unwrap();
        let err = gradient_check(|t: &mut Tape<f64>, _| t.constant(Tensor::scalar(4.0)), &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        let calls = Cell::new(0.0);
        let f = |t: &mut Tape<f64>, v: Var| {
            calls.set(calls.get() + 1.0);
            let s = t.sum(v)?;
            t.scale(s, calls.get())
        };
        let x = Tensor::new(vec![1], vec![1.0]).unwrap();
        assert!(matches!(gradient_check(f, &x, 1e-5), Err(Error::OracleInvalid(..))));
    }
}
