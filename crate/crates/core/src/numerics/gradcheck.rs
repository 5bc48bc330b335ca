//! Central-difference oracle for tape gradients.

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn check_eps(eps: f32) -> Result<()> {
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(Error::config(format!("finite-difference eps {eps} outside [1e-5, 1e-2]")));
    }
    Ok(())
}

fn finite_scalar(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(Error::Tape(format!("function must return a scalar, got {:?}", t.shape())));
    }
    let s = t.data()[0];
    if !s.is_finite() {
        return Err(Error::NonFinite(format!("function value {s}")));
    }
    Ok(s as f64)
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Max over coordinates of `|analytic − central difference| / max(1, |analytic|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f32) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_diff_check_masked(f, x, eps, |_| true)
}

/// Like [`finite_diff_check`] but only over coordinates where `include(i)`.
pub fn finite_diff_check_masked<F, M>(f: F, x: &Tensor, eps: f32, include: M) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
    M: Fn(usize) -> bool,
{
    check_eps(eps)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = f(&mut tape, xv)?;
    finite_scalar(&tape, out)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let eval = |probe: Tensor| -> Result<f64> {
        let mut t = Tape::inference();
        let v = t.leaf(probe);
        let out = f(&mut t, v)?;
        finite_scalar(&t, out)
    };

    let mut worst = 0.0f64;
    for i in (0..x.numel()).filter(|&i| include(i)) {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        // Use the actually representable step.
        let h = plus.data()[i] as f64 - minus.data()[i] as f64;
        let numeric = (eval(plus)? - eval(minus)?) / h;
        worst = worst.max(rel_err(analytic.data()[i] as f64, numeric));
    }
    Ok(worst)
}

/// Checks the tape gradient of one stored parameter. When `max_coords` is
/// set, an evenly strided subset of coordinates is probed.
pub fn param_finite_diff_check<F>(
    store: &ParamStore,
    id: ParamId,
    eps: f32,
    max_coords: Option<usize>,
    f: F,
) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    check_eps(eps)?;
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    finite_scalar(&tape, out)?;
    tape.backward(out)?;
    let grads = tape.param_grads(store);
    let n = store.get(id).numel();
    let analytic = grads
        .get(id)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(store.get(id).shape().to_vec()));
    drop(tape);

    let stride = match max_coords {
        Some(m) if m > 0 && m < n => n.div_ceil(m),
        _ => 1,
    };
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for i in (0..n).step_by(stride) {
        let orig = store.get(id).data()[i];
        probe.get_mut(id).data_mut()[i] = orig + eps;
        let hi = probe.get(id).data()[i];
        let fp = {
            let mut t = Tape::inference();
            let v = f(&mut t, &probe)?;
            finite_scalar(&t, v)?
        };
        probe.get_mut(id).data_mut()[i] = orig - eps;
        let lo = probe.get(id).data()[i];
        let fm = {
            let mut t = Tape::inference();
            let v = f(&mut t, &probe)?;
            finite_scalar(&t, v)?
        };
        probe.get_mut(id).data_mut()[i] = orig;
        let numeric = (fp - fm) / (hi as f64 - lo as f64);
        worst = worst.max(rel_err(analytic.data()[i] as f64, numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform([3, 4], -2.0, 2.0, &mut rng);
        let err = finite_diff_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-2,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn sigmoid_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::uniform([10], -1.0, 1.0, &mut rng);
        let err = finite_diff_check(
            |t, x| {
                let s = t.sigmoid(x);
                Ok(t.sum(s))
            },
            &x,
            1e-2,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn eps_range_enforced() {
        let x = Tensor::from_vec(vec![1.0]);
        assert!(finite_diff_check(|t, x| Ok(t.sum(x)), &x, 1.0).is_err());
        assert!(finite_diff_check(|t, x| Ok(t.sum(x)), &x, 1e-7).is_err());
    }

    #[test]
    fn non_finite_function_rejected() {
        let x = Tensor::from_vec(vec![f32::INFINITY]);
        let err = finite_diff_check(|t, x| Ok(t.sum(x)), &x, 1e-3).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }
}
