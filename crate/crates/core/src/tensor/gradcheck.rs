use crate::scalar::Scalar;

use super::{ParamStore, Tape, Tensor, TensorError, Var};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

fn relative_error<S: Scalar>(analytic: S, numeric: S) -> S {
    (analytic - numeric).abs() / S::one().max(analytic.abs())
}

fn eval_scalar<S, E>(f: &impl Fn(&mut Tape<S>, Var) -> Result<Var, E>, x: Tensor<S>) -> Result<S, E>
where
    S: Scalar,
    E: From<TensorError>,
{
    let mut tape = Tape::new();
    let xv = tape.input(x);
    let out = f(&mut tape, xv)?;
    let v = tape.value(out).item()?;
    if !v.is_finite() {
        return Err(TensorError::NonFinite("finite-difference evaluation".into()).into());
    }
    Ok(v)
}

/// Max over coordinates of `|analytic - central difference| / max(1, |analytic|)`
/// for a scalar function of one tensor.
pub fn finite_difference_check<S, E, F>(f: F, x: &Tensor<S>) -> Result<S, E>
where
    S: Scalar,
    E: From<TensorError>,
    F: Fn(&mut Tape<S>, Var) -> Result<Var, E>,
{
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .wrt(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let h = S::lit(FD_STEP);
    let mut worst = S::zero();
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] = plus.data()[i] + h;
        let mut minus = x.clone();
        minus.data_mut()[i] = minus.data()[i] - h;
        let numeric = (eval_scalar(&f, plus)? - eval_scalar(&f, minus)?) / (h + h);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Same measure, taken over every coordinate of the named trainable
/// parameters of `store`. `f` builds the scalar on a fresh tape.
pub fn finite_difference_check_params<S, E, F>(
    store: &ParamStore<S>,
    names: &[String],
    f: F,
) -> Result<S, E>
where
    S: Scalar,
    E: From<TensorError>,
    F: Fn(&mut Tape<S>, &ParamStore<S>) -> Result<Var, E>,
{
    let eval = |s: &ParamStore<S>| -> Result<S, E> {
        let mut tape = Tape::new();
        let out = f(&mut tape, s)?;
        let v = tape.value(out).item()?;
        if !v.is_finite() {
            return Err(TensorError::NonFinite("finite-difference evaluation".into()).into());
        }
        Ok(v)
    };
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let grads = tape.backward(out)?;

    let h = S::lit(FD_STEP);
    let mut worst = S::zero();
    let mut probe = store.clone();
    for name in names {
        let base = store
            .value(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.clone()))?
            .clone();
        let analytic = grads
            .get(name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(base.shape()));
        for i in 0..base.numel() {
            let orig = base.data()[i];
            probe.get_mut(name).expect("present").value.data_mut()[i] = orig + h;
            let fp = eval(&probe)?;
            probe.get_mut(name).expect("present").value.data_mut()[i] = orig - h;
            let fm = eval(&probe)?;
            probe.get_mut(name).expect("present").value.data_mut()[i] = orig;
            let numeric = (fp - fm) / (h + h);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn sum_has_exact_gradient() {
        let x = Tensor::matrix(2, 2, vec![0.3, -1.0, 2.0, 5.0]).unwrap();
        let err =
            finite_difference_check(|t: &mut Tape<f64>, v| Ok::<_, TensorError>(t.sum(v)), &x)
                .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn tanh_at_zero() {
        let x = Tensor::zeros(&[1, 4]);
        let f = |t: &mut Tape<f64>, v| {
            let y = t.tanh(v);
            Ok::<_, TensorError>(t.sum(y))
        };
        let err = finite_difference_check(f, &x).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn composite_matmul_tanh_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random(&mut rng, 3, 4);
        let r = random(&mut rng, 5, 4);
        let x = random(&mut rng, 5, 3);
        let f = |t: &mut Tape<f64>, v| {
            let wv = t.constant(w.clone());
            let rv = t.constant(r.clone());
            let h = t.matmul(v, wv)?;
            let h = t.tanh(h);
            let p = t.softmax_rows(h);
            let y = t.mul(p, rv)?;
            Ok::<_, TensorError>(t.sum(y))
        };
        let err = finite_difference_check(f, &x).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn non_finite_is_an_error() {
        let x = Tensor::full(&[1, 1], 0.0);
        let f = |t: &mut Tape<f64>, v| {
            let y = t.log(v);
            Ok::<_, TensorError>(t.sum(y))
        };
        assert!(finite_difference_check(f, &x).is_err());
    }
}
