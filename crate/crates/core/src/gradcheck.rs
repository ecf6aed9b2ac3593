//! Central-difference gradient checking.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Seed given to every tape built during a check, so stochastic ops
/// (dropout) draw identical masks on every evaluation.
pub const GRAD_CHECK_SEED: u64 = 0x6772_6164;

/// Largest relative disagreement between the tape gradient of `f` at `x`
/// and central differences with step `eps`:
/// `max_i |a_i - n_i| / max(1e-8, |a_i| + |n_i|)`.
///
/// `f` receives a fresh tape and the leaf holding `x`, and must return a
/// one-element result.
pub fn grad_check<F, Func>(f: Func, x: &Tensor<F>, eps: F) -> Result<F>
where
    F: Float,
    Func: Fn(&mut Tape<F>, Var) -> Result<Var>,
{
    if !(eps > F::zero()) {
        return Err(Error::Parameter("grad_check eps must be positive".into()));
    }
    let eval = |point: Tensor<F>| -> Result<F> {
        let mut tape = Tape::new(GRAD_CHECK_SEED);
        let leaf = tape.param(point);
        let out = f(&mut tape, leaf)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new(GRAD_CHECK_SEED);
    let leaf = tape.param(x.clone());
    let out = f(&mut tape, leaf)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;
    let analytic = grads.get(leaf).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let two_eps = eps + eps;
    let floor = F::from_f64_lossy(1e-8);
    let mut worst = F::zero();
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / two_eps;
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(floor);
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn scalar_of<F: Float>(tape: &Tape<F>, v: Var) -> Result<F> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check function must return a scalar, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let w = Tensor::<f64>::new(vec![3, 1], vec![0.5, -1.0, 2.0]).unwrap();
        let x = Tensor::<f64>::new(vec![2, 3], vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]).unwrap();
        let err = grad_check(
            |tape, x| {
                let w = tape.constant(w.clone());
                let y = tape.matmul(x, w)?;
                tape.sum(y)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn non_scalar_output_is_contract_error() {
        let x = Tensor::<f64>::zeros(&[2]);
        let r = grad_check(|_, x| Ok(x), &x, 1e-3);
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
