//! Finite-difference verification of reverse-mode gradients.

use crate::tape::{Tape, TensorId};
use crate::tensor::{Tensor, TensorError, TensorResult};

/// Compare the tape gradient of a scalar-valued function against central
/// differences `(f(x+h) - f(x-h)) / 2h`, elementwise over `x`. Returns the
/// maximum over elements of `|analytic - numeric| / max(1, |numeric|)`.
pub fn finite_diff_check<F>(f: F, x0: &Tensor, h: f64) -> TensorResult<f64>
where
    F: Fn(&mut Tape, TensorId) -> TensorResult<TensorId>,
{
    let all: Vec<usize> = (0..x0.numel()).collect();
    finite_diff_check_at(f, x0, h, &all)
}

/// Same as [`finite_diff_check`] but restricted to the given elements of `x`.
/// The analytic gradient is still produced by one full backward pass.
pub fn finite_diff_check_at<F>(f: F, x0: &Tensor, h: f64, elements: &[usize]) -> TensorResult<f64>
where
    F: Fn(&mut Tape, TensorId) -> TensorResult<TensorId>,
{
    let mut tape = Tape::new();
    let mut leaf_val = x0.clone();
    leaf_val.requires_grad = true;
    let x = tape.leaf(&leaf_val);
    let y = f(&mut tape, x)?;
    if !tape.value(y).is_scalar() {
        return Err(TensorError::InvalidArgument(format!(
            "finite_diff_check needs a scalar-valued function, got shape {:?}",
            tape.value(y).shape
        )));
    }
    tape.backward(y)?;
    let analytic: Vec<f64> = tape
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x0.numel()]);

    let eval = |data: &Tensor| -> TensorResult<f64> {
        let mut t = Tape::new();
        let xid = t.constant(data.clone());
        let yid = f(&mut t, xid)?;
        Ok(t.value(yid).item())
    };

    let mut max_err = 0.0f64;
    let mut probe = x0.clone();
    probe.requires_grad = false;
    for &i in elements {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
