//! Central-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};

use super::{ParamId, ParamStore, Tape, Tensor, Var};

/// Floor added to the finite-difference magnitude in the relative error.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat coordinate where the maximum was attained.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    fn fold(&mut self, idx: usize, analytic: f64, numeric: f64) {
        let err = (analytic - numeric).abs() / (numeric.abs() + REL_FLOOR);
        self.coords_checked += 1;
        if err > self.max_rel_error || self.coords_checked == 1 {
            self.max_rel_error = err;
            self.worst_index = idx;
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }

    fn empty() -> Self {
        Self {
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            coords_checked: 0,
        }
    }
}

/// Fixed weights used to reduce a tensor-valued op to a scalar.
fn probe_weights(n: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
    Tensor::row(&(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
}

fn reduce(tape: &mut Tape, out: Var) -> Result<Var> {
    let n = tape.value(out).numel();
    if n == 1 {
        return Ok(out);
    }
    let shape = tape.value(out).shape().to_vec();
    let w = tape.leaf(probe_weights(n).reshape(shape)?);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn eval(op: &dyn Fn(&mut Tape, Var) -> Result<Var>, point: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let out = op(&mut tape, x)?;
    let s = reduce(&mut tape, out)?;
    let v = tape.value(s).item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("op output {v} at perturbed point")));
    }
    Ok(v)
}

fn check_step(step: f64) -> Result<()> {
    if !(1e-6..=1e-3).contains(&step) {
        return Err(contract(format!("finite-difference step {step} outside [1e-6, 1e-3]")));
    }
    Ok(())
}

/// Max over coordinates of `|analytic - central| / (|central| + 1e-8)` for
/// the gradient of `op` (reduced to a scalar) at `point`.
pub fn check_gradient(
    op: &dyn Fn(&mut Tape, Var) -> Result<Var>,
    point: &Tensor,
    step: f64,
) -> Result<GradCheckReport> {
    check_step(step)?;
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let out = op(&mut tape, x)?;
    let s = reduce(&mut tape, out)?;
    if !tape.value(s).is_finite() {
        return Err(Error::NonFinite("op output at the base point".into()));
    }
    let analytic = tape.backward(s)?.wrt(&tape, x);
    if !analytic.is_finite() {
        return Err(Error::NonFinite("analytic gradient".into()));
    }

    let mut report = GradCheckReport::empty();
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = eval(op, &probe)?;
        probe.data_mut()[i] = orig - step;
        let fm = eval(op, &probe)?;
        probe.data_mut()[i] = orig;
        report.fold(i, analytic.data()[i], (fp - fm) / (2.0 * step));
    }
    Ok(report)
}

/// Same contract over selected parameter coordinates of a model loss.
pub fn check_param_gradient(
    store: &mut ParamStore,
    loss: &dyn Fn(&mut Tape, &ParamStore) -> Result<Var>,
    coords: &[(ParamId, usize)],
    step: f64,
) -> Result<GradCheckReport> {
    check_step(step)?;
    let value = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = loss(&mut tape, store)?;
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss {v}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let out = loss(&mut tape, store)?;
    store.zero_grads();
    tape.backward(out)?.accumulate_into(&tape, store);

    let mut report = GradCheckReport::empty();
    for (k, &(id, j)) in coords.iter().enumerate() {
        let analytic = store.get(id).tensor.grad().map_or(0.0, |g| g[j]);
        let orig = store.get(id).tensor.data()[j];
        store.get_mut(id).tensor.data_mut()[j] = orig + step;
        let fp = value(store)?;
        store.get_mut(id).tensor.data_mut()[j] = orig - step;
        let fm = value(store)?;
        store.get_mut(id).tensor.data_mut()[j] = orig;
        report.fold(k, analytic, (fp - fm) / (2.0 * step));
    }
    store.zero_grads();
    Ok(report)
}
