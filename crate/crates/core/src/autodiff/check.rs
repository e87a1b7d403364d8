use super::{ParamStore, Tape, Var};
use crate::error::Result;

/// Compares reverse-mode gradients of `f` with central differences.
///
/// `f` records a scalar loss on the given tape from the parameters in the
/// store. Returns the largest `|analytic − numeric| / max(1, |analytic|)` over
/// every scalar of every parameter. When `relaxed` is set, the loss is
/// evaluated on relaxed tapes for both routes, so straight-through nodes are
/// checked against their softmax surrogate.
pub fn finite_difference_check<F>(f: F, store: &ParamStore, eps: f64, relaxed: bool) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let new_tape = || if relaxed { Tape::relaxed() } else { Tape::new() };
    let mut work = store.clone();
    work.zero_grad();
    let mut tape = new_tape();
    let loss = f(&mut tape, &work)?;
    tape.backward(loss)?.accumulate(&mut work);
    let analytic: Vec<Vec<f64>> = work.iter().map(|p| p.grad.data().to_vec()).collect();

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = new_tape();
        let l = f(&mut t, s)?;
        Ok(t.value(l).item())
    };

    let mut worst = 0.0f64;
    let ids: Vec<_> = work.ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        for j in 0..work.get(id).value.len() {
            let orig = work.get(id).value.data()[j];
            work.get_mut(id).value.data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work.get_mut(id).value.data_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work.get_mut(id).value.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[pi][j];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
