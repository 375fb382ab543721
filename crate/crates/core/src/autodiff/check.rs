use std::collections::HashMap;

use super::{AutodiffError, Bindings, NodeId, Result, Tape};
use crate::tensor::Tensor;

/// Compares reverse-mode gradients of `wrt` against central differences, in
/// 64-bit, over every coordinate of every bound input.
///
/// Returns `max |analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn check_gradient(
    tape: &Tape,
    bindings: &HashMap<NodeId, Tensor<f64>>,
    wrt: NodeId,
    epsilon: f64,
) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(AutodiffError::Invalid(format!(
            "epsilon {epsilon} outside (0, 1e-2]"
        )));
    }
    let eval = tape.forward(&Bindings::from_owned(bindings))?;
    let analytic = tape.backward(&eval, wrt)?;
    drop(eval);

    let mut inputs: Vec<NodeId> = bindings.keys().copied().collect();
    inputs.sort();
    let mut work = bindings.clone();
    let mut worst = 0.0f64;
    for id in inputs {
        let grad = analytic
            .get(id)
            .ok_or(AutodiffError::UnknownNode(id.index()))?
            .clone();
        for k in 0..grad.len() {
            let original = work[&id].data()[k];
            work.get_mut(&id).unwrap().data_mut()[k] = original + epsilon;
            let plus = tape
                .forward(&Bindings::from_owned(&work))?
                .value(wrt)
                .item();
            work.get_mut(&id).unwrap().data_mut()[k] = original - epsilon;
            let minus = tape
                .forward(&Bindings::from_owned(&work))?
                .value(wrt)
                .item();
            work.get_mut(&id).unwrap().data_mut()[k] = original;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = grad.data()[k];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
