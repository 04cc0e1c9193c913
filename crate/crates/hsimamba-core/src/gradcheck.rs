//! Central finite-difference gradient oracle.
//!
//! The oracle only ever evaluates forward passes (tape values), so it is
//! independent of the backward implementation it vouches for. Tapes are
//! define-by-run, which makes rebuilding the graph per perturbation cheap
//! at test shapes.

use alloc::vec::Vec;

use crate::math;
use crate::tensor::{Tape, Tensor, TensorId};

/// Step size for central differences; reliable at 64-bit precision.
pub const FD_STEP: f64 = 1e-5;

/// Outcome of one gradient check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

/// Relative error with a small floor so near-zero gradients still have to
/// agree in absolute terms.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = math::abs(analytic).max(math::abs(numeric)).max(1e-3);
    math::abs(analytic - numeric) / scale
}

/// Checks the backward pass of `build` against central finite differences
/// for every listed input tensor.
///
/// `build` receives a fresh tape plus leaf ids for `inputs` (in order) and
/// returns the scalar loss id. With `max_coords_per_input = Some(k)` only
/// an evenly spaced sample of each tensor's coordinates is probed, which
/// bounds runtime on large parameter tensors.
pub fn finite_difference_check(
    inputs: &[Tensor],
    max_coords_per_input: Option<usize>,
    build: impl Fn(&mut Tape, &[TensorId]) -> TensorId,
) -> FdReport {
    // analytic gradients from one recorded pass
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &ids);
    tape.backward(loss).expect("backward in gradient check");
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| match tape.grad(id) {
            Some(g) => g.to_vec(),
            None => alloc::vec![0.0; t.numel()],
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = perturbed.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &ids);
        tape.value(loss).item()
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords = sample_coords(n, max_coords_per_input);
        for c in coords {
            let orig = input.data()[c];
            work[i].data_mut()[c] = orig + FD_STEP;
            let up = eval(&work);
            work[i].data_mut()[c] = orig - FD_STEP;
            let down = eval(&work);
            work[i].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            max_rel = max_rel.max(rel_err(analytic[i][c], numeric));
            checked += 1;
        }
    }
    FdReport {
        max_rel_err: max_rel,
        coords_checked: checked,
    }
}

fn sample_coords(n: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(k) if n > k && k > 0 => (0..k).map(|j| j * n / k).collect(),
        _ => (0..n).collect(),
    }
}
