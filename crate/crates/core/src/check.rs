//! Central finite-difference gradient checking.
//!
//! This is the independent oracle for every differentiable op: it only ever
//! evaluates forward passes, so it shares nothing with the backward rules it
//! verifies. f64 only; h = 1e-5 by default.

use crate::graph::Graph;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Relative-error comparison with an absolute floor for near-zero gradients.
pub fn close(analytic: f64, numeric: f64, rel_tol: f64, abs_floor: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= abs_floor + rel_tol * analytic.abs().max(numeric.abs())
}

/// Check d(loss)/d(inputs) against central finite differences.
///
/// `build` must construct the loss from scratch on the given graph for the
/// given input values (one `Vec<f64>` per differentiable input, shapes fixed
/// by the caller inside `build`). Every coordinate of every input is probed
/// unless `max_coords_per_input` limits it; limited probing picks evenly
/// spaced coordinates.
///
/// Returns the worst (analytic, numeric) pair on failure.
pub fn check_grads<F>(
    build: F,
    inputs: &[Vec<f64>],
    rel_tol: f64,
    abs_floor: f64,
    max_coords_per_input: Option<usize>,
) -> Result<(), String>
where
    F: Fn(&mut Graph<f64>, &[Vec<f64>]) -> (crate::graph::VarId, Vec<crate::graph::VarId>),
{
    // analytic gradients
    let mut g = Graph::new();
    let (loss, ids) = build(&mut g, inputs);
    assert_eq!(ids.len(), inputs.len(), "build must return one id per input");
    g.backward(loss);
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, input)| {
            g.grad(id)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; input.len()])
        })
        .collect();

    let eval = |data: &[Vec<f64>]| -> f64 {
        let mut g = Graph::new();
        let (loss, _) = build(&mut g, data);
        g.value(loss).item()
    };

    for (pi, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match max_coords_per_input {
            Some(m) if input.len() > m => {
                let stride = input.len() as f64 / m as f64;
                (0..m).map(|i| (i as f64 * stride) as usize).collect()
            }
            _ => (0..input.len()).collect(),
        };
        for ci in coords {
            let mut plus = inputs.to_vec();
            plus[pi][ci] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[pi][ci] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let a = analytic[pi][ci];
            if !close(a, numeric, rel_tol, abs_floor) {
                return Err(format!(
                    "gradient mismatch at input {pi} coord {ci}: analytic {a:.9e} vs numeric {numeric:.9e}"
                ));
            }
        }
    }
    Ok(())
}

/// Deterministic pseudo-random values in [-1, 1] for test fixtures.
pub fn rand_values(n: usize, seed: u64) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Constant tensor helper for builders.
pub fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape, data.to_vec())
}
