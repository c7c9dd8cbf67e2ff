//! Central finite differences for checking analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Step used by every gradient check in this crate.
pub const FD_STEP: f64 = 1e-6;
/// Maximum accepted relative error between analytic and numeric gradients.
pub const GRAD_REL_TOL: f64 = 1e-4;
/// Denominator floor for [`relative_error`]. Below this magnitude the
/// comparison is effectively absolute; f64 round-off in a step-1e-6 central
/// difference is around 1e-8, so smaller floors would measure noise.
pub const REL_FLOOR: f64 = 1e-3;

/// `∂f/∂point[i]` by central differences, for every `i`.
pub fn central_difference<F>(mut f: F, point: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            x[i] = point[i] + step;
            let plus = f(&x);
            x[i] = point[i] - step;
            let minus = f(&x);
            x[i] = point[i];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Checks a tape operation against finite differences.
///
/// Every tensor in `inputs` becomes a gradient-tracked leaf; `build` records
/// the operation under test. The output is reduced with fixed random
/// weights (seeded) so each output element gets a distinct cotangent.
/// Returns the maximum relative error over every input element.
pub fn check_op<F>(inputs: &[Tensor], seed: u64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone(), true)).collect();
    let out = build(&mut tape, &leaves)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<f64> = (0..tape.value(out).len())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let loss = tape.weighted_sum(out, &weights)?;
    let mut scratch = ParamStore::new();
    let grads = tape.backward(loss, &mut scratch)?;

    let forward = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = values.iter().map(|t| tape.input(t.clone(), true)).collect();
        let out = build(&mut tape, &leaves)?;
        let loss = tape.weighted_sum(out, &weights)?;
        tape.value(loss).item()
    };

    let mut worst: f64 = 0.0;
    let mut values = inputs.to_vec();
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = grads
            .get(*leaf)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for j in 0..inputs[i].len() {
            let base = inputs[i].data()[j];
            values[i].data_mut()[j] = base + FD_STEP;
            let plus = forward(&values)?;
            values[i].data_mut()[j] = base - FD_STEP;
            let minus = forward(&values)?;
            values[i].data_mut()[j] = base;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[j], numeric));
        }
    }
    Ok(worst)
}
