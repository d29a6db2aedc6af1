//! Central finite differences against tape gradients, in 64-bit.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Default perturbation for central differences.
pub const STEP: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Numeric gradient of a scalar function by central differences.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> Result<f64>, x: &[f64], step: f64) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let plus = f(&probe)?;
        probe[i] = x[i] - step;
        let minus = f(&probe)?;
        probe[i] = x[i];
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

/// Finite-difference formula used by [`audit`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    /// `(f(x+h) - f(x-h)) / 2h`, error `O(h²)`.
    Central,
    /// Central differences at `h` and `h/2` combined as `(4·D(h/2) - D(h)) / 3`,
    /// error `O(h⁴)`.
    Richardson,
}

/// Numeric gradient by central differences extrapolated from `step` and
/// `step / 2`.
pub fn richardson_difference(mut f: impl FnMut(&[f64]) -> Result<f64>, x: &[f64], step: f64) -> Result<Vec<f64>> {
    let coarse = central_difference(&mut f, x, step)?;
    let fine = central_difference(&mut f, x, step / 2.0)?;
    Ok(coarse.iter().zip(&fine).map(|(c, f)| (4.0 * f - c) / 3.0).collect())
}

/// Outcome of auditing one graph.
#[derive(Clone, Debug, Default)]
pub struct Audit {
    /// Largest relative error per input, in input order.
    pub max_rel_error: Vec<f64>,
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

impl Audit {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares `backward` against central differences for a scalar graph built
/// from `inputs` by `build`. Every input is treated as trainable.
///
/// `floor` bounds the relative-error denominator from below so entries with
/// a vanishing gradient are compared absolutely.
pub fn audit(
    inputs: &[Tensor<f64>],
    scheme: Scheme,
    step: f64,
    floor: f64,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<Audit> {
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new().with_finite_checks(true);
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new().with_finite_checks(true);
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = build(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut report = Audit::default();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = match tape.grad(vars[i]) {
            Some(g) => g.to_f64_vec(),
            None => vec![0.0; input.numel()],
        };
        let mut xs = inputs.to_vec();
        let f = |p: &[f64]| {
            xs[i] = Tensor::new(input.shape(), p.to_vec())?;
            eval(&xs)
        };
        let numeric = match scheme {
            Scheme::Central => central_difference(f, input.data(), step)?,
            Scheme::Richardson => richardson_difference(f, input.data(), step)?,
        };
        let worst = analytic
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| relative_error(a, n, floor))
            .fold(0.0, f64::max);
        report.max_rel_error.push(worst);
        report.analytic.push(analytic);
        report.numeric.push(numeric);
    }
    Ok(report)
}
