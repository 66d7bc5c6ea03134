use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// Outcome of a [`gradient_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// (parameter index, flat coordinate) of the worst coordinate.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Compares tape gradients of the scalar `f` against central differences
/// `(f(x + h) - f(x - h)) / 2h`, one coordinate at a time.
///
/// Relative error per coordinate is `|analytic - numeric| / max(|analytic| + |numeric|, floor)`.
pub fn gradient_check<F>(f: F, params: &[Tensor<f64>], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::input(format!("finite-difference step must be positive, got {h}")));
    }

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = values
            .iter()
            .map(|p| tape.leaf(p.clone(), false))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.leaf(p.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheck {
        max_relative_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    let mut probe = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("leaf gradients are populated");
        for c in 0..params[pi].len() {
            let x0 = params[pi].data()[c];
            probe[pi].data_mut()[c] = x0 + h;
            let up = eval(&probe)?;
            probe[pi].data_mut()[c] = x0 - h;
            let down = eval(&probe)?;
            probe[pi].data_mut()[c] = x0;

            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[c];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(RELATIVE_ERROR_FLOOR);
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = (pi, c);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}
