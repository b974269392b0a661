use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic − numeric| / max(1, |analytic|, |numeric|)
    pub max_rel_error: f64,
    /// (parameter index, flat coordinate) of the worst coordinate.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences, one coordinate at a time.
///
/// `f` receives a fresh tape and one leaf per entry of `params` and must
/// return the scalar loss. It has to be deterministic: the base point is
/// evaluated twice and any bitwise disagreement is reported as a contract
/// error.
pub fn grad_check<F>(mut f: F, params: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("grad_check", format!("step must be positive, got {h}")));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let base = tape.value(loss).item()?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
        .collect();

    let mut eval = |point: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = point.iter().map(|p| tape.constant(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        tape.value(loss).item()
    };

    let again = eval(params)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::Contract(format!(
            "function is not deterministic: {base} then {again}"
        )));
    }

    let mut point = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    for (pi, grad) in analytic.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = point[pi].data()[j];
            point[pi].data_mut()[j] = orig + h;
            let plus = eval(&point)?;
            point[pi].data_mut()[j] = orig - h;
            let minus = eval(&point)?;
            point[pi].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let err = (grad[j] - numeric).abs() / 1f64.max(grad[j].abs()).max(numeric.abs());
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = (pi, j);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}
