//! Central finite-difference checking of tape gradients.
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of every backward rule it checks.

use super::{Tape, Tensor, TensorError, Var};

/// Step used for central differences on `f64`.
pub const FD_STEP: f64 = 1e-6;

/// Gradients below this magnitude are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Largest relative error between the tape gradient of the scalar built by
/// `f` and the central finite-difference estimate, over every element of
/// every input.
pub fn max_gradient_error<F>(inputs: &[Tensor], f: F) -> Result<f64, TensorError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, TensorError>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = f(&tape, &vars)?;
    tape.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())))
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64, TensorError> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let orig = probe[which].data()[i];
            probe[which].data_mut()[i] = orig + FD_STEP;
            let up = eval(&probe)?;
            probe[which].data_mut()[i] = orig - FD_STEP;
            let down = eval(&probe)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(grad.data()[i], numeric));
        }
    }
    Ok(worst)
}
