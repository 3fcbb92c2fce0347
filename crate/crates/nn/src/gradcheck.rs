//! Central finite-difference gradient checking.

use crate::error::{NnError, Result};
use crate::tensor::Tensor;

/// Magnitudes below this are compared absolutely rather than relatively.
pub const ABS_FLOOR: f64 = 1e-4;

/// A computation with a scalar output whose gradient can be checked.
pub trait ScalarGraph {
    /// Evaluates the graph. When `backward` is set, the gradient of the
    /// output is accumulated into every tensor returned by [`Self::tensors`].
    fn run(&mut self, backward: bool) -> Result<Tensor>;

    /// Tensors the gradient is checked against (parameters and inputs).
    fn tensors(&mut self) -> Vec<&mut Tensor>;
}

/// `|a - n| / max(|a|, |n|, ABS_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Compares the backward pass of `graph` against central differences with
/// step `eps` over every element of every checked tensor and returns the
/// largest relative error.
pub fn grad_check(graph: &mut dyn ScalarGraph, eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(NnError::Usage(format!("finite-difference step must be positive, got {eps}")));
    }
    for t in graph.tensors() {
        t.clear_grad();
        t.grad_mut();
    }
    let out = graph.run(true)?;
    if out.numel() != 1 {
        return Err(NnError::Usage(format!(
            "gradient check needs a scalar output, got shape {:?}",
            out.shape()
        )));
    }
    let analytic: Vec<Vec<f64>> = graph
        .tensors()
        .iter()
        .map(|t| t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut worst: f64 = 0.0;
    for (ti, grads) in analytic.iter().enumerate() {
        for (ei, &a) in grads.iter().enumerate() {
            let orig = graph.tensors()[ti].data()[ei];
            graph.tensors()[ti].data_mut()[ei] = orig + eps;
            let plus = graph.run(false)?.data()[0];
            graph.tensors()[ti].data_mut()[ei] = orig - eps;
            let minus = graph.run(false)?.data()[0];
            graph.tensors()[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}
