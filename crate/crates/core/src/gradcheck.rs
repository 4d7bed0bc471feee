//! Central finite-difference gradient checking.
//!
//! The numerical side only ever rebuilds forward passes on fresh tapes; it
//! never consults backward rules.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Step used for central differences at 64-bit precision.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Gradient norms below this are treated as exactly zero. Central
/// differences at `DEFAULT_EPS` carry rounding noise near `1e-11`, which would
/// otherwise turn a structurally zero gradient into a relative error of 1.
pub const ZERO_FLOOR: f64 = 1e-8;

/// Outcome of comparing analytic and numerical gradients for each input.
#[derive(Debug, Clone)]
pub struct GradReport {
    /// `‖analytic − numeric‖₂ / (‖analytic‖₂ + ‖numeric‖₂)` per input tensor
    /// (0 when both norms are below [`ZERO_FLOOR`]).
    pub relative_errors: Vec<f64>,
    /// Largest element-wise absolute difference per input tensor.
    pub max_abs_errors: Vec<f64>,
}

impl GradReport {
    pub fn worst_relative(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.worst_relative() < tol
    }
}

/// Numerical gradient of the scalar produced by `build` with respect to
/// `inputs[which]`.
pub fn numerical_gradient<F>(inputs: &[Tensor<f64>], which: usize, build: &F, eps: f64) -> Result<Tensor<f64>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = build(&mut tape, &vars)?;
        tape.value(out).item()
    };
    let mut work = inputs.to_vec();
    let mut grad = Tensor::zeros(inputs[which].shape());
    for i in 0..inputs[which].len() {
        let orig = inputs[which].data()[i];
        work[which].data_mut()[i] = orig + eps;
        let up = eval(&work)?;
        work[which].data_mut()[i] = orig - eps;
        let down = eval(&work)?;
        work[which].data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    Ok(grad)
}

/// Analytic gradients of the scalar produced by `build` for every input.
pub fn analytic_gradients<F>(inputs: &[Tensor<f64>], build: &F) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

/// Compares tape gradients against central differences for every input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], build: F, eps: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if inputs.is_empty() {
        return Err(Error::Contract("gradient check needs at least one input".into()));
    }
    let analytic = analytic_gradients(inputs, &build)?;
    let mut relative_errors = Vec::with_capacity(inputs.len());
    let mut max_abs_errors = Vec::with_capacity(inputs.len());
    for (which, a) in analytic.iter().enumerate() {
        let n = numerical_gradient(inputs, which, &build, eps)?;
        let diff: f64 = a
            .data()
            .iter()
            .zip(n.data())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm = |t: &Tensor<f64>| t.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let (na, nn) = (norm(a), norm(&n));
        relative_errors.push(if na.max(nn) < ZERO_FLOOR { 0.0 } else { diff / (na + nn) });
        max_abs_errors.push(a.max_abs_diff(&n).unwrap_or(f64::INFINITY));
    }
    Ok(GradReport {
        relative_errors,
        max_abs_errors,
    })
}

/// `Σ probe ⊙ out`: reduces any output to a scalar with a fixed random
/// weighting, so that gradients of normalized outputs are not trivially zero.
pub fn probe_loss(tape: &mut Tape<f64>, out: Var, probe: &Tensor<f64>) -> Result<Var> {
    let shaped = probe.clone().reshape(tape.shape(out))?;
    let p = tape.constant(shaped);
    let weighted = tape.mul(out, p)?;
    Ok(tape.sum(weighted))
}
