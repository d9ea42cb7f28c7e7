//! Central finite-difference gradient checking.

use crate::{grad, Tensor};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Per input: `||analytic - numeric|| / max(||analytic||, ||numeric||, ZERO_FLOOR)`.
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
}

/// Gradient norms below this are compared in absolute terms: a parameter whose
/// true gradient vanishes still shows central-difference rounding noise.
pub const ZERO_FLOOR: f64 = 1e-5;

/// Compares autodiff gradients of the scalar `f` against central differences
/// with step `1e-6`.
pub fn check_gradients(inputs: &[Vec<f64>], shapes: &[&[usize]], f: impl Fn(&[Tensor]) -> Tensor) -> GradCheckReport {
    check_gradients_with_step(inputs, shapes, 1e-6, f)
}

pub fn check_gradients_with_step(
    inputs: &[Vec<f64>],
    shapes: &[&[usize]],
    step: f64,
    f: impl Fn(&[Tensor]) -> Tensor,
) -> GradCheckReport {
    assert_eq!(inputs.len(), shapes.len());
    let params: Vec<Tensor> = inputs.iter().zip(shapes).map(|(d, s)| Tensor::param(d.clone(), s)).collect();
    let out = f(&params);
    let refs: Vec<&Tensor> = params.iter().collect();
    let analytic = grad(&out, &refs, false);

    let eval = |which: usize, idx: usize, delta: f64| -> f64 {
        let ts: Vec<Tensor> = inputs
            .iter()
            .zip(shapes)
            .enumerate()
            .map(|(i, (d, s))| {
                let mut d = d.clone();
                if i == which {
                    d[idx] += delta;
                }
                Tensor::param(d, s)
            })
            .collect();
        f(&ts).item()
    };

    let mut rel_errors = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let numeric: Vec<f64> = (0..input.len())
            .map(|j| (eval(i, j, step) - eval(i, j, -step)) / (2.0 * step))
            .collect();
        let a = analytic[i].data();
        let diff = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        rel_errors.push(diff / na.max(nn).max(ZERO_FLOOR));
    }
    let max_rel_error = rel_errors.iter().copied().fold(0.0, f64::max);
    GradCheckReport { rel_errors, max_rel_error }
}
