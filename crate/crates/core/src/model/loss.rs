//! Loss functions with analytic gradients.

use crate::error::{Error, Result};
use crate::numerics::matrix::Vector;

/// Numerically stable cross entropy for one example.
///
/// Subtracts the max logit before exponentiating, so huge logits stay
/// finite. Returns the loss and its gradient with respect to the logits
/// (`softmax - onehot`).
pub fn cross_entropy_with_grad(logits: &Vector, class: usize) -> Result<(f64, Vector)> {
    let k = logits.len();
    if class >= k {
        return Err(Error::invalid("class index", format!("{class} with {k} logits")));
    }
    let m = logits
        .as_slice()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut grad = Vector::zeros(k);
    let mut sum = 0.0;
    for i in 0..k {
        let e = (logits[i] - m).exp();
        grad[i] = e;
        sum += e;
    }
    let loss = m + sum.ln() - logits[class];
    for i in 0..k {
        grad[i] /= sum;
    }
    grad[class] -= 1.0;
    Ok((loss, grad))
}

/// Mean squared error over the coordinates of one example:
/// `(1/d) * sum_i (y_i - t_i)^2`, gradient `(2/d) * (y - t)`.
pub fn mse_with_grad(output: &Vector, target: &Vector) -> Result<(f64, Vector)> {
    if output.len() != target.len() {
        return Err(Error::shape(
            "mse",
            format!("{} vs {}", output.len(), target.len()),
        ));
    }
    let d = output.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vector::zeros(output.len());
    for i in 0..output.len() {
        let diff = output[i] - target[i];
        loss += diff * diff;
        grad[i] = 2.0 * diff / d;
    }
    Ok((loss / d, grad))
}
