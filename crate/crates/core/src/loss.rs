//! Losses over logits: cross-entropy, temperature-scaled KL divergence and
//! squared error. Each returns the batch-mean loss together with the exact
//! gradient with respect to the logits, so the backward pass of the network
//! only ever sees a `dL/dlogits` tensor.
//!
//! Softmax is always evaluated through max-subtraction, so logits of any
//! magnitude are safe.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Numerically stabilized softmax of one logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// log softmax with the same stabilization.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = logits
        .iter()
        .map(|&z| (z - max).exp())
        .sum::<f64>()
        .ln();
    logits.iter().map(|&z| z - max - log_sum).collect()
}

/// `-log softmax(logits)[label]` for one sample.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::InvalidConfig(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteLoss { step: 0, layer: 0 });
    }
    Ok(-log_softmax(logits)[label])
}

/// Batch-mean cross-entropy and its logit gradient
/// `(softmax - onehot) / batch`.
pub fn cross_entropy_batch(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let b = logits.batch();
    if labels.len() != b {
        return Err(Error::ShapeMismatch {
            expected: format!("{b} labels"),
            actual: format!("{}", labels.len()),
        });
    }
    let classes = logits.len() / b;
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0;
    for s in 0..b {
        let row = logits.sample(s);
        total += cross_entropy(row, labels[s])?;
        let probs = softmax(row);
        let g = &mut grad.data_mut()[s * classes..(s + 1) * classes];
        for (j, &p) in probs.iter().enumerate() {
            g[j] = p / b as f64;
        }
        g[labels[s]] -= 1.0 / b as f64;
    }
    Ok((total / b as f64, grad))
}

/// `KL(softmax(student/T) || softmax(teacher/T))` for one sample.
pub fn kl_divergence(student: &[f64], teacher: &[f64], temperature: f64) -> Result<f64> {
    if student.len() != teacher.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} logits", student.len()),
            actual: format!("{}", teacher.len()),
        });
    }
    if temperature <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "temperature {temperature} must be positive"
        )));
    }
    let s_scaled: Vec<f64> = student.iter().map(|&z| z / temperature).collect();
    let t_scaled: Vec<f64> = teacher.iter().map(|&z| z / temperature).collect();
    let log_p = log_softmax(&s_scaled);
    let log_q = log_softmax(&t_scaled);
    let kl = log_p
        .iter()
        .zip(&log_q)
        .map(|(&lp, &lq)| lp.exp() * (lp - lq))
        .sum::<f64>();
    // Tiny negative values can appear from rounding when P ~= Q.
    Ok(kl.max(0.0))
}

/// Batch-mean KL divergence and its gradients with respect to both logit
/// tensors. The teacher is a live input, not a detached constant, so its
/// gradient is exact as well.
pub fn kl_divergence_batch(
    student: &Tensor,
    teacher: &Tensor,
    temperature: f64,
) -> Result<(f64, Tensor, Tensor)> {
    if student.shape() != teacher.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", student.shape()),
            actual: format!("{:?}", teacher.shape()),
        });
    }
    let b = student.batch();
    let classes = student.len() / b;
    let mut grad_s = Tensor::zeros(student.shape());
    let mut grad_t = Tensor::zeros(teacher.shape());
    let mut total = 0.0;
    for s in 0..b {
        let srow = student.sample(s);
        let trow = teacher.sample(s);
        let s_scaled: Vec<f64> = srow.iter().map(|&z| z / temperature).collect();
        let t_scaled: Vec<f64> = trow.iter().map(|&z| z / temperature).collect();
        let log_p = log_softmax(&s_scaled);
        let log_q = log_softmax(&t_scaled);
        let p: Vec<f64> = log_p.iter().map(|&l| l.exp()).collect();
        let q: Vec<f64> = log_q.iter().map(|&l| l.exp()).collect();
        let kl: f64 = log_p
            .iter()
            .zip(&log_q)
            .zip(&p)
            .map(|((&lp, &lq), &pi)| pi * (lp - lq))
            .sum();
        total += kl.max(0.0);
        let gs = &mut grad_s.data_mut()[s * classes..(s + 1) * classes];
        let gt = &mut grad_t.data_mut()[s * classes..(s + 1) * classes];
        let scale = 1.0 / (temperature * b as f64);
        for j in 0..classes {
            gs[j] = scale * p[j] * ((log_p[j] - log_q[j]) - kl);
            gt[j] = scale * (q[j] - p[j]);
        }
    }
    Ok((total / b as f64, grad_s, grad_t))
}

/// Batch mean of the per-sample squared L2 distance and the gradient
/// `2 (pred - target) / batch`.
pub fn squared_error_batch(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", target.shape()),
            actual: format!("{:?}", pred.shape()),
        });
    }
    let batch = pred.batch() as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let mut total = 0.0;
    for ((g, &y), &t) in grad
        .data_mut()
        .iter_mut()
        .zip(pred.data())
        .zip(target.data())
    {
        let d = y - t;
        total += d * d;
        *g = 2.0 * d / batch;
    }
    Ok((total / batch, grad))
}
