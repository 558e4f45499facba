//! Self-distillation: the widest admissible submodel teaches the sampled
//! narrower one within a single training step.
//!
//! Teacher logits are a live part of the graph. With `teacher_backprop` set
//! (the default) the teacher receives gradients from its own terms, so new
//! knowledge reaches narrow submodels by proxy through the shared prefix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{cross_entropy_batch, kl_divergence_batch};
use crate::od::DropoutDistribution;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub enabled: bool,
    /// Mixing weight between the hard-label and distillation terms in the
    /// general loss.
    pub alpha: f64,
    pub temperature: f64,
    pub teacher_backprop: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            enabled: true,
            alpha: 1.0,
            temperature: 1.0,
            teacher_backprop: true,
        }
    }
}

impl DistillConfig {
    pub fn disabled() -> Self {
        DistillConfig {
            enabled: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!(
                "alpha {} must lie in [0, 1]",
                self.alpha
            )));
        }
        if self.temperature <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// `(1 - alpha) CE(student, y) + alpha KL(student, teacher, T)`.
///
/// Returns the batch-mean loss and gradients with respect to student and
/// teacher logits. The teacher gradient is zeroed unless `teacher_backprop`.
pub fn distill_loss_general(
    student_logits: &Tensor,
    teacher_logits: &Tensor,
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<(f64, Tensor, Tensor)> {
    cfg.validate()?;
    let (ce, ce_grad) = cross_entropy_batch(student_logits, labels)?;
    let (kl, kl_grad_s, kl_grad_t) =
        kl_divergence_batch(student_logits, teacher_logits, cfg.temperature)?;
    let loss = (1.0 - cfg.alpha) * ce + cfg.alpha * kl;
    let mut grad_s = Tensor::zeros(student_logits.shape());
    for ((g, &gce), &gkl) in grad_s
        .data_mut()
        .iter_mut()
        .zip(ce_grad.data())
        .zip(kl_grad_s.data())
    {
        *g = (1.0 - cfg.alpha) * gce + cfg.alpha * gkl;
    }
    let grad_t = if cfg.teacher_backprop {
        let mut g = kl_grad_t;
        for v in g.data_mut() {
            *v *= cfg.alpha;
        }
        g
    } else {
        Tensor::zeros(teacher_logits.shape())
    };
    Ok((loss, grad_s, grad_t))
}

/// `KL(student, teacher, T) + CE(teacher, y)`: the training loss once
/// `alpha = T = 1`, with the hard-label term moved onto the teacher.
pub fn distill_loss_final(
    student_logits: &Tensor,
    teacher_logits: &Tensor,
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<(f64, Tensor, Tensor)> {
    cfg.validate()?;
    let (kl, kl_grad_s, kl_grad_t) =
        kl_divergence_batch(student_logits, teacher_logits, cfg.temperature)?;
    let (ce, ce_grad_t) = cross_entropy_batch(teacher_logits, labels)?;
    let loss = kl + ce;
    let grad_t = if cfg.teacher_backprop {
        let mut g = ce_grad_t;
        for (v, &gkl) in g.data_mut().iter_mut().zip(kl_grad_t.data()) {
            *v += gkl;
        }
        g
    } else {
        Tensor::zeros(teacher_logits.shape())
    };
    Ok((loss, kl_grad_s, grad_t))
}

/// Teacher width for a capability-capped client: the widest candidate not
/// exceeding the cap.
pub fn teacher_width(dist: &DropoutDistribution, p_cap: f64) -> Result<f64> {
    dist.widest_at_most(p_cap)
}
