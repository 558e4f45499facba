//! Training steps at a sampled width: plain steps and distillation steps.
//!
//! A step is split into a pure gradient computation over an immutable model
//! and a mutation phase (optimizer update plus normalization-stat commit), so
//! gradient checking and parallel evaluation never race with writes.

use crate::distill::{distill_loss_final, DistillConfig};
use crate::error::{Error, Result};
use crate::loss::{cross_entropy_batch, squared_error_batch};
use crate::model::{BnUpdate, Gradients, Model, Selection};
use crate::od::DropoutDistribution;
use crate::optim::{sgd_step, OptimizerState};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Training targets: class labels or regression values.
#[derive(Clone, Copy, Debug)]
pub enum Targets<'a> {
    Labels(&'a [usize]),
    Values(&'a Tensor),
}

/// Loss driving a step.
#[derive(Clone, Debug)]
pub enum LossSpec {
    CrossEntropy,
    SquaredError,
    /// Distillation against the prefix submodel at `teacher_p`; the student
    /// width must be strictly narrower.
    Distill { teacher_p: f64, cfg: DistillConfig },
}

/// Gradients of one step plus the batch-norm statistics it produced, keyed by
/// the selections that produced them.
pub struct StepGradients {
    pub loss: f64,
    pub grads: Gradients,
    pub bn: Vec<(Selection, Vec<BnUpdate>)>,
}

/// Pure gradient computation for one mini-batch at width `p`.
pub fn compute_gradients(
    model: &Model,
    batch: &Tensor,
    targets: Targets,
    p: f64,
    loss_spec: &LossSpec,
) -> Result<StepGradients> {
    match loss_spec {
        LossSpec::CrossEntropy => {
            let labels = expect_labels(targets)?;
            let sel = model.prefix_selection(p)?;
            let (tape, bn) = model.forward_train(batch, &sel)?;
            let (loss, dlogits) = cross_entropy_batch(tape.logits(), labels)?;
            check_loss(loss)?;
            let grads = model.backward(&tape, &dlogits)?;
            Ok(StepGradients {
                loss,
                grads,
                bn: vec![(sel, bn)],
            })
        }
        LossSpec::SquaredError => {
            let values = expect_values(targets)?;
            let sel = model.prefix_selection(p)?;
            let (tape, bn) = model.forward_train(batch, &sel)?;
            let (loss, dlogits) = squared_error_batch(tape.logits(), values)?;
            check_loss(loss)?;
            let grads = model.backward(&tape, &dlogits)?;
            Ok(StepGradients {
                loss,
                grads,
                bn: vec![(sel, bn)],
            })
        }
        LossSpec::Distill { teacher_p, cfg } => {
            let labels = expect_labels(targets)?;
            if p >= *teacher_p {
                return Err(Error::InvalidConfig(format!(
                    "student width {p} must be narrower than teacher width {teacher_p}"
                )));
            }
            let student_sel = model.prefix_selection(p)?;
            let teacher_sel = model.prefix_selection(*teacher_p)?;
            // One shared mini-batch feeds both passes.
            let (student_tape, student_bn) = model.forward_train(batch, &student_sel)?;
            let (teacher_tape, teacher_bn) = model.forward_train(batch, &teacher_sel)?;
            let (loss, grad_s, grad_t) =
                distill_loss_final(student_tape.logits(), teacher_tape.logits(), labels, cfg)?;
            check_loss(loss)?;
            let mut grads = model.backward(&student_tape, &grad_s)?;
            let teacher_grads = model.backward(&teacher_tape, &grad_t)?;
            grads.add_assign(&teacher_grads);
            Ok(StepGradients {
                loss,
                grads,
                bn: vec![(student_sel, student_bn), (teacher_sel, teacher_bn)],
            })
        }
    }
}

/// One optimizer step at width `p`: gradients, parameter update, stat commit.
pub fn train_step(
    model: &mut Model,
    batch: &Tensor,
    targets: Targets,
    p: f64,
    loss_spec: &LossSpec,
    state: &mut OptimizerState,
) -> Result<f64> {
    let step = compute_gradients(model, batch, targets, p, loss_spec)?;
    sgd_step(model, &step.grads, state);
    for (sel, updates) in &step.bn {
        model.commit_bn(sel, updates);
    }
    Ok(step.loss)
}

/// One ordered-width step with conditional sampling: draws `p <= cap`, trains
/// plainly or via distillation from the widest admissible width. When the
/// sampled width equals the teacher width the distillation term vanishes, so
/// the step runs as a plain pass without the duplicate forward.
pub fn od_step(
    model: &mut Model,
    batch: &Tensor,
    labels: &[usize],
    dist: &DropoutDistribution,
    cap: f64,
    kd: &DistillConfig,
    rng: &mut Rng,
    state: &mut OptimizerState,
) -> Result<(f64, f64)> {
    let p = dist.sample_conditional(cap, rng)?;
    let loss_spec = if kd.enabled {
        let teacher_p = dist.widest_at_most(cap)?;
        if p < teacher_p {
            LossSpec::Distill {
                teacher_p,
                cfg: *kd,
            }
        } else {
            LossSpec::CrossEntropy
        }
    } else {
        LossSpec::CrossEntropy
    };
    let loss = train_step(model, batch, Targets::Labels(labels), p, &loss_spec, state)?;
    Ok((loss, p))
}

fn expect_labels<'a>(targets: Targets<'a>) -> Result<&'a [usize]> {
    match targets {
        Targets::Labels(l) => Ok(l),
        Targets::Values(_) => Err(Error::InvalidConfig(
            "classification loss needs label targets".into(),
        )),
    }
}

fn expect_values<'a>(targets: Targets<'a>) -> Result<&'a Tensor> {
    match targets {
        Targets::Values(v) => Ok(v),
        Targets::Labels(_) => Err(Error::InvalidConfig(
            "regression loss needs value targets".into(),
        )),
    }
}

fn check_loss(loss: f64) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { step: 0, layer: 0 });
    }
    Ok(())
}
