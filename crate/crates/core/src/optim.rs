//! SGD with momentum and a step-fraction learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Gradients, LayerGrads, LayerParams, Model};

/// Learning-rate schedule as (fraction of total steps, multiplier) pairs; all
/// multipliers whose fraction has been reached apply cumulatively.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule(pub Vec<(f64, f64)>);

impl LrSchedule {
    pub fn none() -> Self {
        LrSchedule(Vec::new())
    }

    /// Step decay by 10x at 50% and 75% of the run.
    pub fn half_and_three_quarters() -> Self {
        LrSchedule(vec![(0.5, 0.1), (0.75, 0.1)])
    }

    pub fn multiplier_at(&self, progress: f64) -> f64 {
        self.0
            .iter()
            .filter(|(frac, _)| progress >= *frac)
            .map(|(_, m)| m)
            .product()
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub schedule: LrSchedule,
    /// Total steps the schedule is relative to; 0 disables scheduling.
    pub total_steps: u64,
    pub step: u64,
    velocity: Option<Gradients>,
}

impl OptimizerState {
    pub fn new(learning_rate: f64, momentum: f64) -> Result<Self> {
        if learning_rate <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "learning rate {learning_rate} must be positive"
            )));
        }
        Ok(OptimizerState {
            learning_rate,
            momentum,
            schedule: LrSchedule::none(),
            total_steps: 0,
            step: 0,
            velocity: None,
        })
    }

    pub fn with_schedule(mut self, schedule: LrSchedule, total_steps: u64) -> Self {
        self.schedule = schedule;
        self.total_steps = total_steps;
        self
    }

    pub fn effective_lr(&self) -> f64 {
        if self.total_steps == 0 {
            self.learning_rate
        } else {
            let progress = self.step as f64 / self.total_steps as f64;
            self.learning_rate * self.schedule.multiplier_at(progress)
        }
    }

    /// Override schedule progress, for optimizers driven by an outer clock
    /// (federated rounds rather than local steps).
    pub fn set_progress(&mut self, step: u64, total: u64) {
        self.step = step;
        self.total_steps = total;
    }
}

/// One SGD step: `v <- m v + g; w <- w - lr v`, applied only where the
/// gradient is nonzero so units outside the trained submodel keep both their
/// weights and their velocity untouched.
pub fn sgd_step(model: &mut Model, grads: &Gradients, state: &mut OptimizerState) {
    let lr = state.effective_lr();
    let m = state.momentum;
    if state.velocity.is_none() {
        state.velocity = Some(Gradients::zeros_like(model));
    }
    let velocity = state.velocity.as_mut().unwrap();
    for ((layer, grad), vel) in model
        .layers_mut()
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut velocity.layers)
    {
        match (layer, grad, vel) {
            (
                LayerParams::Dense { w, b } | LayerParams::Conv2d { w, b },
                LayerGrads::Dense { w: gw, b: gb } | LayerGrads::Conv2d { w: gw, b: gb },
                LayerGrads::Dense { w: vw, b: vb } | LayerGrads::Conv2d { w: vw, b: vb },
            ) => {
                apply(w.data_mut(), gw.data(), vw.data_mut(), m, lr);
                if let (Some(b), Some(gb), Some(vb)) = (b, gb, vb) {
                    apply(b, gb, vb, m, lr);
                }
            }
            (
                LayerParams::Batchnorm { gamma, beta, .. },
                LayerGrads::Batchnorm { gamma: gg, beta: gb },
                LayerGrads::Batchnorm { gamma: vg, beta: vb },
            ) => {
                apply(gamma, gg, vg, m, lr);
                apply(beta, gb, vb, m, lr);
            }
            (LayerParams::Stateless, LayerGrads::None, LayerGrads::None) => {}
            _ => panic!("gradient layout mismatch"),
        }
    }
    state.step += 1;
}

fn apply(params: &mut [f64], grads: &[f64], velocity: &mut [f64], m: f64, lr: f64) {
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity) {
        if g == 0.0 {
            continue;
        }
        *v = m * *v + g;
        *p -= lr * *v;
    }
}
