use serde::{Deserialize, Serialize};

use super::mlp::Mlp;
use crate::error::{ensure, Result};

/// Learning rate as a pure function of the step counter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant {
        lr: f64,
    },
    /// `base * factor^floor(step / every)`.
    StepDecay {
        base: f64,
        factor: f64,
        every: u64,
    },
    /// Triangular wave: `min -> max -> min` over each `period` steps.
    CyclicTriangular {
        min: f64,
        max: f64,
        period: u64,
    },
}

impl LrSchedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::StepDecay {
                base,
                factor,
                every,
            } => {
                let k = step.checked_div(every).unwrap_or(0);
                base * factor.powi(k.min(i32::MAX as u64) as i32)
            }
            LrSchedule::CyclicTriangular { min, max, period } => {
                if period == 0 {
                    return min;
                }
                let phase = (step % period) as f64 / period as f64;
                min + (max - min) * (1.0 - (2.0 * phase - 1.0).abs())
            }
        }
    }
}

/// Plain SGD with optional heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub schedule: LrSchedule,
    pub momentum: f64,
    velocity: Vec<f64>,
    step: u64,
}

impl Sgd {
    pub fn new(schedule: LrSchedule) -> Self {
        Self::with_momentum(schedule, 0.0)
    }

    pub fn with_momentum(schedule: LrSchedule, momentum: f64) -> Self {
        Self {
            schedule,
            momentum,
            velocity: Vec::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr_at(self.step)
    }

    /// Applies the model's own gradient buffers. Returns the learning rate used.
    pub fn step(&mut self, model: &mut Mlp) -> Result<f64> {
        let g = model.grads();
        self.step_with(model, &g)
    }

    /// Applies an externally assembled gradient. Returns the learning rate used.
    pub fn step_with(&mut self, model: &mut Mlp, grad: &[f64]) -> Result<f64> {
        ensure!(
            grad.len() == model.num_params(),
            Dimension,
            "gradient has {} entries for {} parameters",
            grad.len(),
            model.num_params()
        );
        let lr = self.current_lr();
        if self.momentum == 0.0 {
            model.apply_update(grad, lr)?;
        } else {
            if self.velocity.len() != grad.len() {
                self.velocity = vec![0.0; grad.len()];
            }
            for (v, g) in self.velocity.iter_mut().zip(grad) {
                *v = self.momentum * *v + g;
            }
            model.apply_update(&self.velocity, lr)?;
        }
        self.step += 1;
        Ok(lr)
    }
}
