use std::f64::consts::PI;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

use super::config::{validate_schedule, ScheduleConfig};

/// `v <- mu v + (g + wd p)`, `p <- p - lr v`, elementwise.
pub fn sgd_momentum_step(param: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) {
    assert_eq!(param.len(), grad.len(), "sgd: parameter/gradient length mismatch");
    assert_eq!(param.len(), velocity.len(), "sgd: parameter/velocity length mismatch");
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + (g + weight_decay * *p);
        *p -= lr * *v;
    }
}

/// Momentum buffers, one per weight tensor and one per prunable group.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub theta_velocity: Vec<Tensor>,
    pub mask_velocity: Vec<Vec<f64>>,
}

impl OptimizerState {
    /// Zeroed buffers matching the given shapes.
    pub fn zeros(theta: &[&Tensor], logits: &[&[f64]]) -> Self {
        OptimizerState {
            theta_velocity: theta.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            mask_velocity: logits.iter().map(|u| vec![0.0; u.len()]).collect(),
        }
    }
}

/// Learning rate for `epoch` (0-based) of a `total`-epoch run.
pub fn lr_schedule(schedule: &ScheduleConfig, epoch: usize, total: usize, base_lr: f64) -> Result<f64> {
    if total == 0 || epoch > total {
        return Err(Error::config("epochs", format!("epoch {epoch} outside 0..={total}")));
    }
    validate_schedule(schedule)?;
    let frac = epoch as f64 / total as f64;
    Ok(match schedule {
        ScheduleConfig::Constant => base_lr,
        ScheduleConfig::Cosine => base_lr * 0.5 * (1.0 + (PI * frac).cos()),
        ScheduleConfig::Step { milestones, factors } => {
            let passed = milestones.iter().take_while(|&&m| frac >= m).count();
            if passed == 0 {
                base_lr
            } else {
                base_lr * factors[passed - 1]
            }
        }
    })
}
