//! Plain SGD with a cosine-annealed learning rate.

use ndarray::{Array, Dimension, Zip};
use serde::{Deserialize, Serialize};

use super::params::PromptNetParams;
use crate::error::{Error, Result};

pub const DEFAULT_BASE_LR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub base_lr: f64,
    pub min_lr: f64,
    pub total_steps: usize,
    pub step: usize,
}

impl OptimizerState {
    pub fn new(base_lr: f64, total_steps: usize) -> Self {
        Self {
            base_lr,
            min_lr: 0.0,
            total_steps,
            step: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::Argument(format!(
                "base learning rate must be positive, got {}",
                self.base_lr
            )));
        }
        if !(self.min_lr >= 0.0) {
            return Err(Error::Argument(format!(
                "min_lr must be non-negative, got {}",
                self.min_lr
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::Argument("total_steps must be positive".into()));
        }
        if self.step > self.total_steps {
            return Err(Error::Argument(format!(
                "step {} beyond total_steps {}",
                self.step, self.total_steps
            )));
        }
        Ok(())
    }
}

pub fn cosine_lr(opt: &OptimizerState) -> Result<f64> {
    opt.validate()?;
    let progress = opt.step as f64 / opt.total_steps as f64;
    Ok(opt.min_lr + 0.5 * (opt.base_lr - opt.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Anything SGD can update in place.
pub trait SgdTarget {
    fn descend(&mut self, grad: &Self, lr: f64) -> Result<()>;
}

impl<D: Dimension> SgdTarget for Array<f64, D> {
    fn descend(&mut self, grad: &Self, lr: f64) -> Result<()> {
        if self.shape() != grad.shape() {
            return Err(Error::Shape(format!(
                "value shape {:?} vs gradient shape {:?}",
                self.shape(),
                grad.shape()
            )));
        }
        Zip::from(self).and(grad).for_each(|v, &g| *v -= lr * g);
        Ok(())
    }
}

impl SgdTarget for PromptNetParams {
    fn descend(&mut self, grad: &Self, lr: f64) -> Result<()> {
        self.zip_apply(grad, |v, g| *v -= lr * g)
    }
}

/// One SGD step at the current annealed rate; advances the step counter.
pub fn sgd_step<T: SgdTarget>(value: &mut T, grad: &T, opt: &mut OptimizerState) -> Result<f64> {
    let lr = cosine_lr(opt)?;
    value.descend(grad, lr)?;
    opt.step += 1;
    Ok(lr)
}
