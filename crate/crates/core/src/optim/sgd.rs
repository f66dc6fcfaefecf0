use crate::error::{Error, Result};
use crate::numkit::Buffer;

use super::{MomentState, Optimizer, SlotRole, StateSlots, StepOutcome};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdParams {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

/// Heavy-ball SGD: `buf <- momentum * buf + g`, `theta <- theta - lr * buf`.
/// `momentum = 0` is plain gradient descent.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub params: SgdParams,
    pub buf: MomentState,
}

impl Sgd {
    pub fn new(shape: &[usize], params: SgdParams) -> Result<Self> {
        if !(params.lr >= 0.0) {
            return Err(Error::invalid("lr", "must be >= 0"));
        }
        Ok(Self {
            buf: MomentState::zeros(shape, params.momentum)?,
            params,
        })
    }
}

impl StateSlots for Sgd {
    fn slots(&self) -> Vec<(SlotRole, &MomentState)> {
        vec![(SlotRole::Base, &self.buf)]
    }

    fn slots_mut(&mut self) -> Vec<(SlotRole, &mut MomentState)> {
        vec![(SlotRole::Base, &mut self.buf)]
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, theta: &mut Buffer, g: &Buffer) -> Result<StepOutcome> {
        theta.check_same_shape(g)?;
        g.check_finite("gradient")?;
        let mut buf = self.buf.clone();
        buf.accumulate(g)?;
        let decay = 1.0 - self.params.lr * self.params.weight_decay;
        let lr = self.params.lr;
        let theta_new = theta.zip_map(&buf.value, |th, d| th * decay - lr * d)?;
        theta_new.check_finite("parameter after SGD step")?;
        *theta = theta_new;
        self.buf = buf;
        Ok(StepOutcome {
            momentum: self.buf.value.clone(),
            direction: self.buf.value.clone(),
        })
    }

    fn lr(&self) -> f64 {
        self.params.lr
    }

    fn set_lr(&mut self, lr: f64) {
        self.params.lr = lr;
    }
}
