use crate::error::{Error, Result};
use crate::numkit::Buffer;

/// One exponential-moving-average accumulator and the number of updates it
/// has absorbed.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentState {
    pub value: Buffer,
    pub beta: f64,
    pub steps: u64,
}

impl MomentState {
    pub fn zeros(shape: &[usize], beta: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::invalid("beta", format!("{beta} not in [0, 1)")));
        }
        Ok(Self {
            value: Buffer::zeros(shape),
            beta,
            steps: 0,
        })
    }

    /// `value <- beta * value + (1 - beta) * g`.
    pub fn ema_update(&mut self, g: &Buffer) -> Result<()> {
        let beta = self.beta;
        self.value.zip_apply(g, |s, x| beta * s + (1.0 - beta) * x)?;
        self.steps += 1;
        Ok(())
    }

    /// `value <- beta * value + g`, the undamped momentum used by Muon.
    pub fn accumulate(&mut self, g: &Buffer) -> Result<()> {
        let beta = self.beta;
        self.value.zip_apply(g, |s, x| beta * s + x)?;
        self.steps += 1;
        Ok(())
    }

    /// `value / (1 - beta^counter)`. The caller picks the counter.
    pub fn bias_correct(&self, counter: u64) -> Result<Buffer> {
        if counter == 0 {
            return Err(Error::invalid("counter", "bias correction needs counter >= 1"));
        }
        let denom = bias_denominator(self.beta, counter);
        Ok(self.value.map(|x| x / denom))
    }

    /// Like [`bias_correct`](Self::bias_correct) but an untouched state
    /// (`counter == 0`) reads as zero.
    pub fn bias_correct_or_zero(&self, counter: u64) -> Buffer {
        if counter == 0 {
            Buffer::zeros_like(&self.value)
        } else {
            let denom = bias_denominator(self.beta, counter);
            self.value.map(|x| x / denom)
        }
    }
}

pub(crate) fn bias_denominator(beta: f64, counter: u64) -> f64 {
    1.0 - beta.powi(counter.min(i32::MAX as u64) as i32)
}
