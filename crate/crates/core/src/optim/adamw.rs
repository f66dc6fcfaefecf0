use crate::error::{Error, Result};
use crate::numkit::Buffer;

use super::{bias_denominator, MomentState, Optimizer, SlotRole, StateSlots, StepOutcome};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", "must be finite and >= 0"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(name, format!("{b} not in [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("eps", "must be > 0"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay", "must be >= 0"));
        }
        Ok(())
    }
}

/// One AdamW step with decoupled weight decay applied before the moment
/// update. `t` is this optimizer's own step count (>= 1).
///
/// Nothing is written unless the whole step succeeds.
pub fn adamw_step(
    theta: &mut Buffer,
    g: &Buffer,
    m: &mut MomentState,
    v: &mut MomentState,
    p: &AdamWParams,
    t: u64,
) -> Result<StepOutcome> {
    theta.check_same_shape(g)?;
    m.value.check_same_shape(g)?;
    v.value.check_same_shape(g)?;
    g.check_finite("gradient")?;
    if t == 0 {
        return Err(Error::invalid("t", "AdamW step count starts at 1"));
    }

    let mut m_new = m.clone();
    let mut v_new = v.clone();
    m_new.ema_update(g)?;
    v_new.ema_update(&g.square())?;
    let c1 = bias_denominator(m.beta, t);
    let c2 = bias_denominator(v.beta, t);

    let m_hat = m_new.value.map(|x| x / c1);
    let direction = m_hat.zip_map(&v_new.value, |mh, vv| mh / ((vv / c2).sqrt() + p.eps))?;
    let decay = 1.0 - p.lr * p.weight_decay;
    let theta_new = theta.zip_map(&direction, |th, d| th * decay - p.lr * d)?;
    theta_new.check_finite("parameter after AdamW step")?;

    *theta = theta_new;
    *m = m_new;
    *v = v_new;
    Ok(StepOutcome {
        momentum: m_hat,
        direction,
    })
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub params: AdamWParams,
    pub m: MomentState,
    pub v: MomentState,
    pub t: u64,
}

impl AdamW {
    pub fn new(shape: &[usize], params: AdamWParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            m: MomentState::zeros(shape, params.beta1)?,
            v: MomentState::zeros(shape, params.beta2)?,
            params,
            t: 0,
        })
    }
}

impl StateSlots for AdamW {
    fn slots(&self) -> Vec<(SlotRole, &MomentState)> {
        vec![(SlotRole::Base, &self.m), (SlotRole::Base, &self.v)]
    }

    fn slots_mut(&mut self) -> Vec<(SlotRole, &mut MomentState)> {
        vec![(SlotRole::Base, &mut self.m), (SlotRole::Base, &mut self.v)]
    }
}

impl Optimizer for AdamW {
    fn step(&mut self, theta: &mut Buffer, g: &Buffer) -> Result<StepOutcome> {
        let out = adamw_step(theta, g, &mut self.m, &mut self.v, &self.params, self.t + 1)?;
        self.t += 1;
        Ok(out)
    }

    fn lr(&self) -> f64 {
        self.params.lr
    }

    fn set_lr(&mut self, lr: f64) {
        self.params.lr = lr;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_decay(lr: f64) -> AdamWParams {
        AdamWParams {
            lr,
            weight_decay: 0.0,
            ..AdamWParams::default()
        }
    }

    #[test]
    fn first_step_is_sign_like() {
        let g = Buffer::from_slice(&[3.0, -0.5, 1e-3]);
        let mut theta = Buffer::zeros(&[3]);
        let mut opt = AdamW::new(&[3], no_decay(0.1)).unwrap();
        opt.step(&mut theta, &g).unwrap();
        for (th, gi) in theta.data().iter().zip(g.data()) {
            let expected = -0.1 * gi / (gi.abs() + 1e-8);
            assert!((th - expected).abs() < 1e-15, "{th} vs {expected}");
        }
    }

    #[test]
    fn zero_gradient_leaves_theta_and_decays_states() {
        let mut opt = AdamW::new(&[2], no_decay(0.1)).unwrap();
        let mut theta = Buffer::from_slice(&[1.0, -1.0]);
        opt.step(&mut theta, &Buffer::from_slice(&[1.0, 2.0])).unwrap();
        let before = theta.clone();
        let m_before = opt.m.value.clone();
        opt.step(&mut theta, &Buffer::zeros(&[2])).unwrap();
        // m_hat shrinks but is not zero, so theta still moves; the pure null
        // case is a fresh optimizer
        assert!(opt.m.value.max_abs() < m_before.max_abs());
        let mut fresh = AdamW::new(&[2], no_decay(0.1)).unwrap();
        let mut th = before.clone();
        fresh.step(&mut th, &Buffer::zeros(&[2])).unwrap();
        assert_eq!(th, before);
    }

    #[test]
    fn constant_gradient_asymptote() {
        let lr = 1e-3;
        let mut opt = AdamW::new(&[1], no_decay(lr)).unwrap();
        let mut theta = Buffer::zeros(&[1]);
        let g = Buffer::from_slice(&[1.0]);
        let mut last = 0.0;
        for _ in 0..500 {
            let before = theta.data()[0];
            opt.step(&mut theta, &g).unwrap();
            last = theta.data()[0] - before;
        }
        assert!((last + lr / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_contracts_exactly() {
        let p = AdamWParams {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamWParams::default()
        };
        let mut opt = AdamW::new(&[3], p).unwrap();
        let mut theta = Buffer::from_slice(&[2.0, -4.0, 0.5]);
        let zero = Buffer::zeros(&[3]);
        for _ in 0..10 {
            let n0 = theta.norm();
            opt.step(&mut theta, &zero).unwrap();
            assert!((theta.norm() - n0 * (1.0 - 0.05)).abs() < 1e-14);
        }
    }

    #[test]
    fn non_finite_gradient_rejected_without_mutation() {
        let mut opt = AdamW::new(&[2], AdamWParams::default()).unwrap();
        let mut theta = Buffer::from_slice(&[1.0, 2.0]);
        opt.step(&mut theta, &Buffer::from_slice(&[0.3, 0.1])).unwrap();
        let (theta0, opt0) = (theta.clone(), opt.clone());
        let err = opt.step(&mut theta, &Buffer::from_slice(&[f64::NAN, 1.0]));
        assert!(matches!(err, Err(Error::NonFinite { index: 0, .. })));
        assert_eq!(theta, theta0);
        assert_eq!(opt.m, opt0.m);
        assert_eq!(opt.v, opt0.v);
        assert_eq!(opt.t, opt0.t);
    }
}
