//! Base + delta optimizer states.
//!
//! One shared base state is an EMA of every incoming gradient regardless of
//! which objective produced it. Each objective additionally owns a delta
//! state: an EMA of the residual between its gradient and the bias-corrected
//! base. The parameter update recombines `base_hat + delta_hat` for the
//! active objective.
//!
//! In AdamW mode both moments are split this way and the update is
//!
//! ```text
//! theta <- theta - lr * wd * theta
//! theta <- theta - lr * (mB_hat + mD_hat) / (sqrt(|vB_hat + vD_hat|) + eps)
//! ```
//!
//! where the base hats use the global step count and the delta hats the
//! per-objective count. Second-moment deltas are signed, so only the
//! combined denominator takes an absolute value.
//!
//! In Muon mode the states are raw momenta (`S <- beta * S + x`, no bias
//! correction) and the update orthogonalizes `base + delta` with
//! [`newton_schulz5`].
//!
//! By default the base is updated after the parameter step, so within a step
//! the deltas and the update both see the base as it stood at the end of the
//! previous step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Buffer;
use crate::optim::{
    newton_schulz5, AdamWParams, MomentState, MuonParams, ObjectiveOptimizer,
    SlotRole, StateSlots, StepOutcome,
};
use crate::schedule::ObjectiveId;

/// When, within a step, the base state absorbs the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BaseTiming {
    BeforeDelta,
    AfterDelta,
    #[default]
    AfterParam,
}

/// What the base state is fed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BaseInput {
    #[default]
    Grad,
    /// `g - delta_hat` of the active objective.
    GradMinusDelta,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DualConfig {
    pub timing: BaseTiming,
    pub base_input: BaseInput,
    /// `(beta1, beta2)` for the base state; `None` uses the optimizer's.
    /// Muon mode reads only the first entry.
    pub base_betas: Option<(f64, f64)>,
    pub delta_betas: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DualMode {
    AdamW(AdamWParams),
    Muon(MuonParams),
}

impl DualMode {
    fn betas(&self) -> (f64, f64) {
        match self {
            DualMode::AdamW(p) => (p.beta1, p.beta2),
            DualMode::Muon(p) => (p.momentum, p.momentum),
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            DualMode::AdamW(p) => p.lr,
            DualMode::Muon(p) => p.lr,
        }
    }

    fn set_lr(&mut self, lr: f64) {
        match self {
            DualMode::AdamW(p) => p.lr = lr,
            DualMode::Muon(p) => p.lr = lr,
        }
    }

    fn is_adamw(&self) -> bool {
        matches!(self, DualMode::AdamW(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualState {
    pub mode: DualMode,
    pub config: DualConfig,
    pub base_m: MomentState,
    /// Present in AdamW mode only.
    pub base_v: Option<MomentState>,
    pub delta_m: Vec<MomentState>,
    /// One per objective in AdamW mode, empty in Muon mode.
    pub delta_v: Vec<MomentState>,
    pub objective_steps: Vec<u64>,
    pub global_step: u64,
}

impl DualState {
    pub fn new(shape: &[usize], n_objectives: usize, mode: DualMode, config: DualConfig) -> Result<Self> {
        if n_objectives == 0 {
            return Err(Error::invalid("n_objectives", "must be >= 1"));
        }
        match &mode {
            DualMode::AdamW(p) => p.validate()?,
            DualMode::Muon(p) => {
                p.validate()?;
                if shape.len() != 2 {
                    return Err(Error::NotMatrix(shape.to_vec()));
                }
            }
        }
        let defaults = mode.betas();
        let (bb1, bb2) = config.base_betas.unwrap_or(defaults);
        let (db1, db2) = config.delta_betas.unwrap_or(defaults);
        let adamw = mode.is_adamw();
        Ok(Self {
            base_m: MomentState::zeros(shape, bb1)?,
            base_v: if adamw {
                Some(MomentState::zeros(shape, bb2)?)
            } else {
                None
            },
            delta_m: (0..n_objectives)
                .map(|_| MomentState::zeros(shape, db1))
                .collect::<Result<_>>()?,
            delta_v: if adamw {
                (0..n_objectives)
                    .map(|_| MomentState::zeros(shape, db2))
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            },
            objective_steps: vec![0; n_objectives],
            global_step: 0,
            mode,
            config,
        })
    }

    pub fn adamw(shape: &[usize], n_objectives: usize, params: AdamWParams) -> Result<Self> {
        Self::new(shape, n_objectives, DualMode::AdamW(params), DualConfig::default())
    }

    pub fn muon(shape: &[usize], n_objectives: usize, params: MuonParams) -> Result<Self> {
        Self::new(shape, n_objectives, DualMode::Muon(params), DualConfig::default())
    }

    pub fn shape(&self) -> &[usize] {
        self.base_m.value.shape()
    }

    /// Base first moment as the deltas currently see it: bias-corrected by
    /// the global count in AdamW mode, raw in Muon mode.
    pub fn cached_base_m_hat(&self) -> Buffer {
        if self.mode.is_adamw() {
            self.base_m.bias_correct_or_zero(self.global_step)
        } else {
            self.base_m.value.clone()
        }
    }

    /// Base second moment, bias-corrected by the global count. `None` in
    /// Muon mode.
    pub fn cached_base_v_hat(&self) -> Option<Buffer> {
        self.base_v
            .as_ref()
            .map(|v| v.bias_correct_or_zero(self.global_step))
    }

    /// Bias-corrected delta first moment of `objective`.
    pub fn delta_m_hat(&self, objective: ObjectiveId) -> Result<Buffer> {
        let i = self.check_objective(objective)?;
        Ok(self.delta_hat(&self.delta_m[i], i))
    }

    fn delta_hat(&self, state: &MomentState, i: usize) -> Buffer {
        if self.mode.is_adamw() {
            state.bias_correct_or_zero(self.objective_steps[i])
        } else {
            state.value.clone()
        }
    }

    fn check_objective(&self, objective: ObjectiveId) -> Result<usize> {
        let count = self.delta_m.len();
        if objective.0 >= count {
            return Err(Error::UnknownObjective {
                id: objective.0,
                count,
            });
        }
        Ok(objective.0)
    }

    fn check_gradient(&self, g: &Buffer) -> Result<()> {
        self.base_m.value.check_same_shape(g)?;
        g.check_finite("gradient")
    }

    /// Residual update of the active objective's delta states against the
    /// base as it currently stands. Advances that objective's counter.
    pub fn delta_update(&mut self, objective: ObjectiveId, g: &Buffer) -> Result<()> {
        let i = self.check_objective(objective)?;
        self.check_gradient(g)?;
        let base_m = self.cached_base_m_hat();
        if self.mode.is_adamw() {
            let base_v = self.cached_base_v_hat().expect("adamw mode has base_v");
            let resid_m = g.sub(&base_m)?;
            let resid_v = g.square().sub(&base_v)?;
            self.delta_m[i].ema_update(&resid_m)?;
            self.delta_v[i].ema_update(&resid_v)?;
        } else {
            self.delta_m[i].accumulate(&g.sub(&base_m)?)?;
        }
        self.objective_steps[i] += 1;
        Ok(())
    }

    /// Shared-state update. Advances the global counter.
    pub fn base_update(&mut self, objective: ObjectiveId, g: &Buffer) -> Result<()> {
        let i = self.check_objective(objective)?;
        self.check_gradient(g)?;
        let (input_m, input_v) = match self.config.base_input {
            BaseInput::Grad => (g.clone(), g.square()),
            BaseInput::GradMinusDelta => {
                let dm = self.delta_hat(&self.delta_m[i], i);
                let m = g.sub(&dm)?;
                let v = match self.delta_v.get(i) {
                    Some(dv) => g.square().sub(&self.delta_hat(dv, i))?,
                    None => g.square(),
                };
                (m, v)
            }
        };
        if self.mode.is_adamw() {
            self.base_m.ema_update(&input_m)?;
            self.base_v
                .as_mut()
                .expect("adamw mode has base_v")
                .ema_update(&input_v)?;
        } else {
            self.base_m.accumulate(&input_m)?;
        }
        self.global_step += 1;
        Ok(())
    }

    /// Parameter step from `base_hat + delta_hat` of `objective`. Does not
    /// touch any state.
    pub fn parameter_update(&self, theta: &mut Buffer, objective: ObjectiveId) -> Result<StepOutcome> {
        let i = self.check_objective(objective)?;
        self.base_m.value.check_same_shape(theta)?;
        let momentum = self.cached_base_m_hat().add(&self.delta_hat(&self.delta_m[i], i))?;
        let (theta_new, direction) = match &self.mode {
            DualMode::AdamW(p) => {
                let base_v = self.cached_base_v_hat().expect("adamw mode has base_v");
                let second = base_v.add(&self.delta_hat(&self.delta_v[i], i))?;
                let direction = momentum.zip_map(&second, |m, v| m / (v.abs().sqrt() + p.eps))?;
                let decay = 1.0 - p.lr * p.weight_decay;
                let lr = p.lr;
                (theta.zip_map(&direction, |th, d| th * decay - lr * d)?, direction)
            }
            DualMode::Muon(p) => {
                let ortho = newton_schulz5(&momentum, p.ns_iterations, p.ns_coefficients)?;
                let lr = p.lr;
                (theta.zip_map(&ortho, |th, o| th - lr * o)?, ortho)
            }
        };
        theta_new.check_finite("parameter after update")?;
        *theta = theta_new;
        Ok(StepOutcome { momentum, direction })
    }

    fn step_in_place(&mut self, theta: &mut Buffer, g: &Buffer, objective: ObjectiveId) -> Result<StepOutcome> {
        match self.config.timing {
            BaseTiming::BeforeDelta => {
                self.base_update(objective, g)?;
                self.delta_update(objective, g)?;
                self.parameter_update(theta, objective)
            }
            BaseTiming::AfterDelta => {
                self.delta_update(objective, g)?;
                self.base_update(objective, g)?;
                self.parameter_update(theta, objective)
            }
            BaseTiming::AfterParam => {
                self.delta_update(objective, g)?;
                let out = self.parameter_update(theta, objective)?;
                self.base_update(objective, g)?;
                Ok(out)
            }
        }
    }

    /// Full step: delta update, parameter update and base update in the
    /// configured order. On error neither `theta` nor any state changes.
    pub fn step(&mut self, theta: &mut Buffer, g: &Buffer, objective: ObjectiveId) -> Result<StepOutcome> {
        self.check_objective(objective)?;
        self.check_gradient(g)?;
        let mut next = self.clone();
        let mut theta_next = theta.clone();
        let out = next
            .step_in_place(&mut theta_next, g, objective)
            .map_err(|e| match e {
                Error::NonFinite { .. } => Error::Rejected(format!(
                    "step {} ({objective}): {e}",
                    self.global_step + 1
                )),
                other => other,
            })?;
        *self = next;
        *theta = theta_next;
        Ok(out)
    }

    pub fn n_objectives(&self) -> usize {
        self.delta_m.len()
    }
}

impl StateSlots for DualState {
    fn slots(&self) -> Vec<(SlotRole, &MomentState)> {
        let mut out = vec![(SlotRole::Base, &self.base_m)];
        if let Some(v) = &self.base_v {
            out.push((SlotRole::Base, v));
        }
        out.extend(self.delta_m.iter().map(|s| (SlotRole::Delta, s)));
        out.extend(self.delta_v.iter().map(|s| (SlotRole::Delta, s)));
        out
    }

    fn slots_mut(&mut self) -> Vec<(SlotRole, &mut MomentState)> {
        let mut out = vec![(SlotRole::Base, &mut self.base_m)];
        if let Some(v) = &mut self.base_v {
            out.push((SlotRole::Base, v));
        }
        out.extend(self.delta_m.iter_mut().map(|s| (SlotRole::Delta, s)));
        out.extend(self.delta_v.iter_mut().map(|s| (SlotRole::Delta, s)));
        out
    }
}

impl ObjectiveOptimizer for DualState {
    fn step(&mut self, theta: &mut Buffer, g: &Buffer, objective: ObjectiveId) -> Result<StepOutcome> {
        DualState::step(self, theta, g, objective)
    }

    fn set_lr(&mut self, lr: f64) {
        self.mode.set_lr(lr);
    }

    fn n_objectives(&self) -> usize {
        self.delta_m.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{AdamW, Optimizer};
    use crate::schedule::AlternationSchedule;

    const F: ObjectiveId = ObjectiveId::FORGET;
    const R: ObjectiveId = ObjectiveId::RETAIN;

    fn params(lr: f64, wd: f64) -> AdamWParams {
        AdamWParams {
            lr,
            weight_decay: wd,
            ..AdamWParams::default()
        }
    }

    fn scalar(x: f64) -> Buffer {
        Buffer::from_slice(&[x])
    }

    #[test]
    fn first_base_update_cancels_bias() {
        let mut s = DualState::adamw(&[1], 2, params(0.1, 0.0)).unwrap();
        s.base_update(F, &scalar(1.0)).unwrap();
        assert!((s.base_m.value.data()[0] - 0.1).abs() < 1e-15);
        assert!((s.cached_base_m_hat().data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn first_delta_is_plain_ema() {
        let mut s = DualState::adamw(&[1], 2, params(0.1, 0.0)).unwrap();
        s.delta_update(F, &scalar(2.0)).unwrap();
        assert!((s.delta_m[0].value.data()[0] - 0.2).abs() < 1e-15);
        assert_eq!(s.objective_steps, vec![1, 0]);
    }

    #[test]
    fn base_decays_on_null_gradient() {
        let mut s = DualState::adamw(&[1], 2, params(0.1, 0.0)).unwrap();
        s.base_update(F, &scalar(1.0)).unwrap();
        for _ in 0..100 {
            s.base_update(R, &scalar(0.0)).unwrap();
        }
        assert!((s.base_m.value.data()[0] - 0.1 * 0.9f64.powi(100)).abs() < 1e-18);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let lr = 0.01;
        let mut s = DualState::adamw(&[1], 2, params(lr, 0.0)).unwrap();
        let mut theta = scalar(0.0);
        s.step(&mut theta, &scalar(3.0), F).unwrap();
        assert!((theta.data()[0] + lr * 3.0 / (3.0 + 1e-8)).abs() < 1e-16);
    }

    #[test]
    fn unknown_objective_rejected() {
        let mut s = DualState::adamw(&[1], 2, params(0.1, 0.0)).unwrap();
        assert!(matches!(
            s.delta_update(ObjectiveId(2), &scalar(1.0)),
            Err(Error::UnknownObjective { id: 2, count: 2 })
        ));
    }

    #[test]
    fn second_step_reconstruction_differs_from_plain_adamw() {
        let beta = 0.9;
        let mut s = DualState::adamw(&[1], 1, params(0.1, 0.0)).unwrap();
        let mut theta = scalar(0.0);
        let g = scalar(1.5);
        s.step(&mut theta, &g, F).unwrap();
        let out = s.step(&mut theta, &g, F).unwrap();
        let expected = 1.5 * (1.0 + 2.0 * beta) / (1.0 + beta);
        assert!((out.momentum.data()[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn single_objective_matches_adamw_asymptotically() {
        let lr = 1e-3;
        let mut dual = DualState::adamw(&[2], 1, params(lr, 0.0)).unwrap();
        let mut plain = AdamW::new(&[2], params(lr, 0.0)).unwrap();
        let g = Buffer::from_slice(&[0.7, -2.0]);
        let (mut td, mut tp) = (Buffer::zeros(&[2]), Buffer::zeros(&[2]));
        let mut gap = f64::MAX;
        for _ in 0..1000 {
            let (d0, p0) = (td.clone(), tp.clone());
            dual.step(&mut td, &g, F).unwrap();
            plain.step(&mut tp, &g).unwrap();
            let ud = td.sub(&d0).unwrap();
            let up = tp.sub(&p0).unwrap();
            gap = ud.max_abs_diff(&up).unwrap();
        }
        assert!(gap < 1e-6 * lr, "gap {gap}");
    }

    #[test]
    fn negative_second_moment_sum_stays_finite() {
        let mut s = DualState::adamw(&[1], 2, params(0.1, 0.0)).unwrap();
        s.base_v.as_mut().unwrap().value = scalar(0.01);
        s.global_step = 1;
        s.base_m.steps = 1;
        s.base_v.as_mut().unwrap().steps = 1;
        s.delta_v[0].value = scalar(-1.0);
        s.objective_steps[0] = 1;
        let mut theta = scalar(0.0);
        let out = s.parameter_update(&mut theta, F).unwrap();
        assert!(theta.all_finite());
        assert!(out.direction.all_finite());
    }

    #[test]
    fn counters_track_round_robin() {
        let sched = AlternationSchedule::round_robin(vec![1, 1, 1], 30).unwrap();
        let mut s = DualState::adamw(&[3], 3, params(0.01, 0.01)).unwrap();
        let mut theta = Buffer::from_slice(&[1.0, 2.0, 3.0]);
        for t in 1..=30 {
            let obj = sched.objective_at(t).unwrap();
            let g = theta.map(|x| x - obj.0 as f64);
            s.step(&mut theta, &g, obj).unwrap();
            assert_eq!(s.global_step, s.objective_steps.iter().sum::<u64>());
        }
        assert_eq!(s.objective_steps, vec![10, 10, 10]);
        assert_eq!(s.delta_m.len(), 3);
        assert_eq!(s.delta_v.len(), 3);
    }

    #[test]
    fn rejected_step_leaves_state_untouched() {
        let mut s = DualState::adamw(&[2], 2, params(0.1, 0.01)).unwrap();
        let mut theta = Buffer::from_slice(&[1.0, -1.0]);
        s.step(&mut theta, &Buffer::from_slice(&[0.5, 0.5]), F).unwrap();
        let (s0, t0) = (s.clone(), theta.clone());
        assert!(s.step(&mut theta, &Buffer::from_slice(&[f64::INFINITY, 0.0]), R).is_err());
        assert!(s.step(&mut theta, &Buffer::from_slice(&[1.0]), R).is_err());
        assert!(s.step(&mut theta, &Buffer::from_slice(&[1.0, 1.0]), ObjectiveId(5)).is_err());
        assert_eq!(s, s0);
        assert_eq!(theta, t0);
    }

    #[test]
    fn overflowing_update_rejected() {
        let mut s = DualState::adamw(&[1], 2, params(1e308, 0.0)).unwrap();
        let mut theta = scalar(1e308);
        let s0 = s.clone();
        let err = s.step(&mut theta, &scalar(-1.0), F).unwrap_err();
        assert!(matches!(err, Error::Rejected(_)));
        assert_eq!(s, s0);
        assert_eq!(theta.data()[0], 1e308);
    }

    #[test]
    fn stale_base_is_used_within_a_step() {
        // with the default timing the delta residual at step 2 is taken
        // against the base produced by step 1 only
        let beta = 0.9;
        let mut s = DualState::adamw(&[1], 2, params(0.0, 0.0)).unwrap();
        let mut theta = scalar(0.0);
        s.step(&mut theta, &scalar(1.0), F).unwrap();
        s.step(&mut theta, &scalar(-1.0), R).unwrap();
        // base_hat after step 1 = 1, so delta_r = (1 - beta) * (-1 - 1)
        assert!((s.delta_m[1].value.data()[0] - (1.0 - beta) * -2.0).abs() < 1e-15);
    }

    #[test]
    fn before_delta_timing_sees_fresh_base() {
        let beta = 0.9;
        let cfg = DualConfig {
            timing: BaseTiming::BeforeDelta,
            ..DualConfig::default()
        };
        let mut s = DualState::new(&[1], 2, DualMode::AdamW(params(0.0, 0.0)), cfg).unwrap();
        let mut theta = scalar(0.0);
        s.step(&mut theta, &scalar(1.0), F).unwrap();
        // base_hat already equals g when the delta is formed
        assert!(s.delta_m[0].value.data()[0].abs() < 1e-15);
        s.step(&mut theta, &scalar(-1.0), R).unwrap();
        let b = (beta * 0.1 + -0.1) / (1.0 - beta * beta);
        assert!((s.delta_m[1].value.data()[0] - 0.1 * (-1.0 - b)).abs() < 1e-14);
    }

    #[test]
    fn grad_minus_delta_base_input() {
        let cfg = DualConfig {
            base_input: BaseInput::GradMinusDelta,
            ..DualConfig::default()
        };
        let mut s = DualState::new(&[1], 2, DualMode::AdamW(params(0.0, 0.0)), cfg).unwrap();
        let mut theta = scalar(0.0);
        s.step(&mut theta, &scalar(2.0), F).unwrap();
        // delta_hat after the first step equals g, so the base sees 0
        assert!(s.base_m.value.data()[0].abs() < 1e-15);
    }

    #[test]
    fn per_state_betas() {
        let cfg = DualConfig {
            base_betas: Some((0.99, 0.999)),
            ..DualConfig::default()
        };
        let s = DualState::new(&[2], 2, DualMode::AdamW(AdamWParams::default()), cfg).unwrap();
        assert_eq!(s.base_m.beta, 0.99);
        assert_eq!(s.base_v.as_ref().unwrap().beta, 0.999);
        assert_eq!(s.delta_m[0].beta, 0.9);
        assert_eq!(s.delta_v[1].beta, 0.95);
    }

    #[test]
    fn muon_mode_recursions() {
        let p = MuonParams {
            lr: 0.1,
            momentum: 0.5,
            ..MuonParams::default()
        };
        let mut s = DualState::muon(&[2, 2], 2, p).unwrap();
        let mut theta = Buffer::zeros(&[2, 2]);
        let g = Buffer::from_rows(&[&[1.0, 0.0], &[0.0, 2.0]]).unwrap();
        s.step(&mut theta, &g, F).unwrap();
        // delta_f = g - 0, base = g
        assert_eq!(s.delta_m[0].value, g);
        assert_eq!(s.base_m.value, g);
        let out = s.step(&mut theta, &g, R).unwrap();
        // delta_r = 0 + (g - base) = 0; update uses base + delta_r = g
        assert_eq!(s.delta_m[1].value, Buffer::zeros(&[2, 2]));
        assert_eq!(out.momentum, g);
        assert_eq!(s.base_m.value, g.scale(1.5));
        assert!(s.delta_v.is_empty() && s.base_v.is_none());
        assert!(DualState::muon(&[4], 2, p).is_err());
    }
}
