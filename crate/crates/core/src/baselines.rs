//! Reference updating schemes.
//!
//! * [`Joint`]: one optimizer fed the weighted sum of all objective gradients.
//! * [`Alternate`]: one shared optimizer fed whichever gradient is active.
//! * [`DualOptim`]: one independent optimizer per objective.
//! * [`FederatedStyle`]: base/delta layouts borrowed from federated learning,
//!   where the shared state only changes at the end of a full alternation
//!   period (SCAFFOLD/MIME, FedCM) or per-objective states are averaged at
//!   that point (Local Adam).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Buffer;
use crate::optim::{
    adamw_step, AdamWParams, AnyOptimizer, MomentState, ObjectiveOptimizer, Optimizer, SlotRole,
    StateSlots, StepOutcome,
};
use crate::schedule::ObjectiveId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Joint,
    Alternate,
    DualOptim,
    Scaffold,
    FedCm,
    LocalAdam,
}

fn check_objective(objective: ObjectiveId, count: usize) -> Result<usize> {
    if objective.0 >= count {
        return Err(Error::UnknownObjective {
            id: objective.0,
            count,
        });
    }
    Ok(objective.0)
}

/// Single optimizer on `sum_i w_i * g_i`. A zero weight drops its term.
#[derive(Debug, Clone)]
pub struct Joint {
    pub inner: AnyOptimizer,
    pub weights: Vec<f64>,
}

impl Joint {
    pub fn new(inner: AnyOptimizer, weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("weights", "at least one objective"));
        }
        Ok(Self { inner, weights })
    }

    pub fn combine(&self, grads: &[Buffer]) -> Result<Buffer> {
        if grads.len() != self.weights.len() {
            return Err(Error::invalid(
                "grads",
                format!("expected {} gradients, got {}", self.weights.len(), grads.len()),
            ));
        }
        let mut acc: Option<Buffer> = None;
        for (g, &w) in grads.iter().zip(&self.weights) {
            if w == 0.0 {
                continue;
            }
            let term = if w == 1.0 { g.clone() } else { g.scale(w) };
            acc = Some(match acc {
                None => term,
                Some(a) => a.add(&term)?,
            });
        }
        Ok(acc.unwrap_or_else(|| Buffer::zeros_like(&grads[0])))
    }

    pub fn step(&mut self, theta: &mut Buffer, grads: &[Buffer]) -> Result<StepOutcome> {
        for g in grads {
            theta.check_same_shape(g)?;
        }
        let g = self.combine(grads)?;
        self.inner.step(theta, &g)
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.inner.set_lr(lr);
    }
}

impl StateSlots for Joint {
    fn slots(&self) -> Vec<(SlotRole, &MomentState)> {
        self.inner.slots()
    }

    fn slots_mut(&mut self) -> Vec<(SlotRole, &mut MomentState)> {
        self.inner.slots_mut()
    }
}

/// One shared optimizer state for every objective.
#[derive(Debug, Clone)]
pub struct Alternate {
    pub inner: AnyOptimizer,
    n_objectives: usize,
}

impl Alternate {
    pub fn new(inner: AnyOptimizer, n_objectives: usize) -> Self {
        Self { inner, n_objectives }
    }
}

impl StateSlots for Alternate {
    fn slots(&self) -> Vec<(SlotRole, &MomentState)> {
        self.inner.slots()
    }

    fn slots_mut(&mut self) -> Vec<(SlotRole, &mut MomentState)> {
        self.inner.slots_mut()
    }
}

impl ObjectiveOptimizer for Alternate {
    fn step(&mut self, theta: &mut Buffer, g: &Buffer, objective: ObjectiveId) -> Result<StepOutcome> {
        check_objective(objective, self.n_objectives)?;
        self.inner.step(theta, g)
    }

    fn set_lr(&mut self, lr: f64) {
        self.inner.set_lr(lr);
    }

    fn n_objectives(&self) -> usize {
        self.n_objectives
    }
}

/// Fully decoupled: the active objective's optimizer is the only state read
/// or written in a step.
#[derive(Debug, Clone)]
pub struct DualOptim {
    pub optimizers: Vec<AnyOptimizer>,
}

impl DualOptim {
    pub fn new(optimizers: Vec<AnyOptimizer>) -> Result<Self> {
        if optimizers.is_empty() {
            return Err(Error::invalid("optimizers", "at least one objective"));
        }
        Ok(Self { optimizers })
    }
}

impl StateSlots for DualOptim {
    fn slots(&self) -> Vec<(SlotRole, &MomentState)> {
        self.optimizers
            .iter()
            .flat_map(|o| o.slots())
            .map(|(_, s)| (SlotRole::Delta, s))
            .collect()
    }

    fn slots_mut(&mut self) -> Vec<(SlotRole, &mut MomentState)> {
        self.optimizers
            .iter_mut()
            .flat_map(|o| o.slots_mut())
            .map(|(_, s)| (SlotRole::Delta, s))
            .collect()
    }
}

impl ObjectiveOptimizer for DualOptim {
    fn step(&mut self, theta: &mut Buffer, g: &Buffer, objective: ObjectiveId) -> Result<StepOutcome> {
        let i = check_objective(objective, self.optimizers.len())?;
        self.optimizers[i].step(theta, g)
    }

    fn set_lr(&mut self, lr: f64) {
        for o in &mut self.optimizers {
            o.set_lr(lr);
        }
    }

    fn n_objectives(&self) -> usize {
        self.optimizers.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlKind {
    /// Delta tracks `g - B`; `B += mean(delta_hat)` once per period.
    Scaffold,
    /// Delta tracks `g`; same periodic merge into `B`.
    FedCm,
    /// Per-objective AdamW states averaged once per period.
    LocalAdam,
}

/// Federated-learning-style state layouts adapted to alternating objectives.
///
/// For [`FlKind::Scaffold`] and [`FlKind::FedCm`] the base pair `(B_m, B_v)`
/// is a plain accumulator, not an EMA: it only changes at period ends. The
/// parameter step mirrors the base + delta reconstruction,
/// `(B_m + dm_hat) / (sqrt(|B_v + dv_hat|) + eps)`, with decoupled weight
/// decay first.
#[derive(Debug, Clone)]
pub struct FederatedStyle {
    pub kind: FlKind,
    pub params: AdamWParams,
    /// Unused (and empty) for Local Adam.
    pub base_m: MomentState,
    pub base_v: MomentState,
    pub delta_m: Vec<MomentState>,
    pub delta_v: Vec<MomentState>,
    pub objective_steps: Vec<u64>,
    pub global_step: u64,
    period: u64,
    pub merges: u64,
}

impl FederatedStyle {
    pub fn new(kind: FlKind, shape: &[usize], n_objectives: usize, params: AdamWParams, period: u64) -> Result<Self> {
        params.validate()?;
        if n_objectives == 0 {
            return Err(Error::invalid("n_objectives", "must be >= 1"));
        }
        if period == 0 {
            return Err(Error::invalid("period", "must be >= 1"));
        }
        let base_shape: &[usize] = if kind == FlKind::LocalAdam { &[0] } else { shape };
        Ok(Self {
            kind,
            base_m: MomentState::zeros(base_shape, 0.0)?,
            base_v: MomentState::zeros(base_shape, 0.0)?,
            delta_m: (0..n_objectives)
                .map(|_| MomentState::zeros(shape, params.beta1))
                .collect::<Result<_>>()?,
            delta_v: (0..n_objectives)
                .map(|_| MomentState::zeros(shape, params.beta2))
                .collect::<Result<_>>()?,
            objective_steps: vec![0; n_objectives],
            global_step: 0,
            period,
            merges: 0,
            params,
        })
    }

    pub fn period(&self) -> u64 {
        self.period
    }

    fn mean_of(states: &[MomentState], hat: impl Fn(usize, &MomentState) -> Buffer) -> Result<Buffer> {
        let n = states.len() as f64;
        let mut acc = Buffer::zeros_like(&states[0].value);
        for (i, s) in states.iter().enumerate() {
            acc = acc.add(&hat(i, s))?;
        }
        Ok(acc.scale(1.0 / n))
    }

    fn merge(&mut self) -> Result<()> {
        match self.kind {
            FlKind::Scaffold | FlKind::FedCm => {
                let steps = self.objective_steps.clone();
                let hat = |i: usize, s: &MomentState| s.bias_correct_or_zero(steps[i]);
                let mean_m = Self::mean_of(&self.delta_m, hat)?;
                let mean_v = Self::mean_of(&self.delta_v, hat)?;
                self.base_m.value = self.base_m.value.add(&mean_m)?;
                self.base_v.value = self.base_v.value.add(&mean_v)?;
            }
            FlKind::LocalAdam => {
                let mean_m = Self::mean_of(&self.delta_m, |_, s| s.value.clone())?;
                let mean_v = Self::mean_of(&self.delta_v, |_, s| s.value.clone())?;
                for s in &mut self.delta_m {
                    s.value = mean_m.clone();
                }
                for s in &mut self.delta_v {
                    s.value = mean_v.clone();
                }
            }
        }
        self.merges += 1;
        Ok(())
    }

    fn step_in_place(&mut self, theta: &mut Buffer, g: &Buffer, i: usize) -> Result<StepOutcome> {
        let out = match self.kind {
            FlKind::LocalAdam => {
                let t = self.objective_steps[i] + 1;
                let (m, v) = (&mut self.delta_m[i], &mut self.delta_v[i]);
                let out = adamw_step(theta, g, m, v, &self.params, t)?;
                self.objective_steps[i] = t;
                out
            }
            FlKind::Scaffold | FlKind::FedCm => {
                let (in_m, in_v) = if self.kind == FlKind::Scaffold {
                    (g.sub(&self.base_m.value)?, g.square().sub(&self.base_v.value)?)
                } else {
                    (g.clone(), g.square())
                };
                self.delta_m[i].ema_update(&in_m)?;
                self.delta_v[i].ema_update(&in_v)?;
                self.objective_steps[i] += 1;
                let t = self.objective_steps[i];
                let dm = self.delta_m[i].bias_correct(t)?;
                let dv = self.delta_v[i].bias_correct(t)?;
                let momentum = self.base_m.value.add(&dm)?;
                let second = self.base_v.value.add(&dv)?;
                let eps = self.params.eps;
                let direction = momentum.zip_map(&second, |m, v| m / (v.abs().sqrt() + eps))?;
                let decay = 1.0 - self.params.lr * self.params.weight_decay;
                let lr = self.params.lr;
                let theta_new = theta.zip_map(&direction, |th, d| th * decay - lr * d)?;
                theta_new.check_finite("parameter after update")?;
                *theta = theta_new;
                StepOutcome { momentum, direction }
            }
        };
        self.global_step += 1;
        if self.global_step.is_multiple_of(self.period) {
            self.merge()?;
        }
        Ok(out)
    }
}

impl StateSlots for FederatedStyle {
    fn slots(&self) -> Vec<(SlotRole, &MomentState)> {
        let mut out = Vec::new();
        if self.kind != FlKind::LocalAdam {
            out.push((SlotRole::Base, &self.base_m));
            out.push((SlotRole::Base, &self.base_v));
        }
        out.extend(self.delta_m.iter().map(|s| (SlotRole::Delta, s)));
        out.extend(self.delta_v.iter().map(|s| (SlotRole::Delta, s)));
        out
    }

    fn slots_mut(&mut self) -> Vec<(SlotRole, &mut MomentState)> {
        let mut out = Vec::new();
        if self.kind != FlKind::LocalAdam {
            out.push((SlotRole::Base, &mut self.base_m));
            out.push((SlotRole::Base, &mut self.base_v));
        }
        out.extend(self.delta_m.iter_mut().map(|s| (SlotRole::Delta, s)));
        out.extend(self.delta_v.iter_mut().map(|s| (SlotRole::Delta, s)));
        out
    }
}

impl ObjectiveOptimizer for FederatedStyle {
    fn step(&mut self, theta: &mut Buffer, g: &Buffer, objective: ObjectiveId) -> Result<StepOutcome> {
        let i = check_objective(objective, self.delta_m.len())?;
        theta.check_same_shape(g)?;
        self.delta_m[i].value.check_same_shape(g)?;
        g.check_finite("gradient")?;
        let mut next = self.clone();
        let mut theta_next = theta.clone();
        let out = next.step_in_place(&mut theta_next, g, i)?;
        *self = next;
        *theta = theta_next;
        Ok(out)
    }

    fn set_lr(&mut self, lr: f64) {
        self.params.lr = lr;
    }

    fn n_objectives(&self) -> usize {
        self.delta_m.len()
    }
}
