//! EMA state machinery and the plain single-state optimizers (AdamW,
//! SGD with momentum, Muon) that the multi-objective schemes build on.

mod adamw;
mod moment;
mod muon;
mod sgd;

pub use adamw::{adamw_step, AdamW, AdamWParams};
pub use moment::MomentState;
pub(crate) use moment::bias_denominator;
pub use muon::{muon_step, newton_schulz5, Muon, MuonParams, NS_QUINTIC};
pub use sgd::{Sgd, SgdParams};

use crate::error::Result;
use crate::numkit::Buffer;
use crate::schedule::ObjectiveId;

/// What a step did, before the learning rate is applied.
///
/// `momentum` is the first-moment reconstruction the step used; `direction`
/// is the full preconditioned update (`theta` moved by `-lr * direction`
/// plus any weight decay).
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub momentum: Buffer,
    pub direction: Buffer,
}

/// Whether a stored state is shared across objectives or owned by one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotRole {
    Base,
    Delta,
}

/// Access to every [`MomentState`] an optimizer stores, tagged by role.
/// Used by the 8-bit storage wrapper and by memory accounting.
pub trait StateSlots {
    fn slots(&self) -> Vec<(SlotRole, &MomentState)>;
    fn slots_mut(&mut self) -> Vec<(SlotRole, &mut MomentState)>;

    fn state_bytes(&self) -> usize {
        self.slots()
            .iter()
            .map(|(_, s)| s.value.len() * std::mem::size_of::<f64>())
            .sum()
    }
}

/// A single-state optimizer.
pub trait Optimizer: StateSlots {
    fn step(&mut self, theta: &mut Buffer, g: &Buffer) -> Result<StepOutcome>;
    fn lr(&self) -> f64;
    fn set_lr(&mut self, lr: f64);
}

/// An optimizer that is told which objective produced each gradient.
pub trait ObjectiveOptimizer: StateSlots {
    fn step(&mut self, theta: &mut Buffer, g: &Buffer, objective: ObjectiveId) -> Result<StepOutcome>;
    fn set_lr(&mut self, lr: f64);
    fn n_objectives(&self) -> usize;
}

/// Single-state optimizer picked at runtime.
#[derive(Debug, Clone)]
pub enum AnyOptimizer {
    AdamW(AdamW),
    Sgd(Sgd),
    Muon(Muon),
}

impl StateSlots for AnyOptimizer {
    fn slots(&self) -> Vec<(SlotRole, &MomentState)> {
        match self {
            AnyOptimizer::AdamW(o) => o.slots(),
            AnyOptimizer::Sgd(o) => o.slots(),
            AnyOptimizer::Muon(o) => o.slots(),
        }
    }

    fn slots_mut(&mut self) -> Vec<(SlotRole, &mut MomentState)> {
        match self {
            AnyOptimizer::AdamW(o) => o.slots_mut(),
            AnyOptimizer::Sgd(o) => o.slots_mut(),
            AnyOptimizer::Muon(o) => o.slots_mut(),
        }
    }
}

impl Optimizer for AnyOptimizer {
    fn step(&mut self, theta: &mut Buffer, g: &Buffer) -> Result<StepOutcome> {
        match self {
            AnyOptimizer::AdamW(o) => o.step(theta, g),
            AnyOptimizer::Sgd(o) => o.step(theta, g),
            AnyOptimizer::Muon(o) => o.step(theta, g),
        }
    }

    fn lr(&self) -> f64 {
        match self {
            AnyOptimizer::AdamW(o) => o.lr(),
            AnyOptimizer::Sgd(o) => o.lr(),
            AnyOptimizer::Muon(o) => o.lr(),
        }
    }

    fn set_lr(&mut self, lr: f64) {
        match self {
            AnyOptimizer::AdamW(o) => o.set_lr(lr),
            AnyOptimizer::Sgd(o) => o.set_lr(lr),
            AnyOptimizer::Muon(o) => o.set_lr(lr),
        }
    }
}
