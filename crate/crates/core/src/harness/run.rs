use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::baselines::{Alternate, DualOptim, FederatedStyle, FlKind, Joint};
use crate::diagnostics::{
    gradient_ema_similarity, update_similarity, SimilarityTrace, UpdateKind, UpdateRecord, GRADIENT_EMA_FACTOR,
};
use crate::dual::{DualMode, DualState};
use crate::error::{Error, Result};
use crate::numkit::Buffer;
use crate::optim::{AdamW, AnyOptimizer, MomentState, Muon, ObjectiveOptimizer, Sgd, SlotRole, StateSlots, StepOutcome};
use crate::quant::Quantized;
use crate::schedule::ObjectiveId;

use super::config::{Method, OptimizerKind, RunConfig};
use super::task::ToyTask;

/// Every scheduled (one objective per step) method behind one type.
#[derive(Debug, Clone)]
pub enum MethodOptimizer {
    Alternate(Alternate),
    DualOptim(DualOptim),
    DualPlus(DualState),
    Federated(FederatedStyle),
}

impl StateSlots for MethodOptimizer {
    fn slots(&self) -> Vec<(SlotRole, &MomentState)> {
        match self {
            MethodOptimizer::Alternate(o) => o.slots(),
            MethodOptimizer::DualOptim(o) => o.slots(),
            MethodOptimizer::DualPlus(o) => o.slots(),
            MethodOptimizer::Federated(o) => o.slots(),
        }
    }

    fn slots_mut(&mut self) -> Vec<(SlotRole, &mut MomentState)> {
        match self {
            MethodOptimizer::Alternate(o) => o.slots_mut(),
            MethodOptimizer::DualOptim(o) => o.slots_mut(),
            MethodOptimizer::DualPlus(o) => o.slots_mut(),
            MethodOptimizer::Federated(o) => o.slots_mut(),
        }
    }
}

impl ObjectiveOptimizer for MethodOptimizer {
    fn step(&mut self, theta: &mut Buffer, g: &Buffer, objective: ObjectiveId) -> Result<StepOutcome> {
        match self {
            MethodOptimizer::Alternate(o) => o.step(theta, g, objective),
            MethodOptimizer::DualOptim(o) => o.step(theta, g, objective),
            MethodOptimizer::DualPlus(o) => o.step(theta, g, objective),
            MethodOptimizer::Federated(o) => o.step(theta, g, objective),
        }
    }

    fn set_lr(&mut self, lr: f64) {
        match self {
            MethodOptimizer::Alternate(o) => o.set_lr(lr),
            MethodOptimizer::DualOptim(o) => o.set_lr(lr),
            MethodOptimizer::DualPlus(o) => o.set_lr(lr),
            MethodOptimizer::Federated(o) => o.set_lr(lr),
        }
    }

    fn n_objectives(&self) -> usize {
        match self {
            MethodOptimizer::Alternate(o) => o.n_objectives(),
            MethodOptimizer::DualOptim(o) => o.n_objectives(),
            MethodOptimizer::DualPlus(o) => o.n_objectives(),
            MethodOptimizer::Federated(o) => o.n_objectives(),
        }
    }
}

enum Engine {
    Joint(Quantized<Joint>),
    Scheduled(Quantized<MethodOptimizer>),
}

impl Engine {
    fn set_lr(&mut self, lr: f64) {
        match self {
            Engine::Joint(q) => q.configure(|j| j.set_lr(lr)),
            Engine::Scheduled(q) => q.set_lr(lr),
        }
    }

    fn state_bytes(&self) -> usize {
        match self {
            Engine::Joint(q) => q.state_bytes(),
            Engine::Scheduled(q) => q.state_bytes(),
        }
    }

    fn full_precision_bytes(&self) -> usize {
        match self {
            Engine::Joint(q) => q.full_precision_bytes(),
            Engine::Scheduled(q) => q.full_precision_bytes(),
        }
    }
}

fn single_optimizer(config: &RunConfig, shape: &[usize]) -> Result<AnyOptimizer> {
    Ok(match config.method.optimizer {
        OptimizerKind::Adamw => AnyOptimizer::AdamW(AdamW::new(shape, config.optim.adamw())?),
        OptimizerKind::Muon => AnyOptimizer::Muon(Muon::new(shape, config.optim.muon())?),
        OptimizerKind::Sgd => AnyOptimizer::Sgd(Sgd::new(shape, config.optim.sgd())?),
    })
}

fn build_engine(config: &RunConfig, task: &ToyTask, period: u64) -> Result<Engine> {
    let shape = task.shape();
    let n = task.n_objectives();
    let (subset, block) = (config.quant.subset, config.quant.block_size);
    let fl = |kind| -> Result<MethodOptimizer> {
        Ok(MethodOptimizer::Federated(FederatedStyle::new(
            kind,
            shape,
            n,
            config.optim.adamw(),
            period,
        )?))
    };
    let method = match config.method.name {
        Method::Joint => {
            let mut weights = vec![1.0; n];
            weights[0] = config.method.forget_weight;
            let joint = Joint::new(single_optimizer(config, shape)?, weights)?;
            return Ok(Engine::Joint(Quantized::new(joint, subset, block)?));
        }
        Method::Alternate => MethodOptimizer::Alternate(Alternate::new(single_optimizer(config, shape)?, n)),
        Method::DualOptim => MethodOptimizer::DualOptim(DualOptim::new(
            (0..n).map(|_| single_optimizer(config, shape)).collect::<Result<_>>()?,
        )?),
        Method::DualOptimPlus => {
            let mode = match config.method.optimizer {
                OptimizerKind::Adamw => DualMode::AdamW(config.optim.adamw()),
                OptimizerKind::Muon => DualMode::Muon(config.optim.muon()),
                OptimizerKind::Sgd => return Err(Error::config("method.optimizer", "dualoptim_plus supports adamw and muon")),
            };
            MethodOptimizer::DualPlus(DualState::new(shape, n, mode, config.dual.dual_config())?)
        }
        Method::Scaffold => fl(FlKind::Scaffold)?,
        Method::FedCm => fl(FlKind::FedCm)?,
        Method::LocalAdam => fl(FlKind::LocalAdam)?,
    };
    Ok(Engine::Scheduled(Quantized::new(method, subset, block)?))
}

/// Losses after one step. `objective` is the objective name, or `joint`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossRow {
    pub step: u64,
    pub objective: String,
    pub lr: f64,
    pub losses: Vec<f64>,
}

/// Everything a run produced. `wall_time_secs` is the only field that is
/// not a function of the config.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub config_echo: String,
    pub objective_names: Vec<String>,
    pub rows: Vec<LossRow>,
    pub objective_steps: Vec<u64>,
    pub final_params: Vec<f64>,
    pub params_digest: String,
    pub traces: Vec<SimilarityTrace>,
    pub diverged: bool,
    pub diverged_at: Option<u64>,
    pub state_bytes: usize,
    pub full_precision_bytes: usize,
    pub wall_time_secs: f64,
}

/// SHA-256 of the little-endian bytes of `params`, hex encoded.
pub fn params_digest(params: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in params {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn objective_names(n: usize) -> Vec<String> {
    if n == 2 {
        vec!["forget".into(), "retain".into()]
    } else {
        (0..n).map(|i| format!("obj{i}")).collect()
    }
}

impl RunReport {
    /// Hash over every field except the wall time.
    pub fn content_hash(&self) -> String {
        let mut timeless = self.clone();
        timeless.wall_time_secs = 0.0;
        let json = serde_json::to_vec(&timeless).expect("report serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn final_losses(&self) -> Option<&[f64]> {
        self.rows.last().map(|r| r.losses.as_slice())
    }

    /// Mean of the named trace after the configured burn-in.
    pub fn mean_similarity(&self, label: &str) -> Option<f64> {
        self.traces
            .iter()
            .find(|t| t.label == label)
            .and_then(|t| t.mean_after(self.config.diagnostics.burn_in))
    }

    /// `step,objective,lr,loss_<name>...` with 17 significant digits.
    pub fn losses_csv(&self) -> String {
        let mut out = String::from("step,objective,lr");
        for name in &self.objective_names {
            write!(out, ",loss_{name}").expect("string write");
        }
        out.push('\n');
        for row in &self.rows {
            write!(out, "{},{},{}", row.step, row.objective, fmt_float(row.lr)).expect("string write");
            for l in &row.losses {
                write!(out, ",{}", fmt_float(*l)).expect("string write");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. })
}

fn weighted(g: Buffer, w: f64) -> Buffer {
    if w == 1.0 {
        g
    } else if w == 0.0 {
        Buffer::zeros_like(&g)
    } else {
        g.scale(w)
    }
}

/// Builds the task from `config` and runs it.
pub fn run_experiment(config: &RunConfig) -> Result<RunReport> {
    config.validate()?;
    let task = ToyTask::new(&config.task, config.seed)?;
    run_on_task(config, &task)
}

/// Runs `config` on an existing task. Joint steps see every objective's
/// gradient each step; the other methods follow the alternation schedule.
/// A non-finite gradient, parameter or loss ends the run early with the
/// report flagged as diverged.
pub fn run_on_task(config: &RunConfig, task: &ToyTask) -> Result<RunReport> {
    config.validate()?;
    let started = Instant::now();
    let n = task.n_objectives();
    let schedule = config.schedule.alternation(n)?;
    let lr_schedule = config.schedule.lr(config.optim.lr)?;
    let mut engine = build_engine(config, task, schedule.period())?;
    let w = config.method.forget_weight;
    let names = objective_names(n);
    let diagnostics = config.diagnostics.enabled;

    let mut theta = task.initial_params();
    let mut rows = Vec::with_capacity(config.schedule.total_steps as usize);
    let mut objective_steps = vec![0u64; n];
    let mut records: Vec<UpdateRecord> = Vec::new();
    let (mut ema_f, mut ema_r) = (Vec::new(), Vec::new());
    let mut diverged_at = None;

    for t in 1..=schedule.total_steps() {
        let lr = lr_schedule.lr_at(t)?;
        engine.set_lr(lr);
        if diagnostics && n >= 2 {
            ema_f.push(task.gradient(&theta, ObjectiveId::FORGET)?);
            ema_r.push(task.gradient(&theta, ObjectiveId::RETAIN)?);
        }
        let (label, step) = match &mut engine {
            Engine::Joint(q) => {
                let grads: Vec<Buffer> = (0..n).map(|i| task.gradient(&theta, ObjectiveId(i))).collect::<Result<_>>()?;
                let out = q.with_states(|j| j.step(&mut theta, &grads));
                ("joint".to_string(), out.map(|_| ()))
            }
            Engine::Scheduled(q) => {
                let obj = schedule.objective_at(t)?;
                let mut g = task.gradient(&theta, obj)?;
                if obj == ObjectiveId::FORGET {
                    g = weighted(g, w);
                }
                let out = q.step(&mut theta, &g, obj);
                if let Ok(o) = &out {
                    objective_steps[obj.index()] += 1;
                    if diagnostics {
                        records.push(UpdateRecord::new(t, obj, o.clone()));
                    }
                }
                (names[obj.index()].clone(), out.map(|_| ()))
            }
        };
        match step {
            Ok(()) => {}
            Err(e) if is_divergence(&e) => {
                diverged_at = Some(t);
                break;
            }
            Err(e) => return Err(e),
        }
        let losses = task.losses(&theta)?;
        let finite = losses.iter().all(|l| l.is_finite());
        rows.push(LossRow {
            step: t,
            objective: label,
            lr,
            losses,
        });
        if !finite {
            diverged_at = Some(t);
            break;
        }
    }
    if matches!(engine, Engine::Joint(_)) {
        let done = rows.len() as u64;
        objective_steps.iter_mut().for_each(|s| *s = done);
    }

    let mut traces = Vec::new();
    if diagnostics && n >= 2 {
        let has_both = |o: ObjectiveId| records.iter().any(|r| r.objective == o);
        if has_both(ObjectiveId::FORGET) && has_both(ObjectiveId::RETAIN) {
            for kind in [UpdateKind::Momentum, UpdateKind::Direction] {
                traces.push(update_similarity(&records, kind, &format!("update_{}", kind.name()))?);
            }
        }
        ema_f.truncate(rows.len());
        ema_r.truncate(rows.len());
        traces.push(gradient_ema_similarity(&ema_f, &ema_r, GRADIENT_EMA_FACTOR, "gradient_ema")?);
    }

    let final_params = theta.into_data();
    Ok(RunReport {
        config: config.clone(),
        config_echo: config.to_toml(),
        objective_names: names,
        params_digest: params_digest(&final_params),
        final_params,
        rows,
        objective_steps,
        traces,
        diverged: diverged_at.is_some(),
        diverged_at,
        state_bytes: engine.state_bytes(),
        full_precision_bytes: engine.full_precision_bytes(),
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}
