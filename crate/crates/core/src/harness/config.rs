use serde::{Deserialize, Serialize};

use crate::dual::{BaseInput, BaseTiming, DualConfig};
use crate::error::{Error, Result};
use crate::optim::{AdamWParams, MuonParams, SgdParams};
use crate::quant::{QuantSubset, DEFAULT_BLOCK_SIZE};
use crate::schedule::{AlternationSchedule, LrSchedule, LrShape};

use super::task::TaskConfig;

/// Updating scheme of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Method {
    #[serde(rename = "joint")]
    Joint,
    #[serde(rename = "alternate")]
    Alternate,
    #[serde(rename = "dualoptim")]
    DualOptim,
    #[default]
    #[serde(rename = "dualoptim_plus")]
    DualOptimPlus,
    #[serde(rename = "scaffold")]
    Scaffold,
    #[serde(rename = "fedcm")]
    FedCm,
    #[serde(rename = "local_adam")]
    LocalAdam,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Joint,
        Method::Alternate,
        Method::DualOptim,
        Method::DualOptimPlus,
        Method::Scaffold,
        Method::FedCm,
        Method::LocalAdam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Joint => "joint",
            Method::Alternate => "alternate",
            Method::DualOptim => "dualoptim",
            Method::DualOptimPlus => "dualoptim_plus",
            Method::Scaffold => "scaffold",
            Method::FedCm => "fedcm",
            Method::LocalAdam => "local_adam",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adamw,
    Muon,
    Sgd,
}

/// Named `(beta1, beta2)` pairs for the per-state momentum ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentumSet {
    /// `(0.9, 0.95)`
    Fast,
    /// `(0.99, 0.999)`
    Slow,
}

impl MomentumSet {
    pub fn betas(self) -> (f64, f64) {
        match self {
            MomentumSet::Fast => (0.9, 0.95),
            MomentumSet::Slow => (0.99, 0.999),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodConfig {
    pub name: Method,
    /// Multiplies the forget gradient (and the forget term of the joint sum).
    pub forget_weight: f64,
    pub optimizer: OptimizerKind,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            name: Method::default(),
            forget_weight: 1.0,
            optimizer: OptimizerKind::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Momentum for Muon and SGD.
    pub momentum: f64,
    pub ns_iterations: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let a = AdamWParams::default();
        Self {
            lr: 1e-2,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
            momentum: MuonParams::default().momentum,
            ns_iterations: MuonParams::default().ns_iterations,
        }
    }
}

impl OptimConfig {
    pub fn adamw(&self) -> AdamWParams {
        AdamWParams {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn muon(&self) -> MuonParams {
        MuonParams {
            lr: self.lr,
            momentum: self.momentum,
            ns_iterations: self.ns_iterations,
            ..MuonParams::default()
        }
    }

    pub fn sgd(&self) -> SgdParams {
        SgdParams {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub forget_freq: u64,
    pub retain_freq: u64,
    /// Per-objective step counts for tasks with more than two objectives;
    /// overrides `forget_freq`/`retain_freq` when set.
    pub frequencies: Option<Vec<u64>>,
    pub total_steps: u64,
    pub lr_shape: LrShape,
    /// Defaults to one fifth of `total_steps`.
    pub warmup_steps: Option<u64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            forget_freq: 1,
            retain_freq: 5,
            frequencies: None,
            total_steps: 300,
            lr_shape: LrShape::default(),
            warmup_steps: None,
        }
    }
}

/// Epoch count used to derive the default warmup (the first epoch).
pub const DEFAULT_EPOCHS: u64 = 5;

impl ScheduleConfig {
    pub fn alternation(&self, n_objectives: usize) -> Result<AlternationSchedule> {
        let freqs = match &self.frequencies {
            Some(f) => f.clone(),
            None if n_objectives == 2 => vec![self.forget_freq, self.retain_freq],
            None => vec![1; n_objectives],
        };
        if freqs.len() != n_objectives {
            return Err(Error::config(
                "schedule.frequencies",
                format!("task has {n_objectives} objectives, got {} frequencies", freqs.len()),
            ));
        }
        AlternationSchedule::round_robin(freqs, self.total_steps)
    }

    pub fn lr(&self, peak: f64) -> Result<LrSchedule> {
        let mut s = match self.warmup_steps {
            Some(w) => LrSchedule::new(peak, w, self.total_steps)?,
            None => LrSchedule::warmup_first_epoch(peak, self.total_steps, DEFAULT_EPOCHS)?,
        };
        s.shape = self.lr_shape;
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DualSection {
    pub base_timing: BaseTiming,
    pub base_input: BaseInput,
    pub base_momentum: Option<MomentumSet>,
    pub delta_momentum: Option<MomentumSet>,
}

impl DualSection {
    pub fn dual_config(&self) -> DualConfig {
        DualConfig {
            timing: self.base_timing,
            base_input: self.base_input,
            base_betas: self.base_momentum.map(MomentumSet::betas),
            delta_betas: self.delta_momentum.map(MomentumSet::betas),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantConfig {
    pub subset: QuantSubset,
    pub block_size: usize,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            subset: QuantSubset::None,
            block_size: DEFAULT_BLOCK_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    pub enabled: bool,
    pub burn_in: u64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            burn_in: crate::diagnostics::DEFAULT_BURN_IN,
        }
    }
}

/// Everything that determines a run. Every section and key is optional in
/// the TOML form; missing values take the defaults below.
///
/// ```toml
/// seed = 0
///
/// [task]
/// kind = "conflicting_quadratic"   # | "logistic_forget_retain" | "three_task"
/// dim = 16
/// separation = 2.0
/// clip_radius = 10.0
/// samples = 64
/// # matrix_rows = 4               # reshape parameters to rows x (dim / rows)
///
/// [method]
/// name = "dualoptim_plus"          # joint | alternate | dualoptim | dualoptim_plus
///                                  # | scaffold | fedcm | local_adam
/// forget_weight = 1.0
/// optimizer = "adamw"              # | "muon" | "sgd"
///
/// [optim]
/// lr = 0.01
/// beta1 = 0.9
/// beta2 = 0.95
/// eps = 1e-8
/// weight_decay = 0.01
/// momentum = 0.95
/// ns_iterations = 5
///
/// [schedule]
/// forget_freq = 1
/// retain_freq = 5
/// # frequencies = [1, 1, 1]
/// total_steps = 300
/// lr_shape = "warmup_linear_decay" # | "constant"
/// # warmup_steps = 60
///
/// [dual]
/// base_timing = "after_param"      # | "before_delta" | "after_delta"
/// base_input = "grad"              # | "grad_minus_delta"
/// # base_momentum = "fast"         # | "slow"
/// # delta_momentum = "slow"
///
/// [quant]
/// subset = "none"                  # | "base" | "delta" | "both"
/// block_size = 256
///
/// [diagnostics]
/// enabled = false
/// burn_in = 200
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub task: TaskConfig,
    pub method: MethodConfig,
    pub optim: OptimConfig,
    pub schedule: ScheduleConfig,
    pub dual: DualSection,
    pub quant: QuantConfig,
    pub diagnostics: DiagnosticsConfig,
}

/// Splits `a.b.c=value` into its key and value.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::config(s, "override must look like key=value"))?;
    let k = k.trim();
    if k.is_empty() || k.split('.').any(str::is_empty) {
        return Err(Error::config(k, "empty key segment"));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

/// A bare override value is read as TOML when it parses (numbers, booleans,
/// arrays, quoted strings) and as a plain string otherwise.
fn override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{part}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), override_value(raw));
    Ok(())
}

fn from_table(table: toml::Table) -> Result<RunConfig> {
    let config: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
        let path = e.path().to_string();
        let reason = e.into_inner().to_string();
        let reason = reason.lines().next().unwrap_or_default().to_string();
        Error::config(if path == "." { "<root>".to_string() } else { path }, reason)
    })?;
    config.validate()?;
    Ok(config)
}

impl RunConfig {
    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<file>", e.to_string()))?;
        for (k, v) in overrides {
            apply_override(&mut table, k, v)?;
        }
        from_table(table)
    }

    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = toml::Table::try_from(self).map_err(|e| Error::config("<root>", e.to_string()))?;
        for (k, v) in overrides {
            apply_override(&mut table, k, v)?;
        }
        from_table(table)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, reason: &str| Err(Error::config(key, reason));
        if self.task.dim == 0 {
            return fail("task.dim", "must be >= 1");
        }
        if let Some(rows) = self.task.matrix_rows {
            if rows == 0 || !self.task.dim.is_multiple_of(rows) {
                return fail("task.matrix_rows", "must divide task.dim");
            }
        }
        if !(self.task.clip_radius > 0.0) {
            return fail("task.clip_radius", "must be > 0");
        }
        if !(self.task.separation >= 0.0) {
            return fail("task.separation", "must be >= 0");
        }
        if !self.method.forget_weight.is_finite() {
            return fail("method.forget_weight", "must be finite");
        }
        if self.schedule.total_steps == 0 {
            return fail("schedule.total_steps", "must be >= 1");
        }
        if self.quant.block_size == 0 {
            return fail("quant.block_size", "must be >= 1");
        }
        if let Err(e) = self.optim.adamw().validate() {
            return Err(Error::config("optim", e.to_string()));
        }
        if self.method.optimizer == OptimizerKind::Muon && self.task.matrix_rows.is_none() {
            return fail("method.optimizer", "muon needs matrix parameters (set task.matrix_rows)");
        }
        let adamw_only = matches!(self.method.name, Method::Scaffold | Method::FedCm | Method::LocalAdam);
        if adamw_only && self.method.optimizer != OptimizerKind::Adamw {
            return fail("method.optimizer", "federated-style baselines are AdamW only");
        }
        if self.method.name == Method::DualOptimPlus && self.method.optimizer == OptimizerKind::Sgd {
            return fail("method.optimizer", "dualoptim_plus supports adamw and muon");
        }
        Ok(())
    }
}
