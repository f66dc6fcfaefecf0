//! Cosine-similarity traces between per-objective update terms and between
//! EMA-smoothed gradient streams.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{cosine_similarity, Buffer};
use crate::optim::StepOutcome;
use crate::schedule::ObjectiveId;

pub const DEFAULT_BURN_IN: u64 = 200;
pub const GRADIENT_EMA_FACTOR: f64 = 0.9;

/// What a step reported, kept for similarity analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateRecord {
    pub step: u64,
    pub objective: ObjectiveId,
    pub momentum: Buffer,
    pub direction: Buffer,
}

impl UpdateRecord {
    pub fn new(step: u64, objective: ObjectiveId, outcome: StepOutcome) -> Self {
        Self {
            step,
            objective,
            momentum: outcome.momentum,
            direction: outcome.direction,
        }
    }
}

/// Which update vector a trace compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateKind {
    /// Momentum reconstruction before preconditioning.
    #[default]
    Momentum,
    /// Full preconditioned direction.
    Direction,
}

impl UpdateKind {
    pub fn name(self) -> &'static str {
        match self {
            UpdateKind::Momentum => "momentum",
            UpdateKind::Direction => "direction",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityTrace {
    pub label: String,
    pub steps: Vec<u64>,
    pub values: Vec<f64>,
}

impl SimilarityTrace {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Mean over entries with `step > burn_in`; `None` if there are none.
    pub fn mean_after(&self, burn_in: u64) -> Option<f64> {
        let kept: Vec<f64> = self
            .steps
            .iter()
            .zip(&self.values)
            .filter(|(&s, _)| s > burn_in)
            .map(|(_, &v)| v)
            .collect();
        (!kept.is_empty()).then(|| kept.iter().sum::<f64>() / kept.len() as f64)
    }
}

/// Cosine between the update of each forget step and the update of the
/// retain step that immediately follows it. `steps` holds the retain step.
pub fn update_similarity(records: &[UpdateRecord], kind: UpdateKind, label: &str) -> Result<SimilarityTrace> {
    let has = |o: ObjectiveId| records.iter().any(|r| r.objective == o);
    if !has(ObjectiveId::FORGET) || !has(ObjectiveId::RETAIN) {
        return Err(Error::Rejected(
            "update similarity needs steps from both forget and retain objectives".into(),
        ));
    }
    fn pick(r: &UpdateRecord, kind: UpdateKind) -> &Buffer {
        match kind {
            UpdateKind::Momentum => &r.momentum,
            UpdateKind::Direction => &r.direction,
        }
    }
    let mut trace = SimilarityTrace {
        label: label.to_string(),
        steps: Vec::new(),
        values: Vec::new(),
    };
    for pair in records.windows(2) {
        let (f, r) = (&pair[0], &pair[1]);
        if f.objective == ObjectiveId::FORGET && r.objective == ObjectiveId::RETAIN && r.step == f.step + 1 {
            trace.steps.push(r.step);
            trace.values.push(cosine_similarity(pick(f, kind), pick(r, kind))?);
        }
    }
    Ok(trace)
}

/// Two EMAs (`e <- factor * e + (1 - factor) * g`) of paired gradient
/// streams and their cosine after every step.
pub fn gradient_ema_similarity(
    forget: &[Buffer],
    retain: &[Buffer],
    factor: f64,
    label: &str,
) -> Result<SimilarityTrace> {
    if forget.len() != retain.len() {
        return Err(Error::invalid(
            "streams",
            format!("lengths differ: {} vs {}", forget.len(), retain.len()),
        ));
    }
    if !(0.0..1.0).contains(&factor) {
        return Err(Error::invalid("factor", format!("{factor} not in [0, 1)")));
    }
    let mut trace = SimilarityTrace {
        label: label.to_string(),
        steps: Vec::with_capacity(forget.len()),
        values: Vec::with_capacity(forget.len()),
    };
    let Some(first) = forget.first() else {
        return Ok(trace);
    };
    let mut ef = Buffer::zeros_like(first);
    let mut er = Buffer::zeros_like(first);
    for (t, (gf, gr)) in forget.iter().zip(retain).enumerate() {
        ef = ef.zip_map(gf, |e, g| factor * e + (1.0 - factor) * g)?;
        er = er.zip_map(gr, |e, g| factor * e + (1.0 - factor) * g)?;
        trace.steps.push(t as u64 + 1);
        trace.values.push(cosine_similarity(&ef, &er)?);
    }
    Ok(trace)
}

/// Writes `step,series,cosine` rows.
pub fn write_traces_csv<W: Write>(out: &mut W, traces: &[SimilarityTrace]) -> Result<()> {
    writeln!(out, "step,series,cosine")?;
    for trace in traces {
        for (s, v) in trace.steps.iter().zip(&trace.values) {
            writeln!(out, "{s},{},{v:.16e}", trace.label)?;
        }
    }
    Ok(())
}
