use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};

use super::config::{parse_override, Method, RunConfig};
use super::run::{run_experiment, RunReport};

/// One value of an axis: a label and the overrides it applies.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisPoint {
    pub label: String,
    pub overrides: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub name: String,
    pub points: Vec<AxisPoint>,
}

/// Names accepted by [`Axis::preset`].
pub const PRESETS: [&str; 6] = [
    "base_timing",
    "base_input",
    "momentum_sets",
    "quantize",
    "retain_freq",
    "methods",
];

fn ov(key: &str, value: &str) -> (String, String) {
    (key.to_string(), value.to_string())
}

impl Axis {
    /// One point per value of a single key.
    pub fn values(name: &str, key: &str, values: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            points: values
                .iter()
                .map(|v| AxisPoint {
                    label: format!("{name}={v}"),
                    overrides: vec![ov(key, v)],
                })
                .collect(),
        }
    }

    /// `key=v1,v2,...`. Values are split on commas, so array values cannot
    /// be swept this way.
    pub fn parse(spec: &str) -> Result<Self> {
        let (key, values) = parse_override(spec)?;
        let values: Vec<&str> = values.split(',').map(str::trim).collect();
        if values.iter().any(|v| v.is_empty()) {
            return Err(Error::config(key, "empty value in axis"));
        }
        Ok(Self::values(&key, &key, &values))
    }

    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "base_timing" => Self::values(name, "dual.base_timing", &["before_delta", "after_delta", "after_param"]),
            "base_input" => Self::values(name, "dual.base_input", &["grad", "grad_minus_delta"]),
            "momentum_sets" => {
                let mut points = Vec::new();
                for (b, bl) in [("fast", "F"), ("slow", "S")] {
                    for (d, dl) in [("fast", "F"), ("slow", "S")] {
                        points.push(AxisPoint {
                            label: format!("momentum=({bl},{dl})"),
                            overrides: vec![ov("dual.base_momentum", b), ov("dual.delta_momentum", d)],
                        });
                    }
                }
                Self {
                    name: name.to_string(),
                    points,
                }
            }
            "quantize" => Self::values(name, "quant.subset", &["none", "base", "delta", "both"]),
            "retain_freq" => Self::values(name, "schedule.retain_freq", &["1", "2", "4", "5", "9", "14"]),
            "methods" => {
                let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
                Self::values(name, "method.name", &names)
            }
            other => {
                return Err(Error::config(
                    "preset",
                    format!("unknown preset `{other}` (known: {})", PRESETS.join(", ")),
                ))
            }
        })
    }
}

/// One cell of the cartesian product of the axes.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub label: String,
    pub overrides: Vec<(String, String)>,
}

/// Cartesian product in row-major order (the last axis varies fastest).
pub fn expand(axes: &[Axis]) -> Result<Vec<GridPoint>> {
    if axes.is_empty() {
        return Err(Error::config("sweep", "grid has no axes"));
    }
    if let Some(a) = axes.iter().find(|a| a.points.is_empty()) {
        return Err(Error::config(a.name.clone(), "axis has no points"));
    }
    let mut grid = vec![GridPoint {
        label: String::new(),
        overrides: Vec::new(),
    }];
    for axis in axes {
        grid = grid
            .iter()
            .flat_map(|g| {
                axis.points.iter().map(move |p| GridPoint {
                    label: if g.label.is_empty() {
                        p.label.clone()
                    } else {
                        format!("{}/{}", g.label, p.label)
                    },
                    overrides: g.overrides.iter().chain(&p.overrides).cloned().collect(),
                })
            })
            .collect();
    }
    Ok(grid)
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub point: GridPoint,
    pub outcome: std::result::Result<RunReport, String>,
}

impl SweepResult {
    pub fn failed(&self) -> bool {
        match &self.outcome {
            Ok(r) => r.diverged,
            Err(_) => true,
        }
    }
}

/// Runs every grid point on top of `base`, in parallel, keeping grid
/// order. A point whose config is invalid or whose run errors is recorded
/// and the sweep carries on.
pub fn run_sweep(base: &RunConfig, axes: &[Axis]) -> Result<Vec<SweepResult>> {
    let grid = expand(axes)?;
    Ok(grid
        .into_par_iter()
        .map(|point| {
            let outcome = base
                .with_overrides(&point.overrides)
                .and_then(|c| run_experiment(&c))
                .map_err(|e| e.to_string());
            SweepResult { point, outcome }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub label: String,
    pub method: String,
    pub optimizer: String,
    pub forget_freq: Option<u64>,
    pub retain_freq: Option<u64>,
    pub base_betas: String,
    pub delta_betas: String,
    pub quantize: String,
    pub final_loss_forget: Option<f64>,
    pub final_loss_retain: Option<f64>,
    pub mean_update_momentum: Option<f64>,
    pub mean_update_direction: Option<f64>,
    pub mean_gradient_ema: Option<f64>,
    pub diverged: bool,
    pub error: String,
    pub content_hash: String,
}

fn betas(b: (f64, f64)) -> String {
    format!("{}/{}", b.0, b.1)
}

fn snake<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

impl SummaryRow {
    pub fn from_report(label: &str, r: &RunReport) -> Self {
        let c = &r.config;
        let optim = (c.optim.beta1, c.optim.beta2);
        let (base, delta) = if c.method.name == Method::DualOptimPlus {
            let d = c.dual.dual_config();
            (d.base_betas.unwrap_or(optim), d.delta_betas.unwrap_or(optim))
        } else {
            (optim, optim)
        };
        let freqs = c
            .schedule
            .frequencies
            .clone()
            .unwrap_or_else(|| vec![c.schedule.forget_freq, c.schedule.retain_freq]);
        let last = r.final_losses();
        Self {
            label: label.to_string(),
            method: c.method.name.name().to_string(),
            optimizer: snake(&c.method.optimizer),
            forget_freq: freqs.first().copied(),
            retain_freq: freqs.get(1).copied(),
            base_betas: betas(base),
            delta_betas: betas(delta),
            quantize: snake(&c.quant.subset),
            final_loss_forget: last.and_then(|l| l.first().copied()),
            final_loss_retain: last.and_then(|l| l.get(1).copied()),
            mean_update_momentum: r.mean_similarity("update_momentum"),
            mean_update_direction: r.mean_similarity("update_direction"),
            mean_gradient_ema: r.mean_similarity("gradient_ema"),
            diverged: r.diverged,
            error: String::new(),
            content_hash: r.content_hash(),
        }
    }

    fn from_error(label: &str, error: &str) -> Self {
        Self {
            label: label.to_string(),
            method: String::new(),
            optimizer: String::new(),
            forget_freq: None,
            retain_freq: None,
            base_betas: String::new(),
            delta_betas: String::new(),
            quantize: String::new(),
            final_loss_forget: None,
            final_loss_retain: None,
            mean_update_momentum: None,
            mean_update_direction: None,
            mean_gradient_ema: None,
            diverged: false,
            error: error.to_string(),
            content_hash: String::new(),
        }
    }
}

pub fn summary_rows(results: &[SweepResult]) -> Vec<SummaryRow> {
    results
        .iter()
        .map(|r| match &r.outcome {
            Ok(report) => SummaryRow::from_report(&r.point.label, report),
            Err(e) => SummaryRow::from_error(&r.point.label, e),
        })
        .collect()
}

/// One header line and one row per entry.
pub fn summary_csv(rows: &[SummaryRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| Error::Io(e.to_string()))?;
    }
    if rows.is_empty() {
        return Err(Error::Rejected("summary needs at least one row".into()));
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
}
