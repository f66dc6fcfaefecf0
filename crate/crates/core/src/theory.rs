//! Limits of the base and delta states under periodic forget/retain
//! alternation with constant expected gradients `m*G` (forget) and `n*G`
//! (retain), and an independent scalar simulation to check them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};

/// Half-width of the uniform noise used by stochastic simulation, as a
/// fraction of `G`.
pub const STOCHASTIC_NOISE: f64 = 0.1;

/// Relative tolerance for grid agreement.
pub const GRID_TOLERANCE: f64 = 1e-6;

/// Constant-expectation gradient model: forget gradients average `m*G`,
/// retain gradients `n*G`, with `F_f` forget steps then `F_r` retain steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradientDynamics {
    pub m: f64,
    pub n: f64,
    pub g: f64,
    pub beta: f64,
    pub ff: u64,
    pub fr: u64,
}

impl GradientDynamics {
    pub fn new(m: f64, n: f64, g: f64, beta: f64, ff: u64, fr: u64) -> Result<Self> {
        let d = Self { m, n, g, beta, ff, fr };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("m", self.m), ("n", self.n)] {
            if !(-1.0..=1.0).contains(&v) {
                return Err(Error::invalid(name, format!("{v} not in [-1, 1]")));
            }
        }
        if !(self.g >= 0.0 && self.g.is_finite()) {
            return Err(Error::invalid("g", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::invalid("beta", format!("{} not in [0, 1)", self.beta)));
        }
        if self.ff == 0 || self.fr == 0 {
            return Err(Error::invalid("frequencies", "F_f and F_r must be >= 1"));
        }
        Ok(())
    }

    pub fn period(&self) -> u64 {
        self.ff + self.fr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StateLimits {
    pub base: f64,
    pub delta_f: f64,
    pub delta_r: f64,
}

impl StateLimits {
    fn as_array(&self) -> [f64; 3] {
        [self.base, self.delta_f, self.delta_r]
    }
}

fn powu(beta: f64, k: u64) -> f64 {
    beta.powi(k as i32)
}

/// Period-boundary limits of `B`, `Delta_f`, `Delta_r`.
pub fn closed_form_limits(d: &GradientDynamics) -> Result<StateLimits> {
    d.validate()?;
    let b = d.beta;
    let (bf, br) = (powu(b, d.ff), powu(b, d.fr));
    let whole = 1.0 - powu(b, d.period());
    let base = (br * (1.0 - bf) * d.m + (1.0 - br) * d.n) / whole * d.g;
    let delta_f = d.ff as f64 * powu(b, d.ff - 1) * (1.0 - b) * (1.0 - br) / ((1.0 - bf) * whole) * (d.m - d.n) * d.g;
    let delta_r = d.fr as f64 * powu(b, d.fr - 1) * (1.0 - b) * (1.0 - bf) / ((1.0 - br) * whole) * (d.n - d.m) * d.g;
    Ok(StateLimits { base, delta_f, delta_r })
}

/// The forget-gradient coefficient `m` at which the base limit vanishes for
/// a given retain coefficient `n`. Undefined for `beta = 0`.
pub fn negative_correlation_m(beta: f64, ff: u64, fr: u64, n: f64) -> Result<f64> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::invalid("beta", "boundary needs beta in (0, 1)"));
    }
    let (bf, br) = (powu(beta, ff), powu(beta, fr));
    Ok(-((1.0 - br) / (br * (1.0 - bf))) * n)
}

/// Runs the scalar base/delta recursions step by step and returns the states
/// at every period end.
///
/// Each step first moves the active delta towards `g - B_hat`, where `B_hat`
/// is the base from the previous step divided by `1 - beta^(t-1)` (zero at
/// `t = 1`), then moves the base towards `g`. With `stochastic`, every
/// gradient gets independent uniform noise of half-width
/// [`STOCHASTIC_NOISE`]`* G`.
pub fn simulate_states(d: &GradientDynamics, periods: u64, stochastic: bool, seed: u64) -> Result<Vec<StateLimits>> {
    d.validate()?;
    if periods == 0 {
        return Err(Error::invalid("periods", "must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = d.beta;
    let noise = STOCHASTIC_NOISE * d.g;
    let (mut base, mut delta) = (0.0f64, [0.0f64; 2]);
    let mut base_decay = 1.0f64;
    let mut out = Vec::with_capacity(periods as usize);
    for _ in 0..periods {
        for k in 0..d.period() {
            let obj = usize::from(k >= d.ff);
            let mean = if obj == 0 { d.m } else { d.n } * d.g;
            let grad = if stochastic && noise > 0.0 {
                mean + rng.gen_range(-noise..=noise)
            } else {
                mean
            };
            let base_hat = if base_decay == 1.0 { 0.0 } else { base / (1.0 - base_decay) };
            delta[obj] = b * delta[obj] + (1.0 - b) * (grad - base_hat);
            base = b * base + (1.0 - b) * grad;
            base_decay *= b;
        }
        out.push(StateLimits {
            base,
            delta_f: delta[0],
            delta_r: delta[1],
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    AlternateLike,
    DualOptimLike,
    Intermediate,
}

/// Both deltas vanish: one shared state, like plain alternation. The base
/// vanishes: fully decoupled states.
pub fn boundary_classifier(d: &GradientDynamics, tol: f64) -> Result<Regime> {
    if !(tol > 0.0) {
        return Err(Error::invalid("tol", "must be > 0"));
    }
    let lim = closed_form_limits(d)?;
    let bound = tol * d.g;
    Ok(if lim.delta_f.abs() < bound && lim.delta_r.abs() < bound {
        Regime::AlternateLike
    } else if lim.base.abs() < bound {
        Regime::DualOptimLike
    } else {
        Regime::Intermediate
    })
}

/// Relative error, falling back to absolute error over `G` when the
/// reference is zero at this scale.
pub fn relative_error(got: f64, reference: f64, g: f64) -> f64 {
    let diff = (got - reference).abs();
    if reference.abs() > 1e-12 * g {
        diff / reference.abs()
    } else if g > 0.0 {
        diff / g
    } else {
        diff
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GridRow {
    pub dynamics: GradientDynamics,
    pub closed_form: StateLimits,
    pub simulated: StateLimits,
    pub max_rel_error: f64,
    pub pass: bool,
}

/// Every combination of `beta in {0.5, 0.9, 0.99}`,
/// `(F_f, F_r) in {(1,1), (1,5), (2,3)}` and three `(m, n)` pairs, plus a
/// positively correlated point (`m = n`) and a point on the negative
/// correlation boundary.
pub fn default_grid() -> Vec<GradientDynamics> {
    let mut points = Vec::new();
    for beta in [0.5, 0.9, 0.99] {
        for (ff, fr) in [(1, 1), (1, 5), (2, 3)] {
            for (m, n) in [(1.0, 0.0), (0.5, -0.5), (-0.3, 0.8)] {
                points.push(GradientDynamics { m, n, g: 1.0, beta, ff, fr });
            }
        }
    }
    points.push(GradientDynamics { m: 0.5, n: 0.5, g: 2.0, beta: 0.9, ff: 1, fr: 5 });
    let n = -0.05;
    let m = negative_correlation_m(0.9, 1, 5, n).expect("beta in range");
    points.push(GradientDynamics { m, n, g: 1.0, beta: 0.9, ff: 1, fr: 5 });
    points
}

pub fn verify_point(d: &GradientDynamics, periods: u64) -> Result<GridRow> {
    let closed_form = closed_form_limits(d)?;
    let simulated = *simulate_states(d, periods, false, 0)?.last().expect("periods >= 1");
    let max_rel_error = closed_form
        .as_array()
        .iter()
        .zip(simulated.as_array())
        .map(|(&c, s)| relative_error(s, c, d.g))
        .fold(0.0, f64::max);
    Ok(GridRow {
        dynamics: *d,
        closed_form,
        simulated,
        max_rel_error,
        pass: max_rel_error <= GRID_TOLERANCE,
    })
}

/// Deterministic simulation against the closed forms over `points`, in
/// parallel.
pub fn verify_grid(points: &[GradientDynamics], periods: u64) -> Result<Vec<GridRow>> {
    points.par_iter().map(|d| verify_point(d, periods)).collect()
}

/// Mean of each state over the given period-end samples.
pub fn time_average(samples: &[StateLimits]) -> StateLimits {
    let n = samples.len().max(1) as f64;
    let sum = samples.iter().fold([0.0; 3], |acc, s| {
        let a = s.as_array();
        [acc[0] + a[0], acc[1] + a[1], acc[2] + a[2]]
    });
    StateLimits {
        base: sum[0] / n,
        delta_f: sum[1] / n,
        delta_r: sum[2] / n,
    }
}
