use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::baselines::{Alternate, DualOptim};
use crate::diagnostics::{update_similarity, UpdateKind, UpdateRecord, SimilarityTrace};
use crate::dual::DualState;
use crate::error::{Error, Result};
use crate::numkit::Buffer;
use crate::optim::{AdamW, AdamWParams, AnyOptimizer, ObjectiveOptimizer};
use crate::schedule::{AlternationSchedule, ObjectiveId};
use crate::theory::GradientDynamics;

/// I.i.d. gradients with per-coordinate means `m*G` (forget) and `n*G`
/// (retain) plus uniform noise of half-width `noise`, never exceeding `G`
/// in magnitude.
#[derive(Debug, Clone)]
pub struct SyntheticStream {
    pub dynamics: GradientDynamics,
    pub noise: f64,
    pub dim: usize,
    pub seed: u64,
    rng: ChaCha8Rng,
}

impl SyntheticStream {
    pub fn new(dynamics: GradientDynamics, noise: f64, dim: usize, seed: u64) -> Result<Self> {
        dynamics.validate()?;
        if !(noise >= 0.0 && noise.is_finite()) {
            return Err(Error::invalid("noise", "must be finite and >= 0"));
        }
        if dim == 0 {
            return Err(Error::invalid("dim", "must be >= 1"));
        }
        let bound = dynamics.g * (1.0 + 1e-12);
        for (name, c) in [("m", dynamics.m), ("n", dynamics.n)] {
            if c.abs() * dynamics.g + noise > bound {
                return Err(Error::invalid(
                    "noise",
                    format!("|{name}|*G + noise exceeds G ({} + {noise} > {})", c.abs() * dynamics.g, dynamics.g),
                ));
            }
        }
        Ok(Self {
            dynamics,
            noise,
            dim,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// The conflicting stream used for the similarity ordering check:
    /// `m = 0.7`, `n = -0.1`, `G = 1`, noise `0.3`, 16 coordinates,
    /// `F_f = 1`, `F_r = 5`.
    pub fn conflicting(seed: u64) -> Self {
        let d = GradientDynamics::new(0.7, -0.1, 1.0, 0.9, 1, 5).expect("valid dynamics");
        Self::new(d, 0.3, 16, seed).expect("valid stream")
    }

    pub fn next(&mut self, objective: ObjectiveId) -> Result<Buffer> {
        let mean = match objective.0 {
            0 => self.dynamics.m,
            1 => self.dynamics.n,
            id => return Err(Error::UnknownObjective { id, count: 2 }),
        } * self.dynamics.g;
        let noise = self.noise;
        let data = (0..self.dim)
            .map(|_| if noise > 0.0 { mean + self.rng.gen_range(-noise..=noise) } else { mean })
            .collect();
        Ok(Buffer::from_vec(data))
    }

    pub fn schedule(&self, total_steps: u64) -> Result<AlternationSchedule> {
        AlternationSchedule::new(self.dynamics.ff, self.dynamics.fr, total_steps)
    }
}

/// Feeds the stream to `opt` for every scheduled step and records what each
/// step reported.
pub fn replay_stream(
    opt: &mut dyn ObjectiveOptimizer,
    stream: &mut SyntheticStream,
    schedule: &AlternationSchedule,
) -> Result<Vec<UpdateRecord>> {
    let mut theta = Buffer::zeros(&[stream.dim]);
    let mut records = Vec::with_capacity(schedule.total_steps() as usize);
    for t in 1..=schedule.total_steps() {
        let obj = schedule.objective_at(t)?;
        let g = stream.next(obj)?;
        let out = opt.step(&mut theta, &g, obj)?;
        records.push(UpdateRecord::new(t, obj, out));
    }
    Ok(records)
}

/// Update-similarity traces of Alternate, DualOptim+ and DualOptim on
/// identical copies of `stream`, in that order.
pub fn stream_similarities(
    stream: &SyntheticStream,
    total_steps: u64,
    params: AdamWParams,
    kind: UpdateKind,
) -> Result<Vec<SimilarityTrace>> {
    let schedule = stream.schedule(total_steps)?;
    let shape = [stream.dim];
    let adamw = || -> Result<AnyOptimizer> { Ok(AnyOptimizer::AdamW(AdamW::new(&shape, params)?)) };
    let mut alternate = Alternate::new(adamw()?, 2);
    let mut plus = DualState::adamw(&shape, 2, params)?;
    let mut decoupled = DualOptim::new(vec![adamw()?, adamw()?])?;
    let runs: [(&str, &mut dyn ObjectiveOptimizer); 3] = [
        ("alternate", &mut alternate),
        ("dualoptim_plus", &mut plus),
        ("dualoptim", &mut decoupled),
    ];
    let mut traces = Vec::new();
    for (label, opt) in runs {
        let records = replay_stream(opt, &mut stream.clone(), &schedule)?;
        traces.push(update_similarity(&records, kind, label)?);
    }
    Ok(traces)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::DEFAULT_BURN_IN;

    #[test]
    fn bounded_and_centred() {
        let mut s = SyntheticStream::conflicting(1);
        let (mut sf, mut sr) = (0.0, 0.0);
        let n = 4000;
        for _ in 0..n {
            let f = s.next(ObjectiveId::FORGET).unwrap();
            let r = s.next(ObjectiveId::RETAIN).unwrap();
            assert!(f.max_abs() <= 1.0 && r.max_abs() <= 1.0);
            sf += f.data().iter().sum::<f64>();
            sr += r.data().iter().sum::<f64>();
        }
        assert!((sf / (n * 16) as f64 - 0.7).abs() < 0.01);
        assert!((sr / (n * 16) as f64 + 0.1).abs() < 0.01);
    }

    #[test]
    fn bound_violation_rejected() {
        let d = GradientDynamics::new(0.9, 0.0, 1.0, 0.9, 1, 5).unwrap();
        assert!(SyntheticStream::new(d, 0.2, 4, 0).is_err());
        assert!(SyntheticStream::new(d, 0.1, 4, 0).is_ok());
        assert!(SyntheticStream::new(d, 0.1, 0, 0).is_err());
        let mut s = SyntheticStream::new(d, 0.1, 4, 0).unwrap();
        assert!(s.next(ObjectiveId(2)).is_err());
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = SyntheticStream::conflicting(3);
        let mut b = SyntheticStream::conflicting(3);
        for t in 0..20 {
            let o = ObjectiveId(t % 2);
            assert_eq!(a.next(o).unwrap(), b.next(o).unwrap());
        }
    }

    #[test]
    fn equal_means_keep_shared_state_aligned() {
        let d = GradientDynamics::new(0.5, 0.5, 1.0, 0.9, 1, 5).unwrap();
        let s = SyntheticStream::new(d, 0.0, 8, 0).unwrap();
        let traces = stream_similarities(&s, 600, AdamWParams::default(), UpdateKind::Momentum).unwrap();
        let alt = traces[0].mean_after(DEFAULT_BURN_IN).unwrap();
        assert!((alt - 1.0).abs() < 1e-9, "{alt}");
    }

    #[test]
    fn opposite_means_decouple_fully() {
        let d = GradientDynamics::new(1.0, -1.0, 1.0, 0.9, 1, 5).unwrap();
        let s = SyntheticStream::new(d, 0.0, 8, 0).unwrap();
        let traces = stream_similarities(&s, 600, AdamWParams::default(), UpdateKind::Momentum).unwrap();
        let dec = traces[2].mean_after(DEFAULT_BURN_IN).unwrap();
        assert!((dec + 1.0).abs() < 1e-9, "{dec}");
    }

    #[test]
    fn forget_only_stream_is_intermediate() {
        // noise keeps the update vectors from all being multiples of one
        // direction; m + noise stays at the bound G
        let d = GradientDynamics::new(0.7, 0.0, 1.0, 0.9, 1, 5).unwrap();
        let s = SyntheticStream::new(d, 0.3, 16, 4).unwrap();
        let traces = stream_similarities(&s, 2000, AdamWParams::default(), UpdateKind::Momentum).unwrap();
        let m: Vec<f64> = traces.iter().map(|t| t.mean_after(DEFAULT_BURN_IN).unwrap()).collect();
        assert!(m[0] > m[1] && m[1] > m[2], "{m:?}");
    }
}
