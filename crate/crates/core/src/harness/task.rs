use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Buffer;
use crate::schedule::ObjectiveId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Retain `1/2 |theta - a|^2`; forget is gradient ascent on
    /// `1/2 |theta - b|^2`, linearised beyond the clip radius.
    #[default]
    ConflictingQuadratic,
    /// Logistic loss minimised on one cluster and maximised on another.
    LogisticForgetRetain,
    /// Three quadratic objectives with distinct centres.
    ThreeTask,
}

impl TaskKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "conflicting_quadratic" => Ok(Self::ConflictingQuadratic),
            "logistic_forget_retain" => Ok(Self::LogisticForgetRetain),
            "three_task" => Ok(Self::ThreeTask),
            other => Err(Error::config("task.kind", format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub dim: usize,
    /// Distance between the retain centre `a` and the forget centre `b`
    /// (quadratic), or between cluster centres (logistic), or the spread of
    /// the three centres.
    pub separation: f64,
    /// Radius beyond which the quadratic forget loss grows linearly.
    pub clip_radius: f64,
    /// Points per cluster for the logistic task.
    pub samples: usize,
    /// Reshape the parameters into a `rows x (dim / rows)` matrix.
    pub matrix_rows: Option<usize>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            kind: TaskKind::default(),
            dim: 16,
            separation: 2.0,
            clip_radius: 10.0,
            samples: 64,
            matrix_rows: None,
        }
    }
}

#[derive(Debug, Clone)]
enum TaskData {
    Quadratic { a: Buffer, b: Buffer, clip_radius: f64 },
    Logistic { forget: Cluster, retain: Cluster },
    Three { centres: Vec<Buffer> },
}

/// Labelled points, `x` row-major `n x d`, labels in `{-1, +1}`.
#[derive(Debug, Clone)]
struct Cluster {
    x: Vec<f64>,
    y: Vec<f64>,
    dim: usize,
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Cluster {
    fn rows(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.x.chunks(self.dim).zip(self.y.iter().copied())
    }

    fn margin(row: &[f64], theta: &[f64]) -> f64 {
        row.iter().zip(theta).map(|(a, b)| a * b).sum()
    }

    /// Mean of `log(1 + exp(-y x.theta))`.
    fn loss(&self, theta: &[f64]) -> f64 {
        let n = self.y.len() as f64;
        self.rows().map(|(row, y)| softplus(-y * Self::margin(row, theta))).sum::<f64>() / n
    }

    fn grad(&self, theta: &[f64]) -> Vec<f64> {
        let n = self.y.len() as f64;
        let mut g = vec![0.0; self.dim];
        for (row, y) in self.rows() {
            let c = -y * sigmoid(-y * Self::margin(row, theta)) / n;
            for (gi, xi) in g.iter_mut().zip(row) {
                *gi += c * xi;
            }
        }
        g
    }
}

fn uniform_vec(rng: &mut ChaCha8Rng, dim: usize, half_width: f64) -> Vec<f64> {
    (0..dim).map(|_| rng.gen_range(-half_width..=half_width)).collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v = uniform_vec(rng, dim, 1.0);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// A small deterministic problem with per-objective losses and analytic
/// gradients. Objective 0 is forget and 1 is retain for two-objective tasks.
#[derive(Debug, Clone)]
pub struct ToyTask {
    pub kind: TaskKind,
    shape: Vec<usize>,
    init: Buffer,
    data: TaskData,
}

impl ToyTask {
    pub fn new(config: &TaskConfig, seed: u64) -> Result<Self> {
        let d = config.dim;
        if d == 0 {
            return Err(Error::config("task.dim", "must be >= 1"));
        }
        let shape = match config.matrix_rows {
            Some(r) if r > 0 && d.is_multiple_of(r) => vec![r, d / r],
            Some(_) => return Err(Error::config("task.matrix_rows", "must divide task.dim")),
            None => vec![d],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (data, init) = match config.kind {
            TaskKind::ConflictingQuadratic => {
                let a = uniform_vec(&mut rng, d, 1.0);
                let u = unit_vec(&mut rng, d);
                let b: Vec<f64> = a.iter().zip(&u).map(|(ai, ui)| ai + config.separation * ui).collect();
                // starting point: minimiser of the loss fitted on both sets
                let init: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
                let data = TaskData::Quadratic {
                    a: Buffer::from_vec(a),
                    b: Buffer::from_vec(b),
                    clip_radius: config.clip_radius,
                };
                (data, init)
            }
            TaskKind::LogisticForgetRetain => {
                let truth = unit_vec(&mut rng, d);
                let axis = unit_vec(&mut rng, d);
                let mut cluster = |sign: f64| {
                    let mut x = Vec::with_capacity(config.samples * d);
                    let mut y = Vec::with_capacity(config.samples);
                    for _ in 0..config.samples {
                        // unit-variance uniform noise around the centre
                        let row: Vec<f64> = axis
                            .iter()
                            .map(|c| sign * 0.5 * config.separation * c + rng.gen_range(-1.0..=1.0) * 3f64.sqrt())
                            .collect();
                        let m: f64 = row.iter().zip(&truth).map(|(a, b)| a * b).sum();
                        y.push(if m >= 0.0 { 1.0 } else { -1.0 });
                        x.extend(row);
                    }
                    Cluster { x, y, dim: d }
                };
                let forget = cluster(1.0);
                let retain = cluster(-1.0);
                let init = pretrain(&forget, &retain, d);
                (TaskData::Logistic { forget, retain }, init)
            }
            TaskKind::ThreeTask => {
                let centres = (0..3)
                    .map(|_| Buffer::from_vec(uniform_vec(&mut rng, d, config.separation.max(f64::MIN_POSITIVE))))
                    .collect();
                (TaskData::Three { centres }, vec![0.0; d])
            }
        };
        Ok(Self {
            kind: config.kind,
            init: Buffer::new(shape.clone(), init)?,
            shape,
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn n_objectives(&self) -> usize {
        match self.data {
            TaskData::Three { .. } => 3,
            _ => 2,
        }
    }

    pub fn initial_params(&self) -> Buffer {
        self.init.clone()
    }

    /// Retain minimiser `a` and forget centre `b` of the quadratic task.
    pub fn quadratic_centres(&self) -> Option<(&Buffer, &Buffer)> {
        match &self.data {
            TaskData::Quadratic { a, b, .. } => Some((a, b)),
            _ => None,
        }
    }

    fn check(&self, theta: &Buffer) -> Result<()> {
        if theta.shape() != self.shape.as_slice() {
            return Err(Error::ShapeMismatch {
                expected: self.shape.clone(),
                got: theta.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn objective_index(&self, objective: ObjectiveId) -> Result<usize> {
        if objective.0 >= self.n_objectives() {
            return Err(Error::UnknownObjective {
                id: objective.0,
                count: self.n_objectives(),
            });
        }
        Ok(objective.0)
    }

    pub fn loss(&self, theta: &Buffer, objective: ObjectiveId) -> Result<f64> {
        self.check(theta)?;
        let i = self.objective_index(objective)?;
        let th = theta.data();
        Ok(match &self.data {
            TaskData::Quadratic { a, b, clip_radius } => {
                if i == 1 {
                    0.5 * sq_dist(th, a.data())
                } else {
                    let r = sq_dist(th, b.data()).sqrt();
                    if r <= *clip_radius {
                        -0.5 * r * r
                    } else {
                        -(clip_radius * r - 0.5 * clip_radius * clip_radius)
                    }
                }
            }
            TaskData::Logistic { forget, retain } => {
                if i == 0 {
                    -forget.loss(th)
                } else {
                    retain.loss(th)
                }
            }
            TaskData::Three { centres } => 0.5 * sq_dist(th, centres[i].data()),
        })
    }

    pub fn losses(&self, theta: &Buffer) -> Result<Vec<f64>> {
        (0..self.n_objectives()).map(|i| self.loss(theta, ObjectiveId(i))).collect()
    }

    pub fn gradient(&self, theta: &Buffer, objective: ObjectiveId) -> Result<Buffer> {
        self.check(theta)?;
        let i = self.objective_index(objective)?;
        let th = theta.data();
        let g: Vec<f64> = match &self.data {
            TaskData::Quadratic { a, b, clip_radius } => {
                if i == 1 {
                    th.iter().zip(a.data()).map(|(x, c)| x - c).collect()
                } else {
                    let r = sq_dist(th, b.data()).sqrt();
                    let s = if r <= *clip_radius { 1.0 } else { clip_radius / r };
                    th.iter().zip(b.data()).map(|(x, c)| -s * (x - c)).collect()
                }
            }
            TaskData::Logistic { forget, retain } => {
                if i == 0 {
                    forget.grad(th).into_iter().map(|v| -v).collect()
                } else {
                    retain.grad(th)
                }
            }
            TaskData::Three { centres } => th.iter().zip(centres[i].data()).map(|(x, c)| x - c).collect(),
        };
        Buffer::new(self.shape.clone(), g)
    }

    /// Minimiser of `L_r + w L_f` for the quadratic task, or of the plain
    /// sum for the three-task problem. `None` where no closed form applies.
    pub fn joint_minimizer(&self, forget_weight: f64) -> Option<Buffer> {
        match &self.data {
            TaskData::Quadratic { a, b, clip_radius } => {
                let w = forget_weight;
                let gap = a.sub(b).ok()?;
                let dist = gap.norm();
                if w == 0.0 || dist == 0.0 {
                    return Some(a.clone());
                }
                // inside the clip radius: (theta - a) - w (theta - b) = 0
                if w < 1.0 && dist / (1.0 - w) <= *clip_radius {
                    let th = a.zip_map(b, |x, y| (x - w * y) / (1.0 - w)).ok()?;
                    return th.reshape(self.shape.clone()).ok();
                }
                // outside: theta - a = w R (theta - b) / |theta - b|
                let th = a.zip_map(&gap, |x, g| x + w * clip_radius * g / dist).ok()?;
                Some(th.reshape(self.shape.clone()).ok()?)
            }
            TaskData::Three { centres } => {
                let mut acc = Buffer::zeros_like(&centres[0]);
                for c in centres {
                    acc = acc.add(c).ok()?;
                }
                Some(acc.scale(1.0 / centres.len() as f64).reshape(self.shape.clone()).ok()?)
            }
            TaskData::Logistic { .. } => None,
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Plain gradient descent on the loss over both clusters, standing in for
/// the model before unlearning.
fn pretrain(forget: &Cluster, retain: &Cluster, dim: usize) -> Vec<f64> {
    let mut theta = vec![0.0; dim];
    for _ in 0..200 {
        let gf = forget.grad(&theta);
        let gr = retain.grad(&theta);
        for ((t, a), b) in theta.iter_mut().zip(gf).zip(gr) {
            *t -= 0.5 * 0.5 * (a + b);
        }
    }
    theta
}
