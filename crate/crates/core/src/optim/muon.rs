use crate::error::{Error, Result};
use crate::numkit::{matmul, Buffer};

use super::{MomentState, Optimizer, SlotRole, StateSlots, StepOutcome};

/// Quintic Newton–Schulz coefficients used by Muon.
pub const NS_QUINTIC: (f64, f64, f64) = (3.4445, -4.7750, 2.0315);

/// Frobenius norms below this orthogonalize to the zero matrix.
const NS_NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MuonParams {
    pub lr: f64,
    pub momentum: f64,
    pub ns_iterations: usize,
    pub ns_coefficients: (f64, f64, f64),
}

impl Default for MuonParams {
    fn default() -> Self {
        Self {
            lr: 2e-2,
            momentum: 0.95,
            ns_iterations: 5,
            ns_coefficients: NS_QUINTIC,
        }
    }
}

impl MuonParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum", format!("{} not in [0, 1)", self.momentum)));
        }
        if self.ns_iterations == 0 {
            return Err(Error::invalid("ns_iterations", "must be >= 1"));
        }
        Ok(())
    }
}

/// Approximate orthogonal polar factor of `m` by the odd matrix polynomial
/// `X <- aX + bX(X^T X) + cX(X^T X)^2`, starting from `m / |m|_F`.
///
/// The Gram matrix is formed on the smaller side, which is algebraically the
/// same iteration. A (near-)zero input returns zeros.
pub fn newton_schulz5(m: &Buffer, iterations: usize, coeffs: (f64, f64, f64)) -> Result<Buffer> {
    if !m.is_matrix() {
        return Err(Error::NotMatrix(m.shape().to_vec()));
    }
    let norm = m.norm();
    if norm < NS_NORM_FLOOR {
        return Ok(Buffer::zeros(m.shape()));
    }
    let (a, b, c) = coeffs;
    let wide = m.rows() <= m.cols();
    let mut x = m.scale(1.0 / norm);
    for _ in 0..iterations {
        // wide: A = X X^T, X <- aX + (bA + cA^2) X
        // tall: A = X^T X, X <- aX + X (bA + cA^2)
        let xt = x.transpose()?;
        let gram = if wide { matmul(&x, &xt)? } else { matmul(&xt, &x)? };
        let gram2 = matmul(&gram, &gram)?;
        let poly = gram.zip_map(&gram2, |g1, g2| b * g1 + c * g2)?;
        let tail = if wide { matmul(&poly, &x)? } else { matmul(&x, &poly)? };
        x = x.zip_map(&tail, |xi, ti| a * xi + ti)?;
    }
    Ok(x)
}

/// `momentum <- beta * momentum + g`; `theta <- theta - lr * NS5(momentum)`.
pub fn muon_step(
    theta: &mut Buffer,
    g: &Buffer,
    momentum: &mut MomentState,
    p: &MuonParams,
) -> Result<StepOutcome> {
    if !theta.is_matrix() {
        return Err(Error::NotMatrix(theta.shape().to_vec()));
    }
    theta.check_same_shape(g)?;
    g.check_finite("gradient")?;
    let mut mom = momentum.clone();
    mom.accumulate(g)?;
    let ortho = newton_schulz5(&mom.value, p.ns_iterations, p.ns_coefficients)?;
    let theta_new = theta.zip_map(&ortho, |th, o| th - p.lr * o)?;
    theta_new.check_finite("parameter after Muon step")?;
    *theta = theta_new;
    *momentum = mom;
    Ok(StepOutcome {
        momentum: momentum.value.clone(),
        direction: ortho,
    })
}

#[derive(Debug, Clone)]
pub struct Muon {
    pub params: MuonParams,
    pub momentum: MomentState,
}

impl Muon {
    pub fn new(shape: &[usize], params: MuonParams) -> Result<Self> {
        params.validate()?;
        if shape.len() != 2 {
            return Err(Error::NotMatrix(shape.to_vec()));
        }
        Ok(Self {
            momentum: MomentState::zeros(shape, params.momentum)?,
            params,
        })
    }
}

impl StateSlots for Muon {
    fn slots(&self) -> Vec<(SlotRole, &MomentState)> {
        vec![(SlotRole::Base, &self.momentum)]
    }

    fn slots_mut(&mut self) -> Vec<(SlotRole, &mut MomentState)> {
        vec![(SlotRole::Base, &mut self.momentum)]
    }
}

impl Optimizer for Muon {
    fn step(&mut self, theta: &mut Buffer, g: &Buffer) -> Result<StepOutcome> {
        muon_step(theta, g, &mut self.momentum, &self.params)
    }

    fn lr(&self) -> f64 {
        self.params.lr
    }

    fn set_lr(&mut self, lr: f64) {
        self.params.lr = lr;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rotation(angle: f64) -> Buffer {
        let (s, c) = angle.sin_cos();
        Buffer::from_rows(&[&[c, -s], &[s, c]]).unwrap()
    }

    #[test]
    fn identity_stays_near_identity() {
        let x = newton_schulz5(&Buffer::eye(2), 5, NS_QUINTIC).unwrap();
        assert!(x.max_abs_diff(&Buffer::eye(2)).unwrap() < 0.35);
        // off-diagonals stay exactly zero
        assert_eq!(x.data()[1], 0.0);
        assert_eq!(x.data()[2], 0.0);
    }

    #[test]
    fn positive_diagonal_maps_near_identity() {
        let m = Buffer::from_rows(&[&[3.0, 0.0], &[0.0, 1.0]]).unwrap();
        let x = newton_schulz5(&m, 5, NS_QUINTIC).unwrap();
        assert!(x.max_abs_diff(&Buffer::eye(2)).unwrap() < 0.35);
    }

    #[test]
    fn scaled_rotation_maps_near_rotation() {
        let q = rotation(0.7);
        let x = newton_schulz5(&q.scale(10.0), 5, NS_QUINTIC).unwrap();
        assert!(x.max_abs_diff(&q).unwrap() < 0.35);
    }

    #[test]
    fn classical_cubic_converges_on_orthogonal_input() {
        let q = rotation(-1.1);
        let x = newton_schulz5(&q, 20, (1.5, -0.5, 0.0)).unwrap();
        assert!(x.max_abs_diff(&q).unwrap() < 1e-12);
    }

    #[test]
    fn tall_and_wide_agree_with_transpose() {
        let m = Buffer::new(vec![2, 3], vec![1.0, 0.5, -0.2, 0.3, 2.0, 0.7]).unwrap();
        let wide = newton_schulz5(&m, 5, NS_QUINTIC).unwrap();
        let tall = newton_schulz5(&m.transpose().unwrap(), 5, NS_QUINTIC).unwrap();
        assert!(wide.max_abs_diff(&tall.transpose().unwrap()).unwrap() < 1e-12);
    }

    #[test]
    fn zero_input_gives_zero() {
        let z = Buffer::zeros(&[3, 2]);
        assert_eq!(newton_schulz5(&z, 5, NS_QUINTIC).unwrap(), z);
        assert!(newton_schulz5(&Buffer::zeros(&[4]), 5, NS_QUINTIC).is_err());
    }

    #[test]
    fn memoryless_step_on_orthogonal_gradient() {
        let p = MuonParams {
            lr: 0.1,
            momentum: 0.0,
            ..MuonParams::default()
        };
        let mut opt = Muon::new(&[2, 2], p).unwrap();
        let mut theta = Buffer::zeros(&[2, 2]);
        let q = rotation(0.3);
        opt.step(&mut theta, &q).unwrap();
        assert!(theta.max_abs_diff(&q.scale(-0.1)).unwrap() < 0.1 * 0.15);
    }

    #[test]
    fn null_gradient_is_noop() {
        let mut opt = Muon::new(&[2, 2], MuonParams::default()).unwrap();
        let mut theta = Buffer::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let before = theta.clone();
        opt.step(&mut theta, &Buffer::zeros(&[2, 2])).unwrap();
        assert_eq!(theta, before);
    }

    #[test]
    fn undamped_momentum_recursion() {
        let p = MuonParams {
            momentum: 0.9,
            ..MuonParams::default()
        };
        let mut opt = Muon::new(&[2, 2], p).unwrap();
        let mut theta = Buffer::zeros(&[2, 2]);
        let g = Buffer::from_rows(&[&[1.0, -1.0], &[0.5, 2.0]]).unwrap();
        opt.step(&mut theta, &g).unwrap();
        opt.step(&mut theta, &g).unwrap();
        assert!(opt.momentum.value.max_abs_diff(&g.scale(1.9)).unwrap() < 1e-15);
    }

    #[test]
    fn vector_parameter_rejected() {
        assert!(matches!(
            Muon::new(&[4], MuonParams::default()),
            Err(Error::NotMatrix(_))
        ));
        let mut m = MomentState::zeros(&[4], 0.9).unwrap();
        let mut theta = Buffer::zeros(&[4]);
        assert!(muon_step(&mut theta, &Buffer::zeros(&[4]), &mut m, &MuonParams::default()).is_err());
    }
}
