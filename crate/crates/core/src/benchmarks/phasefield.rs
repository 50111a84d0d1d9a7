//! Nonlocal Allen-Cahn type phase field on `(-1, 1)` with zero exterior
//! condition:
//!
//! `F(u) = -kappa ((-Delta)^{alpha/2} u + (1/eta^2) (u - 1)(u - 1/2) u)`.
//!
//! The fractional Laplacian is discretized by the fractional centered
//! difference on the interior nodes `x_j = -1 + j h`, giving a symmetric
//! Toeplitz matrix `A[i][j] = h^{-alpha} w_{|i-j|}`.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SaddleError};
use crate::force::ForceField;
use crate::learner::{lhs_sample, RegionSampler, TrustRegion};
use crate::linalg::SymmetricMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseFieldConfig {
    pub alpha: f64,
    pub h: f64,
    pub kappa: f64,
    pub inv_eta_sq: f64,
}

impl Default for PhaseFieldConfig {
    fn default() -> Self {
        Self {
            alpha: 1.5,
            h: 1.0 / 32.0,
            kappa: 0.02,
            inv_eta_sq: 30.0,
        }
    }
}

impl PhaseFieldConfig {
    pub fn with_inv_eta_sq(inv_eta_sq: f64) -> Self {
        Self {
            inv_eta_sq,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 2.0) {
            return Err(SaddleError::InvalidArgument(format!("alpha must lie in (0, 2), got {}", self.alpha)));
        }
        let cells = 2.0 / self.h;
        if !(self.h > 0.0 && (cells - cells.round()).abs() < 1e-9 && cells.round() >= 2.0) {
            return Err(SaddleError::InvalidArgument(format!("h = {} must divide 2", self.h)));
        }
        if !(self.kappa > 0.0 && self.inv_eta_sq > 0.0) {
            return Err(SaddleError::InvalidArgument("kappa and 1/eta^2 must be positive".into()));
        }
        Ok(())
    }

    /// Number of interior nodes.
    pub fn nodes(&self) -> usize {
        (2.0 / self.h).round() as usize - 1
    }

    pub fn grid(&self) -> Vec<f64> {
        (1..=self.nodes()).map(|j| -1.0 + j as f64 * self.h).collect()
    }
}

/// `w_0..w_{count-1}` of the fractional centered difference,
/// `w_k = (-1)^k G(alpha+1) / (G(alpha/2-k+1) G(alpha/2+k+1))`, by recurrence.
pub fn fractional_weights(alpha: f64, count: usize) -> Vec<f64> {
    let half = alpha / 2.0;
    let mut w = Vec::with_capacity(count);
    if count == 0 {
        return w;
    }
    w.push(libm::tgamma(alpha + 1.0) / libm::tgamma(half + 1.0).powi(2));
    for k in 1..count {
        let kf = (k - 1) as f64;
        let prev = w[k - 1];
        w.push(prev * (kf - half) / (kf + half + 1.0));
    }
    w
}

/// The discrete fractional Laplacian on the interior nodes.
pub fn frac_laplacian_matrix(cfg: &PhaseFieldConfig) -> Result<SymmetricMatrix> {
    cfg.validate()?;
    let n = cfg.nodes();
    let w = fractional_weights(cfg.alpha, n);
    let scale = cfg.h.powf(-cfg.alpha);
    SymmetricMatrix::new(DMatrix::from_fn(n, n, |i, j| scale * w[i.abs_diff(j)]))
}

fn check_dim(u: &DVector<f64>, a: &SymmetricMatrix) -> Result<()> {
    if u.len() != a.dim() {
        return Err(SaddleError::DimensionMismatch {
            expected: a.dim(),
            got: u.len(),
        });
    }
    Ok(())
}

/// `-kappa (A u + (1/eta^2) (u-1)(u-1/2) u)`.
pub fn phasefield_force(u: &DVector<f64>, cfg: &PhaseFieldConfig, a: &SymmetricMatrix) -> Result<DVector<f64>> {
    check_dim(u, a)?;
    let nonlinear = u.map(|v| (v - 1.0) * (v - 0.5) * v) * cfg.inv_eta_sq;
    Ok((a.matrix() * u + nonlinear) * -cfg.kappa)
}

/// `-kappa (A + (1/eta^2) diag(3u^2 - 3u + 1/2))`.
pub fn phasefield_jacobian(u: &DVector<f64>, cfg: &PhaseFieldConfig, a: &SymmetricMatrix) -> Result<SymmetricMatrix> {
    check_dim(u, a)?;
    let mut j = a.matrix().clone();
    for i in 0..u.len() {
        j[(i, i)] += cfg.inv_eta_sq * (3.0 * u[i] * u[i] - 3.0 * u[i] + 0.5);
    }
    SymmetricMatrix::new(j * -cfg.kappa)
}

/// `u_0(x) = (1 - x^2) / 2` on the interior nodes.
pub fn initial_profile(cfg: &PhaseFieldConfig) -> DVector<f64> {
    DVector::from_iterator(cfg.nodes(), cfg.grid().into_iter().map(|x| 0.5 * (1.0 - x * x)))
}

/// The phase-field force with its operator assembled once.
#[derive(Debug, Clone)]
pub struct PhaseField {
    pub config: PhaseFieldConfig,
    operator: SymmetricMatrix,
}

impl PhaseField {
    pub fn new(config: PhaseFieldConfig) -> Result<Self> {
        let operator = frac_laplacian_matrix(&config)?;
        Ok(Self { config, operator })
    }

    pub fn operator(&self) -> &SymmetricMatrix {
        &self.operator
    }

    pub fn jacobian(&self, u: &DVector<f64>) -> Result<SymmetricMatrix> {
        phasefield_jacobian(u, &self.config, &self.operator)
    }
}

impl ForceField for PhaseField {
    fn dim(&self) -> usize {
        self.operator.dim()
    }

    fn force(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        phasefield_force(x, &self.config, &self.operator)
    }
}

/// Smooth training curves `u_c + sum_q c_q sin(q pi (x+1)/2)`.
///
/// The coefficients come from a Latin hypercube in `[-1, 1]^modes` with the
/// `q`-th coefficient damped by `1/q`; each perturbation is rescaled so its
/// max-norm does not exceed the region half width.
#[derive(Debug, Clone)]
pub struct SmoothCurveSampler {
    basis: Vec<DVector<f64>>,
}

impl SmoothCurveSampler {
    pub fn new(cfg: &PhaseFieldConfig, modes: usize) -> Self {
        let grid = cfg.grid();
        let basis = (1..=modes)
            .map(|q| {
                DVector::from_iterator(
                    grid.len(),
                    grid.iter().map(|x| (q as f64 * PI * (x + 1.0) / 2.0).sin() / q as f64),
                )
            })
            .collect();
        Self { basis }
    }

    pub fn modes(&self) -> usize {
        self.basis.len()
    }
}

impl RegionSampler for SmoothCurveSampler {
    fn sample(&self, region: &TrustRegion, m: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
        let q = self.basis.len();
        let unit = TrustRegion {
            center: DVector::zeros(q),
            half_width: 1.0,
        };
        lhs_sample(&unit, m, rng)
            .into_iter()
            .map(|c| {
                let mut pert = DVector::zeros(region.dim());
                for (ci, b) in c.iter().zip(&self.basis) {
                    pert.axpy(*ci, b, 1.0);
                }
                let size = pert.amax();
                // a random overall amplitude fills the interior of the region
                let amp: f64 = rng.random_range(0.0..=1.0);
                if size > 0.0 {
                    pert *= amp * region.half_width / size;
                }
                region.clip(&(&region.center + pert))
            })
            .collect()
    }
}

/// Writes a matrix as plain CSV rows.
pub fn write_matrix_csv<W: Write>(m: &DMatrix<f64>, mut out: W) -> std::io::Result<()> {
    for i in 0..m.nrows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}
