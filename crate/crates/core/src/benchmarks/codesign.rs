//! Plant/controller codesign: a two-state nonlinear plant integrated by
//! forward Euler on `[0, 0.1]` with mesh 0.01.
//!
//! The design vector packs `x = (a, u(t_0), .., u(t_10))`. The force is
//! `F = (a, -xi(t_j)^2 u(t_j))`, whose index-1 saddle is the origin.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::DVector;

use crate::error::{Result, SaddleError};
use crate::force::{ForceField, OracleKind};

pub const PLANT_STEPS: usize = 10;
pub const PLANT_NODES: usize = PLANT_STEPS + 1;
pub const PLANT_MESH: f64 = 0.01;
pub const CODESIGN_DIM: usize = 1 + PLANT_NODES;

/// Plant states on the grid nodes `t_0..t_10`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantTrajectory {
    pub eta: Vec<f64>,
    pub xi: Vec<f64>,
}

/// Forward Euler for `eta' = -a eta + xi^2`, `xi' = eta - 2a^2 xi - eta^2 + u`
/// from `eta(0) = xi(0) = 1`.
pub fn simulate_plant(a: f64, u: &[f64]) -> Result<PlantTrajectory> {
    if u.len() != PLANT_NODES {
        return Err(SaddleError::DimensionMismatch {
            expected: PLANT_NODES,
            got: u.len(),
        });
    }
    let mut eta = vec![1.0; PLANT_NODES];
    let mut xi = vec![1.0; PLANT_NODES];
    for j in 0..PLANT_STEPS {
        let (e, s) = (eta[j], xi[j]);
        eta[j + 1] = e + PLANT_MESH * (-a * e + s * s);
        xi[j + 1] = s + PLANT_MESH * (e - 2.0 * a * a * s - e * e + u[j]);
    }
    if eta.iter().chain(&xi).any(|v| !v.is_finite()) {
        return Err(SaddleError::SimulationFailure(format!(
            "plant state became non-finite for a = {a}"
        )));
    }
    Ok(PlantTrajectory { eta, xi })
}

/// The codesign force of a packed design vector.
pub fn codesign_force(x: &DVector<f64>) -> Result<DVector<f64>> {
    if x.len() != CODESIGN_DIM {
        return Err(SaddleError::DimensionMismatch {
            expected: CODESIGN_DIM,
            got: x.len(),
        });
    }
    let a = x[0];
    let u = &x.as_slice()[1..];
    let traj = simulate_plant(a, u)?;
    let mut f = DVector::zeros(CODESIGN_DIM);
    f[0] = a;
    for j in 0..PLANT_NODES {
        f[1 + j] = -traj.xi[j] * traj.xi[j] * u[j];
    }
    Ok(f)
}

/// Simulation-backed codesign field that counts plant simulations.
#[derive(Debug, Default)]
pub struct Codesign {
    simulations: AtomicU64,
}

impl Codesign {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of plant simulations run so far.
    pub fn simulations(&self) -> u64 {
        self.simulations.load(Ordering::SeqCst)
    }
}

impl ForceField for Codesign {
    fn dim(&self) -> usize {
        CODESIGN_DIM
    }

    fn kind(&self) -> OracleKind {
        OracleKind::Simulation
    }

    fn force(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.simulations.fetch_add(1, Ordering::SeqCst);
        codesign_force(x)
    }
}

/// Starting points `s (1, .., 1)` for cases 1..=3 (s = 0.2, 0.1, 0.05).
pub fn codesign_x0(case: usize) -> Option<DVector<f64>> {
    let s = match case {
        1 => 0.2,
        2 => 0.1,
        3 => 0.05,
        _ => return None,
    };
    Some(DVector::from_element(CODESIGN_DIM, s))
}
