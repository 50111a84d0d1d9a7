//! Test systems and their default search settings.

pub mod codesign;
pub mod phasefield;
pub mod rosenbrock;
pub mod runner;

use nalgebra::DVector;

use crate::dynamics::{DimerSchedule, SdParams};
use crate::error::{Result, SaddleError};
use crate::learner::{GpsdParams, TrustRegion};
use crate::linalg::{fix_sign, sym_eigen, DirectionFrame, SymmetricMatrix};

pub use codesign::{codesign_force, codesign_x0, simulate_plant, Codesign, PlantTrajectory, CODESIGN_DIM, PLANT_NODES};
pub use phasefield::{
    frac_laplacian_matrix, fractional_weights, initial_profile, phasefield_force, phasefield_jacobian,
    write_matrix_csv, PhaseField, PhaseFieldConfig, SmoothCurveSampler,
};
pub use runner::{solve, Engine, Problem, Solution};
pub use rosenbrock::{parse_case, rosenbrock_energy, rosenbrock_force, Rosenbrock, RosenbrockParams, ROSENBROCK_X0};

/// Eigenvalue gap below which the leading-k subspace is reported as ambiguous.
pub const SPECTRAL_GAP_TOL: f64 = 1e-10;

/// Eigenvectors of the `k` largest eigenvalues of `jacobian` (largest first),
/// each with its first non-negligible entry positive.
pub fn init_directions(jacobian: &SymmetricMatrix, k: usize) -> Result<DirectionFrame> {
    let n = jacobian.dim();
    if k > n {
        return Err(SaddleError::InvalidArgument(format!("k = {k} exceeds dimension {n}")));
    }
    let eig = sym_eigen(jacobian)?;
    if k > 0 && k < n {
        let gap = eig.eigenvalues[n - k] - eig.eigenvalues[n - k - 1];
        if gap < SPECTRAL_GAP_TOL {
            log::warn!("degenerate spectrum: eigenvalues {k} and {} differ by {gap:e}", k + 1);
        }
    }
    let vectors = (0..k)
        .map(|i| {
            let mut v = eig.eigenvector(n - 1 - i);
            fix_sign(&mut v);
            v
        })
        .collect();
    DirectionFrame::from_orthonormal(n, vectors)
}

/// Step budget shared by every preset.
pub const MAX_STEPS: u64 = 20_000;

/// Rosenbrock searches: `tau = l0 = 0.01`, polynomial dimer, `tol_x = 1e-6`.
pub fn rosenbrock_sd_params(k: usize) -> SdParams {
    SdParams::new(1.0, 1.0, 0.01, k, DimerSchedule::polynomial(0.01), 1e-6, MAX_STEPS)
}

/// Rosenbrock learning: 100 samples per region, half width 0.025 around `x0`.
pub fn rosenbrock_gpsd_params(k: usize, x0: &DVector<f64>, seed: u64) -> GpsdParams {
    let region = TrustRegion {
        center: x0.clone(),
        half_width: 0.025,
    };
    GpsdParams::new(rosenbrock_sd_params(k), 0.05, 0.15, 100, 100, region, seed)
}

/// Codesign searches: `tau = l0 = 0.0025`, polynomial dimer, index 1.
pub fn codesign_sd_params() -> SdParams {
    SdParams::new(1.0, 1.0, 0.0025, 1, DimerSchedule::polynomial(0.0025), 1e-6, MAX_STEPS)
}

/// Codesign learning: 300 samples per region, half width 0.1.
pub fn codesign_gpsd_params(x0: &DVector<f64>, seed: u64) -> GpsdParams {
    let region = TrustRegion {
        center: x0.clone(),
        half_width: 0.1,
    };
    GpsdParams::new(codesign_sd_params(), 0.05, 0.15, 300, 300, region, seed)
}

/// Codesign starting frame: the normalized all-ones vector.
pub fn codesign_initial_frame() -> DirectionFrame {
    let v = DVector::from_element(CODESIGN_DIM, 1.0 / (CODESIGN_DIM as f64).sqrt());
    DirectionFrame::from_orthonormal(CODESIGN_DIM, vec![v]).expect("unit vector")
}

/// Relaxed step `tau * beta` of the phase-field presets.
pub const PHASEFIELD_STEP: f64 = 0.1;

/// Phase-field searches: exponential dimer with `l0 = tau`, `tol_x = 1e-5`.
/// `tau = 2.5e-4` for single searches and `5e-4` for landscapes; the
/// relaxation rates are set so that `tau beta = tau gamma = 0.1`.
pub fn phasefield_sd_params(k: usize, landscape: bool) -> SdParams {
    let tau = if landscape { 5e-4 } else { 2.5e-4 };
    let rate = PHASEFIELD_STEP / tau;
    SdParams::new(rate, rate, tau, k, DimerSchedule::exponential(tau), 1e-5, MAX_STEPS)
}

/// Phase-field learning: 120 smooth curves per region, half width 0.01.
pub fn phasefield_gpsd_params(k: usize, landscape: bool, u0: &DVector<f64>, seed: u64) -> GpsdParams {
    let region = TrustRegion {
        center: u0.clone(),
        half_width: 0.01,
    };
    GpsdParams::new(phasefield_sd_params(k, landscape), 0.05, 0.15, 120, 120, region, seed)
}
