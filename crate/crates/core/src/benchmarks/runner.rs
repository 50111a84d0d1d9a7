//! Ready-to-run benchmark problems: field, start, frame and default settings
//! bundled so every front end runs the same experiment.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::codesign::{codesign_x0, Codesign};
use super::phasefield::{initial_profile, PhaseField, PhaseFieldConfig, SmoothCurveSampler};
use super::rosenbrock::{Rosenbrock, RosenbrockParams, ROSENBROCK_X0};
use super::{
    codesign_gpsd_params, codesign_initial_frame, codesign_sd_params, init_directions, phasefield_gpsd_params,
    phasefield_sd_params, rosenbrock_gpsd_params, rosenbrock_sd_params,
};
use crate::dynamics::{run_sd, SaddleRunResult, SdParams, SdState};
use crate::error::{Result, SaddleError};
use crate::force::{FnForce, ForceField, ForceOracle};
use crate::landscape::{Curvature, LandscapeConfig, SaddleRecord, SearchEngine};
use crate::learner::{run_gpsd, GpsdFailure, GpsdParams, LhsSampler, RegionSampler, SubproblemRecord, TrustRegion};
use crate::linalg::{DirectionFrame, SymmetricMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    Sd,
    Gpsd,
}

/// One search problem with its default settings.
#[derive(Clone)]
pub struct Problem {
    pub name: String,
    pub field: Arc<dyn ForceField>,
    pub x0: DVector<f64>,
    pub frame: DirectionFrame,
    pub sd: SdParams,
    pub gpsd: GpsdParams,
    pub sampler: Arc<dyn RegionSampler>,
    pub curvature: Curvature,
    /// Grid-function problems dedup and bound residuals more loosely.
    pub grid_valued: bool,
    codesign: Option<Arc<Codesign>>,
}

impl std::fmt::Debug for Problem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Problem")
            .field("name", &self.name)
            .field("dim", &self.x0.len())
            .field("k", &self.sd.k)
            .finish_non_exhaustive()
    }
}

const FD_STEP: f64 = 1e-5;

impl Problem {
    /// Rosenbrock case 1..=4; the target index equals the case number.
    pub fn rosenbrock(case: usize, seed: u64) -> Result<Self> {
        let params = RosenbrockParams::case(case)
            .ok_or_else(|| SaddleError::InvalidArgument(format!("unknown Rosenbrock case {case}")))?;
        let field: Arc<dyn ForceField> = Arc::new(Rosenbrock::new(params));
        let x0 = DVector::from_column_slice(&ROSENBROCK_X0);
        let curvature = Curvature::FiniteDifference(FD_STEP);
        let frame = init_directions(&curvature.jacobian(&field, &x0)?, case)?;
        Ok(Self {
            name: "rosenbrock".into(),
            sd: rosenbrock_sd_params(case),
            gpsd: rosenbrock_gpsd_params(case, &x0, seed),
            field,
            x0,
            frame,
            sampler: Arc::new(LhsSampler),
            curvature,
            grid_valued: false,
            codesign: None,
        })
    }

    /// Codesign from `s (1, .., 1)` with `s` set by `case` (1..=3).
    pub fn codesign(case: usize, seed: u64) -> Result<Self> {
        let x0 = codesign_x0(case).ok_or_else(|| SaddleError::InvalidArgument(format!("unknown codesign case {case}")))?;
        let sim = Arc::new(Codesign::new());
        Ok(Self {
            name: "codesign".into(),
            field: sim.clone(),
            frame: codesign_initial_frame(),
            sd: codesign_sd_params(),
            gpsd: codesign_gpsd_params(&x0, seed),
            x0,
            sampler: Arc::new(LhsSampler),
            curvature: Curvature::FiniteDifference(FD_STEP),
            grid_valued: false,
            codesign: Some(sim),
        })
    }

    /// Index-`k` phase-field search from the parabolic profile.
    pub fn phasefield(config: PhaseFieldConfig, k: usize, landscape: bool, seed: u64) -> Result<Self> {
        config.validate()?;
        let pf = Arc::new(PhaseField::new(config)?);
        let u0 = initial_profile(&config);
        let frame = init_directions(&pf.jacobian(&u0)?, k)?;
        let jac = pf.clone();
        Ok(Self {
            name: "phasefield".into(),
            field: pf,
            frame,
            sd: phasefield_sd_params(k, landscape),
            gpsd: phasefield_gpsd_params(k, landscape, &u0, seed),
            x0: u0,
            sampler: Arc::new(SmoothCurveSampler::new(&config, 6)),
            curvature: Curvature::Exact(Arc::new(move |u: &DVector<f64>| jac.jacobian(u))),
            grid_valued: true,
            codesign: None,
        })
    }

    /// Quadratic energy `E = (x - c)^T H (x - c) / 2`, so `F = -H (x - c)`.
    /// Uses Rosenbrock-style step settings unless overridden.
    pub fn quadratic(hessian: DMatrix<f64>, center: DVector<f64>, x0: DVector<f64>, k: usize, seed: u64) -> Result<Self> {
        let n = center.len();
        if hessian.nrows() != n || hessian.ncols() != n || x0.len() != n {
            return Err(SaddleError::DimensionMismatch {
                expected: n,
                got: if x0.len() != n { x0.len() } else { hessian.nrows() },
            });
        }
        let h = SymmetricMatrix::new(hessian)?;
        let op = h.matrix().clone();
        let c = center.clone();
        let field: Arc<dyn ForceField> = Arc::new(FnForce::new(n, move |x: &DVector<f64>| -(&op * (x - &c))));
        // the Jacobian is -H everywhere
        let jac = SymmetricMatrix::new(-h.matrix())?;
        let frame = init_directions(&jac, k)?;
        let sd = rosenbrock_sd_params(k);
        let region = TrustRegion::new(x0.clone(), 0.025)?;
        Ok(Self {
            name: "custom".into(),
            field,
            frame,
            gpsd: GpsdParams::new(sd.clone(), 0.05, 0.15, 100, 100, region, seed),
            sd,
            x0,
            sampler: Arc::new(LhsSampler),
            curvature: Curvature::Exact(Arc::new(move |_: &DVector<f64>| Ok(jac.clone()))),
            grid_valued: false,
            codesign: None,
        })
    }

    /// Plant simulations so far, for simulation-backed problems.
    pub fn simulations(&self) -> Option<u64> {
        self.codesign.as_ref().map(|c| c.simulations())
    }

    /// Landscape defaults: probe offset 0.1 (SD) or 0.1 half widths (GPSD);
    /// dedup 1e-2 on grids and 1e-3 otherwise; residual bound 1e-4 on grids
    /// and 1e-6 otherwise for SD, and the surrogate accuracy floor 1e-2 for GPSD.
    pub fn landscape_config(&self, engine: Engine, seed: u64) -> LandscapeConfig {
        let mut cfg = LandscapeConfig::analytic(self.sd.clone());
        cfg.curvature = self.curvature.clone();
        cfg.seed = seed;
        cfg.dedup_tol = if self.grid_valued { 1e-2 } else { 1e-3 };
        cfg.residual_bound = if self.grid_valued { 1e-4 } else { 1e-6 };
        if engine == Engine::Gpsd {
            cfg.engine = SearchEngine::Gpsd {
                template: self.gpsd.clone(),
                sampler: self.sampler.clone(),
            };
            cfg.perturb_eps = 0.1 * self.gpsd.initial_region.half_width;
            cfg.residual_bound = 1e-2;
        }
        cfg
    }
}

/// Outcome of one search with the endpoint classified on the true force.
#[derive(Debug, Clone)]
pub struct Solution {
    pub run: SaddleRunResult,
    /// `None` when the endpoint could not be classified (non-finite state).
    pub record: Option<SaddleRecord>,
    /// Plant simulations spent by the search itself.
    pub n_s: Option<u64>,
    pub subproblems: Vec<SubproblemRecord>,
}

impl Solution {
    pub fn converged(&self) -> bool {
        self.run.converged()
    }
}

/// Runs `problem` from its start with the chosen engine.
pub fn solve(problem: &Problem, engine: Engine, log: Option<&mut dyn Write>) -> std::result::Result<Solution, GpsdFailure> {
    let oracle = ForceOracle::from_arc(problem.field.clone());
    let sims_before = problem.simulations();
    let (run, subproblems) = match engine {
        Engine::Sd => {
            let init = SdState::new(problem.x0.clone(), problem.frame.clone(), 0, &problem.sd)?;
            (run_sd(&oracle, &init, &problem.sd, None)?, Vec::new())
        }
        Engine::Gpsd => {
            let init = SdState::new(problem.x0.clone(), problem.frame.clone(), 0, &problem.gpsd.sd)?;
            let res = run_gpsd(&oracle, &init, &problem.gpsd, problem.sampler.as_ref(), log)?;
            (res.run, res.subproblems)
        }
    };
    let n_s = match (problem.simulations(), sims_before) {
        (Some(after), Some(before)) => Some(after - before),
        _ => None,
    };
    let x = &run.final_state.x;
    let record = if x.iter().all(|v| v.is_finite()) {
        SaddleRecord::classify(&problem.field, &problem.curvature, x, run.n_f, run.n_steps).ok()
    } else {
        None
    };
    Ok(Solution {
        run,
        record,
        n_s,
        subproblems,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_problem_solves_to_center() {
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, 2.0]));
        let c = DVector::from_vec(vec![0.5, -0.5]);
        let p = Problem::quadratic(h, c.clone(), DVector::from_vec(vec![0.6, -0.4]), 1, 0).unwrap();
        let s = solve(&p, Engine::Sd, None).unwrap();
        assert!(s.converged());
        let rec = s.record.unwrap();
        assert_eq!(rec.index, 1);
        assert!((s.run.final_state.x - c).amax() < 1e-3);
        assert!(s.n_s.is_none());
    }

    #[test]
    fn codesign_counts_only_search_simulations() {
        let mut p = Problem::codesign(1, 0).unwrap();
        p.sd.max_steps = 10;
        let s = solve(&p, Engine::Sd, None).unwrap();
        assert_eq!(s.n_s, Some(30));
        assert_eq!(s.run.n_f, 30);
    }

    #[test]
    fn unknown_cases_are_rejected() {
        assert!(Problem::rosenbrock(5, 0).is_err());
        assert!(Problem::codesign(0, 0).is_err());
    }
}
