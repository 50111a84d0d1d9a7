//! Sequential learning of saddle points on a Gaussian-process surrogate.
//!
//! The loop alternates three phases:
//! 1. sample the true force in a hypercube trust region,
//! 2. run saddle dynamics on the surrogate mean until the iterate leaves
//!    the region, stalls, or exhausts the step budget,
//! 3. judge the surrogate at the exit point by its predictive variance and
//!    move, grow or shrink the region, then resample and retrain.
//!
//! Only phase 1 and the resampling in phase 3 touch the true force, so the
//! true-force ledger reads `N_sam + j N_new` after `j` region updates.

use std::io::Write;
use std::sync::Arc;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{run_sd_tracked, RunStatus, SaddleRunResult, SdParams, SdState, TrajectoryRow};
use crate::error::{Result, SaddleError};
use crate::force::ForceOracle;
use crate::gp::{fit, FitConfig, GpSurrogate, InputScaling, TrainingSet};

/// Hypercube `{x : |x - center|_inf <= half_width}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustRegion {
    pub center: DVector<f64>,
    pub half_width: f64,
}

impl TrustRegion {
    pub fn new(center: DVector<f64>, half_width: f64) -> Result<Self> {
        if !(half_width > 0.0 && half_width.is_finite()) {
            return Err(SaddleError::InvalidArgument(format!(
                "trust region half width must be positive, got {half_width}"
            )));
        }
        Ok(Self { center, half_width })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        (x - &self.center).amax() <= self.half_width
    }

    /// Projects `x` onto the region.
    pub fn clip(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| {
            x[i].clamp(self.center[i] - self.half_width, self.center[i] + self.half_width)
        })
    }

    /// Maps the region onto `[-1, 1]^N`.
    pub fn scaling(&self) -> InputScaling {
        InputScaling {
            center: self.center.clone(),
            half_width: self.half_width,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionAction {
    Enlarge,
    Shrink,
    Keep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpsdParams {
    pub sd: SdParams,
    pub tol_l: f64,
    pub tol_u: f64,
    pub n_sam: usize,
    pub n_new: usize,
    pub initial_region: TrustRegion,
    pub seed: u64,
    pub delta_min: f64,
    pub delta_max: f64,
    /// Consecutive shrinks tolerated before the run is abandoned.
    pub shrink_streak_cap: usize,
    pub fit: FitConfig,
}

impl GpsdParams {
    /// Defaults: `delta_min = 1e-4`, `delta_max = 10 * initial half width`,
    /// shrink streak cap 8.
    pub fn new(sd: SdParams, tol_l: f64, tol_u: f64, n_sam: usize, n_new: usize, initial_region: TrustRegion, seed: u64) -> Self {
        let delta_max = 10.0 * initial_region.half_width;
        Self {
            sd,
            tol_l,
            tol_u,
            n_sam,
            n_new,
            initial_region,
            seed,
            delta_min: 1e-4,
            delta_max,
            shrink_streak_cap: 8,
            fit: FitConfig::default(),
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        self.sd.validate(dim)?;
        if !(self.tol_l > 0.0 && self.tol_l < self.tol_u) {
            return Err(SaddleError::InvalidArgument(format!(
                "need 0 < tol_l < tol_u, got {} and {}",
                self.tol_l, self.tol_u
            )));
        }
        if self.n_sam < 2 || self.n_new < 2 {
            return Err(SaddleError::InvalidArgument("n_sam and n_new must be at least 2".into()));
        }
        if !(self.delta_min > 0.0 && self.delta_min <= self.delta_max) {
            return Err(SaddleError::InvalidArgument(format!(
                "need 0 < delta_min <= delta_max, got {} and {}",
                self.delta_min, self.delta_max
            )));
        }
        if self.initial_region.dim() != dim {
            return Err(SaddleError::DimensionMismatch {
                expected: dim,
                got: self.initial_region.dim(),
            });
        }
        Ok(())
    }
}

/// Latin hypercube design of `m` points in `region`: along every coordinate
/// each of the `m` equal strata holds exactly one point.
pub fn lhs_sample(region: &TrustRegion, m: usize, rng: &mut impl Rng) -> Vec<DVector<f64>> {
    let n = region.dim();
    let width = 2.0 * region.half_width / m as f64;
    let mut points = vec![DVector::zeros(n); m];
    let mut strata: Vec<usize> = (0..m).collect();
    for d in 0..n {
        strata.shuffle(rng);
        let lo = region.center[d] - region.half_width;
        for (p, &s) in points.iter_mut().zip(&strata) {
            let u: f64 = rng.random();
            p[d] = lo + (s as f64 + u) * width;
        }
    }
    points
}

/// Draws training locations inside a trust region.
pub trait RegionSampler: Send + Sync {
    fn sample(&self, region: &TrustRegion, m: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>>;
}

/// Plain Latin hypercube sampling.
#[derive(Debug, Clone, Copy, Default)]
pub struct LhsSampler;

impl RegionSampler for LhsSampler {
    fn sample(&self, region: &TrustRegion, m: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
        lhs_sample(region, m, rng)
    }
}

/// Region update from the uncertainty radius `r` at the exit point.
pub fn trust_region_update(
    r: f64,
    params: &GpsdParams,
    region: &TrustRegion,
    exit_point: &DVector<f64>,
) -> (TrustRegion, RegionAction) {
    if r < params.tol_l {
        let delta = (2.0 * region.half_width).clamp(params.delta_min, params.delta_max);
        (
            TrustRegion {
                center: exit_point.clone(),
                half_width: delta,
            },
            RegionAction::Enlarge,
        )
    } else if r > params.tol_u {
        let delta = (0.5 * region.half_width).clamp(params.delta_min, params.delta_max);
        (
            TrustRegion {
                center: region.center.clone(),
                half_width: delta,
            },
            RegionAction::Shrink,
        )
    } else {
        (
            TrustRegion {
                center: exit_point.clone(),
                half_width: region.half_width,
            },
            RegionAction::Keep,
        )
    }
}

/// One line of the subproblem log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubproblemRecord {
    pub subproblem_index: usize,
    pub region_center: Vec<f64>,
    pub delta: f64,
    /// `None` for the terminating subproblem.
    pub action: Option<RegionAction>,
    pub r: Option<f64>,
    pub n_steps: u64,
    #[serde(rename = "N_f_cumulative")]
    pub n_f_cumulative: u64,
}

#[derive(Debug, Clone)]
pub struct GpsdResult {
    /// `n_f` counts true-force queries only; `n_steps` is the global step total.
    pub run: SaddleRunResult,
    pub subproblems: Vec<SubproblemRecord>,
    pub surrogate: Arc<GpSurrogate>,
    pub final_region: TrustRegion,
    pub region_updates: usize,
}

#[derive(Debug, Error)]
#[error("surrogate saddle search failed after {} true-force queries: {error}", partial.as_ref().map_or(0, |p| p.run.n_f))]
pub struct GpsdFailure {
    #[source]
    pub error: SaddleError,
    pub partial: Option<Box<GpsdResult>>,
}

impl From<SaddleError> for GpsdFailure {
    fn from(error: SaddleError) -> Self {
        Self { error, partial: None }
    }
}

fn evaluate_all(oracle: &ForceOracle, points: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
    if oracle.reentrant() {
        points.par_iter().map(|x| oracle.evaluate(x)).collect()
    } else {
        points.iter().map(|x| oracle.evaluate(x)).collect()
    }
}

fn sample_set(
    oracle: &ForceOracle,
    sampler: &dyn RegionSampler,
    region: &TrustRegion,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingSet> {
    let points: Vec<_> = sampler
        .sample(region, m, rng)
        .into_iter()
        .map(|p| region.clip(&p))
        .collect();
    let values = evaluate_all(oracle, &points)?;
    let n = oracle.dim();
    let mut set = TrainingSet::new(n, n);
    for (x, y) in points.into_iter().zip(values) {
        // a repeated location still costs a query but adds no information
        if !set.contains(&x) {
            set.push(x, y)?;
        }
    }
    Ok(set)
}

/// Runs the sequential learning loop from `init` on the true force.
///
/// The log, when given, receives one JSON line per subproblem.
pub fn run_gpsd(
    true_force: &ForceOracle,
    init: &SdState,
    params: &GpsdParams,
    sampler: &dyn RegionSampler,
    mut log: Option<&mut dyn Write>,
) -> std::result::Result<GpsdResult, GpsdFailure> {
    let dim = true_force.dim();
    params.validate(dim)?;
    if init.x.len() != dim {
        return Err(SaddleError::DimensionMismatch {
            expected: dim,
            got: init.x.len(),
        }
        .into());
    }
    if !params.initial_region.contains(&init.x) {
        return Err(SaddleError::InvalidArgument("initial state lies outside the initial trust region".into()).into());
    }
    let start_queries = true_force.queries();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut region = params.initial_region.clone();

    let data = sample_set(true_force, sampler, &region, params.n_sam, &mut rng)?;
    let fit_cfg = FitConfig {
        seed: params.seed,
        ..params.fit.clone()
    };
    let mut gp = Arc::new(fit(&data, &fit_cfg, Some(region.scaling()))?);

    let mut state = init.clone();
    let mut total_steps = 0u64;
    let mut shrink_streak = 0usize;
    let mut records = Vec::new();
    let mut region_updates = 0usize;
    // surrogate iterates of every subproblem, when recording
    let mut path: Vec<TrajectoryRow> = Vec::new();

    let emit = |log: &mut Option<&mut dyn Write>, rec: &SubproblemRecord| -> Result<()> {
        if let Some(w) = log.as_mut() {
            let line = serde_json::to_string(rec).map_err(|e| SaddleError::InvalidArgument(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| SaddleError::InvalidArgument(format!("log write failed: {e}")))?;
        }
        Ok(())
    };

    for j in 0.. {
        let surrogate = ForceOracle::from_arc(gp.clone());
        let mut sd = params.sd.clone();
        sd.max_steps = params.sd.max_steps.saturating_sub(total_steps).max(1);
        let fallback = TrustRegion {
            center: region.center.clone(),
            half_width: (0.5 * region.half_width).max(params.delta_min),
        };
        let res = run_sd_tracked(&surrogate, &state, &sd, Some(&region), Some(&fallback))?;
        total_steps += res.n_steps;
        if let Some(rows) = &res.trajectory {
            path.extend(rows.iter().cloned());
        }

        let finish = |mut res: SaddleRunResult,
                      status: RunStatus,
                      action: Option<RegionAction>,
                      r: Option<f64>,
                      records: &mut Vec<SubproblemRecord>,
                      region: &TrustRegion,
                      gp: &Arc<GpSurrogate>,
                      region_updates: usize| {
            let n_f = true_force.queries() - start_queries;
            records.push(SubproblemRecord {
                subproblem_index: j,
                region_center: region.center.as_slice().to_vec(),
                delta: region.half_width,
                action,
                r,
                n_steps: res.n_steps,
                n_f_cumulative: n_f,
            });
            res.status = status;
            res.n_steps = total_steps;
            if res.trajectory.is_some() {
                res.trajectory = Some(path.clone());
            }
            res.n_f = n_f;
            GpsdResult {
                run: res,
                subproblems: records.clone(),
                surrogate: gp.clone(),
                final_region: region.clone(),
                region_updates,
            }
        };

        if res.status != RunStatus::RegionExit {
            let status = res.status;
            let out = finish(res, status, None, None, &mut records, &region, &gp, region_updates);
            if let Some(rec) = out.subproblems.last() {
                emit(&mut log, rec)?;
            }
            return Ok(out);
        }

        let exit = res.exit_point.clone().expect("region exit carries its exit point");
        let r = gp.uncertainty_radius(&exit);
        let (next_region, action) = trust_region_update(r, params, &region, &exit);
        let next_state = match action {
            RegionAction::Shrink => {
                shrink_streak += 1;
                res.last_inside_fallback.clone().unwrap_or_else(|| {
                    let mut s = state.clone();
                    s.x = region.center.clone();
                    s
                })
            }
            _ => {
                shrink_streak = 0;
                res.exit_state.clone().expect("region exit carries its exit state")
            }
        };

        if shrink_streak > params.shrink_streak_cap || total_steps >= params.sd.max_steps {
            let out = finish(res, RunStatus::MaxSteps, Some(action), Some(r), &mut records, &region, &gp, region_updates);
            if let Some(rec) = out.subproblems.last() {
                emit(&mut log, rec)?;
            }
            return Ok(out);
        }

        let updates_after = region_updates + 1;
        let fail = |error: SaddleError, res: &SaddleRunResult, records: &mut Vec<SubproblemRecord>, gp: &Arc<GpSurrogate>| {
            let partial = finish(res.clone(), RunStatus::MaxSteps, Some(action), Some(r), records, &region, gp, updates_after);
            GpsdFailure {
                error,
                partial: Some(Box::new(partial)),
            }
        };

        let additions = match sample_set(true_force, sampler, &next_region, params.n_new, &mut rng) {
            Ok(a) => a,
            Err(e) => return Err(fail(e, &res, &mut records, &gp)),
        };
        region_updates += 1;
        let keep_region = next_region.clone();
        let refit_cfg = FitConfig {
            seed: params.seed.wrapping_add(j as u64 + 1),
            ..params.fit.clone()
        };
        let refit = gp.update_data(&additions, |x| keep_region.contains(x), &refit_cfg, Some(next_region.scaling()));
        let new_gp = match refit {
            Ok(g) => g,
            Err(e) => return Err(fail(e, &res, &mut records, &gp)),
        };

        let rec = SubproblemRecord {
            subproblem_index: j,
            region_center: region.center.as_slice().to_vec(),
            delta: region.half_width,
            action: Some(action),
            r: Some(r),
            n_steps: res.n_steps,
            n_f_cumulative: true_force.queries() - start_queries,
        };
        emit(&mut log, &rec)?;
        records.push(rec);

        gp = Arc::new(new_gp);
        region = next_region;
        state = next_state;
        if !region.contains(&state.x) {
            state.x = region.clip(&state.x);
        }
    }
    unreachable!("the subproblem loop only exits by returning")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::DimerSchedule;
    use crate::force::FnForce;
    use crate::linalg::gram_schmidt;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn gpsd_params(delta: f64) -> GpsdParams {
        let sd = SdParams::new(1.0, 1.0, 0.01, 1, DimerSchedule::polynomial(0.01), 1e-6, 20_000);
        GpsdParams::new(sd, 0.05, 0.15, 30, 30, TrustRegion::new(dv(&[0.0, 0.0]), delta).unwrap(), 42)
    }

    #[test]
    fn membership_is_closed_hypercube() {
        let r = TrustRegion::new(dv(&[1.0, -1.0]), 0.5).unwrap();
        assert!(r.contains(&dv(&[1.5, -0.5])));
        assert!(!r.contains(&dv(&[1.5 + 1e-9, -1.0])));
        assert!(TrustRegion::new(dv(&[0.0]), 0.0).is_err());
    }

    #[test]
    fn lhs_single_point_contained() {
        let region = TrustRegion::new(dv(&[0.3, 0.7, -2.0]), 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = lhs_sample(&region, 1, &mut rng);
        assert_eq!(pts.len(), 1);
        assert!(region.contains(&pts[0]));
    }

    #[test]
    fn lhs_one_point_per_bin() {
        let region = TrustRegion::new(dv(&[0.5]), 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut xs: Vec<f64> = lhs_sample(&region, 10, &mut rng).iter().map(|p| p[0]).collect();
        xs.sort_by(f64::total_cmp);
        for (j, x) in xs.iter().enumerate() {
            assert!(*x >= j as f64 / 10.0 && *x < (j + 1) as f64 / 10.0, "{x} not in bin {j}");
        }
    }

    #[test]
    fn lhs_is_seeded() {
        let region = TrustRegion::new(dv(&[0.0, 0.0]), 1.0).unwrap();
        let a = lhs_sample(&region, 7, &mut ChaCha8Rng::seed_from_u64(11));
        let b = lhs_sample(&region, 7, &mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(a, b);
    }

    #[test]
    fn update_truth_table() {
        let p = gpsd_params(0.4);
        let region = TrustRegion::new(dv(&[0.0, 0.0]), 0.4).unwrap();
        let exit = dv(&[0.41, 0.1]);

        let (r, a) = trust_region_update(0.01, &p, &region, &exit);
        assert_eq!(a, RegionAction::Enlarge);
        assert_eq!(r.center, exit);
        assert_eq!(r.half_width, 0.8);

        let (r, a) = trust_region_update(0.20, &p, &region, &exit);
        assert_eq!(a, RegionAction::Shrink);
        assert_eq!(r.center, region.center);
        assert_eq!(r.half_width, 0.2);

        let (r, a) = trust_region_update(0.10, &p, &region, &exit);
        assert_eq!(a, RegionAction::Keep);
        assert_eq!(r.center, exit);
        assert_eq!(r.half_width, 0.4);
    }

    #[test]
    fn update_clamps_half_width() {
        let mut p = gpsd_params(0.4);
        p.delta_max = 0.5;
        p.delta_min = 0.3;
        let region = TrustRegion::new(dv(&[0.0, 0.0]), 0.4).unwrap();
        let exit = dv(&[0.5, 0.0]);
        assert_eq!(trust_region_update(0.0, &p, &region, &exit).0.half_width, 0.5);
        assert_eq!(trust_region_update(1.0, &p, &region, &exit).0.half_width, 0.3);
    }

    #[test]
    fn quadratic_saddle_ledger_and_convergence() {
        let calls = Arc::new(std::sync::atomic::AtomicU64::new(0));
        let c = calls.clone();
        let oracle = ForceOracle::new(FnForce::new(2, move |x: &DVector<f64>| {
            c.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            dv(&[x[0], -x[1]])
        }));
        let mut p = gpsd_params(0.5);
        p.initial_region = TrustRegion::new(dv(&[0.3, 0.2]), 0.5).unwrap();
        p.sd.tau = 0.1;
        let frame = gram_schmidt(&[dv(&[0.9, 0.2])]).unwrap();
        let init = SdState::new(dv(&[0.3, 0.2]), frame, 0, &p.sd).unwrap();
        let mut log = Vec::new();
        let out = run_gpsd(&oracle, &init, &p, &LhsSampler, Some(&mut log)).unwrap();
        assert_eq!(out.run.status, RunStatus::Converged);
        assert!(out.run.final_state.x.amax() <= 1e-2, "{}", out.run.final_state.x);
        assert_eq!(out.run.n_f, (p.n_sam + out.region_updates * p.n_new) as u64);
        assert_eq!(out.run.n_f, calls.load(std::sync::atomic::Ordering::SeqCst));
        assert!(out.run.n_f <= 200);
        let lines: Vec<_> = std::str::from_utf8(&log).unwrap().lines().collect();
        assert_eq!(lines.len(), out.subproblems.len());
        let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert!(first.get("N_f_cumulative").is_some());
    }

    #[test]
    fn rejects_start_outside_region() {
        let oracle = ForceOracle::new(FnForce::new(2, |x: &DVector<f64>| x.clone()));
        let p = gpsd_params(0.1);
        let frame = gram_schmidt(&[dv(&[1.0, 0.0])]).unwrap();
        let init = SdState::new(dv(&[0.5, 0.0]), frame, 0, &p.sd).unwrap();
        let err = run_gpsd(&oracle, &init, &p, &LhsSampler, None).unwrap_err();
        assert!(matches!(err.error, SaddleError::InvalidArgument(_)));
        assert_eq!(oracle.queries(), 0);
    }
}
