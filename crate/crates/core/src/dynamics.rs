//! Explicit shrinking-dimer saddle dynamics.
//!
//! One step from `(x, v_1..v_k, l)`:
//!
//! ```text
//! x'   = x + tau beta (I - 2 sum_j v_j v_j^T) F(x)
//! w_i  = v_i + tau gamma (I - v_i v_i^T - 2 sum_{j<i} v_j v_j^T) Hv(x, v_i, l)
//! v'   = gram_schmidt(w)
//! ```
//!
//! where `Hv` is the dimer estimate of the Jacobian-vector product. A step
//! costs exactly `1 + 2k` force queries.

use std::io::Write;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SaddleError};
use crate::force::{dimer_hv, ForceField, ForceOracle};
use crate::learner::TrustRegion;
use crate::linalg::{gram_schmidt, DirectionFrame};

/// Default bound on `|x|_inf` beyond which a run counts as diverged.
pub const DIVERGENCE_BOUND: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Exponential,
    Polynomial,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimerSchedule {
    pub kind: ScheduleKind,
    pub l0: f64,
}

impl DimerSchedule {
    pub fn polynomial(l0: f64) -> Self {
        Self {
            kind: ScheduleKind::Polynomial,
            l0,
        }
    }

    pub fn exponential(l0: f64) -> Self {
        Self {
            kind: ScheduleKind::Exponential,
            l0,
        }
    }
}

/// Dimer length after `n` steps of size `tau`.
pub fn dimer_schedule(schedule: &DimerSchedule, tau: f64, n: u64) -> f64 {
    let t = n as f64 * tau;
    match schedule.kind {
        ScheduleKind::Exponential => schedule.l0 * (-t).exp(),
        ScheduleKind::Polynomial => schedule.l0 / (1.0 + t * t),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdParams {
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    /// Target index.
    pub k: usize,
    pub schedule: DimerSchedule,
    /// Stop when `|x_{n+1} - x_n|_inf <= tol_x`.
    pub tol_x: f64,
    pub max_steps: u64,
    #[serde(default = "default_divergence_bound")]
    pub divergence_bound: f64,
    #[serde(default)]
    pub record_trajectory: bool,
}

fn default_divergence_bound() -> f64 {
    DIVERGENCE_BOUND
}

impl SdParams {
    pub fn new(beta: f64, gamma: f64, tau: f64, k: usize, schedule: DimerSchedule, tol_x: f64, max_steps: u64) -> Self {
        Self {
            beta,
            gamma,
            tau,
            k,
            schedule,
            tol_x,
            max_steps,
            divergence_bound: DIVERGENCE_BOUND,
            record_trajectory: false,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let positive = [
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("tau", self.tau),
            ("l0", self.schedule.l0),
            ("tol_x", self.tol_x),
            ("divergence_bound", self.divergence_bound),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SaddleError::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if self.max_steps == 0 {
            return Err(SaddleError::InvalidArgument("max_steps must be positive".into()));
        }
        if self.k > dim {
            return Err(SaddleError::InvalidArgument(format!(
                "index {} exceeds dimension {dim}",
                self.k
            )));
        }
        Ok(())
    }

    pub fn length_at(&self, n: u64) -> f64 {
        dimer_schedule(&self.schedule, self.tau, n)
    }
}

/// Iterate of the scheme: position, orthonormal frame, step counter and
/// current dimer length.
#[derive(Debug, Clone, PartialEq)]
pub struct SdState {
    pub x: DVector<f64>,
    pub frame: DirectionFrame,
    pub n: u64,
    pub l: f64,
}

impl SdState {
    /// State at global step `n`, with `l` taken from the schedule.
    pub fn new(x: DVector<f64>, frame: DirectionFrame, n: u64, params: &SdParams) -> Result<Self> {
        if frame.count() > 0 && frame.dim() != x.len() {
            return Err(SaddleError::DimensionMismatch {
                expected: x.len(),
                got: frame.dim(),
            });
        }
        if frame.count() != params.k {
            return Err(SaddleError::InvalidArgument(format!(
                "frame has {} directions, index target is {}",
                frame.count(),
                params.k
            )));
        }
        Ok(Self {
            x,
            frame,
            n,
            l: params.length_at(n),
        })
    }
}

/// One explicit step. Consumes exactly `1 + 2k` queries of `force`.
pub fn sd_step(force: &ForceOracle, state: &SdState, params: &SdParams) -> Result<SdState> {
    step_with_force(force, state, params).map(|(s, _)| s)
}

/// As [`sd_step`], also returning `F(x_n)` from the start of the step.
fn step_with_force(force: &ForceOracle, state: &SdState, params: &SdParams) -> Result<(SdState, DVector<f64>)> {
    let f = force.evaluate(&state.x)?;
    let vs = state.frame.vectors();

    let mut trial = Vec::with_capacity(vs.len());
    for (i, v) in vs.iter().enumerate() {
        let hv = dimer_hv(force, &state.x, v, state.l)?.hv;
        let mut w = &hv - v * v.dot(&hv);
        for u in &vs[..i] {
            w -= u * (2.0 * u.dot(&hv));
        }
        trial.push(v + w * (params.tau * params.gamma));
    }

    let x_next = &state.x + state.frame.reflect(&f) * (params.tau * params.beta);
    let norm = x_next.amax();
    if !norm.is_finite() || norm > params.divergence_bound {
        return Err(SaddleError::Diverged {
            step: state.n + 1,
            norm: if norm.is_finite() { norm } else { f64::INFINITY },
        });
    }
    let frame = if trial.is_empty() {
        DirectionFrame::empty(state.x.len())
    } else {
        gram_schmidt(&trial)?
    };
    let n = state.n + 1;
    Ok((
        SdState {
            x: x_next,
            frame,
            n,
            l: params.length_at(n),
        },
        f,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    MaxSteps,
    RegionExit,
    Diverged,
}

/// One recorded iterate. `residual_inf` is `|F(x)|_inf` when it was evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub step: u64,
    pub x: DVector<f64>,
    pub l: f64,
    pub residual_inf: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaddleRunResult {
    /// Last state; on region exit, the last state inside the region.
    pub final_state: SdState,
    pub status: RunStatus,
    /// The iterate that left the region.
    pub exit_point: Option<DVector<f64>>,
    /// Full state after the exiting step.
    pub exit_state: Option<SdState>,
    /// Last iterate inside the fallback region passed to [`run_sd_tracked`].
    pub last_inside_fallback: Option<SdState>,
    pub n_steps: u64,
    /// Queries of the oracle driving the dynamics.
    pub n_f: u64,
    pub trajectory: Option<Vec<TrajectoryRow>>,
    /// Set when the run stopped on a divergence guard.
    pub error: Option<SaddleError>,
}

impl SaddleRunResult {
    pub fn converged(&self) -> bool {
        self.status == RunStatus::Converged
    }
}

/// Iterates [`sd_step`] until the iterate leaves `region`, `max_steps` steps
/// were taken, or `|x_{n+1} - x_n|_inf <= tol_x`, checked in that order.
///
/// Divergence ends the run with status `Diverged` and the last finite state.
pub fn run_sd(
    force: &ForceOracle,
    init: &SdState,
    params: &SdParams,
    region: Option<&TrustRegion>,
) -> Result<SaddleRunResult> {
    run_sd_tracked(force, init, params, region, None)
}

/// [`run_sd`] that also remembers the last iterate inside `fallback`.
pub fn run_sd_tracked(
    force: &ForceOracle,
    init: &SdState,
    params: &SdParams,
    region: Option<&TrustRegion>,
    fallback: Option<&TrustRegion>,
) -> Result<SaddleRunResult> {
    params.validate(init.x.len())?;
    if init.frame.count() != params.k {
        return Err(SaddleError::InvalidArgument(format!(
            "frame has {} directions, index target is {}",
            init.frame.count(),
            params.k
        )));
    }
    let start_queries = force.queries();
    let mut state = init.clone();
    let mut trajectory = params.record_trajectory.then(Vec::new);
    let mut last_inside = fallback
        .filter(|r| r.contains(&state.x))
        .map(|_| state.clone());
    let mut steps = 0u64;

    let finish = |state: SdState,
                  status: RunStatus,
                  steps: u64,
                  exit: Option<SdState>,
                  last_inside: Option<SdState>,
                  mut trajectory: Option<Vec<TrajectoryRow>>,
                  error: Option<SaddleError>| {
        if let Some(rows) = trajectory.as_mut() {
            let last = exit.as_ref().unwrap_or(&state);
            rows.push(TrajectoryRow {
                step: last.n,
                x: last.x.clone(),
                l: last.l,
                residual_inf: None,
            });
        }
        SaddleRunResult {
            exit_point: exit.as_ref().map(|s| s.x.clone()),
            final_state: state,
            status,
            exit_state: exit,
            last_inside_fallback: last_inside,
            n_steps: steps,
            n_f: force.queries() - start_queries,
            trajectory,
            error,
        }
    };

    loop {
        let (next, f) = match step_with_force(force, &state, params) {
            Ok(v) => v,
            Err(e @ SaddleError::Diverged { .. }) => {
                // the step was still paid for
                steps += 1;
                return Ok(finish(state, RunStatus::Diverged, steps, None, last_inside, trajectory, Some(e)));
            }
            Err(e) => return Err(e),
        };
        steps += 1;
        if let Some(rows) = trajectory.as_mut() {
            rows.push(TrajectoryRow {
                step: state.n,
                x: state.x.clone(),
                l: state.l,
                residual_inf: Some(f.amax()),
            });
        }
        let moved = (&next.x - &state.x).amax();

        if let Some(r) = region {
            if !r.contains(&next.x) {
                return Ok(finish(state, RunStatus::RegionExit, steps, Some(next), last_inside, trajectory, None));
            }
        }
        if let Some(fb) = fallback {
            if fb.contains(&next.x) {
                last_inside = Some(next.clone());
            }
        }
        if moved <= params.tol_x {
            return Ok(finish(next, RunStatus::Converged, steps, None, last_inside, trajectory, None));
        }
        if steps >= params.max_steps {
            return Ok(finish(next, RunStatus::MaxSteps, steps, None, last_inside, trajectory, None));
        }
        state = next;
    }
}

/// `|F(x)|_inf` evaluated directly on the field, outside any query ledger.
pub fn residual_inf(field: &dyn ForceField, x: &DVector<f64>) -> Result<f64> {
    Ok(field.force(x)?.amax())
}

/// Writes `step,x_0..x_{N-1},l,residual_infnorm`; a missing residual is left empty.
pub fn write_trajectory_csv<W: Write>(rows: &[TrajectoryRow], mut out: W) -> std::io::Result<()> {
    let dim = rows.first().map_or(0, |r| r.x.len());
    let mut header = vec!["step".to_string()];
    header.extend((0..dim).map(|i| format!("x_{i}")));
    header.push("l".into());
    header.push("residual_infnorm".into());
    writeln!(out, "{}", header.join(","))?;
    for r in rows {
        let mut fields = vec![r.step.to_string()];
        fields.extend(r.x.iter().map(|v| format!("{v:?}")));
        fields.push(format!("{:?}", r.l));
        fields.push(r.residual_inf.map(|v| format!("{v:?}")).unwrap_or_default());
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::force::FnForce;
    use crate::linalg::{fd_jacobian_sym, morse_index, sym_eigen};
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn saddle2d() -> ForceOracle {
        // E = -x0^2/2 + x1^2/2
        ForceOracle::new(FnForce::new(2, |x| dv(&[x[0], -x[1]])))
    }

    fn params(k: usize, tau_beta: f64) -> SdParams {
        SdParams::new(1.0, 1.0, tau_beta, k, DimerSchedule::polynomial(0.01), 1e-6, 100_000)
    }

    fn frame(vs: &[&[f64]]) -> DirectionFrame {
        gram_schmidt(&vs.iter().map(|v| dv(v)).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn schedules() {
        let p = DimerSchedule::polynomial(0.3);
        let e = DimerSchedule::exponential(0.3);
        assert_eq!(dimer_schedule(&p, 0.01, 0), 0.3);
        assert_eq!(dimer_schedule(&e, 0.01, 0), 0.3);
        assert!((dimer_schedule(&p, 0.25, 4) - 0.15).abs() < 1e-15);
        let l = dimer_schedule(&DimerSchedule::exponential(1.0), 0.001, 1000);
        assert!((l - (-1.0f64).exp()).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for n in 0..2000 {
            let v = dimer_schedule(&p, 0.01, n);
            assert!(v > 0.0 && v <= prev);
            prev = v;
        }
    }

    #[test]
    fn one_step_hand_value() {
        let o = saddle2d();
        let p = params(1, 0.1);
        let s = SdState::new(dv(&[1.0, 1.0]), frame(&[&[1.0, 0.0]]), 0, &p).unwrap();
        let next = sd_step(&o, &s, &p).unwrap();
        assert!((next.x - dv(&[0.9, 0.9])).amax() < 1e-15);
        // e0 is an eigenvector, so the projected update vanishes
        assert!((next.frame.vectors()[0].clone() - dv(&[1.0, 0.0])).amax() < 1e-15);
        assert_eq!(next.n, 1);
        assert_eq!(o.queries(), 3);
    }

    #[test]
    fn stationary_point_is_fixed() {
        let o = saddle2d();
        let p = params(1, 0.1);
        let s = SdState::new(dv(&[0.0, 0.0]), frame(&[&[1.0, 0.0]]), 0, &p).unwrap();
        let next = sd_step(&o, &s, &p).unwrap();
        assert_eq!(next.x, s.x);
        assert!((next.frame.vectors()[0].clone() - s.frame.vectors()[0].clone()).amax() <= 1e-10);
    }

    #[test]
    fn fixed_point_on_nonquadratic_field() {
        // E = -x0^2/2 + x0^4/4 + x1^2/2 + x0^2 x1^2 / 2 has an index-1 saddle at 0
        let o = ForceOracle::new(FnForce::new(2, |x| {
            dv(&[x[0] - x[0].powi(3) - x[0] * x[1] * x[1], -x[1] - x[0] * x[0] * x[1]])
        }));
        let p = params(1, 0.05);
        let s = SdState::new(dv(&[0.0, 0.0]), frame(&[&[1.0, 0.0]]), 0, &p).unwrap();
        let next = sd_step(&o, &s, &p).unwrap();
        assert_eq!(next.x, s.x);
        assert!((next.frame.vectors()[0].clone() - dv(&[1.0, 0.0])).amax() <= 1e-10);
    }

    #[test]
    fn k_zero_is_gradient_flow() {
        let o = ForceOracle::new(FnForce::new(3, |x| x.map(|t| -t.powi(3) + t.sin())));
        let p = params(0, 0.05);
        let x = dv(&[0.3, -1.2, 2.0]);
        let s = SdState::new(x.clone(), DirectionFrame::empty(3), 0, &p).unwrap();
        let next = sd_step(&o, &s, &p).unwrap();
        let f = x.map(|t| -t.powi(3) + t.sin());
        assert_eq!(next.x, &x + f * 0.05);
        assert_eq!(o.queries(), 1);
    }

    #[test]
    fn quadratic_saddle_contracts_monotonically() {
        let o = saddle2d();
        let p = params(1, 0.1);
        let mut s = SdState::new(dv(&[1.0, -0.5]), frame(&[&[1.0, 0.0]]), 0, &p).unwrap();
        for _ in 0..50 {
            let next = sd_step(&o, &s, &p).unwrap();
            assert!((next.x[0] - 0.9 * s.x[0]).abs() < 1e-14);
            assert!((next.x[1] - 0.9 * s.x[1]).abs() < 1e-14);
            assert!(next.x.amax() < s.x.amax());
            s = next;
        }
    }

    #[test]
    fn run_converges_on_quadratic_saddle() {
        let o = saddle2d();
        let p = params(1, 0.1);
        let s = SdState::new(dv(&[0.7, 0.4]), frame(&[&[0.8, 0.6]]), 0, &p).unwrap();
        let res = run_sd(&o, &s, &p, None).unwrap();
        assert_eq!(res.status, RunStatus::Converged);
        assert!(res.final_state.x.amax() <= 1e-5);
        assert_eq!(res.n_f, res.n_steps * 3);
        let h = fd_jacobian_sym(&o, &res.final_state.x, 1e-5).unwrap();
        let eig = sym_eigen(&h).unwrap();
        assert_eq!(morse_index(&eig, 1e-8).index, 1);
    }

    #[test]
    fn region_exit_reports_exit_point() {
        // pure repulsion along x0 pushes the iterate out
        let o = ForceOracle::new(FnForce::new(2, |x| dv(&[x[0] + 1.0, -x[1]])));
        let p = params(0, 0.1);
        let region = TrustRegion::new(dv(&[0.0, 0.0]), 0.5).unwrap();
        let s = SdState::new(dv(&[0.0, 0.2]), DirectionFrame::empty(2), 0, &p).unwrap();
        let res = run_sd(&o, &s, &p, Some(&region)).unwrap();
        assert_eq!(res.status, RunStatus::RegionExit);
        let exit = res.exit_point.clone().unwrap();
        assert!(!region.contains(&exit));
        assert!(region.contains(&res.final_state.x));
        assert_eq!(res.exit_state.unwrap().n, res.final_state.n + 1);
    }

    #[test]
    fn max_steps_and_divergence() {
        let o = saddle2d();
        let mut p = params(0, 0.1);
        p.max_steps = 5;
        let s = SdState::new(dv(&[1.0, 1.0]), DirectionFrame::empty(2), 0, &p).unwrap();
        let res = run_sd(&o, &s, &p, None).unwrap();
        assert_eq!(res.status, RunStatus::MaxSteps);
        assert_eq!(res.n_steps, 5);

        p.max_steps = 10_000;
        p.divergence_bound = 100.0;
        let res = run_sd(&o, &s, &p, None).unwrap();
        assert_eq!(res.status, RunStatus::Diverged);
        assert!(res.final_state.x.amax() <= 100.0);
        assert!(matches!(res.error, Some(SaddleError::Diverged { .. })));
    }

    #[test]
    fn trajectory_csv_layout() {
        let o = saddle2d();
        let mut p = params(1, 0.1);
        p.record_trajectory = true;
        p.max_steps = 3;
        let s = SdState::new(dv(&[1.0, 1.0]), frame(&[&[1.0, 0.0]]), 0, &p).unwrap();
        let res = run_sd(&o, &s, &p, None).unwrap();
        let rows = res.trajectory.unwrap();
        assert_eq!(rows.len(), 4);
        let mut buf = Vec::new();
        write_trajectory_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "step,x_0,x_1,l,residual_infnorm");
        assert_eq!(lines[1], "0,1.0,1.0,0.01,1.0");
        assert!(lines[4].ends_with(','));
    }

    #[test]
    fn rejects_bad_params() {
        let mut p = params(1, 0.1);
        assert!(p.validate(2).is_ok());
        p.k = 3;
        assert!(p.validate(2).is_err());
        let mut p = params(1, 0.1);
        p.tau = 0.0;
        assert!(p.validate(2).is_err());
    }

    proptest! {
        #[test]
        fn frame_stays_orthonormal(
            seed in prop::collection::vec(-1.0f64..1.0, 16),
            x in prop::collection::vec(-1.0f64..1.0, 4),
        ) {
            let a = DMatrix::from_column_slice(4, 4, &seed);
            let sym = &a + a.transpose();
            let sm = sym.clone();
            let o = ForceOracle::new(FnForce::new(4, move |x| &sm * x + x.map(|t| t.sin())));
            let p = SdParams::new(1.0, 1.0, 0.05, 2, DimerSchedule::polynomial(0.01), 1e-9, 30);
            let f0 = gram_schmidt(&[dv(&[1.0, 0.2, 0.0, 0.1]), dv(&[0.0, 1.0, 0.3, 0.0])]).unwrap();
            let mut s = SdState::new(DVector::from_vec(x), f0, 0, &p).unwrap();
            for _ in 0..30 {
                s = sd_step(&o, &s, &p).unwrap();
                prop_assert!(s.frame.orthonormality_error() <= 1e-10);
            }
        }

        #[test]
        fn runs_are_deterministic(x0 in -0.9f64..0.9, x1 in -0.9f64..0.9) {
            let p = {
                let mut p = params(1, 0.1);
                p.record_trajectory = true;
                p.max_steps = 40;
                p
            };
            let s = SdState::new(dv(&[x0, x1]), frame(&[&[0.9, 0.3]]), 0, &p).unwrap();
            let a = run_sd(&saddle2d(), &s, &p, None).unwrap();
            let b = run_sd(&saddle2d(), &s, &p, None).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
