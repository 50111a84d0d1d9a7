use std::sync::Arc;

use nalgebra::DVector;
use saddle_core::benchmarks::*;
use saddle_core::dynamics::{run_sd, write_trajectory_csv, DimerSchedule, RunStatus, SdParams, SdState};
use saddle_core::learner::{run_gpsd, GpsdParams, LhsSampler, RegionAction, SubproblemRecord, TrustRegion};
use saddle_core::linalg::{default_zero_tol, fd_jacobian_sym, morse_index};
use saddle_core::{sym_eigen, DirectionFrame, FnForce, ForceOracle};

fn dv(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

fn rosenbrock_start(case: usize, k: usize) -> (ForceOracle, SdState, SdParams) {
    let oracle = ForceOracle::new(Rosenbrock::new(RosenbrockParams::case(case).unwrap()));
    let x0 = dv(&ROSENBROCK_X0);
    let frame = init_directions(&fd_jacobian_sym(&oracle, &x0, 1e-5).unwrap(), k).unwrap();
    let params = rosenbrock_sd_params(k);
    let init = SdState::new(x0, frame, 0, &params).unwrap();
    (oracle, init, params)
}

#[test]
fn rosenbrock_case_two_reaches_the_index_two_point() {
    let (oracle, init, params) = rosenbrock_start(2, 2);
    let setup = oracle.queries();
    let res = run_sd(&oracle, &init, &params, None).unwrap();
    assert_eq!(res.status, RunStatus::Converged);
    let x = &res.final_state.x;
    // agreement with (1, 1, 1, 1) to three decimals
    assert!(x.add_scalar(-1.0).amax() <= 1e-3, "{x}");
    assert_eq!(res.n_f, res.n_steps * 5);
    assert_eq!(oracle.queries() - setup, res.n_f);
    let eig = sym_eigen(&fd_jacobian_sym(&oracle, x, 1e-5).unwrap()).unwrap();
    assert_eq!(morse_index(&eig, default_zero_tol(&eig)).index, 2);
}

#[test]
fn quadratic_saddle_converges_to_origin() {
    // E = -x1^2/2 + x2^2/2
    let oracle = ForceOracle::new(FnForce::new(2, |x: &DVector<f64>| dv(&[x[0], -x[1]])));
    let params = SdParams::new(1.0, 1.0, 0.1, 1, DimerSchedule::polynomial(0.01), 1e-6, 10_000);
    let frame = DirectionFrame::from_orthonormal(2, vec![dv(&[1.0, 0.0])]).unwrap();
    let init = SdState::new(dv(&[1.0, 1.0]), frame, 0, &params).unwrap();
    let res = run_sd(&oracle, &init, &params, None).unwrap();
    assert!(res.converged());
    assert!(res.final_state.x.amax() < 1e-5);
    assert_eq!(res.n_f, 3 * res.n_steps);
}

#[test]
fn trajectory_export_has_one_row_per_iterate() {
    let (oracle, init, mut params) = rosenbrock_start(1, 1);
    params.record_trajectory = true;
    params.max_steps = 25;
    let res = run_sd(&oracle, &init, &params, None).unwrap();
    assert_eq!(res.status, RunStatus::MaxSteps);
    let rows = res.trajectory.as_ref().unwrap();
    let mut buf = Vec::new();
    write_trajectory_csv(rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,x_0,x_1,x_2,x_3,l,residual_infnorm");
    assert_eq!(lines.len(), 1 + rows.len());
    assert_eq!(rows.len() as u64, res.n_steps + 1);
}

#[test]
fn codesign_direct_search_simulates_once_per_query() {
    let field = Arc::new(Codesign::new());
    let oracle = ForceOracle::from_arc(field.clone());
    let params = codesign_sd_params();
    let init = SdState::new(codesign_x0(3).unwrap(), codesign_initial_frame(), 0, &params).unwrap();
    let res = run_sd(&oracle, &init, &params, None).unwrap();
    assert!(res.converged());
    assert!(res.final_state.x.amax() <= 1e-2);
    assert_eq!(field.simulations(), res.n_f);
}

#[test]
fn learning_run_keeps_its_ledger() {
    let oracle = ForceOracle::new(Rosenbrock::new(RosenbrockParams::case(2).unwrap()));
    let x0 = dv(&ROSENBROCK_X0);
    let frame = init_directions(&fd_jacobian_sym(&oracle, &x0, 1e-5).unwrap(), 2).unwrap();
    let before = oracle.queries();
    let params = rosenbrock_gpsd_params(2, &x0, 3);
    let init = SdState::new(x0, frame, 0, &params.sd).unwrap();
    let mut log = Vec::new();
    let res = run_gpsd(&oracle, &init, &params, &LhsSampler, Some(&mut log)).unwrap();
    assert!(res.run.converged());
    assert!((res.run.final_state.x.add_scalar(-1.0)).amax() <= 5e-2);

    let records: Vec<SubproblemRecord> = String::from_utf8(log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), res.subproblems.len());
    assert_eq!(records.len(), res.region_updates + 1);
    let last = records.len() - 1;
    for (j, r) in records.iter().enumerate() {
        assert_eq!(r.subproblem_index, j);
        // counts include the resampling triggered by this subproblem's update
        let updates = if j == last { j } else { j + 1 };
        assert_eq!(r.n_f_cumulative, (params.n_sam + updates * params.n_new) as u64);
        assert!(r.delta >= params.delta_min && r.delta <= params.delta_max);
    }
    assert!(records.last().unwrap().action.is_none());
    assert!(records[..records.len() - 1].iter().all(|r| r.action.is_some()));
    assert_eq!(res.run.n_f, (params.n_sam + res.region_updates * params.n_new) as u64);
    assert_eq!(oracle.queries() - before, res.run.n_f);

    // inherited and fresh data all lie in the final region
    let region = &res.final_region;
    assert!(res.surrogate.data().locations().iter().all(|x| region.contains(x)));
}

#[test]
fn learning_runs_are_reproducible() {
    let run = || {
        let oracle = ForceOracle::new(FnForce::new(2, |x: &DVector<f64>| {
            dv(&[x[0] + 0.3 * x[1] * x[1], -x[1] + 0.2 * x[0].sin()])
        }));
        let sd = SdParams::new(1.0, 1.0, 0.05, 1, DimerSchedule::polynomial(0.01), 1e-6, 4_000);
        let region = TrustRegion::new(dv(&[0.3, 0.4]), 0.5).unwrap();
        let params = GpsdParams::new(sd, 0.05, 0.15, 30, 30, region, 42);
        let frame = DirectionFrame::from_orthonormal(2, vec![dv(&[1.0, 0.0])]).unwrap();
        let init = SdState::new(dv(&[0.3, 0.4]), frame, 0, &params.sd).unwrap();
        run_gpsd(&oracle, &init, &params, &LhsSampler, None).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.run.final_state, b.run.final_state);
    assert_eq!(a.subproblems, b.subproblems);
    assert!(a.subproblems.iter().any(|s| s.action == Some(RegionAction::Enlarge)) || a.subproblems.len() == 1);
}
