mod common;

use common::*;
use nlfrac::linear_solver::LinearSolver;
use nlfrac::runge::*;
use nlfrac::*;
use proptest::prelude::*;

fn control(n: usize, kind: MaskKind) -> (std::sync::Arc<GridSpec>, RungeControl) {
    let g = grid_1d(n);
    let q = potential(&g, 1.0);
    let lin = LinearSolver::dense(1.5, &q).unwrap();
    let rc = RungeControl::new(lin, g.mask(kind)).unwrap();
    (g, rc)
}

fn lambdas() -> Vec<f64> {
    (2..=10).map(|e| 10f64.powi(-e)).collect()
}

#[test]
fn zero_target_gives_zero_control() {
    let (g, rc) = control(64, MaskKind::W1);
    let res = rc.solve(&Field::zeros(&g), &RungeOptions::default()).unwrap();
    assert_eq!(res.control.max_norm(), 0.0);
    assert_eq!(res.achieved_err, 0.0);
}

#[test]
fn attainable_targets_are_reached_as_lambda_shrinks() {
    let (g, rc) = control(64, MaskKind::W1);
    let f_star = w1_bump(&g, 0.5, 1.0);
    let target = rc.linear().homogeneous(&f_star).unwrap().masked(g.omega_mask());
    let rows = rc.sweep(&target, &lambdas(), &RungeOptions::default()).unwrap();
    for w in rows.windows(2) {
        assert!(w[1].achieved_err <= w[0].achieved_err * (1.0 + 1e-6), "{:?}", w);
    }
    assert!(rows.last().unwrap().achieved_err < 1e-3, "{:?}", rows.last());
    assert!(rows[0].achieved_err > rows.last().unwrap().achieved_err);
}

#[test]
fn controls_live_in_the_window() {
    let (g, rc) = control(64, MaskKind::W2);
    let target = interior_bump(&g, 1.0);
    for penalty in [Penalty::L2, Penalty::Sobolev] {
        let res = rc.solve(&target, &RungeOptions { lambda: 1e-6, penalty, ..Default::default() }).unwrap();
        assert!(res.control.vanishes_outside(g.mask(MaskKind::W2)));
        let realized = rc.linear().homogeneous(&res.control).unwrap();
        assert!(max_rel(&realized, &res.realized) < 1e-12);
        let err = (&realized - &target).l2_norm_on(g.omega_mask()) / target.l2_norm_on(g.omega_mask());
        assert!((err - res.achieved_err).abs() < 1e-10);
    }
}

#[test]
fn free_function_agrees_with_the_control_object() {
    let (g, rc) = control(64, MaskKind::W1);
    let target = interior_bump(&g, 1.0);
    let q = potential(&g, 1.0);
    let (f, err) = runge_control(&target, g.mask(MaskKind::W1), &q, 1.5, 1e-6, DEFAULT_CG_TOL, DEFAULT_CG_MAX).unwrap();
    let res = rc.solve(&target, &RungeOptions { lambda: 1e-6, ..Default::default() }).unwrap();
    assert!(max_rel(&f, &res.control) < 1e-12);
    assert!((err - res.achieved_err).abs() < 1e-12);
}

#[test]
fn smooth_bump_baseline_with_the_whole_exterior() {
    let (g, rc) = control(128, MaskKind::Exterior);
    let target = interior_bump(&g, 1.0);
    let res = rc.solve(&target, &RungeOptions { lambda: 1e-11, ..Default::default() }).unwrap();
    assert!(res.achieved_err <= 5e-2, "{}", res.achieved_err);
}

#[test]
fn invalid_requests_are_rejected() {
    let (g, rc) = control(64, MaskKind::W1);
    let target = interior_bump(&g, 1.0);
    assert!(rc.solve(&target, &RungeOptions { lambda: 0.0, ..Default::default() }).is_err());
    assert!(rc.solve(&target, &RungeOptions { lambda: -1.0, ..Default::default() }).is_err());
    assert!(rc.sweep(&target, &[1e-6, 1e-4], &RungeOptions::default()).is_err());
    let lin = LinearSolver::dense(1.5, &potential(&g, 1.0)).unwrap();
    assert!(RungeControl::new(lin, g.omega_mask()).is_err());
}

#[test]
fn discrepancy_picks_the_largest_admissible_lambda() {
    let row = |lambda, achieved_err| SweepRow { lambda, achieved_err, control_norm: 1.0, penalty_norm: 1.0, iterations: 1 };
    let rows = vec![row(1e-2, 0.5), row(1e-4, 0.08), row(1e-6, 0.01)];
    assert_eq!(discrepancy_lambda(&rows, 0.1), Some(1e-4));
    assert_eq!(discrepancy_lambda(&rows, 0.001), None);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn tikhonov_trades_misfit_for_control_size(seed in 0u64..1000) {
        let (g, rc) = control(64, MaskKind::W1);
        let target = random_interior(&g, seed);
        let rows = rc.sweep(&target, &[1e-3, 1e-5, 1e-7], &RungeOptions::default()).unwrap();
        for w in rows.windows(2) {
            prop_assert!(w[1].achieved_err <= w[0].achieved_err * (1.0 + 1e-6));
            prop_assert!(w[1].control_norm >= w[0].control_norm * (1.0 - 1e-6));
        }
    }
}
