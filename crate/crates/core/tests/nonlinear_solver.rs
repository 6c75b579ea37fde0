mod common;

use common::*;
use nlfrac::linear_solver::LinearSolver;
use nlfrac::nonlinear_solver::*;
use nlfrac::*;
use proptest::prelude::*;

fn setup(k_max: usize, m: usize) -> (std::sync::Arc<GridSpec>, Field, Nonlinearity) {
    let g = grid_1d(64);
    let q = potential(&g, 1.0);
    let p = smooth_nonlinearity(&g, 1.5, m, k_max, 1.0);
    (g, q, p)
}

#[test]
fn residual_reaches_roundoff() {
    let (g, q, p) = setup(3, 1);
    let s = solver(&q, &p);
    let exhaustive = s.with_config(s.config().exhaustive());
    for amp in [0.05, 0.2, 0.5] {
        let r = exhaustive.solve(&w1_bump(&g, 0.5, amp)).unwrap();
        assert!(r.scaled_residual() <= 1e-11, "amp {amp}: {:e}", r.scaled_residual());
    }
}

#[test]
fn two_initial_guesses_agree() {
    let (g, q, p) = setup(3, 1);
    let s = solver(&q, &p);
    let f = w1_bump(&g, 0.4, 0.5);
    let a = s.solve(&f).unwrap().solution;
    let guess = random_interior(&g, 11).scaled(0.05 / random_interior(&g, 11).max_norm());
    let b = s.solve_from(&f, &guess).unwrap().solution;
    assert!((&a - &b).max_norm() <= 1e-9 * a.max_norm());
}

#[test]
fn zero_nonlinearity_gives_the_linear_solution() {
    let (g, q, p) = setup(3, 1);
    let s = solver(&q, &p.zeroed());
    let f = w1_bump(&g, 0.5, 0.7);
    let r = s.solve(&f).unwrap();
    let lin = LinearSolver::dense(1.5, &q).unwrap().homogeneous(&f).unwrap();
    assert!((&r.solution - &lin).max_norm() <= 1e-12 * lin.max_norm());
    assert_eq!(r.correction.max_norm(), 0.0);
}

#[test]
fn correction_is_quadratic_in_the_data() {
    let (g, q, p) = setup(2, 0);
    let s = solver(&q, &p);
    let exhaustive = s.with_config(s.config().exhaustive());
    let f = w1_bump(&g, 0.5, 1.0);
    let c1 = exhaustive.solve(&f.scaled(1e-2)).unwrap().correction.max_norm();
    let c2 = exhaustive.solve(&f.scaled(5e-3)).unwrap().correction.max_norm();
    let order = (c1 / c2).log2();
    assert!((order - 2.0).abs() < 0.05, "order {order}");
}

#[test]
fn large_data_leave_the_contraction_ball() {
    let (g, q, p) = setup(3, 1);
    let s = NonlinearSolver::new(
        LinearSolver::dense(1.5, &q).unwrap(),
        p.scaled_for_test(50.0),
        ContractionConfig { eps0: 1.0, delta: 0.1, ..ContractionConfig::default() },
    )
    .unwrap();
    let err = s.solve(&w1_bump(&g, 0.5, 5.0)).unwrap_err();
    assert!(matches!(err, Error::ContractionBallViolated { .. } | Error::NonConvergence { .. }));
}

#[test]
fn auto_backend_and_solve_nlfse_agree() {
    let (g, q, p) = setup(3, 1);
    let f = w1_bump(&g, 0.5, 0.3);
    let cfg = ContractionConfig { eps0: 1.0, ..ContractionConfig::default() };
    let a = solve_nlfse(&q, &p, &f, &cfg).unwrap().solution;
    let b = solver(&q, &p).solve(&f).unwrap().solution;
    assert!((&a - &b).max_norm() <= 1e-12 * a.max_norm());
}

#[test]
fn smallness_report_is_consistent() {
    let (g, q, p) = setup(3, 1);
    let s = solver(&q, &p);
    let f = w1_bump(&g, 0.5, 1e-3);
    let r = s.check_smallness(&f, 7).unwrap();
    assert!(r.operator_bound > 0.0);
    assert!((r.lhs - contraction_lhs(r.operator_bound, r.coefficient_sum, r.delta, 1.0, 3)).abs() <= 1e-12 * r.lhs);
    assert_eq!(r.holds, r.lhs < r.delta);
    assert_eq!(s.check_smallness(&f, 7).unwrap(), r);
    if let Some((lo, hi)) = r.delta_range {
        let mid = 0.5 * (lo + hi);
        assert!(contraction_lhs(r.operator_bound, r.coefficient_sum, mid, 1.0, 3) < mid);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        ContractionConfig { eps0: 0.0, ..ContractionConfig::default() },
        ContractionConfig { delta: 1.5, ..ContractionConfig::default() },
        ContractionConfig { tol: -1.0, ..ContractionConfig::default() },
    ] {
        assert!(cfg.validate().is_err());
    }
}

trait ScaleForTest {
    fn scaled_for_test(&self, c: f64) -> Self;
}

impl ScaleForTest for Nonlinearity {
    fn scaled_for_test(&self, c: f64) -> Self {
        let mut out = self.zeroed();
        for ((k, sigma), f) in self.coeffs() {
            out.set_coeff(*k, sigma.clone(), f.scaled(c)).unwrap();
        }
        out
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn solutions_are_unique_from_random_starts(seed in 0u64..10_000, amp in 0.05f64..0.6) {
        let (g, q, p) = setup(3, 1);
        let s = solver(&q, &p);
        let f = w1_bump(&g, 0.5, amp);
        let a = s.solve(&f).unwrap().solution;
        let start = random_interior(&g, seed);
        let start = start.scaled(0.05 / start.max_norm());
        let b = s.solve_from(&f, &start).unwrap().solution;
        prop_assert!((&a - &b).max_norm() <= 1e-9 * a.max_norm());
    }

    #[test]
    fn contraction_lhs_grows_with_delta(c in 0.1f64..10.0, cp in 0.1f64..10.0, d1 in 0.0f64..0.5, d2 in 0.0f64..0.5) {
        let (lo, hi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
        prop_assert!(contraction_lhs(c, cp, lo, 0.01, 3) <= contraction_lhs(c, cp, hi, 0.01, 3));
    }
}
