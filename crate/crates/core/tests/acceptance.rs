mod common;

use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use common::*;
use nlfrac::dn_map::{cascade_dn_derivative, dn_derivative, dn_pair};
use nlfrac::linear_solver::*;
use nlfrac::linearization::*;
use nlfrac::recovery::*;
use nlfrac::*;

type Outcome = std::result::Result<String, String>;

/// Frozen exterior-mode baselines.
const Q_BASELINE: f64 = 0.02;
const LEVEL_BASELINE: f64 = 0.25;

fn check(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn operator_scale_of(g: &GridSpec, s: f64) -> f64 {
    g.spectral().max_frequency().powf(2.0 * s)
}

fn criterion_1() -> Outcome {
    let mut worst = 0.0f64;
    for dim in [1, 2] {
        for n in [32, 64] {
            let g = if dim == 1 { grid_1d(n) } else { grid_2d(n) };
            let full = vec![true; g.num_nodes()];
            for &s in &[1.5, 2.3, 3.7] {
                let scale = operator_scale_of(&g, s);
                for seed in 0..3u64 {
                    let u = random_trig(&g, 5, seed);
                    let v = random_trig(&g, 5, seed + 50);
                    let lu = frac_laplacian(&u, s).map_err(|e| e.to_string())?;
                    let lv = frac_laplacian(&v, s).map_err(|e| e.to_string())?;
                    let pair_scale = scale * u.l2_norm_on(&full) * v.l2_norm_on(&full);
                    let a = inner_product(&lu, &v, &full).unwrap();
                    let b = inner_product(&u, &lv, &full).unwrap();
                    let sym = (a - b).abs() / pair_scale;
                    let pos = inner_product(&lu, &u, &full).unwrap() / (scale * u.l2_norm_on(&full).powi(2));
                    let half = frac_laplacian(&frac_laplacian(&u, s / 2.0).unwrap(), s / 2.0).unwrap();
                    let semi = (&half - &lu).max_norm() / (scale * u.max_norm());
                    worst = worst.max(sym).max(semi).max((-pos).max(0.0));
                    check(sym <= 1e-11, || format!("symmetry {sym:e} dim {dim} N {n} s {s}"))?;
                    check(pos >= -1e-11, || format!("positivity {pos:e} dim {dim} N {n} s {s}"))?;
                    check(semi <= 1e-11, || format!("semigroup {semi:e} dim {dim} N {n} s {s}"))?;
                }
                for k in [1.0, 3.0, 7.0] {
                    let u = Field::from_fn(&g, |x| (k * x[0]).cos() + if dim == 2 { (k * x[1]).sin() } else { 0.0 });
                    let lap = frac_laplacian(&u, s).unwrap();
                    let err = (&lap - &u.scaled(k.powf(2.0 * s))).max_norm() / (scale * u.max_norm());
                    worst = worst.max(err);
                    check(err <= 1e-11, || format!("eigenmode {err:e} dim {dim} N {n} s {s} k {k}"))?;
                }
            }
        }
    }
    Ok(format!("worst normalized error {worst:.2e}"))
}

fn criterion_2() -> Outcome {
    let mut count = 0;
    let mut worst = 0.0f64;
    for (g, s) in [(grid_1d(64), 1.5), (grid_1d(64), 2.3), (grid_2d(32), 1.5), (grid_2d(32), 3.7)] {
        for seed in 0..6u64 {
            let q = random_potential(&g, seed);
            let rhs = random_interior(&g, seed + 100).masked(g.omega_mask());
            let ext = random_trig(&g, 3, seed + 200).masked(g.exterior_mask());
            let p = LinearProblem::new(s, q, rhs, ext).map_err(|e| e.to_string())?;
            let it = solve_dirichlet(&p, 1e-13, 20_000).map_err(|e| e.to_string())?;
            let de = dense_oracle_solve(&p).map_err(|e| e.to_string())?;
            let diff = (&it.solution - &de.solution).max_norm() / de.solution.max_norm().max(1.0);
            worst = worst.max(diff);
            check(diff <= 1e-9, || format!("instance dim {} seed {seed}: {diff:e}", g.dim()))?;
            count += 1;
        }
    }
    let mut manufactured = 0.0f64;
    for (g, s) in [(grid_1d(64), 1.5), (grid_1d(64), 3.7), (grid_2d(32), 2.3)] {
        let q = potential(&g, 1.0);
        let u = &random_interior(&g, 5).masked(g.omega_mask()) + &random_trig(&g, 3, 6).masked(g.exterior_mask());
        let rhs = (&frac_laplacian(&u, s).unwrap() + &q.hadamard(&u)).masked(g.omega_mask());
        let p = LinearProblem::new(s, q, rhs, u.masked(g.exterior_mask())).unwrap();
        for report in [dense_oracle_solve(&p).unwrap(), solve_dirichlet(&p, 1e-13, 20_000).unwrap()] {
            let err = max_rel(&report.solution, &u);
            manufactured = manufactured.max(err);
            check(err <= 1e-9, || format!("manufactured {:?} {err:e}", report.method))?;
        }
    }
    Ok(format!("{count} instances, worst {worst:.2e}; manufactured {manufactured:.2e}"))
}

fn criterion_3() -> Outcome {
    let g = grid_1d(64);
    let q = potential(&g, 1.0);
    let p = smooth_nonlinearity(&g, 1.5, 1, 3, 1.0);
    let s = solver(&q, &p);
    let exhaustive = s.with_config(s.config().exhaustive());
    let mut residual = 0.0f64;
    for amp in [0.05, 0.2, 0.5] {
        let r = exhaustive.solve(&w1_bump(&g, 0.5, amp)).map_err(|e| e.to_string())?;
        residual = residual.max(r.scaled_residual());
    }
    check(residual <= 1e-11, || format!("residual {residual:e}"))?;
    let f = w1_bump(&g, 0.4, 0.5);
    let a = s.solve(&f).unwrap().solution;
    let start = random_interior(&g, 11);
    let b = s.solve_from(&f, &start.scaled(0.05 / start.max_norm())).unwrap().solution;
    let unique = (&a - &b).max_norm() / a.max_norm();
    check(unique <= 1e-9, || format!("uniqueness {unique:e}"))?;
    let lin = LinearSolver::dense(1.5, &q).unwrap().homogeneous(&f).unwrap();
    let z = solver(&q, &p.zeroed()).solve(&f).unwrap().solution;
    let degenerate = (&z - &lin).max_norm() / lin.max_norm();
    check(degenerate <= 1e-12, || format!("linear degeneration {degenerate:e}"))?;
    Ok(format!("residual {residual:.2e}, uniqueness {unique:.2e}, linear {degenerate:.2e}"))
}

fn criterion_4() -> Outcome {
    let steps = [4e-3, 2e-3, 1e-3];
    let mut orders = (f64::INFINITY, f64::NEG_INFINITY);
    let mut terminal = 0.0f64;
    for k_max in [2, 3] {
        let g = grid_1d(64);
        let q = potential(&g, 1.0);
        let p = smooth_nonlinearity(&g, 1.5, 1, k_max, 1.0);
        let data: Vec<Field> = (0..k_max).map(|l| w1_bump(&g, 0.3 + 0.2 * l as f64, 1.0)).collect();
        let mut state = LinearizationState::new(solver(&q, &p), data.clone()).map_err(|e| e.to_string())?;
        compute_cascade(&mut state, k_max).map_err(|e| e.to_string())?;
        for alpha in binary_indices(k_max) {
            let exact = state.w(&alpha).unwrap().clone();
            let errs: Vec<f64> = steps
                .iter()
                .map(|&h| (&fd_derivative(&alpha, &data, h, state.solver()).unwrap() - &exact).max_norm())
                .collect();
            let order = loglog_slope(&steps, &errs);
            let rel = errs[2] / exact.max_norm();
            orders = (orders.0.min(order), orders.1.max(order));
            terminal = terminal.max(rel);
            check((0.8..=1.2).contains(&order), || format!("K {k_max} α {alpha}: order {order:.3}"))?;
            check(rel < 1e-4, || format!("K {k_max} α {alpha}: terminal {rel:e}"))?;
        }
    }
    Ok(format!("orders in [{:.3}, {:.3}], terminal relative error {terminal:.2e}", orders.0, orders.1))
}

fn remainder_state(k_max: usize) -> LinearizationState {
    let g = grid_1d(64);
    let q = potential(&g, 1.0);
    let p = smooth_nonlinearity(&g, 1.5, 1, k_max, 1.0);
    let data: Vec<Field> = (0..k_max).map(|l| w1_bump(&g, 0.3 + 0.2 * l as f64, 1.0)).collect();
    let s = solver(&q, &p);
    let s = s.with_config(s.config().exhaustive());
    let mut state = LinearizationState::new(s, data).unwrap();
    compute_cascade(&mut state, k_max).unwrap();
    state
}

fn criterion_5() -> Outcome {
    let mut out = Vec::new();
    for k_max in [2, 3] {
        let state = remainder_state(k_max);
        let direction: Vec<f64> = (0..k_max).map(|l| 1.0 - 0.2 * l as f64).collect();
        let study = remainder_study(&state, &direction, &geometric(0.4, 2.0, 5)).map_err(|e| e.to_string())?;
        let target = k_max as f64 + 0.8;
        check(study.slope >= target, || format!("K {k_max}: slope {:.3} < {target}", study.slope))?;
        out.push(format!("K={k_max} slope {:.3}", study.slope));
    }
    Ok(out.join(", "))
}

fn criterion_6() -> Outcome {
    let k_max = 3;
    let state = remainder_state(k_max);
    let check_rows = aggregate_check(&state, &[1.0, 0.8, 0.6], &geometric(0.4, 2.0, 5)).map_err(|e| e.to_string())?;
    let mut mismatch = 0.0f64;
    for row in &check_rows.rows {
        let rel = row.t_mismatch / row.t_norm.max(f64::MIN_POSITIVE);
        mismatch = mismatch.max(rel);
        check(rel <= 1e-10, || format!("k {}: T mismatch {rel:e}", row.k))?;
        let k = row.k as f64;
        check((row.v_slope - k).abs() <= 0.3, || format!("k {}: V slope {:.3}", row.k, row.v_slope))?;
        check((row.u_slope - (k + 1.0)).abs() <= 0.3, || format!("k {}: U slope {:.3}", row.k, row.u_slope))?;
    }
    let slopes: Vec<String> =
        check_rows.rows.iter().map(|r| format!("k={} V {:.2} U {:.2}", r.k, r.v_slope, r.u_slope)).collect();
    Ok(format!("T mismatch {mismatch:.2e}; {}", slopes.join(", ")))
}

fn criterion_7() -> Outcome {
    let g = grid_1d(64);
    let q = potential(&g, 1.0);
    let p = smooth_nonlinearity(&g, 1.5, 1, 3, 1.0);
    let s = solver(&q, &p);
    let s = s.with_config(s.config().exhaustive());
    let rho = operator_scale(&g, 1.5, &q);
    let l1 = |f: &Field| f.values().iter().map(|v| v.abs()).sum::<f64>() * g.cell_volume();

    let u = s.solve(&w1_bump(&g, 0.5, 0.5)).map_err(|e| e.to_string())?.solution;
    let mut vanish = 0.0f64;
    for seed in 0..4 {
        let psi = random_interior(&g, seed);
        let b = bilinear_form(&u, &psi, &q, &p).unwrap();
        vanish = vanish.max(b.abs() / (rho * u.max_norm() * l1(&psi)));
    }
    check(vanish <= 1e-11, || format!("interior vanishing {vanish:e}"))?;

    let linear = solver(&q, &p.zeroed());
    let mut symmetry = 0.0f64;
    for (a, b) in [(0.3, 0.6), (0.5, 0.5), (0.7, 0.2)] {
        let f = w1_bump(&g, a, 1.0);
        let h = w2_bump(&g, b, 1.0);
        let fg = dn_pair(&f, &h, &linear).unwrap();
        let gf = dn_pair(&h, &f, &linear).unwrap();
        symmetry = symmetry.max((fg - gf).abs() / fg.abs().max(gf.abs()));
    }
    check(symmetry <= 1e-10, || format!("linear DN symmetry {symmetry:e}"))?;

    let lin = LinearSolver::dense(1.5, &q).unwrap();
    let mut cancel = 0.0f64;
    for seed in 0..4 {
        let w = random_interior(&g, seed);
        let v0 = lin.homogeneous(&w2_bump(&g, 0.3 + 0.1 * seed as f64, 1.0)).unwrap();
        let lf = linear_form(&w, &v0, &q, 1.5).unwrap();
        cancel = cancel.max(lf.abs() / (rho * v0.max_norm() * l1(&w)));
    }
    let data: Vec<Field> = (0..3).map(|l| w1_bump(&g, 0.3 + 0.2 * l as f64, 1.0)).collect();
    let mut state = LinearizationState::new(s.clone(), data.clone()).unwrap();
    compute_cascade(&mut state, 3).unwrap();
    let v0 = lin.homogeneous(&w2_bump(&g, 0.5, 1.0)).unwrap();
    for alpha in binary_indices(3).into_iter().filter(|a| a.order() >= 2) {
        let w = state.w(&alpha).unwrap();
        let lf = linear_form(w, &v0, &q, 1.5).unwrap();
        cancel = cancel.max(lf.abs() / (rho * v0.max_norm() * l1(w)));
        let exact = cascade_dn_derivative(&state, &alpha, &v0).unwrap();
        let fd = dn_derivative(&alpha, &data, &v0, 1e-3, &s).unwrap();
        check((fd - exact).abs() <= 1e-6_f64.max(1e-4 * exact.abs()), || format!("α {alpha}: derivative {fd} vs {exact}"))?;
    }
    check(cancel <= 1e-11, || format!("cancellation {cancel:e}"))?;
    Ok(format!("vanishing {vanish:.2e}, symmetry {symmetry:.2e}, cancellation {cancel:.2e}"))
}

fn planted_task(mode: RecoveryMode) -> RecoveryTask {
    let g: Arc<GridSpec> = grid_1d(128);
    let q = potential(&g, 1.0);
    let p = smooth_nonlinearity(&g, 1.5, 1, 3, 1.0);
    RecoveryTask::new(Simulator::new(solver(&q, &p)), mode, RecoveryConfig::default()).unwrap()
}

fn criterion_8() -> Outcome {
    let task = planted_task(RecoveryMode::Oracle);
    let report = run_full_recovery(&task).map_err(|e| e.to_string())?;
    check(report.completed, || format!("aborted: {:?}", report.aborted))?;
    let q_err = report.q_error.unwrap_or(f64::INFINITY);
    check(q_err <= 1e-5, || format!("q error {q_err:e}"))?;
    for c in &report.coefficients {
        let e = c.relative_error.unwrap_or(f64::INFINITY);
        check(e <= 1e-5, || format!("a[{}, {}] error {e:e}", c.sigma, c.level))?;
    }
    let mut diag = Vec::new();
    for level in &report.levels {
        for d in &level.diagonal {
            check(d.matches && d.expected == expected_diagonal(level.k, &d.sigma).unwrap(), || {
                format!("k {} σ {}: diagonal {} vs {}", level.k, d.sigma, d.measured, d.expected)
            })?;
            diag.push(format!("{}", d.expected));
        }
    }
    Ok(format!("q {q_err:.2e}, max coefficient {:.2e}, diagonals [{}]", report.max_error().unwrap(), diag.join(" ")))
}

fn criterion_9() -> Outcome {
    let task = planted_task(RecoveryMode::Exterior);
    let report = run_full_recovery(&task).map_err(|e| e.to_string())?;
    check(report.completed, || format!("aborted: {:?}", report.aborted))?;
    let q_err = report.q_error.unwrap_or(f64::INFINITY);
    check(q_err <= report.q_budget, || format!("q error {q_err:e} above budget {:e}", report.q_budget))?;
    check(q_err <= Q_BASELINE, || format!("q error {q_err:e} above baseline {Q_BASELINE}"))?;
    let mut parts = vec![format!("q {q_err:.3} (budget {:.3})", report.q_budget)];
    for c in &report.coefficients {
        let e = c.relative_error.unwrap_or(f64::INFINITY);
        check(e <= c.budget, || format!("a[{}, {}] error {e:e} above budget {:e}", c.sigma, c.level, c.budget))?;
        check(e <= LEVEL_BASELINE, || format!("a[{}, {}] error {e:e} above baseline", c.sigma, c.level))?;
        parts.push(format!("a[{},{}] {e:.3} (budget {:.3})", c.sigma, c.level, c.budget));
    }
    Ok(parts.join(", "))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("operator suite", criterion_1),
        ("linear solver oracle equivalence", criterion_2),
        ("contraction solver", criterion_3),
        ("cascade vs finite differences", criterion_4),
        ("remainder order", criterion_5),
        ("aggregate identities", criterion_6),
        ("DN identities", criterion_7),
        ("oracle recovery", criterion_8),
        ("exterior recovery", criterion_9),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {}: {name}: {detail} [{secs:.1} s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {}: {name}: {detail} [{secs:.1} s]", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
