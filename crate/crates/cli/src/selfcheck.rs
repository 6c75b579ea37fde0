//! Compact invariant suite on a small one-dimensional grid.

use std::f64::consts::PI;
use std::sync::Arc;

use nlfrac::linear_solver::{dense_oracle_solve, operator_scale, solve_dirichlet, LinearProblem, LinearSolver};
use nlfrac::linearization::{
    aggregate_check, compute_cascade, fd_derivative, geometric, loglog_slope, remainder_study, LinearizationState,
};
use nlfrac::multi_index::MultiIndex;
use nlfrac::recovery::{run_full_recovery, RecoveryConfig, RecoveryMode, RecoveryTask, Simulator};
use nlfrac::runge::{RungeControl, RungeOptions};
use nlfrac::{bilinear_form, frac_laplacian, inner_product, linear_form, Field, GridSpec, MaskKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{omega_bump, Config, GridSection, ParamsSection};
use crate::error::CliError;
use crate::output::Output;

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    /// `value ≤ tolerance` when true, `value ≥ tolerance` otherwise.
    pub upper: bool,
    pub passed: bool,
}

#[derive(Default)]
struct Suite {
    checks: Vec<Check>,
}

impl Suite {
    fn below(&mut self, name: &str, value: f64, tolerance: f64) {
        self.push(name, value, tolerance, true);
    }

    fn above(&mut self, name: &str, value: f64, tolerance: f64) {
        self.push(name, value, tolerance, false);
    }

    fn push(&mut self, name: &str, value: f64, tolerance: f64, upper: bool) {
        let passed = if upper { value <= tolerance } else { value >= tolerance };
        self.checks.push(Check { name: name.into(), value, tolerance, upper, passed });
    }
}

fn random_trig(grid: &Arc<GridSpec>, rng: &mut ChaCha8Rng) -> Field {
    let base = 2.0 * PI / grid.box_length();
    let terms: Vec<(f64, f64, f64)> =
        (0..6).map(|_| (rng.gen_range(-3..=3) as f64 * base, rng.gen_range(-1.0..1.0), rng.gen_range(0.0..2.0 * PI))).collect();
    Field::from_fn(grid, |x| terms.iter().map(|(k, a, ph)| a * (k * x[0] + ph).cos()).sum())
}

fn l1(f: &Field) -> f64 {
    f.values().iter().map(|v| v.abs()).sum::<f64>() * f.grid().cell_volume()
}

pub fn selfcheck(base: &Config, out: &mut Output) -> Result<bool, CliError> {
    let mut cfg = base.clone();
    cfg.grid = GridSection { dim: 1, n: 32, ..GridSection::default() };
    cfg.params = ParamsSection { s: 1.5, m: 1, k: 2 };
    cfg.nonlinearity = Default::default();
    cfg.potential = Default::default();
    cfg.data = Default::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = cfg.model()?;
    let g = model.grid.clone();
    let full = vec![true; g.num_nodes()];
    let mut suite = Suite::default();

    let (mut sym, mut semi, mut eig) = (0.0f64, 0.0f64, 0.0f64);
    for &s in &[1.5, 2.3, 3.7] {
        let scale = g.spectral().max_frequency().powf(2.0 * s);
        let u = random_trig(&g, &mut rng);
        let v = random_trig(&g, &mut rng);
        let lu = frac_laplacian(&u, s)?;
        let lv = frac_laplacian(&v, s)?;
        let a = inner_product(&lu, &v, &full)?;
        let b = inner_product(&u, &lv, &full)?;
        sym = sym.max((a - b).abs() / (scale * u.l2_norm_on(&full) * v.l2_norm_on(&full)));
        let half = frac_laplacian(&frac_laplacian(&u, s / 2.0)?, s / 2.0)?;
        semi = semi.max((&half - &lu).max_norm() / (scale * u.max_norm()));
        let mode = Field::from_fn(&g, |x| (3.0 * x[0]).cos());
        let got = frac_laplacian(&mode, s)?;
        eig = eig.max((&got - &mode.scaled(3f64.powf(2.0 * s))).max_norm() / scale);
    }
    suite.below("operator symmetry", sym, 1e-11);
    suite.below("operator semigroup", semi, 1e-11);
    suite.below("operator eigenmode", eig, 1e-11);

    let mut solver_gap = 0.0f64;
    for _ in 0..3 {
        let q = random_trig(&g, &mut rng).map(|v| 1.0 + 0.5 * v.tanh()).hadamard(&omega_bump(&g));
        let rhs = random_trig(&g, &mut rng).masked(g.omega_mask());
        let ext = random_trig(&g, &mut rng).masked(g.exterior_mask());
        let p = LinearProblem::new(1.5, q, rhs, ext)?;
        let it = solve_dirichlet(&p, 1e-13, 20_000)?;
        let de = dense_oracle_solve(&p)?;
        solver_gap = solver_gap.max((&it.solution - &de.solution).max_norm() / de.solution.max_norm().max(1.0));
    }
    suite.below("iterative vs dense", solver_gap, 1e-9);

    let f = cfg.data_fields(&g, 1)?.remove(0);
    let exhaustive = model.solver.with_config(model.solver.config().exhaustive());
    let r = exhaustive.solve(&f)?;
    suite.below("nonlinear residual", r.scaled_residual(), 1e-11);
    let start = random_trig(&g, &mut rng).masked(g.omega_mask());
    let other = model.solver.solve_from(&f, &start.scaled(0.02 / start.max_norm().max(1e-300)))?;
    suite.below("uniqueness", (&other.solution - &r.solution).max_norm() / r.solution.max_norm(), 1e-9);
    let lin = LinearSolver::dense(1.5, &model.q)?;
    let linear_only = nlfrac::nonlinear_solver::NonlinearSolver::new(lin.clone(), model.p.zeroed(), cfg.contraction())?;
    let v = lin.homogeneous(&f)?;
    suite.below("linear degeneration", (&linear_only.solve(&f)?.solution - &v).max_norm() / v.max_norm(), 1e-12);

    let mut data = cfg.data_fields(&g, 2)?;
    data.iter_mut().for_each(|d| *d = d.scaled(2.0));
    let mut state = LinearizationState::new(exhaustive.clone(), data.clone())?;
    compute_cascade(&mut state, 2)?;
    let steps = [4e-3, 2e-3, 1e-3];
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for bits in [vec![1, 0], vec![0, 1], vec![1, 1]] {
        let alpha = MultiIndex::new(bits);
        let w = state.w(&alpha).cloned().unwrap_or_else(|| Field::zeros(&g));
        let errs: Vec<f64> = steps
            .iter()
            .map(|&h| Ok((&fd_derivative(&alpha, &data, h, &exhaustive)? - &w).max_norm()))
            .collect::<Result<_, nlfrac::Error>>()?;
        let order = loglog_slope(&steps, &errs);
        lo = lo.min(order);
        hi = hi.max(order);
    }
    suite.above("finite-difference order (min)", lo, 0.8);
    suite.below("finite-difference order (max)", hi, 1.2);
    let study = remainder_study(&state, &[1.0, 0.8], &geometric(0.4, 2.0, 5))?;
    suite.above("remainder slope", study.slope, 2.8);
    let agg = aggregate_check(&state, &[1.0, 0.8], &geometric(0.4, 2.0, 5))?;
    let mismatch = agg.rows.iter().map(|r| r.t_mismatch / r.t_norm.max(f64::MIN_POSITIVE)).fold(0.0, f64::max);
    suite.below("aggregate T mismatch", mismatch, 1e-10);

    let rho = operator_scale(&g, 1.5, &model.q);
    let psi = random_trig(&g, &mut rng).hadamard(&omega_bump(&g));
    let b = bilinear_form(&r.solution, &psi, &model.q, &model.p)?;
    suite.below("interior test vanishing", b.abs() / (rho * r.solution.max_norm() * l1(&psi)), 1e-11);
    let w1 = cfg.data_fields(&g, 1)?.remove(0);
    let mut w2cfg = cfg.clone();
    w2cfg.data.window = "w2".into();
    let w2 = w2cfg.data_fields(&g, 1)?.remove(0);
    let fg = bilinear_form(&lin.homogeneous(&w1)?, &w2, &model.q, &model.p.zeroed())?;
    let gf = bilinear_form(&lin.homogeneous(&w2)?, &w1, &model.q, &model.p.zeroed())?;
    suite.below("linear DN symmetry", (fg - gf).abs() / fg.abs().max(gf.abs()), 1e-10);
    let v0 = lin.homogeneous(&w2)?;
    let wa = state.w(&MultiIndex::new(vec![1, 1])).cloned().unwrap_or_else(|| Field::zeros(&g));
    let lf = linear_form(&wa, &v0, &model.q, 1.5)?;
    suite.below("adjoint cancellation", lf.abs() / (rho * v0.max_norm() * l1(&wa)).max(f64::MIN_POSITIVE), 1e-11);

    let control = RungeControl::new(lin.clone(), g.mask(MaskKind::W1))?;
    let target = v.masked(g.omega_mask());
    let rows = control.sweep(&target, &[1e-2, 1e-5, 1e-8], &RungeOptions::default())?;
    let monotone = rows.windows(2).all(|w| w[1].achieved_err <= w[0].achieved_err * (1.0 + 1e-6));
    suite.below("runge attainable target (monotone)", if monotone { 0.0 } else { 1.0 }, 0.0);

    let task = RecoveryTask::new(Simulator::new(model.solver.clone()), RecoveryMode::Oracle, RecoveryConfig::default())?;
    let report = run_full_recovery(&task)?;
    suite.below("oracle recovery q", report.q_error.unwrap_or(f64::INFINITY), 1e-5);
    suite.below("oracle recovery coefficients", report.max_error().unwrap_or(f64::INFINITY), 1e-5);
    let diagonal_ok = report.levels.iter().flat_map(|l| &l.diagonal).all(|d| d.matches);
    suite.below("triangularity diagonal", if diagonal_ok { 0.0 } else { 1.0 }, 0.0);

    for c in &suite.checks {
        let relation = if c.upper { "<=" } else { ">=" };
        let status = if c.passed { "PASS" } else { "FAIL" };
        println!("{status} {}: {:.3e} {relation} {:.1e}", c.name, c.value, c.tolerance);
    }
    let table = suite.checks.iter().map(|c| {
        vec![c.name.clone(), crate::output::fmt(c.value), crate::output::fmt(c.tolerance), c.passed.to_string()]
    });
    out.table_csv("selfcheck.csv", &["check", "value", "tolerance", "passed"], table.collect::<Vec<_>>())?;
    out.json("selfcheck.json", &suite.checks)?;
    Ok(suite.checks.iter().all(|c| c.passed))
}
