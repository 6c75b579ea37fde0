//! Recovery of the potential and of the nonlinear coefficients from DN data,
//! in an oracle mode with prescribed interior test functions and in an
//! exterior-data mode driven by measured DN derivatives and Runge controls.

use std::collections::BTreeMap;
use std::sync::Arc;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dn_map::{cosine_bump, dn_derivative_multi};
use crate::error::{Error, Result};
use crate::grid::{inner_product, Field, GridSpec, MaskKind};
use crate::linear_solver::LinearSolver;
use crate::linearization::{compute_t_alpha, LinearizationState};
use crate::multi_index::{indices_up_to, permutations, MultiIndex};
use crate::nonlinear_solver::NonlinearSolver;
use crate::operators::{linear_form, partial_derivative, FracParams, Nonlinearity};
use crate::runge::{RungeControl, RungeOptions};

/// Discrepancy-principle factor on the estimated data noise.
const DISCREPANCY_TAU: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecoveryMode {
    Oracle,
    Exterior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecoveryConfig {
    /// Bump radius in grid spacings.
    pub bump_radius: f64,
    /// Distance from the boundary, as a fraction of the domain width, excluded from error reports.
    pub region_margin: f64,
    /// Plateau transition width as a fraction of the domain width.
    pub plateau_width: f64,
    pub eps_step: f64,
    pub runge: RungeOptions,
    pub gauss_newton_iterations: usize,
    pub defect_sweeps: usize,
    /// Relative singular-value cutoff for exterior-mode least squares; `None` picks it from the data noise.
    pub svd_cutoff: Option<f64>,
    /// Largest tolerated relative error budget for any stage.
    pub budget_ceiling: f64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            bump_radius: 1.25,
            region_margin: 0.15,
            plateau_width: 0.1,
            eps_step: 1e-3,
            runge: RungeOptions { lambda: 1e-10, ..RungeOptions::default() },
            gauss_newton_iterations: 12,
            defect_sweeps: 50,
            svd_cutoff: None,
            budget_ceiling: 1.0,
        }
    }
}

/// Measurement interface around a hidden true model `(q*, P*)`.
#[derive(Clone, Debug)]
pub struct Simulator {
    solver: NonlinearSolver,
}

impl Simulator {
    pub fn new(solver: NonlinearSolver) -> Self {
        Self { solver }
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        self.solver.linear().grid()
    }

    pub fn params(&self) -> &FracParams {
        self.solver.nonlinearity().params()
    }

    /// `⟨∂_{ε_1}…∂_{ε_k} Λ(ε·f), g⟩` at zero for every `g` in `outs`, by Richardson-extrapolated
    /// finite differences.
    pub fn mixed_derivative(&self, controls: &[Field], outs: &[Field], eps_step: f64) -> Result<Vec<f64>> {
        let alpha = MultiIndex::leading_ones(controls.len(), controls.len());
        let coarse = dn_derivative_multi(&alpha, controls, outs, eps_step, &self.solver)?;
        let fine = dn_derivative_multi(&alpha, controls, outs, 0.5 * eps_step, &self.solver)?;
        Ok(fine.iter().zip(&coarse).map(|(a, b)| 2.0 * a - b).collect())
    }

    /// Ground truth, for oracle-mode measurements and error reports only.
    pub fn truth(&self) -> (&Field, &Nonlinearity) {
        (self.solver.linear().q(), self.solver.nonlinearity())
    }

    pub(crate) fn solver(&self) -> &NonlinearSolver {
        &self.solver
    }
}

#[derive(Clone, Debug)]
pub struct RecoveryTask {
    grid: Arc<GridSpec>,
    params: FracParams,
    mode: RecoveryMode,
    simulator: Simulator,
    reference_q: Field,
    recovery_region: Vec<bool>,
    bump_family: Vec<Field>,
    plateau: Field,
    center: Vec<f64>,
    interior: Vec<usize>,
    config: RecoveryConfig,
}

impl RecoveryTask {
    pub fn new(simulator: Simulator, mode: RecoveryMode, config: RecoveryConfig) -> Result<Self> {
        let grid = simulator.grid().clone();
        let params = *simulator.params();
        if !(config.bump_radius > 1.0) {
            return Err(Error::InvalidParameter("bump radius must exceed one grid spacing".into()));
        }
        if !(config.eps_step > 0.0) || !(config.budget_ceiling > 0.0) {
            return Err(Error::InvalidParameter("eps_step and budget_ceiling must be positive".into()));
        }
        let omega = grid.omega_mask();
        let interior = grid.indices(omega);
        let (lo, hi, center) = grid.mask_bounds(omega);
        let width = lo.iter().zip(&hi).map(|(a, b)| b - a).fold(f64::INFINITY, f64::min);
        let h = grid.spacing();
        let radius = config.bump_radius * h;
        let bump_family: Vec<Field> = interior
            .iter()
            .map(|&node| {
                let b = cosine_bump(&grid, &grid.coords(node), radius).masked(omega);
                let mass = inner_product(&b, &Field::constant(&grid, 1.0), omega)?;
                Ok(b.scaled(1.0 / mass))
            })
            .collect::<Result<_>>()?;
        let distance = distance_to(&grid, &interior);
        let margin = config.region_margin * width;
        let recovery_region: Vec<bool> =
            (0..grid.num_nodes()).map(|i| omega[i] && boundary_distance(&grid, i, omega) >= margin).collect();
        if !recovery_region.iter().any(|&b| b) {
            return Err(Error::InvalidParameter("recovery region is empty".into()));
        }
        let transition = (config.plateau_width * width).max(2.0 * h);
        let plateau = Field::from_values(
            &grid,
            distance.iter().map(|&d| smooth_step((d - h) / transition)).collect(),
        )?;
        Ok(Self {
            reference_q: Field::zeros(&grid),
            grid,
            params,
            mode,
            simulator,
            recovery_region,
            bump_family,
            plateau,
            center,
            interior,
            config,
        })
    }

    pub fn with_reference_q(mut self, q0: Field) -> Result<Self> {
        q0.check_grid(&self.plateau)?;
        self.reference_q = q0;
        Ok(self)
    }

    pub fn with_recovery_region(mut self, region: Vec<bool>) -> Result<Self> {
        let omega = self.grid.omega_mask();
        if region.len() != omega.len() || region.iter().zip(omega).any(|(&r, &o)| r && !o) {
            return Err(Error::InvalidParameter("recovery region must lie in the domain".into()));
        }
        self.recovery_region = region;
        Ok(self)
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    pub fn mode(&self) -> RecoveryMode {
        self.mode
    }

    pub fn config(&self) -> &RecoveryConfig {
        &self.config
    }

    pub fn simulator(&self) -> &Simulator {
        &self.simulator
    }

    pub fn recovery_region(&self) -> &[bool] {
        &self.recovery_region
    }

    pub fn bump_family(&self) -> &[Field] {
        &self.bump_family
    }

    pub fn plateau(&self) -> &Field {
        &self.plateau
    }

    /// `χ·(x − c)^σ` with `c` the centre of the domain.
    pub fn monomial_target(&self, sigma: &MultiIndex) -> Field {
        let grid = &self.grid;
        let chi = self.plateau.values();
        Field::from_values(
            grid,
            (0..grid.num_nodes())
                .map(|i| {
                    let d = grid.periodic_displacement(&grid.coords(i), &self.center);
                    let mono: f64 = d.iter().zip(sigma.entries()).map(|(x, &e)| x.powi(e as i32)).product();
                    chi[i] * mono
                })
                .collect(),
        )
        .expect("same grid")
    }

    /// Monomial exponents of the exterior-mode probing targets, one order beyond `m`.
    fn probe_shapes(&self) -> Vec<MultiIndex> {
        indices_up_to(self.grid.dim(), self.params.m + 1)
    }

    fn sigmas(&self) -> Vec<MultiIndex> {
        indices_up_to(self.grid.dim(), self.params.m)
    }

    fn contraction(&self) -> crate::nonlinear_solver::ContractionConfig {
        *self.simulator.solver().config()
    }
}

fn smooth_step(t: f64) -> f64 {
    let psi = |x: f64| if x > 0.0 { (-1.0 / x).exp() } else { 0.0 };
    if t <= 0.0 {
        1.0
    } else if t >= 1.0 {
        0.0
    } else {
        psi(1.0 - t) / (psi(1.0 - t) + psi(t))
    }
}

fn distance_to(grid: &GridSpec, nodes: &[usize]) -> Vec<f64> {
    let targets: Vec<Vec<f64>> = nodes.iter().map(|&n| grid.coords(n)).collect();
    (0..grid.num_nodes())
        .into_par_iter()
        .map(|i| {
            let x = grid.coords(i);
            targets
                .iter()
                .map(|c| grid.periodic_displacement(&x, c).iter().map(|d| d * d).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

fn boundary_distance(grid: &GridSpec, node: usize, omega: &[bool]) -> f64 {
    let x = grid.coords(node);
    (0..grid.num_nodes())
        .filter(|&j| !omega[j])
        .map(|j| grid.periodic_displacement(&x, &grid.coords(j)).iter().map(|d| d * d).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}

/// Number of permutations in `S_k` whose term survives on the plateau for the
/// targets `h_1 = x^σ`, `h_2 = … = h_k = 1`, with `D^σ` on the last factor.
pub fn permutation_count(k: usize, sigma: &MultiIndex) -> u64 {
    permutations(k)
        .into_iter()
        .filter(|pi| sigma.is_zero() || pi[k - 1] == 0)
        .count() as u64
}

/// Integer coefficient `c` with `Σ_π h_{π_1}…h_{π_{k−1}} D^β h_{π_k} = c·x^{σ−β}` on the
/// plateau, by enumerating `S_k`; zero unless `β ≤ σ`.
pub fn symbolic_entry(k: usize, sigma: &MultiIndex, beta: &MultiIndex) -> Result<u64> {
    let mut total = 0u64;
    for pi in permutations(k) {
        let last = pi[k - 1];
        if last == 0 {
            if let Some(rest) = sigma.checked_sub(beta) {
                total += sigma.factorial()? / rest.factorial()?;
            }
        } else if beta.is_zero() {
            total += 1;
        }
    }
    Ok(total)
}

/// Expected diagonal `σ!·(permutation count)` of the level system.
pub fn expected_diagonal(k: usize, sigma: &MultiIndex) -> Result<u64> {
    Ok(sigma.factorial()? * permutation_count(k, sigma))
}

/// `Σ_π h_{π_1}…h_{π_{k−1}} D^β h_{π_k}` for the given test fields.
pub fn permuted_product(h: &[Field], beta: &MultiIndex) -> Result<Field> {
    let k = h.len();
    let grid = h[0].grid();
    let derivs: Vec<Field> = h.iter().map(|f| partial_derivative(f, beta)).collect::<Result<_>>()?;
    let mut out = Field::zeros(grid);
    for pi in permutations(k) {
        let mut term = derivs[pi[k - 1]].clone();
        for &slot in &pi[..k - 1] {
            term = term.hadamard(&h[slot]);
        }
        out.axpy(1.0, &term);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagonalEntry {
    pub sigma: MultiIndex,
    pub measured: f64,
    pub expected: u64,
    pub matches: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    /// Order of the mixed derivative; the recovered coefficients are `a_{σ,k−1}`.
    pub k: usize,
    pub diagonal: Vec<DiagonalEntry>,
    /// Largest entry above the block diagonal relative to the diagonal, on the recovery region.
    pub triangular_defect: f64,
    pub sweeps: usize,
    pub relative_residual: f64,
    pub budget: f64,
    pub fd_noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientReport {
    pub level: usize,
    pub sigma: MultiIndex,
    pub values: Vec<f64>,
    pub relative_error: Option<f64>,
    pub budget: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub mode: RecoveryMode,
    pub recovery_region: Vec<bool>,
    pub q_hat: Vec<f64>,
    pub q_error: Option<f64>,
    pub q_budget: f64,
    pub coefficients: Vec<CoefficientReport>,
    pub levels: Vec<LevelReport>,
    pub runge_err: Option<f64>,
    pub completed: bool,
    pub aborted: Option<String>,
}

impl RecoveryReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn coefficient(&self, level: usize, sigma: &MultiIndex) -> Option<&CoefficientReport> {
        self.coefficients.iter().find(|c| c.level == level && &c.sigma == sigma)
    }

    /// Errors recomputed from the stored values against a ground truth.
    pub fn recompute_errors(&self, q: &Field, p: &Nonlinearity) -> (f64, Vec<f64>) {
        let q_err = region_error(&self.q_hat, q.values(), &self.recovery_region);
        let errs = self
            .coefficients
            .iter()
            .map(|c| {
                let truth = p.coeff(c.level, &c.sigma).map(|f| f.values().to_vec()).unwrap_or(vec![0.0; c.values.len()]);
                region_error(&c.values, &truth, &self.recovery_region)
            })
            .collect();
        (q_err, errs)
    }

    /// Largest relative error over q and all coefficients, when errors are known.
    pub fn max_error(&self) -> Option<f64> {
        let mut out = self.q_error?;
        for c in &self.coefficients {
            out = out.max(c.relative_error?);
        }
        Some(out)
    }
}

/// Relative L² error on the region, or the absolute one when the truth vanishes there.
pub fn region_error(estimate: &[f64], truth: &[f64], region: &[bool]) -> f64 {
    let mut diff = 0.0;
    let mut norm = 0.0;
    for ((e, t), &r) in estimate.iter().zip(truth).zip(region) {
        if r {
            diff += (e - t) * (e - t);
            norm += t * t;
        }
    }
    if norm == 0.0 {
        diff.sqrt()
    } else {
        (diff / norm).sqrt()
    }
}

fn interior_field(grid: &Arc<GridSpec>, interior: &[usize], x: &[f64]) -> Field {
    Field::scatter(grid, interior, x)
}

/// Rows `cell·w(x)·h0_j(x)` over the interior nodes for every bump.
fn weighted_rows(task: &RecoveryTask, weight: &Field, tests: &[Field]) -> DMatrix<f64> {
    let cell = task.grid.cell_volume();
    let n = task.interior.len();
    DMatrix::from_fn(tests.len(), n, |j, c| {
        let node = task.interior[c];
        cell * weight.values()[node] * tests[j].values()[node]
    })
}

fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Least squares by truncated SVD; returns the solution, the effective rank and `‖A⁺‖`.
fn tsvd_solve(a: &DMatrix<f64>, b: &DVector<f64>, cutoff: f64) -> Result<(DVector<f64>, usize, f64)> {
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().ok_or_else(|| Error::Internal("svd without U".into()))?;
    let vt = svd.v_t.as_ref().ok_or_else(|| Error::Internal("svd without V".into()))?;
    let smax = svd.singular_values.max();
    let mut x = DVector::zeros(a.ncols());
    let mut rank = 0;
    let mut inv_norm: f64 = 0.0;
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff * smax && s > 0.0 {
            rank += 1;
            inv_norm = inv_norm.max(1.0 / s);
            let coef = u.column(i).dot(b) / s;
            x += vt.row(i).transpose() * coef;
        }
    }
    Ok((x, rank, inv_norm))
}

/// Truncated SVD whose rank is the smallest one with residual `≤ tau·delta`
/// (discrepancy principle); returns the solution, the rank and `‖A⁺‖` on the kept part.
fn discrepancy_solve(a: &DMatrix<f64>, b: &DVector<f64>, delta: f64, tau: f64) -> Result<(DVector<f64>, usize, f64)> {
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().ok_or_else(|| Error::Internal("svd without U".into()))?;
    let vt = svd.v_t.as_ref().ok_or_else(|| Error::Internal("svd without V".into()))?;
    let smax = svd.singular_values.max();
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let mut x = DVector::zeros(a.ncols());
    let mut remaining = b.norm_squared();
    let mut rank = 0;
    let mut inv_norm: f64 = 0.0;
    for &i in &order {
        let s = svd.singular_values[i];
        if remaining.max(0.0).sqrt() <= tau * delta || s <= 64.0 * f64::EPSILON * smax {
            break;
        }
        let c = u.column(i).dot(b);
        remaining -= c * c;
        x += vt.row(i).transpose() * (c / s);
        rank += 1;
        inv_norm = inv_norm.max(1.0 / s);
    }
    Ok((x, rank, inv_norm))
}

/// Regularized least squares at data noise `delta`: a fixed relative cutoff when
/// configured, the discrepancy principle otherwise. Returns the solution, its rank
/// and an absolute error estimate from noise amplification plus the spread
/// against a ten times stronger truncation.
fn regularized_solve(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    delta: f64,
    cutoff: Option<f64>,
) -> Result<(DVector<f64>, usize, f64)> {
    let (x, rank, inv_norm, coarse) = match cutoff {
        Some(c) => {
            let (x, rank, inv) = tsvd_solve(a, b, c)?;
            let coarse = tsvd_solve(a, b, (10.0 * c).min(0.5)).map(|r| r.0).unwrap_or_else(|_| x.clone());
            (x, rank, inv, coarse)
        }
        None => {
            let (x, rank, inv) = discrepancy_solve(a, b, delta, DISCREPANCY_TAU)?;
            let (coarse, _, _) = discrepancy_solve(a, b, 10.0 * delta, DISCREPANCY_TAU)?;
            (x, rank, inv, coarse)
        }
    };
    let estimate = inv_norm * delta + (&coarse - &x).norm();
    Ok((x, rank, estimate))
}

fn relative(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else {
        num / den.max(f64::MIN_POSITIVE)
    }
}

/// Potential recovery result with its error budget.
#[derive(Clone, Debug)]
pub struct QRecovery {
    pub q_hat: Field,
    pub budget: f64,
    pub iterations: usize,
    pub runge_err: Option<f64>,
}

/// Recovers `q` on the domain from first-order data.
pub fn recover_q(task: &RecoveryTask) -> Result<QRecovery> {
    match task.mode {
        RecoveryMode::Oracle => recover_q_oracle(task),
        RecoveryMode::Exterior => recover_q_exterior(task),
    }
}

fn recover_q_oracle(task: &RecoveryTask) -> Result<QRecovery> {
    let s = task.params.s;
    let (q_true, _) = task.simulator.truth();
    let chi = &task.plateau;
    let m: Vec<f64> = task
        .bump_family
        .par_iter()
        .map(|h0| Ok(linear_form(chi, h0, q_true, s)? - linear_form(chi, h0, &task.reference_q, s)?))
        .collect::<Result<_>>()?;
    let a = weighted_rows(task, chi, &task.bump_family);
    let b = DVector::from_vec(m);
    let cond = condition_number(&a);
    if !(cond < 1e12) {
        return Err(Error::InsufficientLocalization(format!("bump matrix condition number {cond:e}")));
    }
    let x = a.clone().lu().solve(&b).ok_or_else(|| Error::InsufficientLocalization("singular bump matrix".into()))?;
    let residual = (&a * &x - &b).norm();
    let budget = cond * (relative(residual, b.norm()) + f64::EPSILON * (task.interior.len() as f64).sqrt());
    let delta = interior_field(&task.grid, &task.interior, x.as_slice());
    Ok(QRecovery { q_hat: &task.reference_q + &delta, budget, iterations: 1, runge_err: None })
}

/// Controls in a window whose `q0`-solutions approximate the given interior targets,
/// rescaled so the realized fields have unit maximum on the domain.
fn realize(
    task: &RecoveryTask,
    q0: &Field,
    window: MaskKind,
    targets: &[Field],
) -> Result<(Vec<Field>, f64)> {
    let linear = LinearSolver::dense(task.params.s, q0)?;
    let control = RungeControl::new(linear.clone(), task.grid.mask(window))?;
    let omega = task.grid.omega_mask();
    let results: Vec<Result<(Field, f64)>> = targets
        .par_iter()
        .map(|t| {
            let target = t.masked(omega);
            let res = control.solve(&target, &task.config.runge)?;
            let scale = res.realized.max_norm_on(omega);
            if scale == 0.0 {
                return Err(Error::InsufficientLocalization("runge control realized a zero field".into()));
            }
            Ok((res.control.scaled(1.0 / scale), res.achieved_err))
        })
        .collect();
    let mut controls = Vec::with_capacity(targets.len());
    let mut worst: f64 = 0.0;
    for r in results {
        let (c, e) = r?;
        worst = worst.max(e);
        controls.push(c);
    }
    Ok((controls, worst))
}

fn recover_q_exterior(task: &RecoveryTask) -> Result<QRecovery> {
    let s = task.params.s;
    let eps = task.config.eps_step;
    let q0 = &task.reference_q;
    let omega = task.grid.omega_mask();
    let f_targets: Vec<Field> = task.probe_shapes().iter().map(|sg| task.monomial_target(sg)).collect();
    let (f_controls, err_f) = realize(task, q0, MaskKind::W1, &f_targets)?;
    let (g_controls, err_g) = realize(task, q0, MaskKind::W2, &task.bump_family)?;
    let runge_err = err_f.max(err_g);
    let measure = |step: f64| -> Result<Vec<f64>> {
        let rows: Vec<Vec<f64>> = f_controls
            .par_iter()
            .map(|f| task.simulator.mixed_derivative(std::slice::from_ref(f), &g_controls, step))
            .collect::<Result<_>>()?;
        Ok(rows.concat())
    };
    let m_fine = DVector::from_vec(measure(eps)?);
    let m_coarse = DVector::from_vec(measure(2.0 * eps)?);

    // ⟨(Λ_q − Λ_{q0}) f, g⟩ = ∫_Ω (q − q0) v^q_f v^{q0}_g
    let linear0 = LinearSolver::dense(s, q0)?;
    let v0: Vec<Field> = g_controls.iter().map(|g| linear0.homogeneous(g)).collect::<Result<_>>()?;
    let mut rhs = DVector::zeros(m_fine.len());
    for (i, f) in f_controls.iter().enumerate() {
        let vf = linear0.homogeneous(f)?;
        for (j, g) in g_controls.iter().enumerate() {
            let r = i * g_controls.len() + j;
            rhs[r] = m_fine[r] - linear_form(&vf, g, q0, s)?;
        }
    }
    let fd_noise = (&m_fine - &m_coarse).norm() + f64::EPSILON * m_fine.norm() * m_fine.len() as f64;

    let n = task.interior.len();
    let cell = task.grid.cell_volume();
    let step = |q: &Field, delta: f64| -> Result<(Field, f64, usize)> {
        let linear = LinearSolver::dense(s, &nonnegative_on(q, omega)?)?;
        let vf: Vec<Field> = f_controls.iter().map(|f| linear.homogeneous(f)).collect::<Result<_>>()?;
        let mut rows = DMatrix::zeros(rhs.len(), n);
        for (i, v) in vf.iter().enumerate() {
            for (j, w) in v0.iter().enumerate() {
                let r = i * v0.len() + j;
                for (c, &node) in task.interior.iter().enumerate() {
                    rows[(r, c)] = cell * v.values()[node] * w.values()[node];
                }
            }
        }
        let (x, rank, estimate) = regularized_solve(&rows, &rhs, delta, task.config.svd_cutoff)?;
        let x_norm = x.norm().max(interior_norm(q0, &task.interior));
        Ok((q0 + &interior_field(&task.grid, &task.interior, x.as_slice()), relative(estimate, x_norm), rank))
    };
    // Fixed point on `v^q_f`, tightening the truncation once each stage has settled.
    let mut q = q0.clone();
    let mut budget = f64::INFINITY;
    let mut iterations = 0;
    for factor in [100.0, 10.0, 1.0] {
        let mut trial = q.clone();
        let mut settled = None;
        for _ in 0..task.config.gauss_newton_iterations {
            iterations += 1;
            let (next, estimate, rank) = step(&trial, factor * fd_noise)?;
            let change = relative((&next - &trial).l2_norm_on(omega), next.l2_norm_on(omega));
            info!("potential fixed point {iterations}: noise factor {factor}, rank {rank}, change {change:e}");
            trial = next;
            if change < 1e-8 {
                settled = Some(estimate + change);
                break;
            }
        }
        match settled {
            Some(estimate) => {
                q = trial;
                budget = estimate;
            }
            None => break,
        }
    }
    if !budget.is_finite() {
        return Err(Error::InsufficientLocalization(format!(
            "potential fixed point did not settle with {n} recovery nodes; refine the grid"
        )));
    }
    if q.values().iter().zip(omega).any(|(&v, &o)| o && v < 0.0) {
        warn!("recovered potential is negative somewhere; clipping to zero for later solves");
        q = nonnegative_on(&q, omega)?;
    }
    if runge_err > 0.5 {
        warn!("runge controls are poor (achieved error {runge_err:e}); inflating the budget");
        budget *= 1.0 + runge_err;
    }
    Ok(QRecovery { q_hat: q, budget, iterations, runge_err: Some(runge_err) })
}

fn nonnegative_on(q: &Field, omega: &[bool]) -> Result<Field> {
    Field::from_values(
        q.grid(),
        q.values().iter().zip(omega).map(|(&v, &o)| if o { v.max(0.0) } else { 0.0 }).collect(),
    )
}

fn interior_norm(f: &Field, interior: &[usize]) -> f64 {
    interior.iter().map(|&i| f.values()[i] * f.values()[i]).sum::<f64>().sqrt()
}

/// Model against which level `k` is measured: `q`, the given lower levels, level `k−1` zero.
fn reference_solver(task: &RecoveryTask, q: &Field, lower: &Nonlinearity, k: usize) -> Result<NonlinearSolver> {
    let p = lower.truncated(k - 2);
    NonlinearSolver::new(LinearSolver::dense(task.params.s, q)?, p, task.contraction())
}

/// `∫ T_α g` for `α = e_1 + … + e_k` over the given test functions.
///
/// In oracle mode the `T_α` of the true model driven by the prescribed fields `parts`
/// is integrated; in exterior mode `parts` are exterior controls and the measured
/// mixed DN derivative is paired with the exterior data `outs`.
pub fn measure_t_functional(task: &RecoveryTask, parts: &[Field], outs: &[Field], eps_step: f64) -> Result<Vec<f64>> {
    match task.mode {
        RecoveryMode::Oracle => {
            let solver = task.simulator.solver().clone();
            let t = cascade_t(&solver, parts, true)?;
            outs.iter().map(|g| inner_product(&t, g, task.grid.omega_mask())).collect()
        }
        RecoveryMode::Exterior => task.simulator.mixed_derivative(parts, outs, eps_step),
    }
}

/// `T_α`, `α = e_1 + … + e_k`, with the slots filled by prescribed fields or by exterior data.
fn cascade_t(solver: &NonlinearSolver, parts: &[Field], prescribed: bool) -> Result<Field> {
    let k_max = solver.nonlinearity().params().k_max;
    let k = parts.len();
    if k > k_max || k < 2 {
        return Err(Error::InvalidParameter(format!("mixed order {k} outside 2..={k_max}")));
    }
    let grid = solver.linear().grid().clone();
    let mut slots = parts.to_vec();
    slots.resize(k_max, Field::zeros(&grid));
    let mut state = if prescribed {
        LinearizationState::with_linear_parts(solver.clone(), slots)?
    } else {
        LinearizationState::new(solver.clone(), slots)?
    };
    let alpha = MultiIndex::leading_ones(k_max, k);
    for b in alpha.sub_indices().into_iter().filter(|b| b.order() < k && !b.is_zero()) {
        state.ensure(&b)?;
    }
    compute_t_alpha(&alpha, &state)
}

/// Solution of one level together with its diagnostics.
#[derive(Clone, Debug)]
pub struct LevelRecovery {
    pub coefficients: BTreeMap<MultiIndex, Field>,
    pub report: LevelReport,
}

/// Recovers `ã_{σ,k−1} = a*_{σ,k−1} − a^{ref}_{σ,k−1}` for every `|σ| ≤ m`, where the
/// reference model uses `q_hat` and the already recovered lower levels `lower`.
pub fn recover_a_level(task: &RecoveryTask, k: usize, q_hat: &Field, lower: &Nonlinearity) -> Result<LevelRecovery> {
    let k_max = task.params.k_max;
    if k < 2 || k > k_max {
        return Err(Error::InvalidParameter(format!("level k = {k} outside 2..={k_max}")));
    }
    let sigmas = task.sigmas();
    match task.mode {
        RecoveryMode::Oracle => recover_level_oracle(task, k, &sigmas),
        RecoveryMode::Exterior => recover_level_exterior(task, k, &sigmas, q_hat, lower),
    }
}

fn oracle_parts(task: &RecoveryTask, k: usize, sigma: &MultiIndex) -> Vec<Field> {
    let mut parts = vec![task.monomial_target(sigma)];
    parts.extend(std::iter::repeat_n(task.plateau.clone(), k - 1));
    parts
}

fn recover_level_oracle(task: &RecoveryTask, k: usize, sigmas: &[MultiIndex]) -> Result<LevelRecovery> {
    let (q_true, p_true) = task.simulator.truth();
    let contraction = task.contraction();
    let truth = NonlinearSolver::new(LinearSolver::dense(task.params.s, q_true)?, p_true.truncated(k - 1), contraction)?;
    let reference = reference_solver(task, q_true, p_true, k)?;
    let omega = task.grid.omega_mask();
    // Rows per target σ: measured functionals and the blocks over β.
    let per_target: Vec<Result<(DVector<f64>, Vec<DMatrix<f64>>, Vec<Field>)>> = sigmas
        .par_iter()
        .map(|sigma| {
            let parts = oracle_parts(task, k, sigma);
            let t_true = cascade_t(&truth, &parts, true)?;
            let t_ref = cascade_t(&reference, &parts, true)?;
            let diff = &t_true - &t_ref;
            let m: Vec<f64> =
                task.bump_family.iter().map(|h0| inner_product(&diff, h0, omega)).collect::<Result<_>>()?;
            let gs: Vec<Field> = sigmas.iter().map(|beta| permuted_product(&parts, beta)).collect::<Result<_>>()?;
            let blocks = gs.iter().map(|g| weighted_rows(task, g, &task.bump_family)).collect();
            Ok((DVector::from_vec(m), blocks, gs))
        })
        .collect();
    let mut rhs = Vec::new();
    let mut blocks = Vec::new();
    let mut products = Vec::new();
    for r in per_target {
        let (m, b, g) = r?;
        rhs.push(m);
        blocks.push(b);
        products.push(g);
    }
    let (diagonal, defect) = triangularity(task, k, sigmas, &products)?;
    let (x, sweeps, residual, cond) = block_forward_solve(&blocks, &rhs, task.config.defect_sweeps)?;
    let budget = cond * (residual + f64::EPSILON * (x.iter().map(|v| v.len()).sum::<usize>() as f64).sqrt());
    let coefficients = sigmas
        .iter()
        .zip(&x)
        .map(|(sg, xs)| (sg.clone(), interior_field(&task.grid, &task.interior, xs.as_slice())))
        .collect();
    Ok(LevelRecovery {
        coefficients,
        report: LevelReport {
            k,
            diagonal,
            triangular_defect: defect,
            sweeps,
            relative_residual: residual,
            budget,
            fd_noise: 0.0,
        },
    })
}

/// Compares the permuted products against the symbolic `S_k` entries on the recovery region.
fn triangularity(
    task: &RecoveryTask,
    k: usize,
    sigmas: &[MultiIndex],
    products: &[Vec<Field>],
) -> Result<(Vec<DiagonalEntry>, f64)> {
    let region = task.grid.indices(&task.recovery_region);
    let mut diagonal = Vec::new();
    let mut defect: f64 = 0.0;
    for (i, sigma) in sigmas.iter().enumerate() {
        let g = &products[i][i];
        let measured = region.iter().map(|&n| g.values()[n]).sum::<f64>() / region.len() as f64;
        let expected = expected_diagonal(k, sigma)?;
        let spread = region.iter().map(|&n| (g.values()[n] - expected as f64).abs()).fold(0.0, f64::max);
        diagonal.push(DiagonalEntry {
            sigma: sigma.clone(),
            measured,
            expected,
            matches: measured.round() as i64 == expected as i64 && spread < 0.5,
        });
        for (j, beta) in sigmas.iter().enumerate() {
            let upper = beta.order() > sigma.order() || (beta.order() == sigma.order() && beta != sigma);
            if upper {
                let off = region.iter().map(|&n| products[i][j].values()[n].abs()).fold(0.0, f64::max);
                defect = defect.max(off / expected as f64);
            }
        }
    }
    Ok((diagonal, defect))
}

/// Block forward substitution over the graded σ order followed by block
/// Gauss–Seidel defect-correction sweeps on the full system.
fn block_forward_solve(
    blocks: &[Vec<DMatrix<f64>>],
    rhs: &[DVector<f64>],
    max_sweeps: usize,
) -> Result<(Vec<DVector<f64>>, usize, f64, f64)> {
    let nb = blocks.len();
    let lus: Vec<_> = (0..nb).map(|i| blocks[i][i].clone().lu()).collect();
    let cond = (0..nb).map(|i| condition_number(&blocks[i][i])).fold(0.0, f64::max);
    if !(cond < 1e12) {
        return Err(Error::InsufficientLocalization(format!("diagonal block condition number {cond:e}")));
    }
    let mut x: Vec<DVector<f64>> = rhs.iter().map(|r| DVector::zeros(blocks[0][0].ncols().max(r.len()))).collect();
    for (i, xi) in x.iter_mut().enumerate() {
        *xi = DVector::zeros(blocks[i][i].ncols());
    }
    let rhs_norm = rhs.iter().map(|r| r.norm_squared()).sum::<f64>().sqrt();
    let full_residual = |x: &[DVector<f64>]| -> f64 {
        let mut total = 0.0;
        for i in 0..nb {
            let mut r = rhs[i].clone();
            for j in 0..nb {
                r -= &blocks[i][j] * &x[j];
            }
            total += r.norm_squared();
        }
        relative(total.sqrt(), rhs_norm)
    };
    let mut sweeps = 0;
    let mut residual = f64::INFINITY;
    for sweep in 0..=max_sweeps {
        for i in 0..nb {
            let mut r = rhs[i].clone();
            for j in 0..nb {
                if j != i {
                    r -= &blocks[i][j] * &x[j];
                }
            }
            x[i] = lus[i].solve(&r).ok_or_else(|| Error::InsufficientLocalization("singular diagonal block".into()))?;
        }
        sweeps = sweep + 1;
        let next = full_residual(&x);
        let stalled = next >= 0.5 * residual;
        residual = next;
        if residual <= 64.0 * f64::EPSILON || stalled {
            break;
        }
    }
    if residual > 64.0 * f64::EPSILON {
        if let Some(direct) = coupled_solve(blocks, rhs) {
            let next = full_residual(&direct);
            if next < residual {
                return Ok((direct, sweeps, next, cond));
            }
        }
    }
    Ok((x, sweeps, residual, cond))
}

/// Direct LU solve of the assembled block system.
fn coupled_solve(blocks: &[Vec<DMatrix<f64>>], rhs: &[DVector<f64>]) -> Option<Vec<DVector<f64>>> {
    let rows: Vec<usize> = rhs.iter().map(|r| r.len()).collect();
    let cols: Vec<usize> = blocks[0].iter().map(|b| b.ncols()).collect();
    let (nr, nc) = (rows.iter().sum::<usize>(), cols.iter().sum::<usize>());
    if nr != nc {
        return None;
    }
    let mut a = DMatrix::zeros(nr, nc);
    let mut b = DVector::zeros(nr);
    let mut r0 = 0;
    for (i, row) in blocks.iter().enumerate() {
        let mut c0 = 0;
        for (j, block) in row.iter().enumerate() {
            a.view_mut((r0, c0), (rows[i], cols[j])).copy_from(block);
            c0 += cols[j];
        }
        b.rows_mut(r0, rows[i]).copy_from(&rhs[i]);
        r0 += rows[i];
    }
    let x = a.lu().solve(&b)?;
    let mut out = Vec::with_capacity(cols.len());
    let mut c0 = 0;
    for &c in &cols {
        out.push(x.rows(c0, c).into_owned());
        c0 += c;
    }
    Some(out)
}

/// Non-decreasing index tuples of length `k` over `0..n`.
fn multisets(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for tail in multisets(n, k - 1) {
        let start = tail.last().copied().unwrap_or(0);
        for i in start..n {
            let mut next = tail.clone();
            next.push(i);
            out.push(next);
        }
    }
    out
}

fn recover_level_exterior(
    task: &RecoveryTask,
    k: usize,
    sigmas: &[MultiIndex],
    q_hat: &Field,
    lower: &Nonlinearity,
) -> Result<LevelRecovery> {
    let eps = task.config.eps_step;
    let reference = reference_solver(task, q_hat, lower, k)?;
    let linear = reference.linear().clone();
    let omega = task.grid.omega_mask();
    let (g_controls, _) = realize(task, q_hat, MaskKind::W2, &task.bump_family)?;
    let v0: Vec<Field> = g_controls.iter().map(|g| linear.homogeneous(g)).collect::<Result<_>>()?;
    let shapes = task.probe_shapes();
    let targets: Vec<Field> = shapes.iter().map(|sg| task.monomial_target(sg)).collect();
    let (controls, _) = realize(task, q_hat, MaskKind::W1, &targets)?;
    let realized: Vec<Field> = controls.iter().map(|f| linear.homogeneous(f)).collect::<Result<_>>()?;
    let n = task.interior.len();
    let nb = sigmas.len();
    let cell = task.grid.cell_volume();
    let combos = multisets(controls.len(), k);
    let measured: Vec<Result<(DMatrix<f64>, Vec<f64>, f64)>> = combos
        .par_iter()
        .map(|combo| {
            let parts: Vec<Field> = combo.iter().map(|&i| controls[i].clone()).collect();
            let fields: Vec<Field> = combo.iter().map(|&i| realized[i].clone()).collect();
            let fine = measure_t_functional(task, &parts, &g_controls, eps)?;
            let coarse = measure_t_functional(task, &parts, &g_controls, 2.0 * eps)?;
            let noise = fine.iter().zip(&coarse).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let t_ref = cascade_t(&reference, &parts, false)?;
            let gs: Vec<Field> = sigmas.iter().map(|beta| permuted_product(&fields, beta)).collect::<Result<_>>()?;
            let mut block = DMatrix::zeros(v0.len(), n * nb);
            let mut rhs = Vec::with_capacity(v0.len());
            for (j, v) in v0.iter().enumerate() {
                rhs.push(fine[j] - inner_product(&t_ref, v, omega)?);
                for (b, g) in gs.iter().enumerate() {
                    for (c, &node) in task.interior.iter().enumerate() {
                        block[(j, b * n + c)] = cell * g.values()[node] * v.values()[node];
                    }
                }
            }
            Ok((block, rhs, noise))
        })
        .collect();
    let mut a = DMatrix::zeros(combos.len() * v0.len(), n * nb);
    let mut rhs = Vec::new();
    let mut noise = 0.0;
    for (i, m) in measured.into_iter().enumerate() {
        let (block, r, e) = m?;
        a.view_mut((i * v0.len(), 0), (block.nrows(), block.ncols())).copy_from(&block);
        rhs.extend(r);
        noise += e;
    }
    info!("level {k}: {} measurements for {} unknowns", a.nrows(), a.ncols());
    let b = DVector::from_vec(rhs);
    let fd_noise = noise.sqrt();
    let noise_rel = relative(fd_noise, b.norm());
    let (x, rank, estimate) = regularized_solve(&a, &b, fd_noise, task.config.svd_cutoff)?;
    info!("level {k}: rank {rank}, relative noise {noise_rel:e}");
    let residual = relative((&a * &x - &b).norm(), b.norm());
    let budget = relative(estimate, x.norm());
    let coefficients = sigmas
        .iter()
        .enumerate()
        .map(|(i, sg)| (sg.clone(), interior_field(&task.grid, &task.interior, &x.as_slice()[i * n..(i + 1) * n])))
        .collect();
    Ok(LevelRecovery {
        coefficients,
        report: LevelReport {
            k,
            diagonal: Vec::new(),
            triangular_defect: f64::NAN,
            sweeps: 0,
            relative_residual: residual,
            budget,
            fd_noise: noise_rel,
        },
    })
}

/// `recover_q`, then every level `k = 2..K` in order, each feeding the next.
pub fn run_full_recovery(task: &RecoveryTask) -> Result<RecoveryReport> {
    let (q_true, p_true) = task.simulator.truth();
    let q = recover_q(task)?;
    let q_error = Some(region_error(q.q_hat.values(), q_true.values(), &task.recovery_region));
    let mut report = RecoveryReport {
        mode: task.mode,
        recovery_region: task.recovery_region.clone(),
        q_hat: q.q_hat.values().to_vec(),
        q_error,
        q_budget: q.budget,
        coefficients: Vec::new(),
        levels: Vec::new(),
        runge_err: q.runge_err,
        completed: false,
        aborted: None,
    };
    if q.budget > task.config.budget_ceiling {
        report.aborted = Some(format!("potential budget {:e} exceeds ceiling", q.budget));
        return Ok(report);
    }
    let q_for_levels = match task.mode {
        RecoveryMode::Oracle => q_true.clone(),
        RecoveryMode::Exterior => q.q_hat.clone(),
    };
    let mut recovered = p_true.zeroed();
    let mut propagated = q.budget;
    for k in 2..=task.params.k_max {
        let level = recover_a_level(task, k, &q_for_levels, &recovered)?;
        let budget = level.report.budget + propagated;
        for (sigma, field) in &level.coefficients {
            let truth = p_true.coeff(k - 1, sigma).cloned().unwrap_or_else(|| Field::zeros(&task.grid));
            let relative_error = Some(region_error(field.values(), truth.values(), &task.recovery_region));
            report.coefficients.push(CoefficientReport {
                level: k - 1,
                sigma: sigma.clone(),
                values: field.values().to_vec(),
                relative_error,
                budget,
            });
            recovered.set_coeff(k - 1, sigma.clone(), field.clone())?;
        }
        let mut level_report = level.report;
        level_report.budget = budget;
        report.levels.push(level_report);
        if budget > task.config.budget_ceiling {
            report.aborted = Some(format!("level k = {k} budget {budget:e} exceeds ceiling"));
            return Ok(report);
        }
        propagated = budget;
    }
    report.completed = true;
    Ok(report)
}
