//! Tikhonov-regularized exterior controls whose solutions approximate an
//! interior target.

use std::sync::Arc;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field, GridSpec};
use crate::linear_solver::{operator_scale, CgOptions, LinearSolver};
use crate::operators::frac_laplacian;

pub const DEFAULT_LAMBDA: f64 = 1e-8;
pub const DEFAULT_CG_TOL: f64 = 1e-10;
pub const DEFAULT_CG_MAX: usize = 10_000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Penalty {
    #[default]
    L2,
    /// `‖⟨ξ⟩^s f‖²` over the whole grid.
    Sobolev,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RungeOptions {
    pub lambda: f64,
    pub cg_tol: f64,
    pub cg_max: usize,
    #[serde(default)]
    pub penalty: Penalty,
}

impl Default for RungeOptions {
    fn default() -> Self {
        Self { lambda: DEFAULT_LAMBDA, cg_tol: DEFAULT_CG_TOL, cg_max: DEFAULT_CG_MAX, penalty: Penalty::L2 }
    }
}

impl RungeOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidParameter(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.cg_tol > 0.0) || self.cg_max == 0 {
            return Err(Error::InvalidParameter("cg_tol and cg_max must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RungeResult {
    /// Control, zero outside the window.
    pub control: Field,
    /// `v_f` for the returned control.
    pub realized: Field,
    pub achieved_err: f64,
    pub iterations: usize,
    /// Relative normal-equation residual at exit for the augmented operator `A = (S, √λ B)`.
    pub normal_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub achieved_err: f64,
    pub control_norm: f64,
    /// `‖B f‖`, the quantity the penalty acts on.
    pub penalty_norm: f64,
    pub iterations: usize,
}

/// The control-to-interior map `S f = v_f|_Ω` for one window.
#[derive(Clone, Debug)]
pub struct RungeControl {
    linear: LinearSolver,
    window: Vec<usize>,
    interior: Vec<usize>,
    rho: f64,
}

impl RungeControl {
    pub fn new(linear: LinearSolver, window_mask: &[bool]) -> Result<Self> {
        let grid = linear.grid().clone();
        if window_mask.len() != grid.num_nodes() {
            return Err(Error::GridMismatch);
        }
        let omega = grid.omega_mask();
        if window_mask.iter().zip(omega).any(|(&w, &o)| w && o) {
            return Err(Error::InvalidParameter("control window meets the domain".into()));
        }
        let window = grid.indices(window_mask);
        if window.is_empty() {
            return Err(Error::InvalidParameter("control window is empty".into()));
        }
        let interior = grid.indices(omega);
        let rho = operator_scale(&grid, linear.s(), linear.q());
        Ok(Self { linear, window, interior, rho })
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        self.linear.grid()
    }

    pub fn linear(&self) -> &LinearSolver {
        &self.linear
    }

    pub fn window(&self) -> &[usize] {
        &self.window
    }

    pub fn forward(&self, f: &[f64]) -> Result<Vec<f64>> {
        let ext = Field::scatter(self.grid(), &self.window, f);
        Ok(self.linear.homogeneous(&ext)?.gather(&self.interior))
    }

    /// `Sᵀ y = −[(−Δ)^s A_II^{-1} y]_W`
    pub fn adjoint(&self, y: &[f64]) -> Result<Vec<f64>> {
        Ok(self.adjoint_with_size(y)?.0)
    }

    /// [`Self::adjoint`] together with `ρ‖A_II^{-1} y‖`, the size of the terms it sums.
    fn adjoint_with_size(&self, y: &[f64]) -> Result<(Vec<f64>, f64)> {
        let src = Field::scatter(self.grid(), &self.interior, y);
        let z = self.linear.with_source(&src)?;
        let lap = frac_laplacian(&z, self.linear.s())?;
        let size = self.rho * norm(z.values());
        Ok((self.window.iter().map(|&i| -lap.values()[i]).collect(), size))
    }

    /// `B f = ⟨ξ⟩^s f` on the full grid for the Sobolev penalty, `f` itself for L².
    fn penalty_root(&self, f: &[f64], penalty: Penalty) -> Result<Vec<f64>> {
        match penalty {
            Penalty::L2 => Ok(f.to_vec()),
            Penalty::Sobolev => {
                let full = Field::scatter(self.grid(), &self.window, f);
                self.sobolev_weight(full.values())
            }
        }
    }

    fn penalty_root_adjoint(&self, g: &[f64], penalty: Penalty) -> Result<Vec<f64>> {
        match penalty {
            Penalty::L2 => Ok(g.to_vec()),
            Penalty::Sobolev => {
                let out = self.sobolev_weight(g)?;
                Ok(self.window.iter().map(|&i| out[i]).collect())
            }
        }
    }

    fn sobolev_weight(&self, values: &[f64]) -> Result<Vec<f64>> {
        let half = self.linear.s() / 2.0;
        self.grid().spectral().apply_multiplier(values, |_, xi| {
            let xi2: f64 = xi.iter().map(|x| x * x).sum();
            (1.0 + xi2).powf(half).into()
        })
    }

    /// `A f = (S f, √λ B f)`
    fn augmented(&self, f: &[f64], root: f64, penalty: Penalty) -> Result<(Vec<f64>, Vec<f64>)> {
        let top = self.forward(f)?;
        let mut bottom = self.penalty_root(f, penalty)?;
        bottom.iter_mut().for_each(|v| *v *= root);
        Ok((top, bottom))
    }

    fn augmented_adjoint(&self, top: &[f64], bottom: &[f64], root: f64, penalty: Penalty) -> Result<Vec<f64>> {
        Ok(self.augmented_adjoint_with_size(top, bottom, root, penalty)?.0)
    }

    fn augmented_adjoint_with_size(
        &self,
        top: &[f64],
        bottom: &[f64],
        root: f64,
        penalty: Penalty,
    ) -> Result<(Vec<f64>, f64)> {
        let (mut out, mut size) = self.adjoint_with_size(top)?;
        let pen = self.penalty_root_adjoint(bottom, penalty)?;
        if penalty == Penalty::Sobolev {
            let xi = self.grid().spectral().max_frequency();
            size += root * (1.0 + xi * xi).powf(self.linear.s() / 2.0) * norm(bottom);
        }
        for (o, p) in out.iter_mut().zip(pen) {
            *o += root * p;
        }
        Ok((out, size))
    }

    /// Minimizes `‖S f − t‖² + λ‖B f‖²` by CGLS, using operator applications only.
    pub fn solve(&self, target: &Field, opts: &RungeOptions) -> Result<RungeResult> {
        self.solve_from(target, opts, None)
    }

    pub fn solve_from(&self, target: &Field, opts: &RungeOptions, start: Option<&Field>) -> Result<RungeResult> {
        opts.validate()?;
        let grid = self.grid().clone();
        target.check_grid(&Field::zeros(&grid))?;
        if !target.vanishes_outside(grid.omega_mask()) {
            return Err(Error::InvalidParameter("target must be supported in the domain".into()));
        }
        let t = target.gather(&self.interior);
        if norm(&self.adjoint(&t)?) == 0.0 {
            let zero = Field::zeros(&grid);
            return Ok(RungeResult {
                control: zero.clone(),
                realized: self.linear.homogeneous(&zero)?,
                achieved_err: if norm(&t) == 0.0 { 0.0 } else { 1.0 },
                iterations: 0,
                normal_residual: 0.0,
            });
        }
        let mut x = match start {
            Some(f) => f.gather(&self.window),
            None => vec![0.0; self.window.len()],
        };
        let (iterations, residual) = self.cgls(&mut x, &t, opts)?;
        let control = Field::scatter(&grid, &self.window, &x);
        let realized = self.linear.homogeneous(&control)?;
        let achieved_err = relative_error(&realized, target, &self.interior);
        debug!("runge lambda={:e} iterations={iterations} err={achieved_err:e}", opts.lambda);
        Ok(RungeResult { control, realized, achieved_err, iterations, normal_residual: residual })
    }

    /// Power-iteration estimate of `‖A‖₂` for the augmented operator.
    fn augmented_norm(&self, root: f64, penalty: Penalty) -> Result<f64> {
        let n = self.window.len();
        let mut x: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * ((i * 7919) % 13) as f64).collect();
        let mut est = 0.0;
        for _ in 0..30 {
            let nx = norm(&x);
            x.iter_mut().for_each(|v| *v /= nx);
            let (top, bottom) = self.augmented(&x, root, penalty)?;
            let y = self.augmented_adjoint(&top, &bottom, root, penalty)?;
            let next = norm(&y);
            let done = (next - est).abs() <= 1e-3 * next;
            est = next;
            x = y;
            if done {
                break;
            }
        }
        Ok(est.sqrt())
    }

    /// CGLS on `min ‖A f − (t, 0)‖`, stopped when `‖Aᵀr‖ ≤ tol·(‖A‖‖r‖ + ρ‖A_II^{-1}r‖)`.
    fn cgls(&self, x: &mut [f64], t: &[f64], opts: &RungeOptions) -> Result<(usize, f64)> {
        let root = opts.lambda.sqrt();
        let pen = opts.penalty;
        let a_norm = self.augmented_norm(root, pen)?;
        let restart = (4 * x.len()).max(50);
        // Forming `B f` loses `ε·max⟨ξ⟩^s‖f‖`, which `Bᵀ` amplifies again.
        let pen_size = match pen {
            Penalty::L2 => 0.0,
            Penalty::Sobolev => {
                let xi = self.grid().spectral().max_frequency();
                opts.lambda * (1.0 + xi * xi).powf(self.linear.s())
            }
        };
        let mut iterations = 0;
        let mut best = f64::INFINITY;
        let mut stalled = 0;
        loop {
            let (ax_top, ax_bottom) = self.augmented(x, root, pen)?;
            let mut r_top: Vec<f64> = t.iter().zip(&ax_top).map(|(a, b)| a - b).collect();
            let mut r_bottom: Vec<f64> = ax_bottom.iter().map(|v| -v).collect();
            let (mut g, size) = self.augmented_adjoint_with_size(&r_top, &r_bottom, root, pen)?;
            let r_norm = (dot(&r_top, &r_top) + dot(&r_bottom, &r_bottom)).sqrt();
            let rel = ratio(norm(&g), a_norm * r_norm + size + pen_size * norm(x));
            debug!("cgls restart after {iterations} iterations: relative normal residual {rel:e}");
            if rel <= opts.cg_tol {
                return Ok((iterations, rel));
            }
            if rel < 0.5 * best {
                best = rel;
                stalled = 0;
            } else {
                stalled += 1;
                best = best.min(rel);
                let floor = 64.0 * f64::EPSILON * self.rho * a_norm * norm(x);
                if stalled >= 2 && norm(&g) <= floor {
                    warn!("runge control stopped at the roundoff floor: relative normal residual {rel:e}");
                    return Ok((iterations, rel));
                }
                if stalled >= 5 {
                    return Err(Error::NonConvergence { iterations, residual: rel });
                }
            }
            if iterations >= opts.cg_max {
                return Err(Error::NonConvergence { iterations, residual: rel });
            }
            let mut p = g.clone();
            let mut gamma = dot(&g, &g);
            // Gradients are mutually orthogonal in exact arithmetic; enforcing it keeps finite termination.
            let mut basis: Vec<Vec<f64>> = vec![g.iter().map(|v| v / gamma.sqrt()).collect()];
            for _ in 0..restart {
                if iterations >= opts.cg_max {
                    break;
                }
                let (q_top, q_bottom) = self.augmented(&p, root, pen)?;
                let qq = dot(&q_top, &q_top) + dot(&q_bottom, &q_bottom);
                if !(qq > 0.0) {
                    break;
                }
                let alpha = gamma / qq;
                for (xi, pi) in x.iter_mut().zip(&p) {
                    *xi += alpha * pi;
                }
                for (r, q) in r_top.iter_mut().zip(&q_top) {
                    *r -= alpha * q;
                }
                for (r, q) in r_bottom.iter_mut().zip(&q_bottom) {
                    *r -= alpha * q;
                }
                iterations += 1;
                let (g_new, size) = self.augmented_adjoint_with_size(&r_top, &r_bottom, root, pen)?;
                g = g_new;
                for _ in 0..2 {
                    for b in &basis {
                        let c = dot(&g, b);
                        g.iter_mut().zip(b).for_each(|(gi, bi)| *gi -= c * bi);
                    }
                }
                let gamma_new = dot(&g, &g);
                if basis.len() < x.len() && gamma_new > 0.0 {
                    basis.push(g.iter().map(|v| v / gamma_new.sqrt()).collect());
                }
                let r_norm = (dot(&r_top, &r_top) + dot(&r_bottom, &r_bottom)).sqrt();
                if ratio(gamma_new.sqrt(), a_norm * r_norm + size + pen_size * norm(x)) <= 0.1 * opts.cg_tol {
                    break;
                }
                let beta = gamma_new / gamma;
                gamma = gamma_new;
                for (pi, gi) in p.iter_mut().zip(&g) {
                    *pi = gi + beta * *pi;
                }
            }
        }
    }

    /// Solves along a descending λ path, warm-starting each solve from the previous control.
    pub fn sweep(&self, target: &Field, lambdas: &[f64], opts: &RungeOptions) -> Result<Vec<SweepRow>> {
        if lambdas.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidParameter("lambda grid must be descending".into()));
        }
        let mut rows = Vec::with_capacity(lambdas.len());
        let mut previous: Option<Field> = None;
        for &lambda in lambdas {
            let o = RungeOptions { lambda, ..*opts };
            let res = self.solve_from(target, &o, previous.as_ref())?;
            let f = res.control.gather(&self.window);
            let m = self.penalty_root(&f, opts.penalty)?;
            let cell = self.grid().cell_volume();
            rows.push(SweepRow {
                lambda,
                achieved_err: res.achieved_err,
                control_norm: (dot(&f, &f) * cell).sqrt(),
                penalty_norm: (dot(&m, &m) * cell).sqrt(),
                iterations: res.iterations,
            });
            previous = Some(res.control);
        }
        Ok(rows)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn ratio(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn relative_error(realized: &Field, target: &Field, interior: &[usize]) -> f64 {
    let t = target.gather(interior);
    let t_norm = norm(&t);
    let r = realized.gather(interior);
    let diff: Vec<f64> = r.iter().zip(&t).map(|(a, b)| a - b).collect();
    if t_norm == 0.0 {
        norm(&diff)
    } else {
        norm(&diff) / t_norm
    }
}

/// Control in `W` whose `P`-free solution approximates `target` on `Ω`.
pub fn runge_control(
    target: &Field,
    window_mask: &[bool],
    q: &Field,
    s: f64,
    lambda: f64,
    cg_tol: f64,
    cg_max: usize,
) -> Result<(Field, f64)> {
    let linear = LinearSolver::dense(s, q).or_else(|e| match e {
        Error::SizeCap(_) => LinearSolver::iterative(s, q, CgOptions::default()),
        other => Err(other),
    })?;
    let control = RungeControl::new(linear, window_mask)?;
    let res = control.solve(target, &RungeOptions { lambda, cg_tol, cg_max, penalty: Penalty::L2 })?;
    Ok((res.control, res.achieved_err))
}

pub fn lambda_sweep(
    target: &Field,
    window_mask: &[bool],
    q: &Field,
    s: f64,
    lambdas: &[f64],
    opts: &RungeOptions,
) -> Result<Vec<SweepRow>> {
    let linear = LinearSolver::dense(s, q)?;
    RungeControl::new(linear, window_mask)?.sweep(target, lambdas, opts)
}

/// Discrepancy principle: the largest λ on the path whose error is at most `level`.
pub fn discrepancy_lambda(rows: &[SweepRow], level: f64) -> Option<f64> {
    rows.iter().filter(|r| r.achieved_err <= level).map(|r| r.lambda).fold(None, |m, l| match m {
        None => Some(l),
        Some(x) => Some(f64::max(x, l)),
    })
}
