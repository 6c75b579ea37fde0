//! Exterior-value problem `(−Δ)^s v + q v = F` in Ω, `v = f` outside Ω,
//! reduced to the interior nodes.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field, GridSpec};
use crate::operators::frac_laplacian;

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 5000;
pub const DENSE_SIZE_CAP: usize = 4096;

const COERCIVITY_TOL: f64 = 1e-12;
/// Multiple of machine epsilon times the operator scale below which residuals are noise.
const ROUNDOFF_FACTOR: f64 = 64.0;

#[derive(Clone, Debug)]
pub struct LinearProblem {
    pub s: f64,
    pub q: Field,
    pub rhs: Field,
    pub exterior: Field,
}

impl LinearProblem {
    pub fn new(s: f64, q: Field, rhs: Field, exterior: Field) -> Result<Self> {
        let p = Self { s, q, rhs, exterior };
        p.validate()?;
        Ok(p)
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        self.q.grid()
    }

    fn validate(&self) -> Result<()> {
        self.q.check_grid(&self.rhs)?;
        self.q.check_grid(&self.exterior)?;
        if !(self.s > 0.0) {
            return Err(Error::InvalidParameter(format!("s = {} must be positive", self.s)));
        }
        check_coercive(&self.q)?;
        if !self.exterior.vanishes_outside(self.grid().exterior_mask()) {
            return Err(Error::InvalidParameter("exterior data must vanish on the domain".into()));
        }
        if !self.rhs.is_finite() || !self.exterior.is_finite() {
            return Err(Error::InvalidParameter("problem data must be finite".into()));
        }
        Ok(())
    }
}

fn check_coercive(q: &Field) -> Result<()> {
    let omega = q.grid().omega_mask();
    for (node, (&v, &inside)) in q.values().iter().zip(omega).enumerate() {
        if inside && (v < -COERCIVITY_TOL || !v.is_finite()) {
            return Err(Error::LossOfCoercivity { node, value: v });
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    Iterative,
    Dense,
}

#[derive(Clone, Debug)]
pub struct SolveReport {
    pub solution: Field,
    pub iterations: usize,
    /// `max_Ω |(−Δ)^s v + q v − F|`
    pub residual_norm: f64,
    /// Size of the terms making up the residual, `ρ(‖v‖_∞ + ‖f‖_∞) + ‖F‖_∞`.
    pub residual_scale: f64,
    pub method: SolveMethod,
}

/// Largest diagonal magnitude of the discrete operator: `ξ_max^{2s} + ‖q‖_∞`.
pub fn operator_scale(grid: &GridSpec, s: f64, q: &Field) -> f64 {
    grid.spectral().max_frequency().powf(2.0 * s) + q.max_norm_on(grid.omega_mask())
}

/// `max_Ω |(−Δ)^s v + q v − F|`
pub fn residual_norm(v: &Field, q: &Field, s: f64, rhs: &Field) -> Result<f64> {
    let lap = frac_laplacian(v, s)?;
    let omega = v.grid().omega_mask();
    Ok((0..v.values().len())
        .filter(|&i| omega[i])
        .map(|i| (lap.values()[i] + q.values()[i] * v.values()[i] - rhs.values()[i]).abs())
        .fold(0.0, f64::max))
}

fn residual_scale(grid: &GridSpec, s: f64, q: &Field, v: &Field, rhs: &Field, exterior: &Field) -> f64 {
    operator_scale(grid, s, q) * (v.max_norm() + exterior.max_norm()) + rhs.max_norm_on(grid.omega_mask())
}

/// Interior block `A_II` of `(−Δ)^s + diag(q)` acting on interior vectors.
#[derive(Clone, Debug)]
pub struct InteriorOperator {
    grid: Arc<GridSpec>,
    s: f64,
    interior: Vec<usize>,
    q_interior: Vec<f64>,
}

impl InteriorOperator {
    pub fn new(s: f64, q: &Field) -> Self {
        let grid = q.grid().clone();
        let interior = grid.indices(grid.omega_mask());
        let q_interior = q.gather(&interior);
        Self { grid, s, interior, q_interior }
    }

    pub fn interior(&self) -> &[usize] {
        &self.interior
    }

    pub fn len(&self) -> usize {
        self.interior.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interior.is_empty()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let full = Field::scatter(&self.grid, &self.interior, x);
        let lap = frac_laplacian(&full, self.s)?;
        Ok(self
            .interior
            .iter()
            .zip(x)
            .zip(&self.q_interior)
            .map(|((&i, &xi), &qi)| lap.values()[i] + qi * xi)
            .collect())
    }

    /// `F_I − [(−Δ)^s f]_I`
    pub fn reduced_rhs(&self, rhs: &Field, exterior: &Field) -> Result<Vec<f64>> {
        let lap = frac_laplacian(exterior, self.s)?;
        Ok(self.interior.iter().map(|&i| rhs.values()[i] - lap.values()[i]).collect())
    }

    fn assemble(&self, v_int: &[f64], exterior: &Field) -> Field {
        let mut v = exterior.clone();
        for (&i, &x) in self.interior.iter().zip(v_int) {
            v.values_mut()[i] = x;
        }
        v
    }

    /// Dense `A_II` from the translation-invariant kernel `(−Δ)^s δ_0`.
    pub fn dense_matrix(&self) -> Result<DMatrix<f64>> {
        let n_int = self.interior.len();
        if n_int > DENSE_SIZE_CAP {
            return Err(Error::SizeCap(n_int));
        }
        let kernel = frac_laplacian(&Field::indicator(&self.grid, 0), self.s)?;
        let n = self.grid.points_per_dim();
        let dim = self.grid.dim();
        let multi: Vec<Vec<usize>> = self.interior.iter().map(|&i| self.grid.node_multi_index(i)).collect();
        let mut a = DMatrix::zeros(n_int, n_int);
        for c in 0..n_int {
            for r in 0..n_int {
                let mut offset = 0;
                for axis in 0..dim {
                    offset = offset * n + (multi[r][axis] + n - multi[c][axis]) % n;
                }
                a[(r, c)] = kernel.values()[offset];
            }
            a[(c, c)] += self.q_interior[c];
        }
        Ok(a)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CgOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Jacobi (diagonal) preconditioning.
    #[serde(default)]
    pub jacobi: bool,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self { tol: DEFAULT_TOL, max_iter: DEFAULT_MAX_ITER, jacobi: false }
    }
}

pub fn solve_dirichlet(p: &LinearProblem, tol: f64, max_iter: usize) -> Result<SolveReport> {
    solve_dirichlet_with(p, &CgOptions { tol, max_iter, jacobi: false })
}

/// Conjugate gradients on the interior unknowns.
pub fn solve_dirichlet_with(p: &LinearProblem, opts: &CgOptions) -> Result<SolveReport> {
    p.validate()?;
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidParameter("tol must be positive".into()));
    }
    let grid = p.grid().clone();
    let op = InteriorOperator::new(p.s, &p.q);
    let b = op.reduced_rhs(&p.rhs, &p.exterior)?;
    let rho = operator_scale(&grid, p.s, &p.q);
    let data_scale = 1.0 + p.rhs.max_norm_on(grid.omega_mask()) + p.exterior.max_norm();
    let target = opts.tol * data_scale;
    let diag = if opts.jacobi {
        let kernel0 = frac_laplacian(&Field::indicator(&grid, 0), p.s)?.values()[0];
        Some(op.q_interior.iter().map(|q| 1.0 / (kernel0 + q)).collect::<Vec<_>>())
    } else {
        None
    };
    let precondition = |r: &[f64]| -> Vec<f64> {
        match &diag {
            Some(d) => r.iter().zip(d).map(|(a, b)| a * b).collect(),
            None => r.to_vec(),
        }
    };

    let mut x = vec![0.0; op.len()];
    let mut iterations = 0;
    let mut last_true = f64::INFINITY;
    loop {
        let ax = op.apply(&x)?;
        let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        let true_res = max_abs(&r);
        let x_norm = max_abs(&x);
        let floor = ROUNDOFF_FACTOR * f64::EPSILON * rho * (x_norm + p.exterior.max_norm());
        if true_res <= target.max(floor) {
            break;
        }
        if iterations >= opts.max_iter {
            return Err(Error::NonConvergence { iterations, residual: true_res });
        }
        if true_res >= last_true && iterations > 0 && true_res <= 16.0 * floor.max(target) {
            break;
        }
        last_true = true_res;

        let mut z = precondition(&r);
        let mut d = z.clone();
        let mut rz = dot(&r, &z);
        let inner_target = 0.1 * target;
        while iterations < opts.max_iter {
            let ad = op.apply(&d)?;
            let dad = dot(&d, &ad);
            if !(dad > 0.0) {
                break;
            }
            let alpha = rz / dad;
            for i in 0..x.len() {
                x[i] += alpha * d[i];
                r[i] -= alpha * ad[i];
            }
            iterations += 1;
            if max_abs(&r) <= inner_target {
                break;
            }
            z = precondition(&r);
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..d.len() {
                d[i] = z[i] + beta * d[i];
            }
        }
    }
    let solution = op.assemble(&x, &p.exterior);
    let residual_norm = residual_norm(&solution, &p.q, p.s, &p.rhs)?;
    let scale = residual_scale(&grid, p.s, &p.q, &solution, &p.rhs, &p.exterior);
    Ok(SolveReport { solution, iterations, residual_norm, residual_scale: scale, method: SolveMethod::Iterative })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Cholesky factorization of the dense interior matrix, reusable across right-hand sides.
#[derive(Clone)]
pub struct DenseFactorization {
    op: InteriorOperator,
    q: Field,
    cholesky: Cholesky<f64, Dyn>,
}

impl std::fmt::Debug for DenseFactorization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DenseFactorization").field("s", &self.op.s).field("unknowns", &self.op.len()).finish()
    }
}

impl DenseFactorization {
    pub fn new(s: f64, q: &Field) -> Result<Self> {
        check_coercive(q)?;
        let op = InteriorOperator::new(s, q);
        let a = op.dense_matrix()?;
        let cholesky = Cholesky::new(a)
            .ok_or_else(|| Error::Internal("interior matrix is not positive definite".into()))?;
        Ok(Self { op, q: q.clone(), cholesky })
    }

    pub fn operator(&self) -> &InteriorOperator {
        &self.op
    }

    pub fn solve_interior(&self, b: &[f64]) -> Vec<f64> {
        self.cholesky.solve(&DVector::from_column_slice(b)).as_slice().to_vec()
    }

    pub fn solve(&self, rhs: &Field, exterior: &Field) -> Result<SolveReport> {
        let b = self.op.reduced_rhs(rhs, exterior)?;
        let x = self.solve_interior(&b);
        let solution = self.op.assemble(&x, exterior);
        let residual_norm = residual_norm(&solution, &self.q, self.op.s, rhs)?;
        let scale = residual_scale(&self.op.grid, self.op.s, &self.q, &solution, rhs, exterior);
        Ok(SolveReport { solution, iterations: 1, residual_norm, residual_scale: scale, method: SolveMethod::Dense })
    }
}

pub fn dense_oracle_solve(p: &LinearProblem) -> Result<SolveReport> {
    p.validate()?;
    DenseFactorization::new(p.s, &p.q)?.solve(&p.rhs, &p.exterior)
}

#[derive(Clone, Debug)]
enum Backend {
    Iterative(CgOptions),
    Dense(Arc<DenseFactorization>),
}

/// Linear solve `[(−Δ)^s + q]` with a fixed `(s, q)` and a chosen backend.
#[derive(Clone, Debug)]
pub struct LinearSolver {
    s: f64,
    q: Field,
    backend: Backend,
}

impl LinearSolver {
    pub fn iterative(s: f64, q: &Field, opts: CgOptions) -> Result<Self> {
        check_coercive(q)?;
        Ok(Self { s, q: q.clone(), backend: Backend::Iterative(opts) })
    }

    pub fn dense(s: f64, q: &Field) -> Result<Self> {
        let fact = DenseFactorization::new(s, q)?;
        Ok(Self { s, q: q.clone(), backend: Backend::Dense(Arc::new(fact)) })
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn q(&self) -> &Field {
        &self.q
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        self.q.grid()
    }

    pub fn method(&self) -> SolveMethod {
        match self.backend {
            Backend::Iterative(_) => SolveMethod::Iterative,
            Backend::Dense(_) => SolveMethod::Dense,
        }
    }

    pub fn solve(&self, rhs: &Field, exterior: &Field) -> Result<SolveReport> {
        match &self.backend {
            Backend::Iterative(opts) => {
                let p = LinearProblem { s: self.s, q: self.q.clone(), rhs: rhs.clone(), exterior: exterior.clone() };
                solve_dirichlet_with(&p, opts)
            }
            Backend::Dense(fact) => {
                self.q.check_grid(rhs)?;
                self.q.check_grid(exterior)?;
                if !exterior.vanishes_outside(self.grid().exterior_mask()) {
                    return Err(Error::InvalidParameter("exterior data must vanish on the domain".into()));
                }
                fact.solve(rhs, exterior)
            }
        }
    }

    /// Solution with exterior data `f` and no interior source.
    pub fn homogeneous(&self, exterior: &Field) -> Result<Field> {
        Ok(self.solve(&Field::zeros(self.grid()), exterior)?.solution)
    }

    /// Exterior-zero solution with interior source `F`.
    pub fn with_source(&self, rhs: &Field) -> Result<Field> {
        Ok(self.solve(rhs, &Field::zeros(self.grid()))?.solution)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, Region, RegionSpec};
    use std::f64::consts::PI;

    fn grid(n: usize) -> Arc<GridSpec> {
        let spec = RegionSpec::new(Region::interval(2.0, 4.0), Region::interval(0.5, 1.5), Region::interval(4.6, 5.6));
        build_grid(1, n, 2.0 * PI, &spec).unwrap()
    }

    fn bump(g: &Arc<GridSpec>, c: f64, r: f64) -> Field {
        Field::from_fn(g, |x| {
            let t = (x[0] - c).abs() / r;
            if t < 1.0 {
                0.5 * (1.0 + (PI * t).cos())
            } else {
                0.0
            }
        })
    }

    #[test]
    fn zero_data_gives_zero() {
        let g = grid(32);
        let z = Field::zeros(&g);
        let p = LinearProblem::new(1.5, z.clone(), z.clone(), z.clone()).unwrap();
        let r = solve_dirichlet(&p, 1e-10, 100).unwrap();
        assert!(r.iterations <= 1);
        assert_eq!(r.solution.max_norm(), 0.0);
    }

    #[test]
    fn negative_potential_rejected() {
        let g = grid(32);
        let q = Field::constant(&g, -1.0).masked(g.omega_mask());
        let z = Field::zeros(&g);
        assert!(matches!(LinearProblem::new(1.5, q, z.clone(), z), Err(Error::LossOfCoercivity { .. })));
    }

    #[test]
    fn iterative_matches_dense() {
        let g = grid(32);
        let q = bump(&g, 3.0, 0.8);
        let f = bump(&g, 1.0, 0.4);
        let rhs = Field::from_fn(&g, |x| x[0].sin()).masked(g.omega_mask());
        let p = LinearProblem::new(1.5, q, rhs, f).unwrap();
        let it = solve_dirichlet(&p, 1e-12, 5000).unwrap();
        let de = dense_oracle_solve(&p).unwrap();
        assert!((&it.solution - &de.solution).max_norm() < 1e-9);
        assert_eq!(it.solution.values()[0..4], p.exterior.values()[0..4]);
    }

    #[test]
    fn huge_potential_is_diagonal() {
        let g = grid(32);
        let q = Field::constant(&g, 1e12).masked(g.omega_mask());
        let rhs = Field::constant(&g, 3e12).masked(g.omega_mask());
        let de = dense_oracle_solve(&LinearProblem::new(1.5, q, rhs, Field::zeros(&g)).unwrap()).unwrap();
        for &i in &g.indices(g.omega_mask()) {
            assert!((de.solution.values()[i] - 3.0).abs() < 1e-6);
        }
    }
}
