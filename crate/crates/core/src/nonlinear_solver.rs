//! Fixed-point solver for `(−Δ)^s u + q u + P(u) = 0` in Ω, `u = f` outside Ω.

use std::sync::atomic::{AtomicBool, Ordering};

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Field;
use crate::linear_solver::{operator_scale, CgOptions, LinearSolver, DENSE_SIZE_CAP};
use crate::operators::{eval_nonlinearity, frac_laplacian, partial_derivative_with, Nonlinearity};

/// Number of random sources used to estimate the solution-operator bound.
pub const AMPLIFICATION_PROBES: usize = 16;

static REGIME_WARNED: AtomicBool = AtomicBool::new(false);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionConfig {
    pub delta: f64,
    pub eps0: f64,
    /// Stopping threshold on `‖v_{j+1} − v_j‖_∞`; zero iterates to machine precision.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ContractionConfig {
    fn default() -> Self {
        Self { delta: 0.1, eps0: 0.01, tol: 1e-12, max_iter: 200 }
    }
}

impl ContractionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps0 > 0.0) {
            return Err(Error::InvalidParameter("eps0 must be positive".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidParameter("delta must lie in (0, 1)".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::InvalidParameter("tol must be nonnegative".into()));
        }
        Ok(())
    }

    /// Same configuration iterating until increments reach machine precision.
    pub fn exhaustive(&self) -> Self {
        Self { tol: 0.0, max_iter: self.max_iter.max(400), ..*self }
    }
}

#[derive(Clone, Debug)]
pub struct NonlinearReport {
    pub solution: Field,
    /// Solution `u_0` of the linear problem with the same exterior data.
    pub linear_part: Field,
    /// `u − u_0`, carried separately so it keeps full relative precision.
    pub correction: Field,
    pub iterations: usize,
    pub last_increment: f64,
    /// `max_Ω |(−Δ)^s u + q u + P(u)|`
    pub residual_norm: f64,
    pub residual_scale: f64,
}

impl NonlinearReport {
    pub fn scaled_residual(&self) -> f64 {
        if self.residual_norm == 0.0 {
            0.0
        } else {
            self.residual_norm / self.residual_scale.max(f64::MIN_POSITIVE)
        }
    }
}

/// Contraction iteration `v_{j+1} = L^{-1}(−P(v_j + u_0))` around the linear solution.
#[derive(Clone, Debug)]
pub struct NonlinearSolver {
    linear: LinearSolver,
    p: Nonlinearity,
    cfg: ContractionConfig,
}

impl NonlinearSolver {
    pub fn new(linear: LinearSolver, p: Nonlinearity, cfg: ContractionConfig) -> Result<Self> {
        cfg.validate()?;
        linear.q().check_grid(&Field::zeros(p.grid()))?;
        if (linear.s() - p.params().s).abs() > 0.0 {
            return Err(Error::InvalidParameter("linear solver and nonlinearity disagree on s".into()));
        }
        Ok(Self { linear, p, cfg })
    }

    /// Dense backend when the interior fits under the size cap, CG otherwise.
    pub fn auto(q: &Field, p: Nonlinearity, cfg: ContractionConfig) -> Result<Self> {
        let n_int = q.grid().indices(q.grid().omega_mask()).len();
        let linear = if n_int <= DENSE_SIZE_CAP {
            LinearSolver::dense(p.params().s, q)?
        } else {
            LinearSolver::iterative(p.params().s, q, CgOptions::default())?
        };
        Self::new(linear, p, cfg)
    }

    pub fn linear(&self) -> &LinearSolver {
        &self.linear
    }

    pub fn nonlinearity(&self) -> &Nonlinearity {
        &self.p
    }

    pub fn config(&self) -> &ContractionConfig {
        &self.cfg
    }

    pub fn with_config(&self, cfg: ContractionConfig) -> Self {
        Self { cfg, ..self.clone() }
    }

    pub fn solve(&self, f: &Field) -> Result<NonlinearReport> {
        let u0 = self.linear.homogeneous(f)?;
        self.solve_around(f, u0, None)
    }

    pub fn solve_from(&self, f: &Field, v_init: &Field) -> Result<NonlinearReport> {
        let u0 = self.linear.homogeneous(f)?;
        self.solve_around(f, u0, Some(v_init))
    }

    /// Runs the iteration with a precomputed linear part `u0` for the data `f`.
    pub fn solve_around(&self, f: &Field, u0: Field, v_init: Option<&Field>) -> Result<NonlinearReport> {
        let grid = self.linear.grid();
        if f.max_norm() > self.cfg.eps0 {
            if REGIME_WARNED.swap(true, Ordering::Relaxed) {
                debug!("outside contraction regime: |f|_inf = {:e} > eps0 = {:e}", f.max_norm(), self.cfg.eps0);
            } else {
                warn!(
                    "outside contraction regime: |f|_inf = {:e} > eps0 = {:e} (further occurrences at debug level)",
                    f.max_norm(),
                    self.cfg.eps0
                );
            }
        }
        let mut v = match v_init {
            Some(v0) => v0.masked(grid.omega_mask()),
            None => Field::zeros(grid),
        };
        let mut iterations = 0;
        let mut last_increment = 0.0;
        if self.p.is_zero() {
            v = Field::zeros(grid);
            iterations = 1;
        } else {
            let mut previous = f64::INFINITY;
            loop {
                if iterations >= self.cfg.max_iter {
                    return Err(Error::NonConvergence { iterations, residual: previous });
                }
                let u = &v + &u0;
                let source = -&eval_nonlinearity(&u, &self.p)?;
                let next = self.linear.with_source(&source)?;
                iterations += 1;
                let norm = next.max_norm();
                if norm > self.cfg.delta {
                    return Err(Error::ContractionBallViolated { iteration: iterations, norm, delta: self.cfg.delta });
                }
                let increment = (&next - &v).max_norm();
                v = next;
                last_increment = increment;
                let machine = 4.0 * f64::EPSILON * v.max_norm();
                if increment < self.cfg.tol || increment <= machine {
                    break;
                }
                if self.cfg.tol == 0.0 && increment >= previous && increment <= 1e3 * machine {
                    break;
                }
                previous = increment;
            }
        }
        let solution = &u0 + &v;
        let (residual_norm, residual_scale) = self.residual(&solution)?;
        Ok(NonlinearReport { solution, linear_part: u0, correction: v, iterations, last_increment, residual_norm, residual_scale })
    }

    /// Full residual `max_Ω |(−Δ)^s u + q u + P(u)|` and the size of its terms.
    pub fn residual(&self, u: &Field) -> Result<(f64, f64)> {
        let grid = u.grid();
        let s = self.p.params().s;
        let lap = frac_laplacian(u, s)?;
        let pu = eval_nonlinearity(u, &self.p)?;
        let q = self.linear.q();
        let omega = grid.omega_mask();
        let res = (0..u.values().len())
            .filter(|&i| omega[i])
            .map(|i| (lap.values()[i] + q.values()[i] * u.values()[i] + pu.values()[i]).abs())
            .fold(0.0, f64::max);
        let scale = operator_scale(grid, s, q) * u.max_norm() + pu.max_norm_on(omega);
        Ok((res, scale))
    }

    pub fn check_smallness(&self, f: &Field, seed: u64) -> Result<SmallnessReport> {
        check_smallness(f, &self.p, &self.linear, &self.cfg, seed)
    }
}

pub fn solve_nlfse(q: &Field, p: &Nonlinearity, f: &Field, cfg: &ContractionConfig) -> Result<NonlinearReport> {
    NonlinearSolver::auto(q, p.clone(), *cfg)?.solve(f)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmallnessReport {
    /// `C' = Σ_j Σ_σ ‖a_{σ,j}‖_∞`
    pub coefficient_sum: f64,
    /// Empirical bound on `‖D^σ L^{-1} F‖_∞ / ‖F‖_∞` over `|σ| ≤ m`.
    pub operator_bound: f64,
    pub data_norm: f64,
    pub lhs: f64,
    pub delta: f64,
    pub holds: bool,
    /// Open interval of δ in (0, 1) on which the inequality holds.
    pub delta_range: Option<(f64, f64)>,
}

/// `C C' Σ_{j=1}^{K-1} (δ + ε₀)^{j+1}`
pub fn contraction_lhs(c: f64, c_prime: f64, delta: f64, eps0: f64, k_max: usize) -> f64 {
    let sum: f64 = (1..k_max).map(|j| (delta + eps0).powi(j as i32 + 1)).sum();
    c * c_prime * sum
}

/// Interval of δ ∈ (0, 1) where the contraction inequality holds.
pub fn contraction_interval(c: f64, c_prime: f64, eps0: f64, k_max: usize) -> Option<(f64, f64)> {
    let g = |d: f64| d - contraction_lhs(c, c_prime, d, eps0, k_max);
    // g is concave, so its positive set is an interval.
    let (mut a, mut b) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let m1 = a + (b - a) / 3.0;
        let m2 = b - (b - a) / 3.0;
        if g(m1) < g(m2) {
            a = m1;
        } else {
            b = m2;
        }
    }
    let peak = 0.5 * (a + b);
    if g(peak) <= 0.0 {
        return None;
    }
    let bisect = |mut inside: f64, mut outside: f64| {
        for _ in 0..200 {
            let mid = 0.5 * (inside + outside);
            if g(mid) > 0.0 {
                inside = mid;
            } else {
                outside = mid;
            }
        }
        0.5 * (inside + outside)
    };
    let lo = if g(0.0) >= 0.0 { 0.0 } else { bisect(peak, 0.0) };
    let hi = if g(1.0) > 0.0 { 1.0 } else { bisect(peak, 1.0) };
    Some((lo, hi))
}

pub fn check_smallness(
    f: &Field,
    p: &Nonlinearity,
    linear: &LinearSolver,
    cfg: &ContractionConfig,
    seed: u64,
) -> Result<SmallnessReport> {
    let grid = linear.grid();
    let c_prime = p.coefficient_sum();
    let omega = grid.indices(grid.omega_mask());
    let sigmas = p.sigmas();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bound = 0.0f64;
    for _ in 0..AMPLIFICATION_PROBES {
        let vals: Vec<f64> = omega.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
        let source = Field::scatter(grid, &omega, &vals);
        let norm = source.max_norm();
        if norm == 0.0 {
            continue;
        }
        let sol = linear.with_source(&source)?;
        for sigma in &sigmas {
            let d = partial_derivative_with(&sol, sigma, p.scheme())?;
            bound = bound.max(d.max_norm() / norm);
        }
    }
    let lhs = contraction_lhs(bound, c_prime, cfg.delta, cfg.eps0, p.params().k_max);
    Ok(SmallnessReport {
        coefficient_sum: c_prime,
        operator_bound: bound,
        data_norm: f.max_norm(),
        lhs,
        delta: cfg.delta,
        holds: lhs < cfg.delta,
        delta_range: contraction_interval(bound, c_prime, cfg.eps0, p.params().k_max),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_matches_bisection_oracle() {
        let (c, cp, eps0, k) = (3.0, 2.0, 0.01, 3);
        let (lo, hi) = contraction_interval(c, cp, eps0, k).unwrap();
        let g = |d: f64| d - contraction_lhs(c, cp, d, eps0, k);
        assert!(g(lo + 1e-6) > 0.0 && g(hi - 1e-6) > 0.0);
        assert!(g(lo - 1e-6) <= 0.0 || lo == 0.0);
        assert!(g(hi + 1e-6) <= 0.0 || hi == 1.0);
    }

    #[test]
    fn zero_coefficients_always_hold() {
        assert_eq!(contraction_interval(5.0, 0.0, 0.5, 4), Some((0.0, 1.0)));
        assert!(contraction_lhs(5.0, 0.0, 0.5, 0.5, 4) == 0.0);
    }

    #[test]
    fn large_coefficients_fail() {
        assert!(contraction_lhs(1.0, 100.0, 0.5, 0.5, 2) > 0.5);
        assert!(contraction_interval(1.0, 100.0, 0.5, 2).is_none());
    }
}
