//! Higher-order linearization: the sources `T_α`, the linearized solutions
//! `w_α`, the ε-expansion aggregates and finite-difference extraction.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Field;
use crate::multi_index::{compositions, indices_of_order, multinomial_weight, ordered_partial_tuples, MultiIndex};
use crate::nonlinear_solver::NonlinearSolver;
use crate::operators::{apply_pk, eval_nonlinearity, Nonlinearity};

pub const DEFAULT_EPS_STEP: f64 = 1e-2;

/// Cascade storage for one nonlinear model and one family of exterior data `f_1..f_K`.
#[derive(Clone, Debug)]
pub struct LinearizationState {
    solver: NonlinearSolver,
    data: Vec<Field>,
    w: BTreeMap<MultiIndex, Field>,
    t: BTreeMap<MultiIndex, Field>,
}

impl LinearizationState {
    pub fn new(solver: NonlinearSolver, data: Vec<Field>) -> Result<Self> {
        let k_max = solver.nonlinearity().params().k_max;
        if data.len() != k_max {
            return Err(Error::InvalidParameter(format!("expected {k_max} exterior data, got {}", data.len())));
        }
        let grid = solver.linear().grid().clone();
        for f in &data {
            f.check_grid(&Field::zeros(&grid))?;
            if !f.vanishes_outside(grid.exterior_mask()) {
                return Err(Error::InvalidParameter("exterior data must vanish on the domain".into()));
            }
        }
        let zero = MultiIndex::zero(k_max);
        let mut w = BTreeMap::new();
        let mut t = BTreeMap::new();
        w.insert(zero.clone(), Field::zeros(&grid));
        t.insert(zero, Field::zeros(&grid));
        Ok(Self { solver, data, w, t })
    }

    /// Cascade driven by prescribed first-order fields `v_ℓ` instead of solved ones.
    ///
    /// The stored exterior data are zero; only the algebra of the cascade is exercised.
    pub fn with_linear_parts(solver: NonlinearSolver, parts: Vec<Field>) -> Result<Self> {
        let grid = solver.linear().grid().clone();
        let data = vec![Field::zeros(&grid); parts.len()];
        let mut state = Self::new(solver, data)?;
        let k = parts.len();
        for (slot, v) in parts.into_iter().enumerate() {
            v.check_grid(&Field::zeros(&grid))?;
            state.t.insert(MultiIndex::unit(k, slot), Field::zeros(&grid));
            state.w.insert(MultiIndex::unit(k, slot), v);
        }
        Ok(state)
    }

    pub fn solver(&self) -> &NonlinearSolver {
        &self.solver
    }

    pub fn nonlinearity(&self) -> &Nonlinearity {
        self.solver.nonlinearity()
    }

    pub fn q(&self) -> &Field {
        self.solver.linear().q()
    }

    pub fn data(&self) -> &[Field] {
        &self.data
    }

    pub fn slots(&self) -> usize {
        self.data.len()
    }

    pub fn w(&self, alpha: &MultiIndex) -> Option<&Field> {
        self.w.get(alpha)
    }

    pub fn t(&self, alpha: &MultiIndex) -> Option<&Field> {
        self.t.get(alpha)
    }

    pub fn computed(&self) -> impl Iterator<Item = &MultiIndex> {
        self.w.keys()
    }

    /// `v_ℓ = w_{e_ℓ}`
    pub fn v(&self, slot: usize) -> Option<&Field> {
        self.w.get(&MultiIndex::unit(self.slots(), slot))
    }

    fn solve_alpha(&self, alpha: &MultiIndex) -> Result<(Field, Field)> {
        let grid = self.solver.linear().grid();
        if alpha.order() == 1 {
            let slot = alpha.support()[0];
            let w = self.solver.linear().homogeneous(&self.data[slot])?;
            return Ok((Field::zeros(grid), w));
        }
        let t = compute_t_alpha(alpha, self)?;
        let w = self.solver.linear().with_source(&-&t)?;
        Ok((t, w))
    }

    /// Computes `w_α` together with every prerequisite `w_β`, `β < α`.
    pub fn ensure(&mut self, alpha: &MultiIndex) -> Result<()> {
        if alpha.len() != self.slots() {
            return Err(Error::InvalidParameter(format!("{alpha} has wrong length")));
        }
        if self.w.contains_key(alpha) {
            return Ok(());
        }
        for order in 1..=alpha.order() {
            let pending: Vec<MultiIndex> = alpha
                .sub_indices()
                .into_iter()
                .filter(|b| b.order() == order && !self.w.contains_key(b))
                .collect();
            self.fill(&pending)?;
        }
        Ok(())
    }

    fn fill(&mut self, alphas: &[MultiIndex]) -> Result<()> {
        let results: Vec<Result<(Field, Field)>> = alphas.par_iter().map(|a| self.solve_alpha(a)).collect();
        for (alpha, res) in alphas.iter().zip(results) {
            let (t, w) = res?;
            self.t.insert(alpha.clone(), t);
            self.w.insert(alpha.clone(), w);
        }
        Ok(())
    }
}

/// `T_α = Σ_ℓ Σ_{β_1..β_ℓ} binom(α,β) multinom(β;β_j) (Π w_{β_j}) P_ℓ(x,D) w_{α−β}`
pub fn compute_t_alpha(alpha: &MultiIndex, state: &LinearizationState) -> Result<Field> {
    let p = state.nonlinearity();
    let grid = state.solver.linear().grid();
    let mut out = Field::zeros(grid);
    if alpha.order() <= 1 || p.is_zero() {
        return Ok(out);
    }
    let k_max = p.params().k_max;
    let fetch = |b: &MultiIndex| state.w(b).ok_or_else(|| Error::MissingPrerequisite(b.to_string()));
    let mut pk_cache: BTreeMap<(MultiIndex, usize), Field> = BTreeMap::new();
    for ell in 1..alpha.order().min(k_max) {
        for tuple in ordered_partial_tuples(alpha, ell) {
            let beta = tuple.iter().fold(MultiIndex::zero(alpha.len()), |acc, b| acc.add(b));
            let rest = alpha.checked_sub(&beta).expect("tuple sums below alpha");
            let weight = multinomial_weight(alpha, &beta, &tuple)? as f64;
            let key = (rest.clone(), ell);
            if !pk_cache.contains_key(&key) {
                pk_cache.insert(key.clone(), apply_pk(fetch(&rest)?, ell, p)?);
            }
            let mut term = pk_cache[&key].scaled(weight);
            for b in &tuple {
                term = term.hadamard(fetch(b)?);
            }
            out.axpy(1.0, &term);
        }
    }
    Ok(out)
}

/// Fills `w_α`, `T_α` for every `|α| ≤ up_to` in increasing order.
pub fn compute_cascade(state: &mut LinearizationState, up_to: usize) -> Result<()> {
    let k_max = state.nonlinearity().params().k_max;
    if up_to > k_max {
        return Err(Error::InvalidParameter(format!("cascade order {up_to} exceeds K = {k_max}")));
    }
    for order in 1..=up_to {
        let pending: Vec<MultiIndex> =
            indices_of_order(state.slots(), order).into_iter().filter(|a| !state.w.contains_key(a)).collect();
        state.fill(&pending)?;
    }
    Ok(())
}

/// Subsets of the support of a binary α with the sign `(−1)^{|α|−|S|}`.
fn stencil(alpha: &MultiIndex) -> Vec<(Vec<usize>, f64)> {
    let support = alpha.support();
    (0..1usize << support.len())
        .map(|mask| {
            let subset: Vec<usize> =
                support.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, &s)| s).collect();
            let sign = if (support.len() - subset.len()) % 2 == 0 { 1.0 } else { -1.0 };
            (subset, sign)
        })
        .collect()
}

/// Mixed one-sided difference `Σ_S (−1)^{|α|−|S|} u_{h·1_S} / h^{|α|}` approximating `w_α`.
pub fn fd_derivative(alpha: &MultiIndex, data: &[Field], eps_step: f64, solver: &NonlinearSolver) -> Result<Field> {
    let linear_parts = linear_parts(alpha, data, solver)?;
    let mut out = fd_with_parts(alpha, data, eps_step, solver, &linear_parts, |_, v| Ok(v.clone()))?;
    if alpha.order() == 1 {
        out = &out + &linear_parts[&alpha.support()[0]];
    }
    Ok(out)
}

/// Richardson extrapolation `2 D(h/2) − D(h)` of [`fd_derivative`].
pub fn fd_derivative_richardson(
    alpha: &MultiIndex,
    data: &[Field],
    eps_step: f64,
    solver: &NonlinearSolver,
) -> Result<Field> {
    let coarse = fd_derivative(alpha, data, eps_step, solver)?;
    let fine = fd_derivative(alpha, data, eps_step / 2.0, solver)?;
    Ok(&fine.scaled(2.0) - &coarse)
}

/// Linear responses `v_ℓ` for the slots a binary α uses.
pub(crate) fn linear_parts(
    alpha: &MultiIndex,
    data: &[Field],
    solver: &NonlinearSolver,
) -> Result<BTreeMap<usize, Field>> {
    if !alpha.is_binary() {
        return Err(Error::InvalidParameter(format!("finite differences need a binary index, got {alpha}")));
    }
    if alpha.len() > data.len() {
        return Err(Error::InvalidParameter("fewer data than slots".into()));
    }
    let support = alpha.support();
    let solved: Vec<Result<Field>> = support.par_iter().map(|&l| solver.linear().homogeneous(&data[l])).collect();
    support.into_iter().zip(solved).map(|(l, v)| Ok((l, v?))).collect()
}

/// Mixed difference of `observe(u_{h·1_S}, u_{h·1_S} − u0_S)` over the stencil
/// of α, where `u0_S` is the linear part assembled from the `v_ℓ`.
pub(crate) fn fd_with_parts<T, F>(
    alpha: &MultiIndex,
    data: &[Field],
    eps_step: f64,
    solver: &NonlinearSolver,
    linear_parts: &BTreeMap<usize, Field>,
    observe: F,
) -> Result<T>
where
    T: FdValue + Send,
    F: Fn(&Field, &Field) -> Result<T> + Sync,
{
    if !(eps_step > 0.0) {
        return Err(Error::InvalidParameter("eps_step must be positive".into()));
    }
    let grid = solver.linear().grid();
    let exhaustive = solver.with_config(solver.config().exhaustive());
    let stencil = stencil(alpha);
    let values: Vec<Result<(T, f64)>> = stencil
        .par_iter()
        .map(|(subset, sign)| {
            let mut f = Field::zeros(grid);
            let mut u0 = Field::zeros(grid);
            for &l in subset {
                f.axpy(eps_step, &data[l]);
                u0.axpy(eps_step, &linear_parts[&l]);
            }
            let (u, v) = if subset.is_empty() {
                (Field::zeros(grid), Field::zeros(grid))
            } else {
                let report = exhaustive.solve_around(&f, u0, None)?;
                (report.solution, report.correction)
            };
            Ok((observe(&u, &v)?, *sign))
        })
        .collect();
    let scale = eps_step.powi(alpha.order() as i32);
    let mut acc: Option<T> = None;
    for v in values {
        let (val, sign) = v?;
        let term = val.scale(sign / scale);
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(&term),
        });
    }
    acc.ok_or_else(|| Error::Internal("empty stencil".into()))
}

/// Values that can be combined in a finite-difference stencil.
pub trait FdValue: Sized {
    fn scale(&self, c: f64) -> Self;
    fn add(&self, other: &Self) -> Self;
}

impl FdValue for Field {
    fn scale(&self, c: f64) -> Self {
        self.scaled(c)
    }
    fn add(&self, other: &Self) -> Self {
        self + other
    }
}

impl FdValue for f64 {
    fn scale(&self, c: f64) -> Self {
        self * c
    }
    fn add(&self, other: &Self) -> Self {
        self + other
    }
}

impl FdValue for Vec<f64> {
    fn scale(&self, c: f64) -> Self {
        self.iter().map(|v| v * c).collect()
    }
    fn add(&self, other: &Self) -> Self {
        self.iter().zip(other).map(|(a, b)| a + b).collect()
    }
}

/// ε-expansion bookkeeping for one ε.
#[derive(Clone, Debug)]
pub struct ExpansionAggregates {
    pub eps: Vec<f64>,
    /// `V_k = Σ_{|α|=k} ε^α w_α / α!`, k = 1..K
    pub v: BTreeMap<usize, Field>,
    /// `U_0 = u_ε`, `U_{k+1} = U_k − V_{k+1}`
    pub u: BTreeMap<usize, Field>,
    /// `T_k = Σ_{|α|=k} ε^α T_α / α!`
    pub t: BTreeMap<usize, Field>,
    /// `T̃_k = P(u_ε) − T_1 − … − T_k`
    pub ttilde: BTreeMap<usize, Field>,
    /// `R_ε = U_K`
    pub r: Field,
}

fn weighted_sum(map: &BTreeMap<MultiIndex, Field>, order: usize, eps: &[f64], grid: &Field) -> Result<Field> {
    let mut out = grid.scaled(0.0);
    for alpha in indices_of_order(eps.len(), order) {
        let field = map.get(&alpha).ok_or_else(|| Error::MissingPrerequisite(alpha.to_string()))?;
        let c = alpha.power(eps) / alpha.factorial()? as f64;
        out.axpy(c, field);
    }
    Ok(out)
}

impl LinearizationState {
    /// `V_k` from the stored cascade.
    pub fn v_k(&self, k: usize, eps: &[f64]) -> Result<Field> {
        weighted_sum(&self.w, k, eps, &Field::zeros(self.solver.linear().grid()))
    }

    /// `T_k` from the stored `T_α`.
    pub fn t_k(&self, k: usize, eps: &[f64]) -> Result<Field> {
        weighted_sum(&self.t, k, eps, &Field::zeros(self.solver.linear().grid()))
    }

    /// Exterior data `ε·f = Σ ε_ℓ f_ℓ`.
    pub fn combined_data(&self, eps: &[f64]) -> Field {
        let mut f = Field::zeros(self.solver.linear().grid());
        for (e, d) in eps.iter().zip(&self.data) {
            f.axpy(*e, d);
        }
        f
    }

    /// `u_ε` solved to machine precision with the linear part assembled from `v_ℓ`.
    pub fn solve_eps(&self, eps: &[f64]) -> Result<Field> {
        let v1 = self.v_k(1, eps)?;
        let f = self.combined_data(eps);
        let exhaustive = self.solver.with_config(self.solver.config().exhaustive());
        Ok(exhaustive.solve_around(&f, v1, None)?.solution)
    }
}

/// `T_k = Σ_ℓ Σ_{γ_1+…+γ_{ℓ+1}=k} (Π_{j≤ℓ} V_{γ_j}) P_ℓ(x,D) V_{γ_{ℓ+1}}`
pub fn t_k_product_form(state: &LinearizationState, k: usize, eps: &[f64]) -> Result<Field> {
    let p = state.nonlinearity();
    let grid = state.solver.linear().grid();
    let mut out = Field::zeros(grid);
    if k < 2 {
        return Ok(out);
    }
    let v: BTreeMap<usize, Field> = (1..k).map(|j| Ok((j, state.v_k(j, eps)?))).collect::<Result<_>>()?;
    for ell in 1..k.min(p.params().k_max) {
        for gamma in compositions(k, ell + 1) {
            let mut term = apply_pk(&v[&gamma[ell]], ell, p)?;
            for g in &gamma[..ell] {
                term = term.hadamard(&v[g]);
            }
            out.axpy(1.0, &term);
        }
    }
    Ok(out)
}

pub fn aggregates(state: &LinearizationState, eps: &[f64]) -> Result<ExpansionAggregates> {
    if eps.len() != state.slots() {
        return Err(Error::InvalidParameter("eps has wrong length".into()));
    }
    let k_max = state.nonlinearity().params().k_max;
    let u_eps = state.solve_eps(eps)?;
    let p_u = eval_nonlinearity(&u_eps, state.nonlinearity())?;
    let mut v = BTreeMap::new();
    let mut u = BTreeMap::new();
    let mut t = BTreeMap::new();
    let mut ttilde = BTreeMap::new();
    u.insert(0, u_eps);
    ttilde.insert(0, p_u.clone());
    let mut running = p_u;
    for k in 1..=k_max {
        let vk = state.v_k(k, eps)?;
        let tk = state.t_k(k, eps)?;
        let next = &u[&(k - 1)] - &vk;
        running = &running - &tk;
        u.insert(k, next);
        v.insert(k, vk);
        t.insert(k, tk);
        ttilde.insert(k, running.clone());
    }
    let r = u[&k_max].clone();
    Ok(ExpansionAggregates { eps: eps.to_vec(), v, u, t, ttilde, r })
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let num: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let den: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    num / den
}

/// Geometric sequence `start, start/ratio, …` of length `count`.
pub fn geometric(start: f64, ratio: f64, count: usize) -> Vec<f64> {
    (0..count).map(|i| start / ratio.powi(i as i32)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemainderRow {
    pub scale: f64,
    pub data_norm: f64,
    pub remainder_norm: f64,
    /// `max_Ω |(−Δ)^s R + q R + T̃_K|`
    pub remainder_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemainderStudy {
    pub rows: Vec<RemainderRow>,
    pub slope: f64,
}

/// `‖R_ε‖_∞` along `ε = t·direction` for each `t` in `scales`.
pub fn remainder_study(state: &LinearizationState, direction: &[f64], scales: &[f64]) -> Result<RemainderStudy> {
    let k_max = state.nonlinearity().params().k_max;
    let rows: Vec<Result<RemainderRow>> = scales
        .par_iter()
        .map(|&t| {
            let eps: Vec<f64> = direction.iter().map(|d| d * t).collect();
            let agg = aggregates(state, &eps)?;
            let lin = state.solver.linear();
            let residual = crate::linear_solver::residual_norm(&agg.r, lin.q(), lin.s(), &-&agg.ttilde[&k_max])?;
            Ok(RemainderRow {
                scale: t,
                data_norm: state.combined_data(&eps).max_norm(),
                remainder_norm: agg.r.max_norm(),
                remainder_residual: residual,
            })
        })
        .collect();
    let rows: Vec<RemainderRow> = rows.into_iter().collect::<Result<_>>()?;
    let x: Vec<f64> = rows.iter().map(|r| r.data_norm).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.remainder_norm).collect();
    Ok(RemainderStudy { slope: loglog_slope(&x, &y), rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub k: usize,
    /// `max |T_k(stored) − T_k(product form)|`
    pub t_mismatch: f64,
    pub t_norm: f64,
    pub v_slope: f64,
    pub u_slope: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateCheck {
    pub rows: Vec<AggregateRow>,
    /// `max |u_ε − Σ V_k − R_ε|` over the sweep.
    pub telescoping: f64,
}

/// Compares both `T_k` computations and fits the orders of `V_k`, `U_k` along `ε = t·direction`.
pub fn aggregate_check(state: &LinearizationState, direction: &[f64], scales: &[f64]) -> Result<AggregateCheck> {
    let k_max = state.nonlinearity().params().k_max;
    let aggs: Vec<Result<ExpansionAggregates>> = scales
        .par_iter()
        .map(|&t| aggregates(state, &direction.iter().map(|d| d * t).collect::<Vec<_>>()))
        .collect();
    let aggs: Vec<ExpansionAggregates> = aggs.into_iter().collect::<Result<_>>()?;
    let norms: Vec<f64> = aggs.iter().map(|a| state.combined_data(&a.eps).max_norm()).collect();
    let mut rows = Vec::new();
    let mut telescoping = 0.0f64;
    for a in &aggs {
        let mut sum = a.r.clone();
        for vk in a.v.values() {
            sum.axpy(1.0, vk);
        }
        telescoping = telescoping.max((&a.u[&0] - &sum).max_norm());
    }
    for k in 1..=k_max {
        let mut mismatch = 0.0f64;
        let mut t_norm = 0.0f64;
        for a in &aggs {
            let product = t_k_product_form(state, k, &a.eps)?;
            mismatch = mismatch.max((&a.t[&k] - &product).max_norm());
            t_norm = t_norm.max(a.t[&k].max_norm());
        }
        let v_norms: Vec<f64> = aggs.iter().map(|a| a.v[&k].max_norm()).collect();
        let u_norms: Vec<f64> = aggs.iter().map(|a| a.u[&k].max_norm()).collect();
        rows.push(AggregateRow {
            k,
            t_mismatch: mismatch,
            t_norm,
            v_slope: loglog_slope(&norms, &v_norms),
            u_slope: loglog_slope(&norms, &u_norms),
        });
    }
    Ok(AggregateCheck { rows, telescoping })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stencil_signs() {
        let s = stencil(&MultiIndex::new(vec![1, 0, 1]));
        assert_eq!(s.len(), 4);
        let total: f64 = s.iter().map(|(_, sign)| sign).sum();
        assert_eq!(total, 0.0);
        assert!(s.iter().all(|(sub, _)| !sub.contains(&1)));
        let full = s.iter().find(|(sub, _)| sub.len() == 2).unwrap();
        assert_eq!(full.1, 1.0);
    }

    #[test]
    fn slope_of_power_law() {
        let x = geometric(0.1, 2.0, 5);
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v.powi(3)).collect();
        assert!((loglog_slope(&x, &y) - 3.0).abs() < 1e-12);
    }
}
