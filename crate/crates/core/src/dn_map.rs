//! Weak-form DN pairings, DN matrices over exterior bump bases and their
//! ε-derivatives.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{inner_product, Field, GridSpec, MaskKind};
use crate::linearization::{fd_with_parts, linear_parts, LinearizationState};
use crate::multi_index::MultiIndex;
use crate::nonlinear_solver::NonlinearSolver;
use crate::operators::{bilinear_form, eval_nonlinearity, linear_form};

/// Smooth bump `(1 + cos(π r / R)) / 2` for `r < R`, on the periodic box.
pub fn cosine_bump(grid: &Arc<GridSpec>, center: &[f64], radius: f64) -> Field {
    Field::from_fn(grid, |x| {
        let d = grid.periodic_displacement(x, center);
        let r = d.iter().map(|v| v * v).sum::<f64>().sqrt() / radius;
        if r < 1.0 {
            0.5 * (1.0 + (PI * r).cos())
        } else {
            0.0
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisDescriptor {
    pub center: Vec<f64>,
    pub radius: f64,
    pub amplitude: f64,
    pub window: String,
}

impl BasisDescriptor {
    /// The bump, cut to the nodes of its window.
    pub fn field(&self, grid: &Arc<GridSpec>) -> Result<Field> {
        let mask = grid.mask(window_kind(&self.window)?);
        Ok(cosine_bump(grid, &self.center, self.radius).scaled(self.amplitude).masked(mask))
    }
}

fn window_kind(name: &str) -> Result<MaskKind> {
    match name {
        "w1" => Ok(MaskKind::W1),
        "w2" => Ok(MaskKind::W2),
        "exterior" => Ok(MaskKind::Exterior),
        other => Err(Error::InvalidParameter(format!("unknown window {other}"))),
    }
}

fn window_name(kind: MaskKind) -> Result<&'static str> {
    match kind {
        MaskKind::W1 => Ok("w1"),
        MaskKind::W2 => Ok("w2"),
        MaskKind::Exterior => Ok("exterior"),
        _ => Err(Error::InvalidParameter("bases live in an exterior window".into())),
    }
}

/// `count` bumps per axis centred on an evenly spaced lattice inside the window.
pub fn window_basis(grid: &Arc<GridSpec>, kind: MaskKind, count: usize, amplitude: f64) -> Result<Vec<BasisDescriptor>> {
    let name = window_name(kind)?;
    if count == 0 {
        return Ok(Vec::new());
    }
    let (lo, hi, _) = grid.mask_bounds(grid.mask(kind));
    let dim = grid.dim();
    let h = grid.spacing();
    let axes: Vec<Vec<f64>> = (0..dim)
        .map(|d| {
            let step = (hi[d] - lo[d]) / count as f64;
            (0..count).map(|i| lo[d] + step * (i as f64 + 0.5)).collect()
        })
        .collect();
    let radius = (0..dim)
        .map(|d| (hi[d] - lo[d]) / count as f64)
        .fold(f64::INFINITY, f64::min)
        .max(1.5 * h);
    let mut out = Vec::new();
    match dim {
        1 => {
            for &c in &axes[0] {
                out.push(BasisDescriptor { center: vec![c], radius, amplitude, window: name.into() });
            }
        }
        _ => {
            for &a in &axes[0] {
                for &b in &axes[1] {
                    out.push(BasisDescriptor { center: vec![a, b], radius, amplitude, window: name.into() });
                }
            }
        }
    }
    Ok(out)
}

/// `⟨Λ_P f, g⟩ = B_P(u_f, g)`
pub fn dn_pair(f: &Field, g: &Field, solver: &NonlinearSolver) -> Result<f64> {
    let u = solver.solve(f)?.solution;
    bilinear_form(&u, g, solver.linear().q(), solver.nonlinearity())
}

/// `pairings[i][j] = ⟨Λ_P f_i, g_j⟩`
pub fn dn_matrix(solver: &NonlinearSolver, basis_in: &[Field], basis_out: &[Field]) -> Result<Vec<Vec<f64>>> {
    basis_in
        .par_iter()
        .map(|f| {
            let u = solver.solve(f)?.solution;
            basis_out
                .iter()
                .map(|g| bilinear_form(&u, g, solver.linear().q(), solver.nonlinearity()))
                .collect::<Result<Vec<f64>>>()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivPairing {
    pub alpha: MultiIndex,
    /// Indices into `basis_in` used as the slots `f_1..f_K`.
    pub inputs: Vec<usize>,
    pub output: usize,
    pub eps_step: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DNData {
    pub basis_in: Vec<BasisDescriptor>,
    pub basis_out: Vec<BasisDescriptor>,
    pub pairings: Vec<Vec<f64>>,
    pub deriv_pairings: Vec<DerivPairing>,
}

impl DNData {
    pub fn assemble(solver: &NonlinearSolver, basis_in: Vec<BasisDescriptor>, basis_out: Vec<BasisDescriptor>) -> Result<Self> {
        let grid = solver.linear().grid();
        let fin: Vec<Field> = basis_in.iter().map(|b| b.field(grid)).collect::<Result<_>>()?;
        let fout: Vec<Field> = basis_out.iter().map(|b| b.field(grid)).collect::<Result<_>>()?;
        let pairings = dn_matrix(solver, &fin, &fout)?;
        Ok(Self { basis_in, basis_out, pairings, deriv_pairings: Vec::new() })
    }

    /// Appends `⟨∂^α Λ(ε·f), g_out⟩` for the given input slots and every output.
    pub fn add_derivatives(
        &mut self,
        solver: &NonlinearSolver,
        alpha: &MultiIndex,
        inputs: &[usize],
        eps_step: f64,
    ) -> Result<()> {
        let grid = solver.linear().grid();
        let data: Vec<Field> = inputs.iter().map(|&i| self.basis_in[i].field(grid)).collect::<Result<_>>()?;
        let outs: Vec<Field> = self.basis_out.iter().map(|b| b.field(grid)).collect::<Result<_>>()?;
        let values = dn_derivative_multi(alpha, &data, &outs, eps_step, solver)?;
        for (j, value) in values.into_iter().enumerate() {
            self.deriv_pairings.push(DerivPairing {
                alpha: alpha.clone(),
                inputs: inputs.to_vec(),
                output: j,
                eps_step,
                value,
            });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.pairings.iter().flatten().all(|v| v.is_finite()) && self.deriv_pairings.iter().all(|d| d.value.is_finite())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let data: Self = serde_json::from_str(text)?;
        if data.pairings.len() != data.basis_in.len() || data.pairings.iter().any(|r| r.len() != data.basis_out.len()) {
            return Err(Error::InvalidParameter("pairing matrix does not match the bases".into()));
        }
        Ok(data)
    }
}

/// Mixed finite difference of `ε ↦ ⟨Λ_P(ε·f), g⟩` at zero.
pub fn dn_derivative(alpha: &MultiIndex, data: &[Field], g: &Field, eps_step: f64, solver: &NonlinearSolver) -> Result<f64> {
    Ok(dn_derivative_multi(alpha, data, std::slice::from_ref(g), eps_step, solver)?[0])
}

/// [`dn_derivative`] for several test functions sharing the same nonlinear solves.
///
/// The linear part of `u_ε` is superposed from `v_ℓ`, so its contribution to
/// the pairing is differentiated exactly.
pub fn dn_derivative_multi(
    alpha: &MultiIndex,
    data: &[Field],
    gs: &[Field],
    eps_step: f64,
    solver: &NonlinearSolver,
) -> Result<Vec<f64>> {
    let parts = linear_parts(alpha, data, solver)?;
    let q = solver.linear().q();
    let s = solver.nonlinearity().params().s;
    let p = solver.nonlinearity();
    let mut values: Vec<f64> = fd_with_parts(alpha, data, eps_step, solver, &parts, |u, correction| {
        let pu = eval_nonlinearity(u, p)?;
        let omega = u.grid().omega_mask();
        gs.iter()
            .map(|g| Ok(linear_form(correction, g, q, s)? + inner_product(&pu, g, omega)?))
            .collect()
    })?;
    if alpha.order() == 1 {
        let v = &parts[&alpha.support()[0]];
        for (val, g) in values.iter_mut().zip(gs) {
            *val += linear_form(v, g, q, s)?;
        }
    }
    Ok(values)
}

/// `∫(−Δ)^{s/2}w_α(−Δ)^{s/2}g + ∫_Ω q w_α g + ∫_Ω T_α g` from the cascade.
pub fn cascade_dn_derivative(state: &LinearizationState, alpha: &MultiIndex, g: &Field) -> Result<f64> {
    let w = state.w(alpha).ok_or_else(|| Error::MissingPrerequisite(alpha.to_string()))?;
    let t = state.t(alpha).ok_or_else(|| Error::MissingPrerequisite(alpha.to_string()))?;
    let s = state.nonlinearity().params().s;
    Ok(linear_form(w, g, state.q(), s)? + inner_product(t, g, g.grid().omega_mask())?)
}
