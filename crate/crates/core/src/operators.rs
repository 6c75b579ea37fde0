//! Spectral fractional Laplacian, local derivatives, the nonlinearity **P**
//! and the bilinear form `B_P`.

use std::collections::BTreeMap;
use std::sync::Arc;

use log::warn;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{inner_product, Field, GridSpec, MaskKind};
use crate::multi_index::{indices_up_to, MultiIndex};

const INTEGER_TOL: f64 = 1e-12;
const NEGATIVE_Q_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FracParams {
    pub s: f64,
    /// Largest derivative order appearing in `P_k(x, D)`.
    pub m: usize,
    /// One more than the top degree of the nonlinearity.
    pub k_max: usize,
}

impl FracParams {
    pub fn new(s: f64, m: usize, k_max: usize) -> Result<Self> {
        let p = Self { s, m, k_max };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0) || !self.s.is_finite() {
            return Err(Error::InvalidParameter(format!("s = {} must be positive", self.s)));
        }
        if (self.s - self.s.round()).abs() < INTEGER_TOL {
            return Err(Error::InvalidParameter(format!("s = {} must not be an integer", self.s)));
        }
        if self.k_max < 2 {
            return Err(Error::InvalidParameter(format!("K = {} must be at least 2", self.k_max)));
        }
        Ok(())
    }

    /// `⌊s⌋ > max(m, dim/2)`; logs a warning when it fails.
    pub fn standing_assumption(&self, dim: usize) -> bool {
        let fl = self.s.floor();
        let ok = fl > self.m as f64 && fl > dim as f64 / 2.0;
        if !ok {
            warn!(
                "floor(s) = {fl} does not exceed max(m = {}, dim/2 = {}); continuing in the discrete model",
                self.m,
                dim as f64 / 2.0
            );
        }
        ok
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeScheme {
    #[default]
    Spectral,
    CentralDifference,
}

/// Coefficients `a_{σ,k}` of `P(u) = Σ_k u^k P_k(x, D) u`.
#[derive(Clone, Debug)]
pub struct Nonlinearity {
    params: FracParams,
    grid: Arc<GridSpec>,
    coeffs: BTreeMap<(usize, MultiIndex), Field>,
    scheme: DerivativeScheme,
}

impl Nonlinearity {
    pub fn new(params: FracParams, grid: &Arc<GridSpec>) -> Result<Self> {
        params.validate()?;
        params.standing_assumption(grid.dim());
        Ok(Self { params, grid: grid.clone(), coeffs: BTreeMap::new(), scheme: DerivativeScheme::Spectral })
    }

    pub fn with_scheme(mut self, scheme: DerivativeScheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn params(&self) -> &FracParams {
        &self.params
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    pub fn scheme(&self) -> DerivativeScheme {
        self.scheme
    }

    pub fn set_coeff(&mut self, k: usize, sigma: MultiIndex, field: Field) -> Result<()> {
        if k == 0 || k >= self.params.k_max {
            return Err(Error::OutOfRange(format!("k = {k} outside 1..={}", self.params.k_max - 1)));
        }
        if sigma.len() != self.grid.dim() || sigma.order() > self.params.m {
            return Err(Error::OutOfRange(format!("sigma = {sigma} not admissible for m = {}", self.params.m)));
        }
        if !Arc::ptr_eq(field.grid(), &self.grid) && **field.grid() != *self.grid {
            return Err(Error::GridMismatch);
        }
        if !field.is_finite() {
            return Err(Error::InvalidParameter("coefficient field is not finite".into()));
        }
        if !field.vanishes_outside(self.grid.omega_mask()) {
            return Err(Error::InvalidParameter(format!("a_{{{sigma},{k}}} must vanish outside the domain")));
        }
        self.coeffs.insert((k, sigma), field);
        Ok(())
    }

    pub fn coeff(&self, k: usize, sigma: &MultiIndex) -> Option<&Field> {
        self.coeffs.get(&(k, sigma.clone()))
    }

    pub fn coeffs(&self) -> impl Iterator<Item = (&(usize, MultiIndex), &Field)> {
        self.coeffs.iter()
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.values().all(|f| f.max_norm() == 0.0)
    }

    /// Every admissible σ with `|σ| ≤ m`, graded by order.
    pub fn sigmas(&self) -> Vec<MultiIndex> {
        indices_up_to(self.grid.dim(), self.params.m)
    }

    /// `C' = Σ_k Σ_σ ‖a_{σ,k}‖_∞`
    pub fn coefficient_sum(&self) -> f64 {
        self.coeffs.values().map(Field::max_norm).sum()
    }

    /// Same parameters, no coefficients.
    pub fn zeroed(&self) -> Self {
        Self { params: self.params, grid: self.grid.clone(), coeffs: BTreeMap::new(), scheme: self.scheme }
    }

    /// Keeps only the levels `k ≤ max_k`.
    pub fn truncated(&self, max_k: usize) -> Self {
        let mut out = self.zeroed();
        out.coeffs = self.coeffs.iter().filter(|((k, _), _)| *k <= max_k).map(|(a, b)| (a.clone(), b.clone())).collect();
        out
    }

    /// Coefficient fields of one level keyed by σ (zero when absent).
    pub fn level(&self, k: usize) -> BTreeMap<MultiIndex, Field> {
        self.sigmas()
            .into_iter()
            .map(|s| {
                let f = self.coeff(k, &s).cloned().unwrap_or_else(|| Field::zeros(&self.grid));
                (s, f)
            })
            .collect()
    }
}

/// `(−Δ)^s u` with symbol `|ξ|^{2s}` and the zero mode annihilated.
pub fn frac_laplacian(u: &Field, s: f64) -> Result<Field> {
    let spectral = u.grid().spectral();
    let values = spectral.apply_multiplier(u.values(), |_, xi| {
        let r2: f64 = xi.iter().map(|x| x * x).sum();
        if r2 == 0.0 {
            Complex64::new(0.0, 0.0)
        } else {
            Complex64::new(r2.powf(s), 0.0)
        }
    })?;
    Ok(u.with_values(values))
}

/// `D^σ u` via the multiplier `(iξ)^σ`; the Nyquist mode is dropped for odd orders.
pub fn partial_derivative(u: &Field, sigma: &MultiIndex) -> Result<Field> {
    partial_derivative_with(u, sigma, DerivativeScheme::Spectral)
}

pub fn partial_derivative_with(u: &Field, sigma: &MultiIndex, scheme: DerivativeScheme) -> Result<Field> {
    let grid = u.grid();
    if sigma.len() != grid.dim() {
        return Err(Error::InvalidParameter(format!("sigma {sigma} has wrong length for dim {}", grid.dim())));
    }
    if sigma.is_zero() {
        return Ok(u.clone());
    }
    match scheme {
        DerivativeScheme::Spectral => {
            let spectral = grid.spectral();
            let orders = sigma.entries();
            let values = spectral.apply_multiplier(u.values(), |k, xi| {
                let mut z = Complex64::new(1.0, 0.0);
                for (axis, &order) in orders.iter().enumerate() {
                    if order == 0 {
                        continue;
                    }
                    if order % 2 == 1 && spectral.is_nyquist(k[axis]) {
                        return Complex64::new(0.0, 0.0);
                    }
                    z *= Complex64::new(0.0, xi[axis]).powu(order);
                }
                z
            })?;
            Ok(u.with_values(values))
        }
        DerivativeScheme::CentralDifference => {
            let mut out = u.clone();
            for (axis, &order) in sigma.entries().iter().enumerate() {
                for _ in 0..order {
                    out = central_difference(&out, axis);
                }
            }
            Ok(out)
        }
    }
}

fn central_difference(u: &Field, axis: usize) -> Field {
    let grid = u.grid();
    let n = grid.points_per_dim();
    let h = grid.spacing();
    let stride = if grid.dim() == 2 && axis == 0 { n } else { 1 };
    let vals = u.values();
    let out = (0..vals.len())
        .map(|idx| {
            let pos = (idx / stride) % n;
            let base = idx - pos * stride;
            let fwd = base + ((pos + 1) % n) * stride;
            let bwd = base + ((pos + n - 1) % n) * stride;
            (vals[fwd] - vals[bwd]) / (2.0 * h)
        })
        .collect();
    u.with_values(out)
}

/// Derivatives `D^σ u` for every σ the nonlinearity uses.
fn derivative_table(u: &Field, p: &Nonlinearity) -> Result<BTreeMap<MultiIndex, Field>> {
    let mut table = BTreeMap::new();
    for ((_, sigma), _) in p.coeffs() {
        if !table.contains_key(sigma) {
            table.insert(sigma.clone(), partial_derivative_with(u, sigma, p.scheme())?);
        }
    }
    Ok(table)
}

fn pk_from_table(k: usize, p: &Nonlinearity, table: &BTreeMap<MultiIndex, Field>) -> Field {
    let mut out = Field::zeros(p.grid());
    for ((kk, sigma), a) in p.coeffs() {
        if *kk == k {
            let d = &table[sigma];
            for ((o, &ai), &di) in out.values_mut().iter_mut().zip(a.values()).zip(d.values()) {
                *o += ai * di;
            }
        }
    }
    out
}

/// `P_k(x, D) u = Σ_σ a_{σ,k} D^σ u`
pub fn apply_pk(u: &Field, k: usize, p: &Nonlinearity) -> Result<Field> {
    if k == 0 || k >= p.params().k_max {
        return Err(Error::OutOfRange(format!("k = {k} outside 1..={}", p.params().k_max - 1)));
    }
    if !Arc::ptr_eq(u.grid(), p.grid()) && **u.grid() != **p.grid() {
        return Err(Error::GridMismatch);
    }
    let mut table = BTreeMap::new();
    for ((kk, sigma), _) in p.coeffs() {
        if *kk == k && !table.contains_key(sigma) {
            table.insert(sigma.clone(), partial_derivative_with(u, sigma, p.scheme())?);
        }
    }
    Ok(pk_from_table(k, p, &table))
}

/// `P(u) = Σ_{k=1}^{K-1} u^k P_k(x, D) u`
pub fn eval_nonlinearity(u: &Field, p: &Nonlinearity) -> Result<Field> {
    if !Arc::ptr_eq(u.grid(), p.grid()) && **u.grid() != **p.grid() {
        return Err(Error::GridMismatch);
    }
    let table = derivative_table(u, p)?;
    let mut out = Field::zeros(p.grid());
    for k in 1..p.params().k_max {
        let pk = pk_from_table(k, p, &table);
        for ((o, &ui), &pi) in out.values_mut().iter_mut().zip(u.values()).zip(pk.values()) {
            *o += ui.powi(k as i32) * pi;
        }
    }
    Ok(out)
}

/// `∫(−Δ)^{s/2}u (−Δ)^{s/2}v + ∫_Ω q u v`
pub fn linear_form(u: &Field, v: &Field, q: &Field, s: f64) -> Result<f64> {
    u.check_grid(v)?;
    u.check_grid(q)?;
    let grid = u.grid();
    let hu = frac_laplacian(u, s / 2.0)?;
    let hv = frac_laplacian(v, s / 2.0)?;
    let quad = inner_product(&hu, &hv, grid.mask(MaskKind::Full))?;
    let qu = q.hadamard(u);
    Ok(quad + inner_product(&qu, v, grid.omega_mask())?)
}

/// `B_P(u, v) = ∫(−Δ)^{s/2}u (−Δ)^{s/2}v + ∫_Ω q u v + ∫_Ω P(u) v`
pub fn bilinear_form(u: &Field, v: &Field, q: &Field, p: &Nonlinearity) -> Result<f64> {
    let grid = u.grid();
    if let Some((node, &value)) = q
        .values()
        .iter()
        .enumerate()
        .find(|(i, &x)| grid.omega_mask()[*i] && x < -NEGATIVE_Q_TOL)
    {
        warn!("potential is negative (q = {value:e}) at node {node}");
    }
    let lin = linear_form(u, v, q, p.params().s)?;
    if p.is_zero() {
        return Ok(lin);
    }
    let pu = eval_nonlinearity(u, p)?;
    Ok(lin + inner_product(&pu, v, grid.omega_mask())?)
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

    #[test]
    fn params_reject_integer_s() {
        assert!(FracParams::new(2.0, 0, 2).is_err());
        assert!(FracParams::new(1.5, 0, 1).is_err());
        assert!(FracParams::new(-0.5, 0, 2).is_err());
        let p = FracParams::new(2.3, 1, 3).unwrap();
        assert!(p.standing_assumption(1));
        assert!(!FracParams::new(1.5, 1, 2).unwrap().standing_assumption(1));
    }

    #[test]
    fn eigenmode_and_constant() {
        let g = grid(64);
        let k = 3.0;
        let u = Field::from_fn(&g, |x| (k * x[0]).cos());
        let out = frac_laplacian(&u, 1.5).unwrap();
        for (a, b) in out.values().iter().zip(u.values()) {
            assert!((a - k.powi(3) * b).abs() < 1e-11 * k.powi(3));
        }
        let c = frac_laplacian(&Field::constant(&g, 2.5), 1.3).unwrap();
        assert!(c.max_norm() < 1e-14);
    }

    #[test]
    fn derivative_of_sine() {
        let g = grid(32);
        let u = Field::from_fn(&g, |x| (2.0 * x[0]).sin());
        let d = partial_derivative(&u, &MultiIndex::new(vec![1])).unwrap();
        for i in 0..g.num_nodes() {
            let x = g.coords(i)[0];
            assert!((d.values()[i] - 2.0 * (2.0 * x).cos()).abs() < 1e-11);
        }
        let same = partial_derivative(&u, &MultiIndex::new(vec![0])).unwrap();
        assert_eq!(same.values(), u.values());
    }

    #[test]
    fn central_difference_is_second_order() {
        let err = |n: usize| {
            let g = grid(n);
            let u = Field::from_fn(&g, |x| x[0].sin());
            let d = partial_derivative_with(&u, &MultiIndex::new(vec![1]), DerivativeScheme::CentralDifference).unwrap();
            (0..g.num_nodes()).map(|i| (d.values()[i] - g.coords(i)[0].cos()).abs()).fold(0.0, f64::max)
        };
        let ratio = err(32) / err(64);
        assert!((ratio - 4.0).abs() < 0.1, "ratio {ratio}");
    }

    #[test]
    fn multiplication_operator() {
        let g = grid(64);
        let params = FracParams::new(1.5, 0, 2).unwrap();
        let mut p = Nonlinearity::new(params, &g).unwrap();
        let omega = Field::constant(&g, 1.0).masked(g.omega_mask());
        p.set_coeff(1, MultiIndex::new(vec![0]), omega).unwrap();
        let u = Field::from_fn(&g, |x| x[0].sin());
        let out = apply_pk(&u, 1, &p).unwrap();
        assert_eq!(out.values(), u.masked(g.omega_mask()).values());
        assert!(apply_pk(&u, 2, &p).is_err());
        let pu = eval_nonlinearity(&u, &p).unwrap();
        let sq = u.hadamard(&u).masked(g.omega_mask());
        assert!((&pu - &sq).max_norm() < 1e-15);
    }

    #[test]
    fn coefficient_validation() {
        let g = grid(32);
        let params = FracParams::new(2.5, 1, 3).unwrap();
        let mut p = Nonlinearity::new(params, &g).unwrap();
        let full = Field::constant(&g, 1.0);
        assert!(p.set_coeff(1, MultiIndex::new(vec![0]), full.clone()).is_err());
        let inside = full.masked(g.omega_mask());
        assert!(p.set_coeff(3, MultiIndex::new(vec![0]), inside.clone()).is_err());
        assert!(p.set_coeff(1, MultiIndex::new(vec![2]), inside.clone()).is_err());
        assert!(p.set_coeff(2, MultiIndex::new(vec![1]), inside).is_ok());
    }

    #[test]
    fn bilinear_eigenmode() {
        let g = grid(64);
        let params = FracParams::new(1.7, 0, 2).unwrap();
        let p = Nonlinearity::new(params, &g).unwrap();
        let u = Field::from_fn(&g, |x| (4.0 * x[0]).sin());
        let q = Field::zeros(&g);
        let b = bilinear_form(&u, &u, &q, &p).unwrap();
        let norm2 = inner_product(&u, &u, g.mask(MaskKind::Full)).unwrap();
        let expected = 4f64.powf(2.0 * 1.7) * norm2;
        assert!((b - expected).abs() < 1e-11 * expected);
    }
}
