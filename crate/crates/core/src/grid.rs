//! Periodic grid, node masks and sampled fields.

use std::ops::{Add, Mul, Neg, Sub};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::SpectralPlan;

pub const DEFAULT_BUFFER_NODES: usize = 4;

/// Axis-aligned open box or open ball in physical coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Region {
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
}

impl Region {
    pub fn interval(lo: f64, hi: f64) -> Self {
        Region::Box { lo: vec![lo], hi: vec![hi] }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Region::Box { lo, hi } => x
                .iter()
                .zip(lo.iter().zip(hi))
                .all(|(&xi, (&a, &b))| a < xi && xi < b),
            Region::Ball { center, radius } => {
                let r2: f64 = x.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
                r2 < radius * radius
            }
        }
    }

    fn dim(&self) -> usize {
        match self {
            Region::Box { lo, .. } => lo.len(),
            Region::Ball { center, .. } => center.len(),
        }
    }

    fn validate(&self, dim: usize, name: &str) -> Result<()> {
        if self.dim() != dim {
            return Err(Error::InvalidGrid(format!("{name} has dimension {} but grid has {dim}", self.dim())));
        }
        match self {
            Region::Box { lo, hi } => {
                if lo.len() != hi.len() || lo.iter().zip(hi).any(|(a, b)| !(a < b)) {
                    return Err(Error::InvalidGrid(format!("{name}: box bounds must satisfy lo < hi")));
                }
            }
            Region::Ball { radius, .. } => {
                if !(*radius > 0.0) {
                    return Err(Error::InvalidGrid(format!("{name}: ball radius must be positive")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub omega: Region,
    pub w1: Region,
    pub w2: Region,
    #[serde(default = "default_buffer")]
    pub buffer_nodes: usize,
    /// Minimum number of exterior nodes (Chebyshev distance) between a window and Ω.
    #[serde(default = "default_gap")]
    pub window_gap_nodes: usize,
}

fn default_buffer() -> usize {
    DEFAULT_BUFFER_NODES
}

fn default_gap() -> usize {
    1
}

impl RegionSpec {
    pub fn new(omega: Region, w1: Region, w2: Region) -> Self {
        Self { omega, w1, w2, buffer_nodes: DEFAULT_BUFFER_NODES, window_gap_nodes: 1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Full,
    Omega,
    Exterior,
    W1,
    W2,
}

/// Uniform periodic grid on `[0, L)^dim` with node masks.
#[derive(Debug)]
pub struct GridSpec {
    dim: usize,
    n: usize,
    length: f64,
    full_mask: Vec<bool>,
    omega_mask: Vec<bool>,
    exterior_mask: Vec<bool>,
    w1_mask: Vec<bool>,
    w2_mask: Vec<bool>,
    spectral: SpectralPlan,
}

impl PartialEq for GridSpec {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.n == other.n
            && self.length == other.length
            && self.omega_mask == other.omega_mask
            && self.w1_mask == other.w1_mask
            && self.w2_mask == other.w2_mask
    }
}

pub fn build_grid(dim: usize, points_per_dim: usize, box_length: f64, region: &RegionSpec) -> Result<Arc<GridSpec>> {
    GridSpec::new(dim, points_per_dim, box_length, region).map(Arc::new)
}

impl GridSpec {
    pub fn new(dim: usize, n: usize, length: f64, region: &RegionSpec) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(Error::InvalidGrid(format!("dim must be 1 or 2, got {dim}")));
        }
        if n < 8 || !n.is_power_of_two() {
            return Err(Error::InvalidGrid(format!("points_per_dim must be a power of two >= 8, got {n}")));
        }
        if !(length > 0.0 && length.is_finite()) {
            return Err(Error::InvalidGrid("box_length must be positive".into()));
        }
        region.omega.validate(dim, "omega")?;
        region.w1.validate(dim, "w1")?;
        region.w2.validate(dim, "w2")?;

        let total = n.pow(dim as u32);
        let h = length / n as f64;
        let mut omega_mask = vec![false; total];
        let mut w1_mask = vec![false; total];
        let mut w2_mask = vec![false; total];
        let mut x = vec![0.0; dim];
        for idx in 0..total {
            node_coords(dim, n, h, idx, &mut x);
            omega_mask[idx] = region.omega.contains(&x);
            w1_mask[idx] = region.w1.contains(&x);
            w2_mask[idx] = region.w2.contains(&x);
        }
        let exterior_mask: Vec<bool> = omega_mask.iter().map(|&o| !o).collect();

        if !exterior_mask.iter().any(|&e| e) {
            return Err(Error::ExteriorEmpty);
        }
        if !omega_mask.iter().any(|&o| o) {
            return Err(Error::InvalidGrid("omega contains no grid nodes".into()));
        }
        let buffer = region.buffer_nodes;
        for idx in (0..total).filter(|&i| omega_mask[i]) {
            let touches = multi_index_of(dim, n, idx)
                .iter()
                .any(|&i| i < buffer || i + buffer >= n);
            if touches {
                return Err(Error::InvalidGrid(format!(
                    "omega touches the periodic boundary (buffer of {buffer} nodes required)"
                )));
            }
        }
        for (name, mask) in [("w1", &w1_mask), ("w2", &w2_mask)] {
            if !mask.iter().any(|&w| w) {
                return Err(Error::InvalidGrid(format!("{name} contains no grid nodes")));
            }
            if mask.iter().zip(&omega_mask).any(|(&w, &o)| w && o) {
                return Err(Error::InvalidGrid(format!("{name} intersects omega")));
            }
            let gap = region.window_gap_nodes;
            if gap > 0 {
                for wi in (0..total).filter(|&i| mask[i]) {
                    let wm = multi_index_of(dim, n, wi);
                    let near = (0..total).filter(|&i| omega_mask[i]).any(|oi| {
                        let om = multi_index_of(dim, n, oi);
                        chebyshev_periodic(&wm, &om, n) <= gap
                    });
                    if near {
                        return Err(Error::InvalidGrid(format!(
                            "{name} is closer than {gap} node(s) to omega"
                        )));
                    }
                }
            }
        }

        Ok(Self {
            dim,
            n,
            length,
            full_mask: vec![true; total],
            omega_mask,
            exterior_mask,
            w1_mask,
            w2_mask,
            spectral: SpectralPlan::new(dim, n, length),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points_per_dim(&self) -> usize {
        self.n
    }

    pub fn box_length(&self) -> f64 {
        self.length
    }

    pub fn spacing(&self) -> f64 {
        self.length / self.n as f64
    }

    pub fn num_nodes(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    /// Quadrature weight `(L/N)^dim`.
    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }

    pub fn mask(&self, kind: MaskKind) -> &[bool] {
        match kind {
            MaskKind::Full => &self.full_mask,
            MaskKind::Omega => &self.omega_mask,
            MaskKind::Exterior => &self.exterior_mask,
            MaskKind::W1 => &self.w1_mask,
            MaskKind::W2 => &self.w2_mask,
        }
    }

    pub fn omega_mask(&self) -> &[bool] {
        &self.omega_mask
    }

    pub fn exterior_mask(&self) -> &[bool] {
        &self.exterior_mask
    }

    pub fn indices(&self, mask: &[bool]) -> Vec<usize> {
        mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }

    pub fn coords(&self, idx: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.dim];
        node_coords(self.dim, self.n, self.spacing(), idx, &mut x);
        x
    }

    pub fn node_multi_index(&self, idx: usize) -> Vec<usize> {
        multi_index_of(self.dim, self.n, idx)
    }

    /// Minimum-image displacement `x - c` on the periodic box.
    pub fn periodic_displacement(&self, x: &[f64], c: &[f64]) -> Vec<f64> {
        let l = self.length;
        x.iter()
            .zip(c)
            .map(|(&a, &b)| {
                let mut d = a - b;
                d -= l * (d / l).round();
                d
            })
            .collect()
    }

    pub fn spectral(&self) -> &SpectralPlan {
        &self.spectral
    }

    /// Centroid and per-axis extent of the nodes in `mask`.
    pub fn mask_bounds(&self, mask: &[bool]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut lo = vec![f64::INFINITY; self.dim];
        let mut hi = vec![f64::NEG_INFINITY; self.dim];
        for idx in self.indices(mask) {
            for (d, x) in self.coords(idx).into_iter().enumerate() {
                lo[d] = lo[d].min(x);
                hi[d] = hi[d].max(x);
            }
        }
        let center = lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect();
        (lo, hi, center)
    }
}

fn node_coords(dim: usize, n: usize, h: f64, idx: usize, out: &mut [f64]) {
    match dim {
        1 => out[0] = idx as f64 * h,
        _ => {
            out[0] = (idx / n) as f64 * h;
            out[1] = (idx % n) as f64 * h;
        }
    }
}

fn multi_index_of(dim: usize, n: usize, idx: usize) -> Vec<usize> {
    match dim {
        1 => vec![idx],
        _ => vec![idx / n, idx % n],
    }
}

fn chebyshev_periodic(a: &[usize], b: &[usize], n: usize) -> usize {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.abs_diff(y);
            d.min(n - d)
        })
        .max()
        .unwrap_or(0)
}

/// Real scalar sampled at every grid node.
#[derive(Clone, Debug)]
pub struct Field {
    grid: Arc<GridSpec>,
    values: Vec<f64>,
}

impl Field {
    pub fn zeros(grid: &Arc<GridSpec>) -> Self {
        Self { grid: grid.clone(), values: vec![0.0; grid.num_nodes()] }
    }

    pub fn constant(grid: &Arc<GridSpec>, c: f64) -> Self {
        Self { grid: grid.clone(), values: vec![c; grid.num_nodes()] }
    }

    pub fn from_values(grid: &Arc<GridSpec>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.num_nodes() {
            return Err(Error::InvalidParameter(format!(
                "expected {} values, got {}",
                grid.num_nodes(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("field values must be finite".into()));
        }
        Ok(Self { grid: grid.clone(), values })
    }

    pub fn from_fn(grid: &Arc<GridSpec>, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = (0..grid.num_nodes()).map(|i| f(&grid.coords(i))).collect();
        Self { grid: grid.clone(), values }
    }

    pub fn indicator(grid: &Arc<GridSpec>, node: usize) -> Self {
        let mut f = Self::zeros(grid);
        f.values[node] = 1.0;
        f
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn same_grid(&self, other: &Field) -> bool {
        Arc::ptr_eq(&self.grid, &other.grid) || *self.grid == *other.grid
    }

    pub fn check_grid(&self, other: &Field) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }

    pub fn with_values(&self, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), self.values.len());
        Self { grid: self.grid.clone(), values }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        self.with_values(self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Self {
        assert!(self.same_grid(other), "field grid mismatch");
        self.with_values(self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect())
    }

    /// Pointwise product.
    pub fn hadamard(&self, other: &Field) -> Self {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scaled(&self, c: f64) -> Self {
        self.map(|v| c * v)
    }

    /// `self += c · other`
    pub fn axpy(&mut self, c: f64, other: &Field) {
        assert!(self.same_grid(other), "field grid mismatch");
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += c * b;
        }
    }

    /// Copy with every node outside `mask` set to zero.
    pub fn masked(&self, mask: &[bool]) -> Self {
        self.with_values(self.values.iter().zip(mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect())
    }

    pub fn max_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_norm_on(&self, mask: &[bool]) -> f64 {
        self.values
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .fold(0.0, |acc, (v, _)| acc.max(v.abs()))
    }

    pub fn l2_norm_on(&self, mask: &[bool]) -> f64 {
        let s: f64 = self.values.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| v * v).sum();
        (s * self.grid.cell_volume()).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn vanishes_outside(&self, mask: &[bool]) -> bool {
        self.values.iter().zip(mask).all(|(&v, &m)| m || v == 0.0)
    }

    pub fn gather(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().map(|&i| self.values[i]).collect()
    }

    pub fn scatter(grid: &Arc<GridSpec>, idx: &[usize], vals: &[f64]) -> Self {
        let mut f = Self::zeros(grid);
        for (&i, &v) in idx.iter().zip(vals) {
            f.values[i] = v;
        }
        f
    }
}

impl<'a> Add<&'a Field> for &'a Field {
    type Output = Field;
    fn add(self, rhs: &'a Field) -> Field {
        self.zip_map(rhs, |a, b| a + b)
    }
}

impl<'a> Sub<&'a Field> for &'a Field {
    type Output = Field;
    fn sub(self, rhs: &'a Field) -> Field {
        self.zip_map(rhs, |a, b| a - b)
    }
}

impl Mul<f64> for &Field {
    type Output = Field;
    fn mul(self, rhs: f64) -> Field {
        self.scaled(rhs)
    }
}

impl Neg for &Field {
    type Output = Field;
    fn neg(self) -> Field {
        self.scaled(-1.0)
    }
}

/// `(L/N)^dim · Σ_{mask} u·v`
pub fn inner_product(u: &Field, v: &Field, mask: &[bool]) -> Result<f64> {
    u.check_grid(v)?;
    if mask.len() != u.values.len() {
        return Err(Error::GridMismatch);
    }
    let s: f64 = u
        .values
        .iter()
        .zip(&v.values)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((a, b), _)| a * b)
        .sum();
    Ok(s * u.grid.cell_volume())
}

/// Discrete `H^a` norm: L² norm of the multiplier `⟨ξ⟩^a` applied to `u`.
pub fn sobolev_norm(u: &Field, a: f64) -> f64 {
    let grid = u.grid();
    let spectral = grid.spectral();
    let hat = spectral.forward(u.values());
    let mut sum = 0.0;
    spectral.for_each_mode(|idx, _, xi| {
        let xi2: f64 = xi.iter().map(|x| x * x).sum();
        let weight = (1.0 + xi2).powf(a);
        sum += weight * hat[idx].norm_sqr();
    });
    // Parseval on the periodic grid: Σ|u|² = N^{-dim} Σ|û|².
    let nodes = grid.num_nodes() as f64;
    (sum / nodes * grid.cell_volume()).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn grid_1d(n: usize) -> Arc<GridSpec> {
        let spec = RegionSpec::new(Region::interval(2.0, 4.0), Region::interval(0.5, 1.5), Region::interval(4.6, 5.6));
        build_grid(1, n, 2.0 * PI, &spec).unwrap()
    }

    #[test]
    fn interval_mask_matches_definition() {
        let g = grid_1d(64);
        for i in 0..64 {
            let x = i as f64 * 2.0 * PI / 64.0;
            assert_eq!(g.omega_mask()[i], 2.0 < x && x < 4.0);
            assert_ne!(g.omega_mask()[i], g.exterior_mask()[i]);
        }
    }

    #[test]
    fn whole_box_is_rejected() {
        let spec = RegionSpec::new(Region::interval(-1.0, 10.0), Region::interval(0.5, 1.5), Region::interval(4.6, 5.6));
        assert!(matches!(build_grid(1, 64, 2.0 * PI, &spec), Err(Error::ExteriorEmpty)));
    }

    #[test]
    fn omega_touching_wrap_is_rejected() {
        let spec = RegionSpec::new(Region::interval(0.01, 2.0), Region::interval(3.0, 4.0), Region::interval(4.6, 5.6));
        assert!(matches!(build_grid(1, 64, 2.0 * PI, &spec), Err(Error::InvalidGrid(_))));
    }

    #[test]
    fn window_overlapping_omega_is_rejected() {
        let spec = RegionSpec::new(Region::interval(2.0, 4.0), Region::interval(3.5, 4.5), Region::interval(4.6, 5.6));
        assert!(build_grid(1, 64, 2.0 * PI, &spec).is_err());
    }

    #[test]
    fn ball_count_matches_node_scan() {
        let c = [3.0, 3.2];
        let r = 1.1;
        let spec = RegionSpec::new(
            Region::Ball { center: c.to_vec(), radius: r },
            Region::Box { lo: vec![0.4, 0.4], hi: vec![1.2, 1.2] },
            Region::Box { lo: vec![5.0, 5.0], hi: vec![5.8, 5.8] },
        );
        let g = build_grid(2, 32, 2.0 * PI, &spec).unwrap();
        let h = 2.0 * PI / 32.0;
        let mut count = 0;
        for i in 0..32 {
            for j in 0..32 {
                let dx = i as f64 * h - c[0];
                let dy = j as f64 * h - c[1];
                if dx * dx + dy * dy < r * r {
                    count += 1;
                }
            }
        }
        assert_eq!(g.indices(g.omega_mask()).len(), count);
    }

    #[test]
    fn quadrature_of_constant_and_alternating() {
        let g = grid_1d(64);
        let one = Field::constant(&g, 1.0);
        let ip = inner_product(&one, &one, g.mask(MaskKind::Full)).unwrap();
        assert!((ip - 2.0 * PI).abs() < 1e-14);
        let alt = Field::from_values(&g, (0..64).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect()).unwrap();
        assert_eq!(inner_product(&alt, &one, g.mask(MaskKind::Full)).unwrap(), 0.0);
    }

    #[test]
    fn sobolev_norm_special_cases() {
        let g = grid_1d(64);
        assert_eq!(sobolev_norm(&Field::zeros(&g), 1.5), 0.0);
        let u = Field::from_fn(&g, |x| (x[0]).sin() + 0.3 * (5.0 * x[0]).cos());
        let l2 = inner_product(&u, &u, g.mask(MaskKind::Full)).unwrap().sqrt();
        assert!((sobolev_norm(&u, 0.0) - l2).abs() < 1e-13 * l2);
        let k = 3.0;
        let mode = Field::from_fn(&g, |x| (k * x[0]).cos());
        let l2 = mode.l2_norm_on(g.mask(MaskKind::Full));
        let expect = (1.0 + k * k) * l2;
        assert!((sobolev_norm(&mode, 2.0) - expect).abs() < 1e-12 * expect);
    }
}
