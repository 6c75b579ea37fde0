#![allow(dead_code)]

use std::f64::consts::PI;
use std::sync::Arc;

use nlfrac::dn_map::cosine_bump;
use nlfrac::linear_solver::LinearSolver;
use nlfrac::nonlinear_solver::{ContractionConfig, NonlinearSolver};
use nlfrac::{build_grid, Field, FracParams, GridSpec, MultiIndex, Nonlinearity, Region, RegionSpec};

pub fn grid_1d(n: usize) -> Arc<GridSpec> {
    let spec = RegionSpec::new(Region::interval(2.0, 4.0), Region::interval(0.5, 1.5), Region::interval(4.6, 5.6));
    build_grid(1, n, 2.0 * PI, &spec).unwrap()
}

pub fn grid_2d(n: usize) -> Arc<GridSpec> {
    let spec = RegionSpec::new(
        Region::Ball { center: vec![PI, PI], radius: 1.2 },
        Region::Box { lo: vec![0.4, 0.4], hi: vec![1.4, 5.8] },
        Region::Box { lo: vec![4.9, 0.4], hi: vec![5.9, 5.8] },
    );
    build_grid(2, n, 2.0 * PI, &spec).unwrap()
}

/// Smooth bump supported in Ω.
pub fn interior_bump(g: &Arc<GridSpec>, scale: f64) -> Field {
    let (lo, hi, c) = g.mask_bounds(g.omega_mask());
    let r = 0.5 * (hi[0] - lo[0]);
    cosine_bump(g, &c, r).scaled(scale).masked(g.omega_mask())
}

/// Bump in W1 centred at a fraction `t` across the window.
pub fn w1_bump(g: &Arc<GridSpec>, t: f64, amplitude: f64) -> Field {
    window_bump(g, g.mask(nlfrac::MaskKind::W1), t, amplitude)
}

pub fn w2_bump(g: &Arc<GridSpec>, t: f64, amplitude: f64) -> Field {
    window_bump(g, g.mask(nlfrac::MaskKind::W2), t, amplitude)
}

fn window_bump(g: &Arc<GridSpec>, mask: &[bool], t: f64, amplitude: f64) -> Field {
    let (lo, hi, c) = g.mask_bounds(mask);
    let mut center = c.clone();
    center[0] = lo[0] + t * (hi[0] - lo[0]);
    let r = 0.45 * (hi[0] - lo[0]);
    cosine_bump(g, &center, r).scaled(amplitude).masked(mask)
}

/// Nonlinearity with smooth coefficients at every level `1..K` and order `≤ m`.
pub fn smooth_nonlinearity(g: &Arc<GridSpec>, s: f64, m: usize, k_max: usize, scale: f64) -> Nonlinearity {
    let params = FracParams::new(s, m, k_max).unwrap();
    let mut p = Nonlinearity::new(params, g).unwrap();
    let base = interior_bump(g, 1.0);
    for k in 1..k_max {
        for sigma in p.sigmas() {
            let shift = 0.3 * k as f64 + 0.7 * sigma.order() as f64;
            let field = Field::from_fn(g, |x| scale * (1.0 + 0.5 * (x[0] + shift).sin())).hadamard(&base);
            p.set_coeff(k, sigma, field).unwrap();
        }
    }
    p
}

pub fn potential(g: &Arc<GridSpec>, scale: f64) -> Field {
    Field::from_fn(g, |x| scale * (1.0 + 0.3 * x[0].cos())).hadamard(&interior_bump(g, 1.0))
}

pub fn solver(q: &Field, p: &Nonlinearity) -> NonlinearSolver {
    let lin = LinearSolver::dense(p.params().s, q).unwrap();
    NonlinearSolver::new(lin, p.clone(), ContractionConfig { eps0: 1.0, ..ContractionConfig::default() }).unwrap()
}

pub fn binary_indices(k: usize) -> Vec<MultiIndex> {
    (1..(1usize << k))
        .map(|mask| MultiIndex::new((0..k).map(|i| ((mask >> i) & 1) as u32).collect()))
        .collect()
}

/// Random trigonometric polynomial with `modes` frequencies per axis.
pub fn random_trig(g: &Arc<GridSpec>, modes: i32, seed: u64) -> Field {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let dim = g.dim();
    let base = 2.0 * PI / g.box_length();
    let mut terms = Vec::new();
    for _ in 0..(2 * modes) {
        let k: Vec<f64> = (0..dim).map(|_| rng.gen_range(-modes..=modes) as f64 * base).collect();
        terms.push((k, rng.gen_range(-1.0..1.0), rng.gen_range(0.0..2.0 * PI)));
    }
    Field::from_fn(g, |x| {
        terms.iter().map(|(k, a, ph)| a * (k.iter().zip(x).map(|(ki, xi)| ki * xi).sum::<f64>() + ph).cos()).sum()
    })
}

/// Nonnegative random potential supported in Ω.
pub fn random_potential(g: &Arc<GridSpec>, seed: u64) -> Field {
    random_trig(g, 3, seed).map(|v| 1.0 + 0.5 * v.tanh()).hadamard(&interior_bump(g, 1.0))
}

/// Random smooth field supported in Ω.
pub fn random_interior(g: &Arc<GridSpec>, seed: u64) -> Field {
    random_trig(g, 4, seed).hadamard(&interior_bump(g, 1.0))
}

pub fn max_rel(a: &Field, b: &Field) -> f64 {
    (a - b).max_norm() / a.max_norm().max(b.max_norm()).max(f64::MIN_POSITIVE)
}
