//! Experiment configuration read from a TOML document.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nlfrac::dn_map::cosine_bump;
use nlfrac::linear_solver::{CgOptions, LinearSolver};
use nlfrac::nonlinear_solver::{ContractionConfig, NonlinearSolver};
use nlfrac::recovery::{RecoveryConfig, RecoveryMode};
use nlfrac::runge::{Penalty, RungeOptions};
use nlfrac::{build_grid, Field, FracParams, GridSpec, MaskKind, MultiIndex, Nonlinearity, Region, RegionSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub grid: GridSection,
    pub params: ParamsSection,
    pub potential: PotentialSection,
    pub nonlinearity: NonlinearitySection,
    pub solver: SolverSection,
    pub data: DataSection,
    pub linearization: LinearizationSection,
    pub dn: DnSection,
    pub runge: RungeSection,
    pub recovery: RecoverySection,
    pub output: OutputSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub dim: usize,
    pub n: usize,
    pub length: f64,
    /// Defaults depend on `dim`.
    pub regions: Option<RegionSpec>,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { dim: 1, n: 64, length: 2.0 * PI, regions: None }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamsSection {
    pub s: f64,
    pub m: usize,
    pub k: usize,
}

impl Default for ParamsSection {
    fn default() -> Self {
        Self { s: 1.5, m: 1, k: 2 }
    }
}

/// Analytic or tabulated coefficient field, always cut to Ω.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    /// `amplitude·b(x)` with `b` the cosine bump filling Ω.
    Bump { amplitude: f64 },
    /// `amplitude·(1 + modulation·sin(frequency·x₁ + shift))·b(x)`
    SineBump {
        amplitude: f64,
        #[serde(default = "half")]
        modulation: f64,
        #[serde(default = "one")]
        frequency: f64,
        #[serde(default)]
        shift: f64,
    },
    /// `amplitude·Σ c_i (x₁ − c)^i·b(x)` with `c` the centre of Ω.
    PolyBump { amplitude: f64, coefficients: Vec<f64> },
    /// Node values from the last column of a CSV file in node order.
    Csv { path: PathBuf },
}

fn half() -> f64 {
    0.5
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PotentialSection {
    pub field: Shape,
}

impl Default for PotentialSection {
    fn default() -> Self {
        Self { field: Shape::SineBump { amplitude: 1.0, modulation: 0.3, frequency: 1.0, shift: PI / 2.0 } }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientSpec {
    pub k: usize,
    pub sigma: Vec<u32>,
    pub field: Shape,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NonlinearitySection {
    /// Amplitude of the default family, used when `coefficients` is absent.
    pub scale: f64,
    pub coefficients: Option<Vec<CoefficientSpec>>,
}

impl Default for NonlinearitySection {
    fn default() -> Self {
        Self { scale: 1.0, coefficients: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Auto,
    Dense,
    Iterative,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub backend: Backend,
    pub delta: f64,
    pub eps0: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub cg_tol: f64,
    pub cg_max: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self { backend: Backend::Auto, delta: 0.1, eps0: 1.0, tol: 1e-12, max_iter: 200, cg_tol: 1e-12, cg_max: 20_000 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub window: String,
    pub amplitude: f64,
    /// Bump centres as fractions across the window; defaults to `K` evenly spaced bumps.
    pub fractions: Option<Vec<f64>>,
    /// Bump radius as a fraction of the window width.
    pub radius: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { window: "w1".into(), amplitude: 0.5, fractions: None, radius: 0.45 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearizationSection {
    pub eps_steps: Vec<f64>,
    /// Per-slot weights of `ε = t·direction`; defaults to `1 − 0.2ℓ`.
    pub direction: Option<Vec<f64>>,
    pub scale_start: f64,
    pub scale_ratio: f64,
    pub scale_count: usize,
}

impl Default for LinearizationSection {
    fn default() -> Self {
        Self { eps_steps: vec![4e-3, 2e-3, 1e-3], direction: None, scale_start: 0.8, scale_ratio: 2.0, scale_count: 5 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DnSection {
    pub count_in: usize,
    pub count_out: usize,
    pub amplitude: f64,
    /// Largest `|α|` for which derivative pairings over the leading inputs are recorded.
    pub derivative_order: usize,
    pub eps_step: f64,
}

impl Default for DnSection {
    fn default() -> Self {
        Self { count_in: 3, count_out: 3, amplitude: 0.5, derivative_order: 2, eps_step: 1e-3 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RungeSection {
    pub window: String,
    pub target: Shape,
    pub lambdas: Vec<f64>,
    pub discrepancy: f64,
    pub lambda: f64,
    pub cg_tol: f64,
    pub cg_max: usize,
    pub penalty: Penalty,
}

impl RungeSection {
    pub fn options(&self) -> RungeOptions {
        RungeOptions { lambda: self.lambda, cg_tol: self.cg_tol, cg_max: self.cg_max, penalty: self.penalty }
    }
}

impl Default for RungeSection {
    fn default() -> Self {
        Self {
            window: "w2".into(),
            target: Shape::Bump { amplitude: 1.0 },
            lambdas: (2..=10).map(|e| 10f64.powi(-e)).collect(),
            discrepancy: 0.1,
            lambda: 1e-8,
            cg_tol: 1e-10,
            cg_max: 10_000,
            penalty: Penalty::L2,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RecoverySection {
    pub mode: RecoveryMode,
    #[serde(flatten)]
    pub config: RecoveryConfig,
}

impl Default for RecoverySection {
    fn default() -> Self {
        Self { mode: RecoveryMode::Oracle, config: RecoveryConfig::default() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |shape: &mut Shape| {
            if let Shape::Csv { path } = shape {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.potential.field);
        fix(&mut self.runge.target);
        if let Some(list) = self.nonlinearity.coefficients.as_mut() {
            list.iter_mut().for_each(|c| fix(&mut c.field));
        }
    }

    /// SHA-256 of the canonical JSON rendering of the resolved configuration, excluding the output location.
    pub fn hash(&self) -> Result<String, CliError> {
        let experiment = Self { output: OutputSection::default(), ..self.clone() };
        let text = serde_json::to_string(&experiment).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }

    pub fn grid(&self) -> Result<Arc<GridSpec>, CliError> {
        let g = &self.grid;
        let regions = match &g.regions {
            Some(r) => r.clone(),
            None => default_regions(g.dim, g.length)?,
        };
        build_grid(g.dim, g.n, g.length, &regions).map_err(config_error)
    }

    pub fn params(&self) -> Result<FracParams, CliError> {
        FracParams::new(self.params.s, self.params.m, self.params.k).map_err(config_error)
    }

    pub fn potential(&self, grid: &Arc<GridSpec>) -> Result<Field, CliError> {
        shape_field(grid, &self.potential.field)
    }

    pub fn nonlinearity(&self, grid: &Arc<GridSpec>) -> Result<Nonlinearity, CliError> {
        let params = self.params()?;
        let mut p = Nonlinearity::new(params, grid).map_err(config_error)?;
        match &self.nonlinearity.coefficients {
            None => {
                for k in 1..params.k_max {
                    for sigma in p.sigmas() {
                        let shape = Shape::SineBump {
                            amplitude: self.nonlinearity.scale,
                            modulation: 0.5,
                            frequency: 1.0,
                            shift: 0.3 * k as f64 + 0.7 * sigma.order() as f64,
                        };
                        p.set_coeff(k, sigma, shape_field(grid, &shape)?).map_err(config_error)?;
                    }
                }
            }
            Some(list) => {
                for c in list {
                    let field = shape_field(grid, &c.field)?;
                    p.set_coeff(c.k, MultiIndex::new(c.sigma.clone()), field).map_err(config_error)?;
                }
            }
        }
        Ok(p)
    }

    pub fn contraction(&self) -> ContractionConfig {
        let s = &self.solver;
        ContractionConfig { delta: s.delta, eps0: s.eps0, tol: s.tol, max_iter: s.max_iter }
    }

    pub fn linear_solver(&self, q: &Field) -> Result<LinearSolver, CliError> {
        let s = self.params.s;
        let cg = CgOptions { tol: self.solver.cg_tol, max_iter: self.solver.cg_max, ..CgOptions::default() };
        let solver = match self.solver.backend {
            Backend::Dense => LinearSolver::dense(s, q),
            Backend::Iterative => LinearSolver::iterative(s, q, cg),
            Backend::Auto => LinearSolver::dense(s, q).or_else(|e| match e {
                nlfrac::Error::SizeCap(_) => LinearSolver::iterative(s, q, cg),
                other => Err(other),
            }),
        };
        solver.map_err(config_error)
    }

    /// Grid, potential, nonlinearity and the nonlinear solver they define.
    pub fn model(&self) -> Result<Model, CliError> {
        let grid = self.grid()?;
        let q = self.potential(&grid)?;
        let p = self.nonlinearity(&grid)?;
        let solver = NonlinearSolver::new(self.linear_solver(&q)?, p.clone(), self.contraction()).map_err(config_error)?;
        Ok(Model { grid, q, p, solver })
    }

    /// The exterior data bumps of the `[data]` section, one per slot.
    pub fn data_fields(&self, grid: &Arc<GridSpec>, count: usize) -> Result<Vec<Field>, CliError> {
        let mask = grid.mask(window_kind(&self.data.window)?);
        let fractions = match &self.data.fractions {
            Some(f) => {
                if f.len() < count {
                    return Err(CliError::Config(format!("data.fractions needs {count} entries")));
                }
                f[..count].to_vec()
            }
            None => (0..count).map(|l| (l as f64 + 1.0) / (count as f64 + 1.0)).collect(),
        };
        let (lo, hi, c) = grid.mask_bounds(mask);
        let width = hi[0] - lo[0];
        Ok(fractions
            .iter()
            .map(|&t| {
                let mut center = c.clone();
                center[0] = lo[0] + t * width;
                cosine_bump(grid, &center, self.data.radius * width).scaled(self.data.amplitude).masked(mask)
            })
            .collect())
    }

    pub fn direction(&self, count: usize) -> Result<Vec<f64>, CliError> {
        match &self.linearization.direction {
            Some(d) if d.len() == count => Ok(d.clone()),
            Some(d) => Err(CliError::Config(format!("linearization.direction has {} entries, expected {count}", d.len()))),
            None => Ok((0..count).map(|l| (1.0 - 0.2 * l as f64).max(0.2)).collect()),
        }
    }
}

pub struct Model {
    pub grid: Arc<GridSpec>,
    pub q: Field,
    pub p: Nonlinearity,
    pub solver: NonlinearSolver,
}

pub fn config_error(e: nlfrac::Error) -> CliError {
    CliError::Config(e.to_string())
}

pub fn window_kind(name: &str) -> Result<MaskKind, CliError> {
    match name {
        "w1" => Ok(MaskKind::W1),
        "w2" => Ok(MaskKind::W2),
        "exterior" => Ok(MaskKind::Exterior),
        other => Err(CliError::Config(format!("unknown window {other:?}"))),
    }
}

fn default_regions(dim: usize, length: f64) -> Result<RegionSpec, CliError> {
    let f = length / (2.0 * PI);
    match dim {
        1 => Ok(RegionSpec::new(
            Region::interval(2.0 * f, 4.0 * f),
            Region::interval(0.5 * f, 1.5 * f),
            Region::interval(4.6 * f, 5.6 * f),
        )),
        2 => Ok(RegionSpec::new(
            Region::Ball { center: vec![PI * f, PI * f], radius: 1.2 * f },
            Region::Box { lo: vec![0.4 * f, 0.4 * f], hi: vec![1.4 * f, 5.8 * f] },
            Region::Box { lo: vec![4.9 * f, 0.4 * f], hi: vec![5.9 * f, 5.8 * f] },
        )),
        other => Err(CliError::Config(format!("dim must be 1 or 2, got {other}"))),
    }
}

/// Cosine bump filling the bounding box of Ω, cut to Ω.
pub fn omega_bump(grid: &Arc<GridSpec>) -> Field {
    let (lo, hi, c) = grid.mask_bounds(grid.omega_mask());
    cosine_bump(grid, &c, 0.5 * (hi[0] - lo[0])).masked(grid.omega_mask())
}

pub fn shape_field(grid: &Arc<GridSpec>, shape: &Shape) -> Result<Field, CliError> {
    let omega = grid.omega_mask();
    let bump = omega_bump(grid);
    let field = match shape {
        Shape::Bump { amplitude } => bump.scaled(*amplitude),
        Shape::SineBump { amplitude, modulation, frequency, shift } => {
            Field::from_fn(grid, |x| amplitude * (1.0 + modulation * (frequency * x[0] + shift).sin())).hadamard(&bump)
        }
        Shape::PolyBump { amplitude, coefficients } => {
            let (_, _, c) = grid.mask_bounds(omega);
            Field::from_fn(grid, |x| {
                let d = grid.periodic_displacement(x, &c)[0];
                amplitude * coefficients.iter().rev().fold(0.0, |acc, a| acc * d + a)
            })
            .hadamard(&bump)
        }
        Shape::Csv { path } => read_field_csv(grid, path)?.masked(omega),
    };
    Ok(field)
}

fn read_field_csv(grid: &Arc<GridSpec>, path: &Path) -> Result<Field, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .has_headers(true)
        .from_path(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut values = Vec::with_capacity(grid.num_nodes());
    for record in reader.records() {
        let record = record.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let last = record.get(record.len().saturating_sub(1)).unwrap_or("");
        let v: f64 = last
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("{}: bad value {last:?}", path.display())))?;
        values.push(v);
    }
    Field::from_values(grid, values).map_err(config_error)
}
