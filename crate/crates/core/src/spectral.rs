//! FFT plumbing for Fourier multipliers on the periodic grid.
//!
//! Node `i` along an axis carries the integer wave number `i` for
//! `i < N/2` and `i - N` otherwise, so the discrete frequency set is
//! `(2π/L)·{-N/2, …, N/2-1}`. Multi-dimensional data is stored row-major.

use std::fmt;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Relative size of the imaginary residue tolerated after an inverse transform.
pub const IMAGINARY_RESIDUE_TOL: f64 = 1e-10;

#[derive(Clone)]
pub struct SpectralPlan {
    dim: usize,
    n: usize,
    length: f64,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for SpectralPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpectralPlan")
            .field("dim", &self.dim)
            .field("n", &self.n)
            .field("length", &self.length)
            .finish()
    }
}

impl SpectralPlan {
    pub fn new(dim: usize, n: usize, length: f64) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            dim,
            n,
            length,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }

    /// Integer wave number carried by index `i` along one axis.
    pub fn wave_number(&self, i: usize) -> i64 {
        let n = self.n as i64;
        let i = i as i64;
        if i < n / 2 {
            i
        } else {
            i - n
        }
    }

    pub fn is_nyquist(&self, k: i64) -> bool {
        self.n % 2 == 0 && k == -(self.n as i64) / 2
    }

    pub fn base_frequency(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.length
    }

    /// Largest |ξ| on the grid.
    pub fn max_frequency(&self) -> f64 {
        let kmax = (self.n / 2) as f64;
        self.base_frequency() * kmax * (self.dim as f64).sqrt()
    }

    fn transform(&self, data: &mut [Complex64], inverse: bool) {
        let plan = if inverse { &self.inverse } else { &self.forward };
        let n = self.n;
        match self.dim {
            1 => plan.process(data),
            2 => {
                for row in data.chunks_mut(n) {
                    plan.process(row);
                }
                let mut column = vec![Complex64::new(0.0, 0.0); n];
                for j in 0..n {
                    for i in 0..n {
                        column[i] = data[i * n + j];
                    }
                    plan.process(&mut column);
                    for i in 0..n {
                        data[i * n + j] = column[i];
                    }
                }
            }
            _ => unreachable!("dimension validated at grid construction"),
        }
        if inverse {
            let scale = 1.0 / (n.pow(self.dim as u32) as f64);
            for z in data.iter_mut() {
                *z *= scale;
            }
        }
    }

    pub fn forward(&self, values: &[f64]) -> Vec<Complex64> {
        let mut data: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.transform(&mut data, false);
        data
    }

    /// Inverse transform with real-part projection. Fails when the discarded
    /// imaginary part is not negligible relative to the signal.
    pub fn inverse_real(&self, mut data: Vec<Complex64>, reference_norm: f64) -> Result<Vec<f64>> {
        self.transform(&mut data, true);
        let mut max_im = 0.0f64;
        let mut max_re = 0.0f64;
        let out: Vec<f64> = data
            .iter()
            .map(|z| {
                max_im = max_im.max(z.im.abs());
                max_re = max_re.max(z.re.abs());
                z.re
            })
            .collect();
        let scale = reference_norm.max(max_re);
        if max_im > IMAGINARY_RESIDUE_TOL * scale && max_im > f64::MIN_POSITIVE {
            return Err(Error::Internal(format!(
                "imaginary residue {max_im:e} after inverse transform (scale {scale:e})"
            )));
        }
        Ok(out)
    }

    /// Visits every spectral index with its integer wave vector and ξ.
    pub fn for_each_mode(&self, mut visit: impl FnMut(usize, &[i64], &[f64])) {
        let base = self.base_frequency();
        let n = self.n;
        match self.dim {
            1 => {
                for i in 0..n {
                    let k = [self.wave_number(i)];
                    let xi = [base * k[0] as f64];
                    visit(i, &k, &xi);
                }
            }
            2 => {
                for i in 0..n {
                    for j in 0..n {
                        let k = [self.wave_number(i), self.wave_number(j)];
                        let xi = [base * k[0] as f64, base * k[1] as f64];
                        visit(i * n + j, &k, &xi);
                    }
                }
            }
            _ => unreachable!("dimension validated at grid construction"),
        }
    }

    /// Applies the multiplier `symbol(k, ξ)` and projects back onto real fields.
    pub fn apply_multiplier<S>(&self, values: &[f64], symbol: S) -> Result<Vec<f64>>
    where
        S: Fn(&[i64], &[f64]) -> Complex64,
    {
        let input = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut hat = self.forward(values);
        let mut largest = 0.0f64;
        self.for_each_mode(|idx, k, xi| {
            let z = symbol(k, xi);
            largest = largest.max(z.norm());
            hat[idx] *= z;
        });
        self.inverse_real(hat, input * largest)
    }
}
