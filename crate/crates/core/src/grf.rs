//! Gaussian-random-field temperature inputs.
//!
//! The squared-exponential covariance on a tensor grid factorizes as
//! `C = Cy (x) Cx`, so its Cholesky factor is `Ly (x) Lx` and a draw is
//! `mean + sqrt(variance) * Ly Z Lx^T` for a standard normal matrix `Z`.
//! Only the two 1D factors are ever formed.

use nalgebra::DMatrix;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::geometry::GridSpec;
use crate::stencils::ScalarField;
use crate::{Error, Result};

const JITTERS: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrfConfig {
    pub mean: f64,
    pub variance: f64,
    /// Correlation length of the squared-exponential kernel, meters.
    pub length_scale: f64,
    pub t_min: f64,
    pub t_max: f64,
    /// Map each realization's min/max onto `[t_min, t_max]`.
    pub rescale: bool,
    pub seed: u64,
}

impl Default for GrfConfig {
    fn default() -> Self {
        Self::for_length(crate::geometry::REFERENCE_SIDE)
    }
}

impl GrfConfig {
    /// Defaults for a board of side `length`: unit variance, correlation
    /// length `0.2 length`, rescaled to 0..100 K above the reference.
    pub fn for_length(length: f64) -> Self {
        Self {
            mean: 0.0,
            variance: 1.0,
            length_scale: 0.2 * length,
            t_min: 0.0,
            t_max: 100.0,
            rescale: true,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.variance >= 0.0) || !(self.length_scale > 0.0) || !(self.t_min <= self.t_max) {
            return Err(Error::Config(format!(
                "GRF needs variance >= 0, length scale > 0, t_min <= t_max; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Correlation matrix `exp(-d^2 / (2 l^2))` of `n` equally spaced points,
/// Cholesky-factored with escalating diagonal jitter.
fn factor_1d(n: usize, h: f64, length_scale: f64) -> Result<DMatrix<f64>> {
    let corr = DMatrix::from_fn(n, n, |a, b| {
        let d = (a as f64 - b as f64) * h;
        (-d * d / (2.0 * length_scale * length_scale)).exp()
    });
    for &jitter in &JITTERS {
        let mut m = corr.clone();
        for a in 0..n {
            m[(a, a)] += jitter;
        }
        if let Some(chol) = m.cholesky() {
            return Ok(chol.l());
        }
    }
    Err(Error::Factorization {
        jitter: JITTERS[JITTERS.len() - 1],
    })
}

/// Reusable sampler for one grid and configuration.
#[derive(Debug, Clone)]
pub struct GrfSampler {
    grid: GridSpec,
    cfg: GrfConfig,
    factors: Option<(DMatrix<f64>, DMatrix<f64>)>,
}

impl GrfSampler {
    pub fn new(grid: GridSpec, cfg: GrfConfig) -> Result<Self> {
        cfg.validate()?;
        let factors = if cfg.variance > 0.0 {
            let lx = factor_1d(grid.nx, grid.h, cfg.length_scale)?;
            let ly = factor_1d(grid.ny, grid.h, cfg.length_scale)?;
            Some((lx, ly))
        } else {
            None
        };
        Ok(Self { grid, cfg, factors })
    }

    pub fn config(&self) -> &GrfConfig {
        &self.cfg
    }

    /// Draws one field for `seed`; the configured seed is ignored.
    pub fn sample(&self, seed: u64) -> ScalarField {
        let (nx, ny) = (self.grid.nx, self.grid.ny);
        let Some((lx, ly)) = &self.factors else {
            let v = if self.cfg.rescale {
                self.cfg.mean.clamp(self.cfg.t_min, self.cfg.t_max)
            } else {
                self.cfg.mean
            };
            return ScalarField::constant(self.grid, v);
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // z is ny x nx in row-major draw order.
        let z = DMatrix::from_row_iterator(ny, nx, (0..nx * ny).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let field = ly * z * lx.transpose();
        let sd = self.cfg.variance.sqrt();
        let mut values = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                values.push(self.cfg.mean + sd * field[(j, i)]);
            }
        }
        if self.cfg.rescale {
            rescale(&mut values, self.cfg.t_min, self.cfg.t_max, self.cfg.mean);
        }
        ScalarField::new(self.grid, values).expect("grid-sized field")
    }
}

fn rescale(values: &mut [f64], lo: f64, hi: f64, fallback: f64) {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    if !(span > 0.0) {
        values.fill(fallback.clamp(lo, hi));
        return;
    }
    for v in values.iter_mut() {
        *v = (lo + (*v - min) / span * (hi - lo)).clamp(lo, hi);
    }
}

/// Draws a temperature field (K above reference) for `cfg.seed`.
pub fn sample_temperature(grid: &GridSpec, cfg: &GrfConfig) -> Result<ScalarField> {
    Ok(GrfSampler::new(*grid, *cfg)?.sample(cfg.seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> GridSpec {
        GridSpec::new(0.2, 0.2, n, n).unwrap()
    }

    #[test]
    fn zero_variance_is_constant() {
        let cfg = GrfConfig {
            mean: 150.0,
            variance: 0.0,
            ..GrfConfig::default()
        };
        let f = sample_temperature(&grid(16), &cfg).unwrap();
        assert!(f.values().iter().all(|&v| v == 100.0));
        let raw = GrfConfig { rescale: false, ..cfg };
        let f = sample_temperature(&grid(16), &raw).unwrap();
        assert!(f.values().iter().all(|&v| v == 150.0));
    }

    #[test]
    fn seeded_draws_are_bitwise_reproducible() {
        let cfg = GrfConfig::default().with_seed(42);
        let a = sample_temperature(&grid(32), &cfg).unwrap();
        let b = sample_temperature(&grid(32), &cfg).unwrap();
        assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn rescaled_range_and_seed_sensitivity() {
        let g = grid(32);
        let sampler = GrfSampler::new(g, GrfConfig::default()).unwrap();
        let a = sampler.sample(1);
        let b = sampler.sample(2);
        let (lo, hi) = a
            .values()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        assert_eq!((lo, hi), (0.0, 100.0));
        let differ = a.values().iter().zip(b.values()).filter(|(x, y)| x != y).count();
        assert!(differ as f64 >= 0.99 * g.len() as f64);
    }

    #[test]
    fn invalid_configs() {
        let bad = GrfConfig {
            length_scale: 0.0,
            ..GrfConfig::default()
        };
        assert!(sample_temperature(&grid(8), &bad).is_err());
        let bad = GrfConfig {
            t_min: 5.0,
            t_max: 1.0,
            ..GrfConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
