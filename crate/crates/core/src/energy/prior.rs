use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Configuration, MeanFreeConfiguration, MEAN_FREE_TOL};

/// Standard Gaussian restricted to the `(N−1)·D`-dimensional mean-free subspace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeanFreePrior {
    pub n_particles: usize,
    pub dim: usize,
}

impl MeanFreePrior {
    pub fn new(n_particles: usize, dim: usize) -> Self {
        MeanFreePrior { n_particles, dim }
    }

    pub fn effective_dim(&self) -> usize {
        (self.n_particles - 1) * self.dim
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> MeanFreeConfiguration {
        let raw = Array2::from_shape_fn((self.n_particles, self.dim), |_| rng.sample(StandardNormal));
        MeanFreeConfiguration::from_raw_projected(raw)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Vec<MeanFreeConfiguration> {
        (0..count).map(|_| self.draw(rng)).collect()
    }

    /// `−½|x|² − ((N−1)·D/2)·log 2π`. Rejects inputs off the subspace.
    pub fn log_density(&self, x: ArrayView2<'_, f64>) -> Result<f64> {
        if x.dim() != (self.n_particles, self.dim) {
            return Err(Error::shape(format!("({}, {})", self.n_particles, self.dim), format!("{:?}", x.dim())));
        }
        let off = Configuration::new(x.to_owned())?.center_offset();
        if off > MEAN_FREE_TOL {
            return Err(Error::NotMeanFree(off));
        }
        Ok(self.log_density_unchecked(x))
    }

    pub(crate) fn log_density_unchecked(&self, x: ArrayView2<'_, f64>) -> f64 {
        let sq: f64 = x.iter().map(|v| v * v).sum();
        -0.5 * sq - 0.5 * self.effective_dim() as f64 * (2.0 * PI).ln()
    }
}

/// `count` deterministic draws for a given seed.
pub fn prior_sample(prior: &MeanFreePrior, seed: u64, count: usize) -> Result<Vec<MeanFreeConfiguration>> {
    if count == 0 {
        return Err(Error::Validation("prior sample count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(prior.sample(&mut rng, count))
}
