//! Benchmark energies, the Boltzmann log-density and the mean-free prior.
//!
//! Every energy already carries its temperature factor: the unnormalized Boltzmann
//! log-density is simply `−U(x)`.

mod minimize;
mod pair;
mod prior;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

pub use minimize::{gradient_descent, DescentOutcome};
pub use pair::{
    dw_energy, lj_energy, DoubleWell, DoubleWellParams, Harmonic, LennardJones, LennardJonesParams,
    COINCIDENCE_EPS,
};
pub use prior::{prior_sample, MeanFreePrior};

use crate::error::{Error, Result};
use crate::geom::{Configuration, ParticleTyping};

/// A potential energy invariant under its typing's permutations, rigid motions
/// and reflections.
pub trait EnergyModel: Send + Sync {
    fn energy(&self, x: ArrayView2<'_, f64>) -> Result<f64>;

    fn energy_and_gradient(&self, x: ArrayView2<'_, f64>) -> Result<(f64, Array2<f64>)>;

    fn gradient(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.energy_and_gradient(x)?.1)
    }

    fn typing(&self) -> &ParticleTyping;
}

/// Analytic `∇U`.
pub fn energy_gradient<M: EnergyModel + ?Sized>(x: &Configuration, model: &M) -> Result<Array2<f64>> {
    model.gradient(x.coords())
}

/// `−U(x)`; the partition function is never needed.
pub fn boltzmann_log_density_unnorm<M: EnergyModel + ?Sized>(x: ArrayView2<'_, f64>, model: &M) -> Result<f64> {
    Ok(-model.energy(x)?)
}

/// The benchmark systems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum System {
    Dw4,
    Lj13,
    Lj55,
}

impl System {
    pub fn n_particles(self) -> usize {
        match self {
            System::Dw4 => 4,
            System::Lj13 => 13,
            System::Lj55 => 55,
        }
    }

    pub fn dim(self) -> usize {
        match self {
            System::Dw4 => 2,
            System::Lj13 | System::Lj55 => 3,
        }
    }

    pub fn typing(self) -> ParticleTyping {
        ParticleTyping::single(self.n_particles())
    }

    pub fn prior(self) -> MeanFreePrior {
        MeanFreePrior::new(self.n_particles(), self.dim())
    }

    pub fn model(self) -> Box<dyn EnergyModel> {
        match self {
            System::Dw4 => Box::new(DoubleWell::new(4, DoubleWellParams::default())),
            System::Lj13 => Box::new(LennardJones::new(13, LennardJonesParams::confined())),
            System::Lj55 => Box::new(LennardJones::new(55, LennardJonesParams::confined())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            System::Dw4 => "dw4",
            System::Lj13 => "lj13",
            System::Lj55 => "lj55",
        }
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dw4" => Ok(System::Dw4),
            "lj13" => Ok(System::Lj13),
            "lj55" => Ok(System::Lj55),
            other => Err(Error::Validation(format!("unknown system {other:?} (expected dw4, lj13 or lj55)"))),
        }
    }
}

/// Center particle plus the 12 vertices of a regular icosahedron with unit edges.
pub fn icosahedron13() -> Array2<f64> {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let mut rows = vec![[0.0, 0.0, 0.0]];
    for s1 in [-1.0, 1.0] {
        for s2 in [-1.0, 1.0] {
            rows.push([0.0, s1, s2 * phi]);
            rows.push([s1, s2 * phi, 0.0]);
            rows.push([s2 * phi, 0.0, s1]);
        }
    }
    Array2::from_shape_fn((13, 3), |(i, k)| rows[i][k] * 0.5)
}
