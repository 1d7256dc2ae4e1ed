use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::{gradient_descent, EnergyModel};
use crate::error::{Error, Result};
use crate::geom::MeanFreeConfiguration;

#[derive(Debug, Clone, PartialEq)]
pub struct Minimized {
    pub x: MeanFreeConfiguration,
    pub energy_before: f64,
    pub energy_after: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MinimizeReport {
    pub n_input: usize,
    pub n_skipped: usize,
    pub n_converged: usize,
    pub lowest_energy: Option<f64>,
}

/// Deterministic local minimization of every sample. Samples whose starting energy is
/// not finite are skipped (`None`) and counted.
pub fn minimize_structures<M: EnergyModel + ?Sized>(
    samples: &[MeanFreeConfiguration],
    model: &M,
    max_iters: usize,
    tol: f64,
) -> Result<(Vec<Option<Minimized>>, MinimizeReport)> {
    if !(tol > 0.0) {
        return Err(Error::Validation(format!("gradient tolerance must be positive, got {tol}")));
    }
    let items: Vec<Option<Minimized>> = samples
        .par_iter()
        .map(|x| {
            let start = match model.energy(x.coords()) {
                Ok(e) if e.is_finite() => e,
                Ok(_) | Err(Error::Coincident(..)) | Err(Error::NonFinite(_)) => return Ok(None),
                Err(e) => return Err(e),
            };
            let out = gradient_descent(model, x.coords(), max_iters, tol, false)?;
            Ok(Some(Minimized {
                x: MeanFreeConfiguration::from_raw_projected(out.x),
                energy_before: start,
                energy_after: out.energy,
                iterations: out.iterations,
                converged: out.converged,
            }))
        })
        .collect::<Result<_>>()?;
    let done = items.iter().flatten();
    let report = MinimizeReport {
        n_input: samples.len(),
        n_skipped: items.iter().filter(|m| m.is_none()).count(),
        n_converged: done.clone().filter(|m| m.converged).count(),
        lowest_energy: done.map(|m| m.energy_after).reduce(f64::min),
    };
    Ok((items, report))
}
