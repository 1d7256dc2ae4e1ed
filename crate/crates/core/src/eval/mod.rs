//! Boltzmann-generator evaluation: importance weights, effective sample size,
//! reweighted observables and free-energy differences, plus structure
//! minimization and transport-cost diagnostics.

mod minimize;
mod report;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use minimize::{minimize_structures, Minimized, MinimizeReport};
pub use report::{
    histogram, path_stats, read_histogram_csv, transport_cost_diagnostic, write_histogram_csv, EvalReport,
    FreeEnergyReport, HistogramBin, PathStats, TransportCostRow, TRANSPORT_BATCHES,
};

use crate::energy::{DoubleWellParams, EnergyModel, System};
use crate::error::{Error, Result};
use crate::geom::MeanFreeConfiguration;
use crate::ode::SampleSet;

pub const DEFAULT_BOOTSTRAP: usize = 200;
/// Smallest number of positive-weight samples per region for a free-energy estimate.
pub const MIN_REGION_SAMPLES: usize = 10;

/// Generated samples with their importance weights `w = μ / p̃₁`, kept in log space.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedEnsemble {
    pub samples: Vec<MeanFreeConfiguration>,
    pub model_logp: Vec<f64>,
    /// Reduced energies; `+∞` for configurations the model cannot evaluate.
    pub energies: Vec<f64>,
    /// `−U(x) − log p̃₁(x)` up to a shared constant; `−∞` marks zero weight.
    pub log_weights: Vec<f64>,
    pub system: Option<System>,
    pub checkpoint_hash: Option<String>,
}

impl WeightedEnsemble {
    pub fn new(samples: Vec<MeanFreeConfiguration>, model_logp: Vec<f64>, energies: Vec<f64>) -> Result<Self> {
        if samples.len() != model_logp.len() || samples.len() != energies.len() {
            return Err(Error::shape(
                format!("{} model log-densities and energies", samples.len()),
                format!("{} and {}", model_logp.len(), energies.len()),
            ));
        }
        let log_weights = energies
            .iter()
            .zip(&model_logp)
            .map(|(&u, &lp)| {
                let lw = -u - lp;
                if u.is_finite() && lw.is_finite() {
                    lw
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        Ok(WeightedEnsemble { samples, model_logp, energies, log_weights, system: None, checkpoint_hash: None })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples carrying zero weight (infinite energy or unusable density).
    pub fn n_zero_weight(&self) -> usize {
        self.log_weights.iter().filter(|w| **w == f64::NEG_INFINITY).count()
    }

    /// Weights scaled so the largest is 1.
    pub fn weights(&self) -> Result<Vec<f64>> {
        let max = self.log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateWeights("every sample has zero weight".into()));
        }
        Ok(self.log_weights.iter().map(|lw| (lw - max).exp()).collect())
    }

    pub fn ess_percent(&self) -> Result<f64> {
        ess_percent(&self.weights()?)
    }
}

/// Pairs every generated sample with its reduced energy under `model`. Configurations
/// the model rejects (coincident particles, non-finite energy) get zero weight.
pub fn importance_weights<M: EnergyModel + ?Sized>(set: &SampleSet, model: &M) -> Result<WeightedEnsemble> {
    let logp = set
        .logp
        .clone()
        .ok_or_else(|| Error::Validation("sample set has no model log-densities; sample with the divergence enabled".into()))?;
    let energies = set
        .samples
        .par_iter()
        .map(|x| match model.energy(x.coords()) {
            Ok(u) if u.is_finite() => Ok(u),
            Ok(_) | Err(Error::Coincident(..)) | Err(Error::NonFinite(_)) => Ok(f64::INFINITY),
            Err(e) => Err(e),
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut ens = WeightedEnsemble::new(set.samples.clone(), logp, energies)?;
    ens.system = set.meta.system;
    ens.checkpoint_hash = set.meta.checkpoint_hash.clone();
    Ok(ens)
}

/// Kish effective sample size `100·(Σw)² / (n·Σw²)`, in percent.
pub fn ess_percent(weights: &[f64]) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::Validation("effective sample size of an empty ensemble".into()));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::DegenerateWeights(format!("weight {w} is not a finite non-negative number")));
    }
    let max = weights.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Err(Error::DegenerateWeights("all weights are zero".into()));
    }
    let (s, s2) = weights.iter().fold((0.0, 0.0), |(s, s2), w| {
        let w = w / max;
        (s + w, s2 + w * w)
    });
    Ok(100.0 * s * s / (weights.len() as f64 * s2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

/// Self-normalized importance estimate `Σ w·O / Σ w`, with the delta-method standard
/// error `sqrt(Σ w²(O − Ô)²) / Σ w`.
pub fn reweighted_expectation<O>(obs: O, ens: &WeightedEnsemble) -> Result<Estimate>
where
    O: Fn(&MeanFreeConfiguration) -> f64,
{
    let w = ens.weights()?;
    let used: Vec<(f64, f64)> = ens.samples.iter().zip(&w).filter(|(_, &w)| w > 0.0).map(|(x, &w)| (w, obs(x))).collect();
    if used.len() < 2 {
        return Err(Error::DegenerateWeights(format!("{} sample(s) with positive weight, need at least 2", used.len())));
    }
    let sw: f64 = used.iter().map(|(w, _)| w).sum();
    let value = used.iter().map(|(w, o)| w * o).sum::<f64>() / sw;
    let var: f64 = used.iter().map(|(w, o)| (w * (o - value)).powi(2)).sum();
    Ok(Estimate { value, std_error: var.sqrt() / sw })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreeEnergyEstimate {
    /// `ΔF/kT = −log(W_B / W_A)`.
    pub delta_f: f64,
    /// Standard deviation over bootstrap resamples.
    pub std_error: f64,
    pub n_a: usize,
    pub n_b: usize,
    pub n_bootstrap: usize,
}

/// Free-energy difference of region B relative to region A from importance weights.
/// `in_b` assigns each sample to B (true) or A (false).
pub fn free_energy_between<R>(ens: &WeightedEnsemble, in_b: R, n_bootstrap: usize, seed: u64) -> Result<FreeEnergyEstimate>
where
    R: Fn(&MeanFreeConfiguration) -> bool,
{
    let w = ens.weights()?;
    let side: Vec<bool> = ens.samples.iter().map(&in_b).collect();
    let positive = |b: bool| side.iter().zip(&w).filter(|(s, w)| **s == b && **w > 0.0).count();
    let (n_a, n_b) = (positive(false), positive(true));
    if n_a < MIN_REGION_SAMPLES || n_b < MIN_REGION_SAMPLES {
        return Err(Error::Validation(format!(
            "free-energy regions need at least {MIN_REGION_SAMPLES} weighted samples each, got {n_a} (A) and {n_b} (B)"
        )));
    }
    let estimate = |idx: &mut dyn Iterator<Item = usize>| {
        let (mut wa, mut wb) = (0.0, 0.0);
        for i in idx {
            if side[i] {
                wb += w[i];
            } else {
                wa += w[i];
            }
        }
        wa.ln() - wb.ln()
    };
    let delta_f = estimate(&mut (0..w.len()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = w.len();
    let boots: Vec<f64> = (0..n_bootstrap)
        .map(|_| estimate(&mut (0..n).map(|_| rng.gen_range(0..n))))
        .filter(|v| v.is_finite())
        .collect();
    let std_error = if boots.len() > 1 {
        let m = boots.iter().sum::<f64>() / boots.len() as f64;
        (boots.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (boots.len() - 1) as f64).sqrt()
    } else {
        f64::NAN
    };
    Ok(FreeEnergyEstimate { delta_f, std_error, n_a, n_b, n_bootstrap: boots.len() })
}

/// Region A is `coordinate < threshold`, region B is `coordinate ≥ threshold`.
pub fn free_energy_difference<C>(
    ens: &WeightedEnsemble,
    coordinate: C,
    threshold: f64,
    n_bootstrap: usize,
    seed: u64,
) -> Result<FreeEnergyEstimate>
where
    C: Fn(&MeanFreeConfiguration) -> f64,
{
    free_energy_between(ens, |x| coordinate(x) >= threshold, n_bootstrap, seed)
}

/// Reference `ΔF/kT = −log(n_B / n_A)` from an unweighted, time-ordered MCMC trace of
/// the coordinate. The standard error comes from `n_batches` contiguous batch means
/// of the region-B fraction, propagated through the logit.
pub fn mcmc_free_energy(trace: &[f64], threshold: f64, n_batches: usize) -> Result<Estimate> {
    if n_batches < 2 || trace.len() < n_batches {
        return Err(Error::Validation(format!("{} samples cannot form {n_batches} batches", trace.len())));
    }
    let frac = |xs: &[f64]| xs.iter().filter(|&&c| c >= threshold).count() as f64 / xs.len() as f64;
    let p = frac(trace);
    if p == 0.0 || p == 1.0 {
        return Err(Error::Validation("one region is never visited by the MCMC trace".into()));
    }
    let per = trace.len() / n_batches;
    let means: Vec<f64> = (0..n_batches).map(|k| frac(&trace[k * per..(k + 1) * per])).collect();
    let m = means.iter().sum::<f64>() / n_batches as f64;
    let var = means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n_batches - 1) as f64;
    let se_p = (var / n_batches as f64).sqrt();
    Ok(Estimate { value: -(p / (1.0 - p)).ln(), std_error: se_p / (p * (1.0 - p)) })
}

/// Mean pairwise distance of a configuration: for DW4 it separates the compact state
/// (pairs mostly in the inner well) from the extended one.
pub fn mean_pair_distance(x: &MeanFreeConfiguration) -> f64 {
    let c = x.coords();
    let n = c.nrows();
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += c.row(i).iter().zip(c.row(j).iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        }
    }
    sum / (n * (n - 1) / 2) as f64
}

/// Threshold between the two DW4 states on [`mean_pair_distance`]: the barrier
/// position `d0` of the pair potential.
pub fn dw4_state_threshold() -> f64 {
    DoubleWellParams::default().d0
}
