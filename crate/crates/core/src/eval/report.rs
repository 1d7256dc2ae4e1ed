use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Estimate, FreeEnergyEstimate};
use crate::energy::{MeanFreePrior, System};
use crate::error::{Error, Result};
use crate::geom::{MeanFreeConfiguration, ParticleTyping};
use crate::matching::{make_coupling, PairingStrategy};
use crate::ode::{IntegratorSpec, NllReport, SampleSet};
use crate::store::write_atomic;

/// Batches averaged per (strategy, batch size) cell.
pub const TRANSPORT_BATCHES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportCostRow {
    pub strategy: PairingStrategy,
    pub batch_size: usize,
    /// Mean over batches of the per-pair squared distance.
    pub mean_cost: f64,
    pub std_cost: f64,
    pub per_batch: Vec<f64>,
}

/// Mean per-pair transport cost of each strategy on [`TRANSPORT_BATCHES`] seeded
/// batches. Every strategy sees the same prior and data draws for a given batch.
pub fn transport_cost_diagnostic(
    data: &[MeanFreeConfiguration],
    prior: &MeanFreePrior,
    typing: &ParticleTyping,
    strategies: &[PairingStrategy],
    batch_sizes: &[usize],
    seed: u64,
) -> Result<Vec<TransportCostRow>> {
    let mut rows = Vec::new();
    for (bi, &b) in batch_sizes.iter().enumerate() {
        if b == 0 || b > data.len() {
            return Err(Error::Validation(format!("batch size {b} must be in 1..={}", data.len())));
        }
        let mut costs = vec![Vec::with_capacity(TRANSPORT_BATCHES); strategies.len()];
        for k in 0..TRANSPORT_BATCHES {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((bi * TRANSPORT_BATCHES + k) as u64);
            let x0 = prior.sample(&mut rng, b);
            let x1: Vec<MeanFreeConfiguration> = sample_indices(&mut rng, data.len(), b).iter().map(|i| data[i].clone()).collect();
            for (si, &s) in strategies.iter().enumerate() {
                costs[si].push(make_coupling(&x0, &x1, s, typing)?.mean_cost());
            }
        }
        for (&strategy, per_batch) in strategies.iter().zip(costs) {
            let (mean_cost, std_cost) = mean_std(&per_batch);
            rows.push(TransportCostRow { strategy, batch_size: b, mean_cost, std_cost, per_batch });
        }
    }
    Ok(rows)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

/// Path-length summary; the three notions of length are reported side by side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathStats {
    pub n: usize,
    /// Full-configuration arc length.
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    /// Arc length of a single particle, averaged over particles.
    pub particle_mean: f64,
    /// Latent-to-sample distance.
    pub chord_mean: f64,
    /// `mean / chord_mean`; 1 for straight paths, including paths of length zero.
    pub arc_chord_ratio: f64,
}

pub fn path_stats(set: &SampleSet) -> Result<PathStats> {
    if set.is_empty() {
        return Err(Error::Validation("no samples for path statistics".into()));
    }
    let (mean, std) = mean_std(&set.path_length);
    let chord_mean = mean_std(&set.chord).0;
    Ok(PathStats {
        n: set.len(),
        mean,
        median: median(&set.path_length),
        std,
        particle_mean: mean_std(&set.particle_path_length).0,
        chord_mean,
        arc_chord_ratio: if chord_mean > 0.0 { mean / chord_mean } else { 1.0 },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_left: f64,
    pub bin_right: f64,
    pub count: u64,
}

/// Equal-width histogram over `range` (default: the data range). Values outside the
/// range and non-finite values are dropped; the last bin is closed.
pub fn histogram(values: &[f64], n_bins: usize, range: Option<(f64, f64)>) -> Result<Vec<HistogramBin>> {
    if n_bins == 0 {
        return Err(Error::Validation("histogram needs at least one bin".into()));
    }
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let (lo, hi) = match range {
        Some(r) => r,
        None if finite.is_empty() => return Err(Error::Validation("no finite values to histogram".into())),
        None => finite.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v))),
    };
    let hi = if hi > lo { hi } else { lo + 1.0 };
    let width = (hi - lo) / n_bins as f64;
    let mut bins: Vec<HistogramBin> = (0..n_bins)
        .map(|k| HistogramBin {
            bin_left: lo + k as f64 * width,
            bin_right: if k + 1 == n_bins { hi } else { lo + (k + 1) as f64 * width },
            count: 0,
        })
        .collect();
    for v in finite {
        if v < lo || v > hi {
            continue;
        }
        let k = (((v - lo) / width) as usize).min(n_bins - 1);
        bins[k].count += 1;
    }
    Ok(bins)
}

pub fn write_histogram_csv(path: &Path, bins: &[HistogramBin]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for b in bins {
        w.serialize(b).map_err(|e| Error::Validation(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Validation(format!("csv: {e}")))?;
    write_atomic(path, &bytes)
}

pub fn read_histogram_csv(path: &Path) -> Result<Vec<HistogramBin>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Validation(format!("{}: {e}", path.display()))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreeEnergyReport {
    pub coordinate: String,
    pub threshold: f64,
    pub generator: FreeEnergyEstimate,
    pub reference: Option<Estimate>,
    /// `|ΔF_gen − ΔF_ref| ≤ 2·sqrt(σ_gen² + σ_ref²)`.
    pub within_two_sigma: Option<bool>,
}

impl FreeEnergyReport {
    pub fn new(coordinate: &str, threshold: f64, generator: FreeEnergyEstimate, reference: Option<Estimate>) -> Self {
        let within_two_sigma = reference.map(|r| {
            (generator.delta_f - r.value).abs() <= 2.0 * (generator.std_error.powi(2) + r.std_error.powi(2)).sqrt()
        });
        FreeEnergyReport { coordinate: coordinate.into(), threshold, generator, reference, within_two_sigma }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub system: Option<System>,
    pub seed: u64,
    pub config_hash: Option<String>,
    pub checkpoint_hash: Option<String>,
    pub integrator: Option<IntegratorSpec>,
    pub n_samples: usize,
    pub nll: Option<NllReport>,
    /// Unfiltered Kish ESS of the importance weights.
    pub ess_percent: Option<f64>,
    pub n_zero_weight: usize,
    pub path_length: Option<PathStats>,
    pub transport_cost: Vec<TransportCostRow>,
    pub free_energy: Option<FreeEnergyReport>,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(path, &bytes)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}
