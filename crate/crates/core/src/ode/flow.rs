use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{integrate_many, Direction, FlowResult, IntegratorSpec, VectorField};
use crate::energy::{MeanFreePrior, System};
use crate::error::{Error, Result};
use crate::geom::MeanFreeConfiguration;
use crate::store::{format_error, BlockSpec, Container};

pub const SAMPLES_KIND: &str = "samples";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSetMeta {
    pub system: Option<System>,
    pub n_particles: usize,
    pub dim: usize,
    pub count: usize,
    pub seed: u64,
    pub integrator: IntegratorSpec,
    /// Hash of the checkpoint that generated the samples, when known.
    pub checkpoint_hash: Option<String>,
}

/// Generated configurations with their model log-densities and path diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub samples: Vec<MeanFreeConfiguration>,
    /// `log p̃₁(x₁)`; absent when the divergence was not integrated.
    pub logp: Option<Vec<f64>>,
    pub path_length: Vec<f64>,
    pub particle_path_length: Vec<f64>,
    pub chord: Vec<f64>,
    pub n_field_evals: Vec<usize>,
    pub meta: SampleSetMeta,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn to_container(&self) -> Result<Container> {
        let m = &self.meta;
        let count = self.len();
        let mut blocks = vec![(
            BlockSpec { name: "samples".into(), shape: vec![count, m.n_particles, m.dim] },
            self.samples.iter().flat_map(|x| x.coords().iter().copied().collect::<Vec<_>>()).collect(),
        )];
        if let Some(lp) = &self.logp {
            blocks.push((BlockSpec { name: "logp".into(), shape: vec![count] }, lp.clone()));
        }
        for (name, v) in [
            ("path_length", &self.path_length),
            ("particle_path_length", &self.particle_path_length),
            ("chord", &self.chord),
        ] {
            blocks.push((BlockSpec { name: name.into(), shape: vec![count] }, v.clone()));
        }
        blocks.push((
            BlockSpec { name: "n_field_evals".into(), shape: vec![count] },
            self.n_field_evals.iter().map(|&e| e as f64).collect(),
        ));
        Container::new(SAMPLES_KIND, m, blocks)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let c = Container::read(path)?.expect_kind(path, SAMPLES_KIND)?;
        let meta: SampleSetMeta = c.meta()?;
        let (count, n, d) = (meta.count, meta.n_particles, meta.dim);
        let (_, raw) = c.require_block(path, "samples")?;
        if raw.len() != count * n * d {
            return Err(format_error(path, format!("samples block has {} values, manifest says {count} x {n} x {d}", raw.len())));
        }
        let samples = raw
            .chunks(n * d)
            .map(|chunk| {
                let a = Array2::from_shape_vec((n, d), chunk.to_vec()).expect("chunk shape");
                MeanFreeConfiguration::new(a).map_err(|e| format_error(path, e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let column = |name: &str| -> Result<Vec<f64>> {
            let (_, v) = c.require_block(path, name)?;
            if v.len() != count {
                return Err(format_error(path, format!("block {name} has {} values, expected {count}", v.len())));
            }
            Ok(v.to_vec())
        };
        let logp = match c.block("logp") {
            Some(_) => Some(column("logp")?),
            None => None,
        };
        Ok(SampleSet {
            samples,
            logp,
            path_length: column("path_length")?,
            particle_path_length: column("particle_path_length")?,
            chord: column("chord")?,
            n_field_evals: column("n_field_evals")?.into_iter().map(|e| e as usize).collect(),
            meta,
        })
    }
}

fn check_prior<F: VectorField + ?Sized>(field: &F, prior: &MeanFreePrior) -> Result<()> {
    if (prior.n_particles, prior.dim) != (field.n_particles(), field.dim()) {
        return Err(Error::shape(
            format!("prior over ({}, {})", field.n_particles(), field.dim()),
            format!("({}, {})", prior.n_particles, prior.dim),
        ));
    }
    Ok(())
}

/// Draws `n` prior samples with `seed` and pushes them through the flow. With
/// `track_logp`, `log p̃₁(x₁) = log q(x₀) + Δ log p` along the forward path.
pub fn sample_flow<F: VectorField + ?Sized>(
    field: &F,
    prior: &MeanFreePrior,
    n: usize,
    spec: &IntegratorSpec,
    seed: u64,
    track_logp: bool,
) -> Result<SampleSet> {
    if n == 0 {
        return Err(Error::Validation("sample count must be at least 1".into()));
    }
    check_prior(field, prior)?;
    let x0 = prior.sample(&mut ChaCha8Rng::seed_from_u64(seed), n);
    let results = integrate_many(field, &x0, Direction::Forward, spec, track_logp)?
        .into_iter()
        .collect::<Result<Vec<FlowResult>>>()?;
    let logp = track_logp.then(|| {
        x0.iter()
            .zip(&results)
            .map(|(z, r)| prior.log_density_unchecked(z.coords()) + r.delta_logp.expect("tracked"))
            .collect()
    });
    Ok(SampleSet {
        logp,
        path_length: results.iter().map(|r| r.path_length).collect(),
        particle_path_length: results.iter().map(|r| r.particle_path_length).collect(),
        chord: results.iter().map(|r| r.chord).collect(),
        n_field_evals: results.iter().map(|r| r.n_field_evals).collect(),
        samples: results.into_iter().map(|r| r.endpoint).collect(),
        meta: SampleSetMeta {
            system: None,
            n_particles: prior.n_particles,
            dim: prior.dim,
            count: n,
            seed,
            integrator: *spec,
            checkpoint_hash: None,
        },
    })
}

/// `log p̃₁(x)` for every configuration: reverse-integrate to the latent `z` and
/// return `log q(z) − ∫₀¹ ∇·v dt`. Solver failures are reported per item.
pub fn log_likelihood<F: VectorField + ?Sized>(
    field: &F,
    xs: &[MeanFreeConfiguration],
    prior: &MeanFreePrior,
    spec: &IntegratorSpec,
) -> Result<Vec<Result<f64>>> {
    check_prior(field, prior)?;
    Ok(integrate_many(field, xs, Direction::Reverse, spec, true)?
        .into_iter()
        .map(|r| r.map(|r| prior.log_density_unchecked(r.endpoint.coords()) - r.delta_logp.expect("tracked")))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NllReport {
    /// `−mean log p̃₁` over the items that integrated successfully.
    pub nll: f64,
    pub n_evaluated: usize,
    pub n_failed: usize,
    pub failed: Vec<usize>,
}

pub fn nll<F: VectorField + ?Sized>(
    field: &F,
    xs: &[MeanFreeConfiguration],
    prior: &MeanFreePrior,
    spec: &IntegratorSpec,
) -> Result<NllReport> {
    if xs.is_empty() {
        return Err(Error::Validation("no configurations to evaluate".into()));
    }
    let mut sum = 0.0;
    let mut ok = 0;
    let mut failed = Vec::new();
    for (i, r) in log_likelihood(field, xs, prior, spec)?.into_iter().enumerate() {
        match r {
            Ok(lp) => {
                sum += lp;
                ok += 1;
            }
            Err(e) => {
                log::warn!("likelihood of item {i} failed: {e}");
                failed.push(i);
            }
        }
    }
    if ok == 0 {
        return Err(Error::Validation(format!("likelihood failed for all {} items", xs.len())));
    }
    Ok(NllReport { nll: -sum / ok as f64, n_evaluated: ok, n_failed: failed.len(), failed })
}

/// Deviation of one integrator from a reference solution, per sample: the sum of
/// absolute coordinate differences of the endpoints and the absolute difference of
/// the log-density changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegratorComparison {
    pub integrator: IntegratorSpec,
    pub median_position_error: f64,
    pub mean_position_error: f64,
    pub median_logp_error: Option<f64>,
    pub mean_logp_error: Option<f64>,
    pub mean_field_evals: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Integrates `starts` with the reference and with every candidate; the reference
/// itself is the first row (zero error).
pub fn compare_integrators<F: VectorField + ?Sized>(
    field: &F,
    starts: &[MeanFreeConfiguration],
    direction: Direction,
    reference: &IntegratorSpec,
    candidates: &[IntegratorSpec],
    track_logp: bool,
) -> Result<Vec<IntegratorComparison>> {
    if starts.is_empty() {
        return Err(Error::Validation("no start configurations".into()));
    }
    let run = |spec: &IntegratorSpec| -> Result<Vec<FlowResult>> {
        integrate_many(field, starts, direction, spec, track_logp)?.into_iter().collect()
    };
    let reference_runs = run(reference)?;
    let mut rows = Vec::with_capacity(candidates.len() + 1);
    for spec in std::iter::once(reference).chain(candidates) {
        let runs = if spec == reference { reference_runs.clone() } else { run(spec)? };
        let pos: Vec<f64> = runs
            .iter()
            .zip(&reference_runs)
            .map(|(a, b)| (&a.endpoint.coords() - &b.endpoint.coords()).iter().map(|v| v.abs()).sum())
            .collect();
        let lp: Option<Vec<f64>> = track_logp.then(|| {
            runs.iter()
                .zip(&reference_runs)
                .map(|(a, b)| (a.delta_logp.expect("tracked") - b.delta_logp.expect("tracked")).abs())
                .collect()
        });
        let k = runs.len() as f64;
        rows.push(IntegratorComparison {
            integrator: *spec,
            mean_position_error: pos.iter().sum::<f64>() / k,
            median_position_error: median(pos),
            mean_logp_error: lp.as_ref().map(|v| v.iter().sum::<f64>() / k),
            median_logp_error: lp.map(median),
            mean_field_evals: runs.iter().map(|r| r.n_field_evals as f64).sum::<f64>() / k,
        });
    }
    Ok(rows)
}
