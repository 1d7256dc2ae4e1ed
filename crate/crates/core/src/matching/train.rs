use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{adam_step, cfm_loss, conditional_batch, make_coupling, AdamConfig, PairingStrategy, TrainableField};
use crate::checkpoint::{Checkpoint, RngState};
use crate::error::{Error, Result};
use crate::geom::MeanFreeConfiguration;
use crate::net::EgnnConfig;
use crate::sampler::Dataset;
use crate::store::{json_hash, write_atomic};

/// Stream for the fixed probe batch.
const PROBE_STREAM: u64 = u64::MAX - 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrPhase {
    pub lr: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub schedule: Vec<LrPhase>,
    /// Width of the conditional Gaussian path around the straight interpolant.
    pub sigma: f64,
    pub seed: u64,
    pub strategy: PairingStrategy,
    pub adam: AdamConfig,
    /// Write a checkpoint every this many epochs (and always after the last).
    pub checkpoint_every: usize,
    /// Number of dataset samples in the fixed probe batch.
    pub probe_size: usize,
}

impl TrainConfig {
    pub fn new(batch_size: usize, schedule: Vec<LrPhase>, strategy: PairingStrategy, seed: u64) -> Self {
        TrainConfig {
            batch_size,
            schedule,
            sigma: 0.0,
            seed,
            strategy,
            adam: AdamConfig::default(),
            checkpoint_every: 1,
            probe_size: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.batch_size == 0 {
            return fail("train.batch_size must be at least 1".into());
        }
        if self.schedule.is_empty() {
            return fail("train.schedule must have at least one phase".into());
        }
        if let Some(p) = self.schedule.iter().find(|p| !(p.lr > 0.0 && p.lr.is_finite())) {
            return fail(format!("train.schedule learning rates must be positive, got {}", p.lr));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return fail(format!("train.sigma must be non-negative, got {}", self.sigma));
        }
        if self.checkpoint_every == 0 {
            return fail("train.checkpoint_every must be at least 1".into());
        }
        self.adam.validate()
    }

    pub fn total_epochs(&self) -> usize {
        self.schedule.iter().map(|p| p.epochs).sum()
    }

    /// Learning rate of (zero-based) epoch `e`; the last phase extends indefinitely.
    pub fn lr_for_epoch(&self, e: usize) -> f64 {
        let mut end = 0;
        for p in &self.schedule {
            end += p.epochs;
            if e < end {
                return p.lr;
            }
        }
        self.schedule.last().map(|p| p.lr).unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub mean_batch_transport_cost: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainPaths {
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
}

fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Validation(format!("metrics CSV: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Validation(format!("metrics CSV: {e}")))?;
    write_atomic(path, &bytes)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Validation(format!("metrics CSV {path:?}: {e}")))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<MetricsRow>, _>>()
        .map_err(|e| Error::Validation(format!("metrics CSV {path:?}: {e}")))
}

fn dataset_hash(ds: &Dataset) -> Result<String> {
    ds.to_container()?.file_hash()
}

fn probe_loss<F: TrainableField>(field: &F, probe: &super::BatchCoupling, cfg: &TrainConfig, ds: &Dataset) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(PROBE_STREAM);
    let batch = conditional_batch(probe, cfg.sigma, &mut rng);
    Ok(field.loss_gradient(&batch, &ds.system().typing())?.loss)
}

/// Flow-matching training. Resuming continues from `resume.meta.epochs_done`; the
/// result is identical to an uninterrupted run with the same configuration.
pub fn train(
    dataset: &Dataset,
    cfg: &TrainConfig,
    model: &EgnnConfig,
    paths: &TrainPaths,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    if dataset.is_empty() {
        return Err(Error::Validation("training dataset is empty".into()));
    }
    let system = dataset.system();
    let typing = system.typing();
    if model.n_particle_types < typing.n_types() {
        return Err(Error::Validation(format!("model.n_particle_types must be at least {}", typing.n_types())));
    }
    let prior = system.prior();
    let ds_hash = dataset_hash(dataset)?;
    let started = Instant::now();

    let (mut ckpt, mut metrics) = match resume {
        Some(c) => {
            if c.meta.dataset_hash != ds_hash {
                return Err(Error::HashMismatch { expected: c.meta.dataset_hash.clone(), found: ds_hash });
            }
            if c.meta.model != *model || c.meta.system != system {
                return Err(Error::Validation("resume checkpoint was trained with a different model or system".into()));
            }
            let same_run = |a: &TrainConfig| {
                (a.batch_size, a.strategy, a.seed, a.sigma.to_bits(), a.adam) == (cfg.batch_size, cfg.strategy, cfg.seed, cfg.sigma.to_bits(), cfg.adam)
            };
            if !same_run(&c.meta.train) {
                return Err(Error::Validation("resume checkpoint was trained with a different batch size, strategy, seed, sigma or optimizer".into()));
            }
            let rows = match &paths.metrics {
                Some(p) if p.exists() => read_metrics(p)?.into_iter().filter(|r| r.step <= c.meta.step).collect(),
                _ => Vec::new(),
            };
            let mut c = c;
            c.meta.train = cfg.clone();
            c.meta.config_hash = json_hash(&(system, model, cfg))?;
            (c, rows)
        }
        None => (Checkpoint::initial(system, *model, cfg.clone(), ds_hash)?, Vec::new()),
    };

    let probe_n = cfg.probe_size.min(dataset.len());
    let probe = if probe_n > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(PROBE_STREAM);
        let x0 = prior.sample(&mut rng, probe_n);
        Some(make_coupling(&x0, &dataset.samples[..probe_n], cfg.strategy, &typing)?)
    } else {
        None
    };
    if ckpt.meta.probe_loss.is_empty() {
        if let Some(p) = &probe {
            let l = probe_loss(&ckpt.params, p, cfg, dataset)?;
            ckpt.meta.probe_loss.push(l);
        }
    }

    let total = cfg.total_epochs();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in ckpt.meta.epochs_done..total {
        let lr = cfg.lr_for_epoch(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let x1: Vec<MeanFreeConfiguration> = chunk.iter().map(|&i| dataset.samples[i].clone()).collect();
            let x0 = prior.sample(&mut rng, x1.len());
            let coupling = make_coupling(&x0, &x1, cfg.strategy, &typing)?;
            let lg = cfm_loss(&ckpt.params, &coupling, cfg.sigma, &typing, &mut rng)?;
            let step = ckpt.adam.step + 1;
            if !lg.loss.is_finite() || lg.grad.iter().any(|g| !g.is_finite()) {
                if let Some(p) = &paths.metrics {
                    write_metrics(p, &metrics)?;
                }
                return Err(Error::Diverged { step, loss: lg.loss, last_good_epoch: ckpt.meta.epochs_done });
            }
            adam_step(ckpt.params.as_flat_mut(), &lg.grad, &mut ckpt.adam, lr, &cfg.adam)?;
            metrics.push(MetricsRow {
                step,
                epoch,
                loss: lg.loss,
                mean_batch_transport_cost: coupling.mean_cost(),
                lr,
                wall_ms: started.elapsed().as_millis() as u64,
            });
        }
        ckpt.meta.epochs_done = epoch + 1;
        ckpt.meta.step = ckpt.adam.step;
        ckpt.meta.rng = RngState { seed: cfg.seed, next_stream: epoch as u64 + 1 };
        if let Some(p) = &probe {
            let l = probe_loss(&ckpt.params, p, cfg, dataset)?;
            ckpt.meta.probe_loss.push(l);
        }
        log::info!(
            "epoch {}/{total}: lr {lr:e}, last loss {:.5}",
            epoch + 1,
            metrics.last().map(|r| r.loss).unwrap_or(f64::NAN)
        );
        if (epoch + 1) % cfg.checkpoint_every == 0 || epoch + 1 == total {
            if let Some(p) = &paths.checkpoint {
                ckpt.write(p)?;
            }
            if let Some(p) = &paths.metrics {
                write_metrics(p, &metrics)?;
            }
        }
    }
    if let Some(p) = &paths.checkpoint {
        ckpt.write(p)?;
    }
    if let Some(p) = &paths.metrics {
        write_metrics(p, &metrics)?;
    }
    Ok(TrainOutcome { checkpoint: ckpt, metrics })
}
