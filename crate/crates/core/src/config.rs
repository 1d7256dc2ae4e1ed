//! Run configuration: per-system presets, a TOML file overlay and validation.
//!
//! Precedence is command line over file over preset. The preset is chosen from the
//! system, pairing strategy and smoke flag, whichever source sets them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::energy::System;
use crate::error::{Error, Result};
use crate::matching::{LrPhase, PairingStrategy, TrainConfig};
use crate::net::EgnnConfig;
use crate::ode::IntegratorSpec;
use crate::sampler::McmcConfig;
use crate::store::json_hash;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "EQFLOW_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "runs";

/// Samples in a smoke dataset; with the smoke schedules training takes about 500 steps.
pub const SMOKE_COUNT: usize = 1024;
const SMOKE_STEPS: usize = 512;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub dataset: Option<PathBuf>,
    pub test_dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

/// MCMC overrides on top of [`McmcConfig::for_system`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub count: usize,
    pub step_size: Option<f64>,
    pub burn_in: Option<usize>,
    pub thinning: Option<usize>,
    pub n_chains: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Generated samples for ESS and path statistics.
    pub n_samples: usize,
    /// Test configurations used for the NLL (0 disables it).
    pub nll_count: usize,
    pub histogram_bins: usize,
    /// MCMC steps per chain for the free-energy reference.
    pub reference_steps: usize,
    pub bootstrap: usize,
    pub transport_batch_sizes: Vec<usize>,
    pub compare_steps: Vec<usize>,
    pub reference_integrator: IntegratorSpec,
    pub minimize_max_iters: usize,
    pub minimize_tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: System,
    pub seed: u64,
    pub smoke: bool,
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub integrator: IntegratorSpec,
    pub eval: EvalConfig,
}

/// The training options a user sets; the seed comes from the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub strategy: PairingStrategy,
    pub batch_size: usize,
    pub schedule: Vec<LrPhase>,
    pub sigma: f64,
    pub checkpoint_every: usize,
    pub probe_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

/// Batch size and the two learning-rate phases of the training-schedule table.
fn schedule_preset(system: System, strategy: PairingStrategy) -> (usize, usize) {
    match (system, strategy) {
        (System::Dw4, PairingStrategy::EquivariantBatchOt) => (32, 50),
        (System::Dw4, _) => (256, 200),
        (_, PairingStrategy::EquivariantBatchOt) => (32, 200),
        (_, _) => (256, 1000),
    }
}

impl RunConfig {
    pub fn preset(system: System, strategy: PairingStrategy, smoke: bool) -> Self {
        let (n_layers, n_hidden) = match system {
            System::Dw4 | System::Lj13 => (3, 32),
            System::Lj55 => (5, 64),
        };
        let (batch_size, mut epochs) = schedule_preset(system, strategy);
        let count = match (smoke, system) {
            (true, _) => SMOKE_COUNT,
            (false, System::Dw4) => 100_000,
            (false, _) => 10_000,
        };
        if smoke {
            let per_epoch = count.div_ceil(batch_size);
            epochs = SMOKE_STEPS.div_ceil(per_epoch).div_ceil(2);
        }
        RunConfig {
            system,
            seed: 0,
            smoke,
            paths: PathsConfig::default(),
            data: DataConfig { count, step_size: None, burn_in: None, thinning: None, n_chains: None },
            model: ModelConfig { n_layers, n_hidden },
            train: TrainSection {
                strategy,
                batch_size,
                schedule: vec![LrPhase { lr: 5e-4, epochs }, LrPhase { lr: 5e-5, epochs }],
                sigma: 0.0,
                checkpoint_every: if smoke { 1 } else { 10 },
                probe_size: 256,
                beta1: 0.9,
                beta2: 0.999,
                adam_eps: 1e-8,
            },
            integrator: IntegratorSpec::dopri5(1e-5, 1e-5),
            eval: EvalConfig {
                n_samples: if smoke { 256 } else { 10_000 },
                nll_count: if smoke { 256 } else { 2_000 },
                histogram_bins: 50,
                reference_steps: if smoke { 20_000 } else { 1_000_000 },
                bootstrap: crate::eval::DEFAULT_BOOTSTRAP,
                transport_batch_sizes: vec![1, 8, 32, 64, 256],
                compare_steps: vec![5, 10, 20, 40],
                reference_integrator: IntegratorSpec::dopri5(1e-8, 1e-8),
                minimize_max_iters: 20_000,
                minimize_tol: 1e-6,
            },
        }
    }

    /// Preset selected by the file's (or the overrides') system/strategy/smoke, with
    /// the file's values layered on top.
    pub fn from_toml(text: &str, system: Option<System>, strategy: Option<PairingStrategy>, smoke: Option<bool>) -> Result<Self> {
        let file: toml::Table = text.parse().map_err(|e| Error::Validation(format!("config: {e}")))?;
        let pick = |key: &str| file.get(key).cloned();
        let system = match system {
            Some(s) => s,
            None => match pick("system") {
                Some(v) => v.try_into().map_err(|e| Error::Validation(format!("config: system: {e}")))?,
                None => return Err(Error::Validation("config: system is not set (dw4, lj13 or lj55)".into())),
            },
        };
        let strategy = match strategy {
            Some(s) => s,
            None => match file.get("train").and_then(|t| t.get("strategy")).cloned() {
                Some(v) => v.try_into().map_err(|e| Error::Validation(format!("config: train.strategy: {e}")))?,
                None => PairingStrategy::EquivariantBatchOt,
            },
        };
        let smoke = match smoke {
            Some(s) => s,
            None => match pick("smoke") {
                Some(v) => v.try_into().map_err(|e| Error::Validation(format!("config: smoke: {e}")))?,
                None => false,
            },
        };
        let mut base = toml::Table::try_from(RunConfig::preset(system, strategy, smoke))
            .map_err(|e| Error::Validation(format!("config: {e}")))?;
        merge(&mut base, file);
        // the choices that selected the preset win over the file
        base.insert("system".into(), toml::Value::String(system.name().into()));
        base.insert("smoke".into(), toml::Value::Boolean(smoke));
        if let Some(toml::Value::Table(t)) = base.get_mut("train") {
            t.insert("strategy".into(), toml::Value::String(strategy.name().into()));
        }
        let cfg: RunConfig = toml::Value::Table(base).try_into().map_err(|e| Error::Validation(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn read(path: &Path, system: Option<System>, strategy: Option<PairingStrategy>, smoke: Option<bool>) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text, system, strategy, smoke)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Validation(format!("config: {e}")))
    }

    pub fn egnn(&self) -> EgnnConfig {
        EgnnConfig {
            n_layers: self.model.n_layers,
            n_hidden: self.model.n_hidden,
            n_particle_types: self.system.typing().n_types(),
            dim: self.system.dim(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        let mut cfg = TrainConfig::new(t.batch_size, t.schedule.clone(), t.strategy, self.seed);
        cfg.sigma = t.sigma;
        cfg.checkpoint_every = t.checkpoint_every;
        cfg.probe_size = t.probe_size;
        cfg.adam.beta1 = t.beta1;
        cfg.adam.beta2 = t.beta2;
        cfg.adam.eps = t.adam_eps;
        cfg
    }

    pub fn mcmc_config(&self) -> McmcConfig {
        let d = &self.data;
        let mut cfg = McmcConfig::for_system(self.system, d.count, self.seed);
        if let Some(s) = d.step_size {
            cfg.step_size = s;
        }
        if let Some(c) = d.n_chains {
            cfg.n_chains = c;
        }
        if let Some(b) = d.burn_in {
            cfg.burn_in = b;
        }
        if let Some(t) = d.thinning {
            cfg.thinning = t;
        }
        cfg.n_steps = cfg.burn_in + d.count.div_ceil(cfg.n_chains.max(1)).max(1) * cfg.thinning;
        cfg
    }

    /// Output directory: configured path, else `$EQFLOW_OUT_DIR`, else `runs`.
    pub fn out_dir(&self) -> PathBuf {
        self.paths
            .out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
    }

    pub fn hash(&self) -> Result<String> {
        json_hash(self)
    }

    /// Checks every section, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, e: Error| match e {
            Error::Validation(m) => Error::Validation(format!("{name}: {m}")),
            e => e,
        };
        if self.data.count == 0 {
            return Err(Error::Validation("data.count must be at least 1".into()));
        }
        self.mcmc_config().validate().map_err(|e| field("data", e))?;
        self.egnn().validate()?;
        self.train_config().validate().map_err(|e| field("train", e))?;
        self.integrator.validate().map_err(|e| field("integrator", e))?;
        self.eval.reference_integrator.validate().map_err(|e| field("eval.reference_integrator", e))?;
        let e = &self.eval;
        for (name, v) in [("eval.n_samples", e.n_samples), ("eval.histogram_bins", e.histogram_bins), ("eval.bootstrap", e.bootstrap)] {
            if v == 0 {
                return Err(Error::Validation(format!("{name} must be at least 1")));
            }
        }
        if e.compare_steps.contains(&0) || e.transport_batch_sizes.contains(&0) {
            return Err(Error::Validation("eval.compare_steps and eval.transport_batch_sizes entries must be at least 1".into()));
        }
        if !(e.minimize_tol > 0.0) {
            return Err(Error::Validation("eval.minimize_tol must be positive".into()));
        }
        Ok(())
    }
}

/// Deep merge: tables merge key by key, everything else is replaced.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// `LR:EPOCHS[,LR:EPOCHS…]`, e.g. `5e-4:200,5e-5:200`.
pub fn parse_schedule(s: &str) -> Result<Vec<LrPhase>> {
    s.split(',')
        .map(|phase| {
            let (lr, ep) = phase
                .split_once(':')
                .ok_or_else(|| Error::Validation(format!("schedule phase {phase:?} must be LR:EPOCHS")))?;
            Ok(LrPhase {
                lr: lr.trim().parse().map_err(|_| Error::Validation(format!("bad learning rate {lr:?}")))?,
                epochs: ep.trim().parse().map_err(|_| Error::Validation(format!("bad epoch count {ep:?}")))?,
            })
        })
        .collect()
}
