use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{run_chain, McmcConfig};
use crate::energy::System;
use crate::error::{Error, Result};
use crate::geom::{Configuration, MeanFreeConfiguration, MEAN_FREE_TOL};
use crate::store::{format_error, json_hash, BlockSpec, Container};

pub const DATASET_KIND: &str = "dataset";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub system: System,
    pub n_particles: usize,
    pub dim: usize,
    pub count: usize,
    pub seed: u64,
    pub mcmc: Option<McmcConfig>,
    pub acceptance_rate: Option<f64>,
    /// Hash of the generating configuration.
    pub config_hash: String,
}

/// Mean-free samples of one system plus how they were produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<MeanFreeConfiguration>,
    pub energies: Vec<f64>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(system: System, samples: Vec<MeanFreeConfiguration>, seed: u64) -> Result<Self> {
        let model = system.model();
        let energies = samples.iter().map(|x| model.energy(x.coords())).collect::<Result<Vec<_>>>()?;
        let meta = DatasetMeta {
            system,
            n_particles: system.n_particles(),
            dim: system.dim(),
            count: samples.len(),
            seed,
            mcmc: None,
            acceptance_rate: None,
            config_hash: json_hash(&(system, seed))?,
        };
        let ds = Dataset { samples, energies, meta };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn system(&self) -> System {
        self.meta.system
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = (self.meta.system.n_particles(), self.meta.system.dim());
        if self.meta.count != self.samples.len() || self.energies.len() != self.samples.len() {
            return Err(Error::Validation(format!(
                "dataset declares {} samples, holds {} configurations and {} energies",
                self.meta.count,
                self.samples.len(),
                self.energies.len()
            )));
        }
        for x in &self.samples {
            if x.coords().dim() != (n, d) {
                return Err(Error::shape(format!("({n}, {d})"), format!("{:?}", x.coords().dim())));
            }
        }
        if let Some(e) = self.energies.iter().find(|e| !e.is_finite()) {
            return Err(Error::NonFinite(format!("dataset energy {e}")));
        }
        Ok(())
    }

    pub fn to_container(&self) -> Result<Container> {
        let (n, d) = (self.meta.n_particles, self.meta.dim);
        let coords: Vec<f64> = self.samples.iter().flat_map(|x| x.coords().iter().copied().collect::<Vec<_>>()).collect();
        Container::new(
            DATASET_KIND,
            &self.meta,
            vec![
                (BlockSpec { name: "samples".into(), shape: vec![self.len(), n, d] }, coords),
                (BlockSpec { name: "energies".into(), shape: vec![self.len()] }, self.energies.clone()),
            ],
        )
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_container(path, Container::read(path)?)
    }

    pub fn from_container(path: &Path, c: Container) -> Result<Self> {
        let c = c.expect_kind(path, DATASET_KIND)?;
        let meta: DatasetMeta = c.meta().map_err(|e| format_error(path, format!("dataset manifest: {e}")))?;
        let (n, d) = (meta.n_particles, meta.dim);
        if (n, d) != (meta.system.n_particles(), meta.system.dim()) {
            return Err(format_error(path, format!("{} has shape {}x{}, manifest says {n}x{d}", meta.system, meta.system.n_particles(), meta.system.dim())));
        }
        let (shape, data) = c.require_block(path, "samples")?;
        if shape != [meta.count, n, d] {
            return Err(format_error(path, format!("samples block shape {shape:?} disagrees with manifest ({}, {n}, {d})", meta.count)));
        }
        let (eshape, energies) = c.require_block(path, "energies")?;
        if eshape != [meta.count] {
            return Err(format_error(path, format!("energies block shape {eshape:?} disagrees with count {}", meta.count)));
        }
        let mut samples = Vec::with_capacity(meta.count);
        for chunk in data.chunks_exact((n * d).max(1)).take(meta.count) {
            let x = Array2::from_shape_vec((n, d), chunk.to_vec()).expect("chunk size");
            let cfg = Configuration::new(x)?;
            if cfg.center_offset() > MEAN_FREE_TOL {
                return Err(format_error(path, format!("stored sample is not mean-free ({:e})", cfg.center_offset())));
            }
            samples.push(MeanFreeConfiguration::new(cfg.into_inner())?);
        }
        let ds = Dataset { samples, energies: energies.to_vec(), meta };
        ds.validate()?;
        Ok(ds)
    }
}

/// Runs the sampler for `system` and keeps the first `count` samples in chain order.
pub fn generate_dataset(system: System, count: usize, cfg: &McmcConfig) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::Validation("dataset count must be at least 1".into()));
    }
    if cfg.dim != system.dim() {
        return Err(Error::Validation(format!("mcmc.dim = {} but {system} is {}-dimensional", cfg.dim, system.dim())));
    }
    let available = cfg.samples_per_chain() * cfg.n_chains;
    if available < count {
        return Err(Error::Validation(format!("MCMC settings yield {available} samples, {count} requested")));
    }
    let model = system.model();
    let run = run_chain(model.as_ref(), cfg)?;
    let meta = DatasetMeta {
        system,
        n_particles: system.n_particles(),
        dim: system.dim(),
        count,
        seed: cfg.seed,
        mcmc: Some(cfg.clone()),
        acceptance_rate: Some(run.acceptance_rate()),
        config_hash: json_hash(&(system, count, cfg))?,
    };
    let mut samples = run.samples;
    let mut energies = run.energies;
    samples.truncate(count);
    energies.truncate(count);
    let ds = Dataset { samples, energies, meta };
    ds.validate()?;
    Ok(ds)
}
