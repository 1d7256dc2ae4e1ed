//! Trained-model checkpoints: parameters, optimizer moments and the training
//! position, in the shared container format.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::energy::System;
use crate::error::{Error, Result};
use crate::matching::{AdamState, TrainConfig};
use crate::net::{EgnnConfig, EgnnParams};
use crate::store::{format_error, json_hash, BlockSpec, Container};

pub const CHECKPOINT_KIND: &str = "checkpoint";

/// Stream reserved for parameter initialization; epochs use streams `0, 1, …`.
pub(crate) const INIT_STREAM: u64 = u64::MAX;

/// Enough to rebuild every random draw of the remaining training: epoch `e` draws
/// from ChaCha8 seeded with `seed` on stream `e`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_stream: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub system: System,
    pub model: EgnnConfig,
    pub train: TrainConfig,
    pub seed: u64,
    /// Optimizer updates taken so far.
    pub step: u64,
    pub epochs_done: usize,
    pub rng: RngState,
    pub dataset_hash: String,
    pub config_hash: String,
    /// Loss on the fixed probe batch, before training and after every epoch.
    pub probe_loss: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: EgnnParams,
    pub adam: AdamState,
}

impl Checkpoint {
    /// Freshly initialized network (identically zero field) with empty optimizer state.
    pub fn initial(system: System, model: EgnnConfig, train: TrainConfig, dataset_hash: String) -> Result<Self> {
        model.validate()?;
        if model.dim != system.dim() {
            return Err(Error::Validation(format!("model.dim = {} but {system} is {}-dimensional", model.dim, system.dim())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
        rng.set_stream(INIT_STREAM);
        let params = EgnnParams::init(model, &mut rng)?;
        let adam = AdamState::new(params.len());
        let config_hash = json_hash(&(system, &model, &train))?;
        Ok(Checkpoint {
            meta: CheckpointMeta {
                system,
                model,
                seed: train.seed,
                rng: RngState { seed: train.seed, next_stream: 0 },
                train,
                step: 0,
                epochs_done: 0,
                dataset_hash,
                config_hash,
                probe_loss: Vec::new(),
            },
            params,
            adam,
        })
    }

    pub fn to_container(&self) -> Result<Container> {
        let len = self.params.len();
        let spec = |name: &str| BlockSpec { name: name.into(), shape: vec![len] };
        Container::new(
            CHECKPOINT_KIND,
            &self.meta,
            vec![
                (spec("params"), self.params.as_flat().to_vec()),
                (spec("adam_m"), self.adam.m.clone()),
                (spec("adam_v"), self.adam.v.clone()),
            ],
        )
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    /// SHA-256 of the serialized checkpoint; sample sets and reports refer to it.
    pub fn hash(&self) -> Result<String> {
        self.to_container()?.file_hash()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let c = Container::read(path)?.expect_kind(path, CHECKPOINT_KIND)?;
        let meta: CheckpointMeta = c.meta().map_err(|e| format_error(path, format!("checkpoint manifest: {e}")))?;
        let found = json_hash(&(meta.system, &meta.model, &meta.train))?;
        if found != meta.config_hash {
            return Err(Error::HashMismatch { expected: meta.config_hash, found });
        }
        let expected = crate::net::EgnnParams::init(meta.model, &mut ChaCha8Rng::seed_from_u64(0))?.len();
        let take = |name: &str| -> Result<Vec<f64>> {
            let (shape, data) = c.require_block(path, name)?;
            if shape != [expected] {
                return Err(format_error(path, format!("block {name} has shape {shape:?}, model needs [{expected}]")));
            }
            Ok(data.to_vec())
        };
        let params = EgnnParams::from_flat(meta.model, take("params")?)?;
        let adam = AdamState { m: take("adam_m")?, v: take("adam_v")?, step: meta.step };
        Ok(Checkpoint { meta, params, adam })
    }
}
