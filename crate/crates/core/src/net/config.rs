use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the equivariant vector-field network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EgnnConfig {
    pub n_layers: usize,
    pub n_hidden: usize,
    pub n_particle_types: usize,
    pub dim: usize,
}

impl EgnnConfig {
    pub fn new(n_layers: usize, n_hidden: usize, n_particle_types: usize, dim: usize) -> Result<Self> {
        let c = EgnnConfig { n_layers, n_hidden, n_particle_types, dim };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::Validation("model.n_layers must be at least 1".into()));
        }
        if self.n_hidden == 0 {
            return Err(Error::Validation("model.n_hidden must be at least 1".into()));
        }
        if self.n_particle_types == 0 {
            return Err(Error::Validation("model.n_particle_types must be at least 1".into()));
        }
        if self.dim == 0 {
            return Err(Error::Validation("model.dim must be at least 1".into()));
        }
        Ok(())
    }

    /// Width of the learned type embedding; together with `t` it fills the hidden state.
    pub fn embedding_width(&self) -> usize {
        self.n_hidden - 1
    }
}
