//! Particle configurations and the particle-type partition.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance on the per-dimension mean of a mean-free configuration.
pub const MEAN_FREE_TOL: f64 = 1e-9;

/// Positions of `N` particles in `D` dimensions, one particle per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Configuration(Array2<f64>);

impl Configuration {
    pub fn new(coords: Array2<f64>) -> Result<Self> {
        if coords.nrows() == 0 || coords.ncols() == 0 {
            return Err(Error::shape("N >= 1 and D >= 1", format!("{:?}", coords.dim())));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("configuration coordinates".into()));
        }
        Ok(Configuration(coords))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::shape(format!("rows of length {d}"), "ragged rows"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let coords = Array2::from_shape_vec((n, d), flat).map_err(|e| Error::Validation(e.to_string()))?;
        Self::new(coords)
    }

    pub fn n_particles(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn coords(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    /// Largest absolute per-dimension mean.
    pub fn center_offset(&self) -> f64 {
        column_means(self.0.view()).iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// A configuration whose geometric center sits at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFreeConfiguration(Array2<f64>);

impl MeanFreeConfiguration {
    /// Wraps coordinates that are already mean-free; rejects anything else.
    pub fn new(coords: Array2<f64>) -> Result<Self> {
        let c = Configuration::new(coords)?;
        let off = c.center_offset();
        if off > MEAN_FREE_TOL {
            return Err(Error::NotMeanFree(off));
        }
        Ok(MeanFreeConfiguration(c.0))
    }

    /// Projects arbitrary finite coordinates onto the mean-free subspace.
    pub fn project(coords: Array2<f64>) -> Result<Self> {
        Ok(project_mean_free(&Configuration::new(coords)?))
    }

    pub(crate) fn from_raw_projected(mut coords: Array2<f64>) -> Self {
        remove_center(&mut coords);
        MeanFreeConfiguration(coords)
    }

    pub fn n_particles(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn coords(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn as_configuration(&self) -> Configuration {
        Configuration(self.0.clone())
    }
}

impl From<MeanFreeConfiguration> for Configuration {
    fn from(x: MeanFreeConfiguration) -> Self {
        Configuration(x.0)
    }
}

pub(crate) fn column_means(x: ArrayView2<'_, f64>) -> Vec<f64> {
    let n = x.nrows() as f64;
    x.sum_axis(Axis(0)).iter().map(|s| s / n).collect()
}

/// Subtracts the column means in place.
pub fn remove_center(x: &mut Array2<f64>) {
    let means = column_means(x.view());
    for mut row in x.rows_mut() {
        for (v, m) in row.iter_mut().zip(&means) {
            *v -= m;
        }
    }
}

/// Removes the geometric center.
pub fn project_mean_free(x: &Configuration) -> MeanFreeConfiguration {
    MeanFreeConfiguration::from_raw_projected(x.0.clone())
}

/// Partition of particle indices into blocks of mutually interchangeable particles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ParticleTyping {
    type_ids: Vec<usize>,
    blocks: Vec<Vec<usize>>,
}

impl ParticleTyping {
    /// Type ids must be dense: every id in `0..n_types` occurs at least once.
    pub fn new(type_ids: Vec<usize>) -> Result<Self> {
        if type_ids.is_empty() {
            return Err(Error::Validation("typing must cover at least one particle".into()));
        }
        let n_types = type_ids.iter().max().map_or(0, |m| m + 1);
        let mut blocks = vec![Vec::new(); n_types];
        for (i, &t) in type_ids.iter().enumerate() {
            blocks[t].push(i);
        }
        if let Some(t) = blocks.iter().position(Vec::is_empty) {
            return Err(Error::Validation(format!("type id {t} is unused; ids must be dense")));
        }
        Ok(ParticleTyping { type_ids, blocks })
    }

    /// All particles interchangeable.
    pub fn single(n: usize) -> Self {
        Self::new(vec![0; n.max(1)]).expect("non-empty single-type typing")
    }

    pub fn n_particles(&self) -> usize {
        self.type_ids.len()
    }

    pub fn n_types(&self) -> usize {
        self.blocks.len()
    }

    pub fn type_ids(&self) -> &[usize] {
        &self.type_ids
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn is_single_type(&self) -> bool {
        self.blocks.len() == 1
    }

    /// True when `perm` is a bijection that maps every block onto itself.
    pub fn preserves(&self, perm: &[usize]) -> bool {
        if perm.len() != self.type_ids.len() {
            return false;
        }
        let mut seen = vec![false; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            if p >= perm.len() || seen[p] || self.type_ids[p] != self.type_ids[i] {
                return false;
            }
            seen[p] = true;
        }
        true
    }
}

impl TryFrom<Vec<usize>> for ParticleTyping {
    type Error = Error;

    fn try_from(ids: Vec<usize>) -> Result<Self> {
        Self::new(ids)
    }
}

impl From<ParticleTyping> for Vec<usize> {
    fn from(t: ParticleTyping) -> Self {
        t.type_ids
    }
}
