//! Batch couplings between prior and data, the conditional flow-matching loss and
//! the training loop.

mod adam;
mod train;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use train::{read_metrics, train, LrPhase, MetricsRow, TrainConfig, TrainOutcome, TrainPaths};

use crate::error::{Error, Result};
use crate::geom::{align_views, hungarian, remove_center, sq_dist_views, Alignment, MeanFreeConfiguration, ParticleTyping};
use crate::net::{loss_gradient, EgnnParams, FlowBatch, LossGradient};
use crate::sampler::stack;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairingStrategy {
    #[serde(rename = "independent")]
    Independent,
    #[serde(rename = "ot", alias = "batch_ot")]
    BatchOt,
    #[serde(rename = "eq-ot", alias = "equivariant_batch_ot")]
    EquivariantBatchOt,
}

impl PairingStrategy {
    pub const ALL: [PairingStrategy; 3] =
        [PairingStrategy::Independent, PairingStrategy::BatchOt, PairingStrategy::EquivariantBatchOt];

    pub fn name(self) -> &'static str {
        match self {
            PairingStrategy::Independent => "independent",
            PairingStrategy::BatchOt => "ot",
            PairingStrategy::EquivariantBatchOt => "eq-ot",
        }
    }
}

impl std::fmt::Display for PairingStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for PairingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(PairingStrategy::Independent),
            "ot" | "batch_ot" | "batch-ot" => Ok(PairingStrategy::BatchOt),
            "eq-ot" | "equivariant_batch_ot" | "equivariant-ot" => Ok(PairingStrategy::EquivariantBatchOt),
            other => Err(Error::Validation(format!("unknown strategy {other:?} (expected independent, ot or eq-ot)"))),
        }
    }
}

/// A perfect matching between a prior batch and a data batch.
#[derive(Debug, Clone)]
pub struct BatchCoupling {
    pub x0: Vec<MeanFreeConfiguration>,
    /// Data sample matched to `x0[i]`; aligned to it for the equivariant strategy.
    pub x1: Vec<MeanFreeConfiguration>,
    /// Index into the original data batch for each pair.
    pub assignment: Vec<usize>,
    pub alignments: Option<Vec<Alignment>>,
    pub total_cost: f64,
}

impl BatchCoupling {
    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }

    pub fn mean_cost(&self) -> f64 {
        self.total_cost / self.len().max(1) as f64
    }
}

/// Pairs `batch0[i]` with `batch1[assignment[i]]`.
pub fn make_coupling(
    batch0: &[MeanFreeConfiguration],
    batch1: &[MeanFreeConfiguration],
    strategy: PairingStrategy,
    typing: &ParticleTyping,
) -> Result<BatchCoupling> {
    let b = batch0.len();
    if b == 0 || batch1.len() != b {
        return Err(Error::shape(format!("two non-empty batches of equal size ({b})"), batch1.len()));
    }
    let shape = (typing.n_particles(), batch0[0].dim());
    if let Some(x) = batch0.iter().chain(batch1).find(|x| x.coords().dim() != shape) {
        return Err(Error::shape(format!("{shape:?}"), format!("{:?}", x.coords().dim())));
    }
    match strategy {
        PairingStrategy::Independent => {
            let total_cost = batch0.iter().zip(batch1).map(|(a, c)| sq_dist_views(a.coords(), c.coords())).sum();
            Ok(BatchCoupling {
                x0: batch0.to_vec(),
                x1: batch1.to_vec(),
                assignment: (0..b).collect(),
                alignments: None,
                total_cost,
            })
        }
        PairingStrategy::BatchOt => {
            let cost = Array2::from_shape_fn((b, b), |(i, j)| sq_dist_views(batch0[i].coords(), batch1[j].coords()));
            let (assignment, total_cost) = hungarian::solve(cost.view())?;
            Ok(BatchCoupling {
                x0: batch0.to_vec(),
                x1: assignment.iter().map(|&j| batch1[j].clone()).collect(),
                assignment,
                alignments: None,
                total_cost,
            })
        }
        PairingStrategy::EquivariantBatchOt => {
            let rows: Vec<Vec<Alignment>> = batch0
                .par_iter()
                .map(|a| batch1.iter().map(|c| align_views(a.coords(), c.coords(), typing)).collect())
                .collect();
            let cost = Array2::from_shape_fn((b, b), |(i, j)| rows[i][j].cost);
            let (assignment, total_cost) = hungarian::solve(cost.view())?;
            let mut alignments = Vec::with_capacity(b);
            let mut x1 = Vec::with_capacity(b);
            for (i, &j) in assignment.iter().enumerate() {
                let al = rows[i][j].clone();
                x1.push(MeanFreeConfiguration::from_raw_projected(al.apply(batch1[j].coords())));
                alignments.push(al);
            }
            Ok(BatchCoupling { x0: batch0.to_vec(), x1, assignment, alignments: Some(alignments), total_cost })
        }
    }
}

/// Anything that can report its regression loss and parameter gradient on a batch.
/// The network implements it; tests inject closed-form fields.
pub trait TrainableField {
    fn loss_gradient(&self, batch: &FlowBatch, typing: &ParticleTyping) -> Result<LossGradient>;
}

impl TrainableField for EgnnParams {
    fn loss_gradient(&self, batch: &FlowBatch, typing: &ParticleTyping) -> Result<LossGradient> {
        loss_gradient(self, batch, typing)
    }
}

/// Regression targets for a coupling: per pair `t ~ U[0,1]`,
/// `x_t = t·x1 + (1−t)·x0 + σξ` with mean-free Gaussian `ξ`, and `u = x1 − x0`.
pub fn conditional_batch<R: Rng + ?Sized>(coupling: &BatchCoupling, sigma: f64, rng: &mut R) -> FlowBatch {
    let x0 = stack(&coupling.x0);
    let x1 = stack(&coupling.x1);
    let n = coupling.x0[0].n_particles();
    let d = x0.ncols();
    let mut t = Vec::with_capacity(coupling.len());
    let mut x_t = Array2::zeros(x0.dim());
    for k in 0..coupling.len() {
        let tk: f64 = rng.gen();
        t.push(tk);
        let rows = ndarray::s![k * n..(k + 1) * n, ..];
        let mut xk = &x1.slice(rows) * tk + &x0.slice(rows) * (1.0 - tk);
        if sigma > 0.0 {
            let mut xi = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal));
            remove_center(&mut xi);
            xk.scaled_add(sigma, &xi);
        }
        x_t.slice_mut(rows).assign(&xk);
    }
    FlowBatch { t, x_t, u: x1 - x0 }
}

/// Conditional flow-matching loss and gradient on one coupling.
pub fn cfm_loss<F: TrainableField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    coupling: &BatchCoupling,
    sigma: f64,
    typing: &ParticleTyping,
    rng: &mut R,
) -> Result<LossGradient> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::Validation(format!("sigma must be non-negative, got {sigma}")));
    }
    if coupling.is_empty() {
        return Err(Error::Validation("empty coupling".into()));
    }
    field.loss_gradient(&conditional_batch(coupling, sigma, rng), typing)
}
