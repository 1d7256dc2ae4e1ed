//! Integration of the learned flow: sampling by forward integration, exact
//! log-density change through the divergence integral, likelihoods by reverse
//! integration.
//!
//! Integration runs in solver time `s ∈ [0, 1]`. Forward integration follows
//! `t = s`; reverse integration follows `t = 1 − s` with the field negated, so the
//! network is always evaluated at physical time.

mod flow;
mod solver;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

pub use flow::{
    compare_integrators, log_likelihood, nll, sample_flow, IntegratorComparison, NllReport, SampleSet, SampleSetMeta,
    SAMPLES_KIND,
};
pub use solver::integrate_many;

use crate::error::{Error, Result};
use crate::geom::{MeanFreeConfiguration, ParticleTyping};
use crate::net::{self, EgnnParams};

pub const DEFAULT_MAX_STEPS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum IntegratorSpec {
    Rk4 { n_steps: usize },
    Dopri5 { atol: f64, rtol: f64, max_steps: usize },
}

impl IntegratorSpec {
    pub fn rk4(n_steps: usize) -> Self {
        IntegratorSpec::Rk4 { n_steps }
    }

    pub fn dopri5(atol: f64, rtol: f64) -> Self {
        IntegratorSpec::Dopri5 { atol, rtol, max_steps: DEFAULT_MAX_STEPS }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            IntegratorSpec::Rk4 { n_steps: 0 } => Err(Error::Validation("rk4 needs n_steps >= 1".into())),
            IntegratorSpec::Dopri5 { atol, rtol, max_steps } => {
                if !(atol > 0.0 && rtol > 0.0 && atol.is_finite() && rtol.is_finite()) {
                    return Err(Error::Validation(format!("dopri5 tolerances must be positive, got atol {atol}, rtol {rtol}")));
                }
                if max_steps == 0 {
                    return Err(Error::Validation("dopri5 needs max_steps >= 1".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

impl Default for IntegratorSpec {
    fn default() -> Self {
        IntegratorSpec::dopri5(1e-5, 1e-5)
    }
}

impl fmt::Display for IntegratorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IntegratorSpec::Rk4 { n_steps } => write!(f, "rk4:{n_steps}"),
            IntegratorSpec::Dopri5 { atol, rtol, max_steps } => write!(f, "dopri5:{atol:e},{rtol:e},{max_steps}"),
        }
    }
}

/// `rk4:N` or `dopri5:ATOL,RTOL[,MAX_STEPS]`.
impl FromStr for IntegratorSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Validation(format!("cannot parse integrator {s:?}; expected rk4:N or dopri5:ATOL,RTOL[,MAX_STEPS]"));
        let (method, args) = s.split_once(':').ok_or_else(bad)?;
        let args: Vec<&str> = args.split(',').map(str::trim).collect();
        let spec = match (method.trim(), args.as_slice()) {
            ("rk4", [n]) => IntegratorSpec::rk4(n.parse().map_err(|_| bad())?),
            ("dopri5", [a, r]) => IntegratorSpec::dopri5(a.parse().map_err(|_| bad())?, r.parse().map_err(|_| bad())?),
            ("dopri5", [a, r, m]) => IntegratorSpec::Dopri5 {
                atol: a.parse().map_err(|_| bad())?,
                rtol: r.parse().map_err(|_| bad())?,
                max_steps: m.parse().map_err(|_| bad())?,
            },
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Prior to data, `t: 0 → 1`.
    Forward,
    /// Data to prior, `t: 1 → 0`.
    Reverse,
}

/// Outcome of integrating one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowResult {
    pub endpoint: MeanFreeConfiguration,
    /// `log p(end) − log p(start)`, each under its own marginal: `−∫∇·v dt` forward,
    /// `+∫∇·v dt` reverse. `None` when the divergence was not integrated.
    pub delta_logp: Option<f64>,
    /// Σ over accepted steps of the full-configuration displacement norm.
    pub path_length: f64,
    /// Mean over particles of each particle's own polyline length.
    pub particle_path_length: f64,
    /// `||endpoint − start||_F`.
    pub chord: f64,
    pub n_field_evals: usize,
    pub n_steps: usize,
    pub n_rejected: usize,
}

/// A time-dependent field on stacked configurations (`B·N` rows).
pub trait VectorField: Sync {
    fn n_particles(&self) -> usize;
    fn dim(&self) -> usize;
    fn velocity(&self, ts: &[f64], xs: ArrayView2<'_, f64>) -> Array2<f64>;
    fn velocity_and_divergence(&self, ts: &[f64], xs: ArrayView2<'_, f64>) -> (Array2<f64>, Array1<f64>);
}

/// The trained network as an integrable field.
pub struct EgnnField<'a> {
    params: &'a EgnnParams,
    typing: ParticleTyping,
}

impl<'a> EgnnField<'a> {
    pub fn new(params: &'a EgnnParams, typing: ParticleTyping) -> Result<Self> {
        let cfg = params.config();
        if typing.n_types() > cfg.n_particle_types {
            return Err(Error::Validation(format!(
                "typing has {} particle types, network was built for {}",
                typing.n_types(),
                cfg.n_particle_types
            )));
        }
        Ok(EgnnField { params, typing })
    }

    pub fn typing(&self) -> &ParticleTyping {
        &self.typing
    }
}

impl VectorField for EgnnField<'_> {
    fn n_particles(&self) -> usize {
        self.typing.n_particles()
    }

    fn dim(&self) -> usize {
        self.params.config().dim
    }

    fn velocity(&self, ts: &[f64], xs: ArrayView2<'_, f64>) -> Array2<f64> {
        net::velocity_chunked(self.params, ts, xs, &self.typing)
    }

    fn velocity_and_divergence(&self, ts: &[f64], xs: ArrayView2<'_, f64>) -> (Array2<f64>, Array1<f64>) {
        net::velocity_divergence_chunked(self.params, ts, xs, &self.typing)
    }
}

/// `v ≡ c`.
#[derive(Debug, Clone)]
pub struct ConstantField(pub Array2<f64>);

impl VectorField for ConstantField {
    fn n_particles(&self) -> usize {
        self.0.nrows()
    }

    fn dim(&self) -> usize {
        self.0.ncols()
    }

    fn velocity(&self, ts: &[f64], _: ArrayView2<'_, f64>) -> Array2<f64> {
        let n = self.0.nrows();
        Array2::from_shape_fn((ts.len() * n, self.0.ncols()), |(r, c)| self.0[[r % n, c]])
    }

    fn velocity_and_divergence(&self, ts: &[f64], xs: ArrayView2<'_, f64>) -> (Array2<f64>, Array1<f64>) {
        (self.velocity(ts, xs), Array1::zeros(ts.len()))
    }
}

/// `v = α·x`, with divergence `α·N·D`.
#[derive(Debug, Clone, Copy)]
pub struct LinearField {
    pub alpha: f64,
    pub n_particles: usize,
    pub dim: usize,
}

impl VectorField for LinearField {
    fn n_particles(&self) -> usize {
        self.n_particles
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, _: &[f64], xs: ArrayView2<'_, f64>) -> Array2<f64> {
        xs.mapv(|v| self.alpha * v)
    }

    fn velocity_and_divergence(&self, ts: &[f64], xs: ArrayView2<'_, f64>) -> (Array2<f64>, Array1<f64>) {
        let div = self.alpha * (self.n_particles * self.dim) as f64;
        (self.velocity(ts, xs), Array1::from_elem(ts.len(), div))
    }
}

/// Exact `∇·v_θ(t, x)`: the trace of the Jacobian over all `N·D` coordinate directions.
pub fn divergence(params: &EgnnParams, t: f64, x: &MeanFreeConfiguration, typing: &ParticleTyping) -> Result<f64> {
    let (_, div) = net::velocity_and_divergence(params, &[t], x.coords(), typing)?;
    Ok(div[0])
}

/// Integrates one configuration.
pub fn integrate<F: VectorField + ?Sized>(
    field: &F,
    x_start: &MeanFreeConfiguration,
    direction: Direction,
    spec: &IntegratorSpec,
    track_logp: bool,
) -> Result<FlowResult> {
    integrate_many(field, std::slice::from_ref(x_start), direction, spec, track_logp)?
        .pop()
        .expect("one result per input")
}

#[cfg(test)]
mod tests;
