//! Equivariant graph network parameterizing the flow's vector field.

mod backward;
mod config;
mod forward;
mod graph;
mod jvp;
mod params;

use ndarray::{s, Array1, Array2, ArrayView2};
use rayon::prelude::*;

pub use config::EgnnConfig;
pub use forward::VectorFieldEval;
pub use params::EgnnParams;

use crate::error::{Error, Result};
use crate::geom::{MeanFreeConfiguration, ParticleTyping};

/// Upper bound on edges per evaluation chunk. Keeps the edge-stacked intermediates
/// small enough to stay in cache-friendly gemm territory.
const EDGE_CHUNK: usize = 8192;

fn samples_per_chunk(n: usize) -> usize {
    (EDGE_CHUNK / (n * n.saturating_sub(1)).max(1)).max(1)
}

fn check_inputs(params: &EgnnParams, ts: &[f64], xs: ArrayView2<'_, f64>, typing: &ParticleTyping) -> Result<()> {
    let cfg = params.config();
    let n = typing.n_particles();
    if typing.n_types() > cfg.n_particle_types {
        return Err(Error::Validation(format!(
            "typing has {} particle types, network was built for {}",
            typing.n_types(),
            cfg.n_particle_types
        )));
    }
    if xs.ncols() != cfg.dim || xs.nrows() != n * ts.len() {
        return Err(Error::shape(format!("{} x {}", n * ts.len(), cfg.dim), format!("{} x {}", xs.nrows(), xs.ncols())));
    }
    if let Some(t) = ts.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Validation(format!("time {t} outside [0, 1]")));
    }
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("network input".into()));
    }
    Ok(())
}

/// Evaluates `v_θ(t, x)` on one configuration.
pub fn forward(
    params: &EgnnParams,
    t: f64,
    x: &MeanFreeConfiguration,
    typing: &ParticleTyping,
) -> Result<VectorFieldEval> {
    forward_many(params, &[t], x.coords(), typing)
}

/// Evaluates the field on `ts.len()` configurations stacked row-wise in `xs`.
pub fn forward_many(
    params: &EgnnParams,
    ts: &[f64],
    xs: ArrayView2<'_, f64>,
    typing: &ParticleTyping,
) -> Result<VectorFieldEval> {
    check_inputs(params, ts, xs, typing)?;
    Ok(forward::forward_batch(params, ts, xs, typing))
}

/// Field values only, evaluated in bounded chunks.
pub(crate) fn velocity_chunked(
    params: &EgnnParams,
    ts: &[f64],
    xs: ArrayView2<'_, f64>,
    typing: &ParticleTyping,
) -> Array2<f64> {
    let n = typing.n_particles();
    let per = samples_per_chunk(n);
    let parts: Vec<Array2<f64>> = (0..ts.len())
        .step_by(per)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|start| {
            let end = (start + per).min(ts.len());
            forward::forward_batch(params, &ts[start..end], xs.slice(s![start * n..end * n, ..]), typing).v
        })
        .collect();
    concat_rows(parts, xs.ncols())
}

/// Field values and exact divergences, evaluated in bounded chunks.
pub(crate) fn velocity_divergence_chunked(
    params: &EgnnParams,
    ts: &[f64],
    xs: ArrayView2<'_, f64>,
    typing: &ParticleTyping,
) -> (Array2<f64>, Array1<f64>) {
    let n = typing.n_particles();
    let d = xs.ncols();
    // the tangent pass multiplies the edge count by N·D
    let per = (samples_per_chunk(n) / (n * d)).max(1);
    let parts: Vec<(Array2<f64>, Array1<f64>)> = (0..ts.len())
        .step_by(per)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|start| {
            let end = (start + per).min(ts.len());
            let eval = forward::forward_batch(params, &ts[start..end], xs.slice(s![start * n..end * n, ..]), typing);
            let div = jvp::divergence(params, &eval, d);
            (eval.v, div)
        })
        .collect();
    let div = parts.iter().flat_map(|(_, dv)| dv.iter().copied()).collect();
    (concat_rows(parts.into_iter().map(|(v, _)| v).collect(), d), div)
}

fn concat_rows(parts: Vec<Array2<f64>>, d: usize) -> Array2<f64> {
    let rows = parts.iter().map(|p| p.nrows()).sum();
    let mut out = Array2::zeros((rows, d));
    let mut r = 0;
    for p in parts {
        out.slice_mut(s![r..r + p.nrows(), ..]).assign(&p);
        r += p.nrows();
    }
    out
}

/// Field values and exact divergences for a stack of configurations.
pub fn velocity_and_divergence(
    params: &EgnnParams,
    ts: &[f64],
    xs: ArrayView2<'_, f64>,
    typing: &ParticleTyping,
) -> Result<(Array2<f64>, Array1<f64>)> {
    check_inputs(params, ts, xs, typing)?;
    Ok(velocity_divergence_chunked(params, ts, xs, typing))
}

/// `(∂v/∂x)·direction` at `(t, x)`.
pub fn directional_jacobian(
    params: &EgnnParams,
    t: f64,
    x: &MeanFreeConfiguration,
    direction: ArrayView2<'_, f64>,
    typing: &ParticleTyping,
) -> Result<Array2<f64>> {
    if direction.dim() != x.coords().dim() {
        return Err(Error::shape(format!("{:?}", x.coords().dim()), format!("{:?}", direction.dim())));
    }
    let eval = forward(params, t, x, typing)?;
    Ok(jvp::jvp(params, &eval, direction, 1))
}

/// Regression minibatch for the flow-matching loss: times, interpolated
/// configurations and target velocities, configurations stacked row-wise.
#[derive(Debug, Clone)]
pub struct FlowBatch {
    pub t: Vec<f64>,
    pub x_t: Array2<f64>,
    pub u: Array2<f64>,
}

impl FlowBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct LossGradient {
    /// Mean over items of `||v_θ(t, x_t) − u||²`.
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Loss and exact parameter gradient of the mean squared regression error.
///
/// Chunks are evaluated independently and reduced in chunk order, so the result does
/// not depend on the thread count.
pub fn loss_gradient(params: &EgnnParams, batch: &FlowBatch, typing: &ParticleTyping) -> Result<LossGradient> {
    if batch.is_empty() {
        return Err(Error::Validation("empty minibatch".into()));
    }
    check_inputs(params, &batch.t, batch.x_t.view(), typing)?;
    if batch.u.dim() != batch.x_t.dim() {
        return Err(Error::shape(format!("{:?}", batch.x_t.dim()), format!("{:?}", batch.u.dim())));
    }
    let n = typing.n_particles();
    let per = samples_per_chunk(n);
    let scale = 1.0 / batch.len() as f64;
    let parts: Vec<(f64, Vec<f64>)> = (0..batch.len())
        .step_by(per)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|start| {
            let end = (start + per).min(batch.len());
            let rows = s![start * n..end * n, ..];
            let eval = forward::forward_batch(params, &batch.t[start..end], batch.x_t.slice(rows), typing);
            let resid = &eval.v - &batch.u.slice(rows);
            let loss = resid.iter().map(|r| r * r).sum::<f64>() * scale;
            let grad_v = resid * (2.0 * scale);
            let mut grad = vec![0.0; params.len()];
            backward::backward(params, &eval, grad_v.view(), typing, &mut grad);
            (loss, grad)
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.len()];
    for (l, g) in parts {
        loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    Ok(LossGradient { loss, grad })
}

#[cfg(test)]
pub(crate) mod tests;
