//! Pairwise-distance potentials.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::EnergyModel;
use crate::error::{Error, Result};
use crate::geom::ParticleTyping;

/// Distances below this are treated as coincident by singular potentials.
pub const COINCIDENCE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoubleWellParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d0: f64,
    pub tau: f64,
}

impl Default for DoubleWellParams {
    fn default() -> Self {
        DoubleWellParams { a: 0.0, b: -4.0, c: 0.9, d0: 4.0, tau: 1.0 }
    }
}

impl DoubleWellParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Validation(format!("double-well tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }

    fn pair(&self, d: f64) -> (f64, f64) {
        let u = d - self.d0;
        let e = self.a * u + self.b * u * u + self.c * u.powi(4);
        let de = self.a + 2.0 * self.b * u + 4.0 * self.c * u.powi(3);
        (e / self.tau, de / self.tau)
    }

    /// Pair distances at which a single pair term is stationary (`a = 0` case: the
    /// two well minima and the barrier top).
    pub fn well_distances(&self) -> Vec<f64> {
        if self.a != 0.0 || self.c <= 0.0 || self.b >= 0.0 {
            return vec![self.d0];
        }
        let u = (-self.b / (2.0 * self.c)).sqrt();
        vec![self.d0 - u, self.d0 + u]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LennardJonesParams {
    pub rm: f64,
    pub eps: f64,
    pub tau: f64,
    /// Strength `k` of the harmonic confinement `k/2 Σ_i |x_i − c|²` around the
    /// geometric center. Without it `exp(−U)` is not normalizable: a free cluster
    /// at `τ = 1` evaporates.
    #[serde(default)]
    pub oscillator: f64,
}

impl Default for LennardJonesParams {
    fn default() -> Self {
        LennardJonesParams { rm: 1.0, eps: 1.0, tau: 1.0, oscillator: 0.0 }
    }
}

impl LennardJonesParams {
    /// Benchmark cluster: unit parameters with unit harmonic confinement.
    pub fn confined() -> Self {
        LennardJonesParams { oscillator: 1.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rm > 0.0 && self.eps > 0.0 && self.tau > 0.0) {
            return Err(Error::Validation(format!("Lennard-Jones parameters must be positive: {self:?}")));
        }
        if !(self.oscillator >= 0.0 && self.oscillator.is_finite()) {
            return Err(Error::Validation(format!("oscillator strength must be non-negative: {self:?}")));
        }
        Ok(())
    }

    fn pair(&self, d: f64) -> (f64, f64) {
        let s6 = (self.rm / d).powi(6);
        let pref = self.eps / self.tau;
        (pref * (s6 * s6 - 2.0 * s6), pref * 12.0 * (s6 - s6 * s6) / d)
    }
}

/// Sums a pair term over unordered pairs, optionally accumulating the gradient.
fn pair_sum(
    x: ArrayView2<'_, f64>,
    mut grad: Option<&mut Array2<f64>>,
    singular: bool,
    term: impl Fn(f64) -> (f64, f64),
) -> Result<f64> {
    let (n, dim) = x.dim();
    let mut total = 0.0;
    let mut diff = vec![0.0; dim];
    for i in 0..n {
        for j in (i + 1)..n {
            let mut s = 0.0;
            for k in 0..dim {
                diff[k] = x[[i, k]] - x[[j, k]];
                s += diff[k] * diff[k];
            }
            let d = s.sqrt();
            if d < COINCIDENCE_EPS {
                if singular {
                    return Err(Error::Coincident(i, j));
                }
                // smooth potentials: direction undefined, force taken as zero
                total += term(d).0;
                continue;
            }
            let (e, de) = term(d);
            total += e;
            if let Some(g) = grad.as_deref_mut() {
                for k in 0..dim {
                    let f = de * diff[k] / d;
                    g[[i, k]] += f;
                    g[[j, k]] -= f;
                }
            }
        }
    }
    Ok(total)
}

/// Double-well pair energy, `1/(2τ) Σ_{i≠j} a(d−d0) + b(d−d0)² + c(d−d0)⁴`.
pub fn dw_energy(x: ArrayView2<'_, f64>, p: &DoubleWellParams) -> f64 {
    pair_sum(x, None, false, |d| p.pair(d)).expect("double well is never singular")
}

/// Lennard-Jones energy, `ε/(2τ) Σ_{i≠j} (r_m/d)¹² − 2 (r_m/d)⁶`, plus the
/// confinement term when `p.oscillator > 0`.
pub fn lj_energy(x: ArrayView2<'_, f64>, p: &LennardJonesParams) -> Result<f64> {
    Ok(pair_sum(x, None, true, |d| p.pair(d))? + confinement(x, p.oscillator, None))
}

fn confinement(x: ArrayView2<'_, f64>, k: f64, grad: Option<&mut Array2<f64>>) -> f64 {
    if k == 0.0 {
        return 0.0;
    }
    let mut centered = x.to_owned();
    crate::geom::remove_center(&mut centered);
    let e = 0.5 * k * centered.iter().map(|v| v * v).sum::<f64>();
    if let Some(g) = grad {
        g.scaled_add(k, &centered);
    }
    e
}

#[derive(Debug, Clone)]
pub struct DoubleWell {
    pub params: DoubleWellParams,
    typing: ParticleTyping,
}

impl DoubleWell {
    pub fn new(n: usize, params: DoubleWellParams) -> Self {
        DoubleWell { params, typing: ParticleTyping::single(n) }
    }
}

impl EnergyModel for DoubleWell {
    fn energy(&self, x: ArrayView2<'_, f64>) -> Result<f64> {
        Ok(dw_energy(x, &self.params))
    }

    fn energy_and_gradient(&self, x: ArrayView2<'_, f64>) -> Result<(f64, Array2<f64>)> {
        let mut g = Array2::zeros(x.dim());
        let e = pair_sum(x, Some(&mut g), false, |d| self.params.pair(d))?;
        Ok((e, g))
    }

    fn typing(&self) -> &ParticleTyping {
        &self.typing
    }
}

#[derive(Debug, Clone)]
pub struct LennardJones {
    pub params: LennardJonesParams,
    typing: ParticleTyping,
}

impl LennardJones {
    pub fn new(n: usize, params: LennardJonesParams) -> Self {
        LennardJones { params, typing: ParticleTyping::single(n) }
    }
}

impl EnergyModel for LennardJones {
    fn energy(&self, x: ArrayView2<'_, f64>) -> Result<f64> {
        lj_energy(x, &self.params)
    }

    fn energy_and_gradient(&self, x: ArrayView2<'_, f64>) -> Result<(f64, Array2<f64>)> {
        let mut g = Array2::zeros(x.dim());
        let e = pair_sum(x, Some(&mut g), true, |d| self.params.pair(d))?;
        let c = confinement(x, self.params.oscillator, Some(&mut g));
        Ok((e + c, g))
    }

    fn typing(&self) -> &ParticleTyping {
        &self.typing
    }
}

/// `U = k/2 |x|²`: a Gaussian target with closed-form moments, for testing
/// samplers and reweighting.
#[derive(Debug, Clone)]
pub struct Harmonic {
    pub k: f64,
    typing: ParticleTyping,
}

impl Harmonic {
    pub fn new(n: usize, k: f64) -> Self {
        Harmonic { k, typing: ParticleTyping::single(n) }
    }
}

impl EnergyModel for Harmonic {
    fn energy(&self, x: ArrayView2<'_, f64>) -> Result<f64> {
        Ok(0.5 * self.k * x.iter().map(|v| v * v).sum::<f64>())
    }

    fn energy_and_gradient(&self, x: ArrayView2<'_, f64>) -> Result<(f64, Array2<f64>)> {
        Ok((self.energy(x)?, x.to_owned() * self.k))
    }

    fn typing(&self) -> &ParticleTyping {
        &self.typing
    }
}
