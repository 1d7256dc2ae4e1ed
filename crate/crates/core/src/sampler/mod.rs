//! Metropolis-adjusted Langevin sampling of the benchmark densities and the dataset
//! file format.

mod dataset;

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use dataset::{generate_dataset, Dataset, DatasetMeta};

use crate::energy::{gradient_descent, EnergyModel, MeanFreePrior, System};
use crate::error::{Error, Result};
use crate::geom::{remove_center, MeanFreeConfiguration};

/// Burn-in acceptance below this aborts the run.
pub const MIN_ACCEPTANCE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum McmcInit {
    PriorDraw,
    Lattice,
    Provided,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    /// Spatial dimension of the configurations.
    pub dim: usize,
    pub step_size: f64,
    /// Steps per chain, burn-in included.
    pub n_steps: usize,
    pub burn_in: usize,
    pub thinning: usize,
    pub n_chains: usize,
    pub seed: u64,
    pub init: McmcInit,
    /// Gradient-descent steps applied to every starting state before sampling.
    pub relax_steps: usize,
    pub lattice_spacing: f64,
    /// Starting states for [`McmcInit::Provided`], cycled over chains.
    #[serde(skip)]
    pub initial_states: Vec<MeanFreeConfiguration>,
}

impl McmcConfig {
    /// Defaults per system, sized so the chains yield at least `count` samples.
    pub fn for_system(system: System, count: usize, seed: u64) -> Self {
        let (step_size, burn_in, thinning, lattice_spacing) = match system {
            System::Dw4 => (2e-2, 10_000, 50, 4.0),
            System::Lj13 => (1e-3, 20_000, 200, 1.1),
            System::Lj55 => (3e-4, 20_000, 500, 1.1),
        };
        let n_chains = 16;
        let per_chain = count.div_ceil(n_chains).max(1);
        McmcConfig {
            dim: system.dim(),
            step_size,
            n_steps: burn_in + per_chain * thinning,
            burn_in,
            thinning,
            n_chains,
            seed,
            init: McmcInit::PriorDraw,
            relax_steps: 200,
            lattice_spacing,
            initial_states: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(msg));
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return fail(format!("mcmc.step_size must be finite and non-negative, got {}", self.step_size));
        }
        if self.dim == 0 {
            return fail("mcmc.dim must be at least 1".into());
        }
        if self.initial_states.iter().any(|x| x.dim() != self.dim) {
            return fail(format!("mcmc initial states must have dimension {}", self.dim));
        }
        if self.thinning == 0 {
            return fail("mcmc.thinning must be at least 1".into());
        }
        if self.n_chains == 0 {
            return fail("mcmc.n_chains must be at least 1".into());
        }
        if self.burn_in >= self.n_steps {
            return fail(format!("mcmc.burn_in ({}) must be below mcmc.n_steps ({})", self.burn_in, self.n_steps));
        }
        if self.init == McmcInit::Provided && self.initial_states.is_empty() {
            return fail("mcmc.init = provided needs at least one initial state".into());
        }
        if self.init == McmcInit::Lattice && !(self.lattice_spacing > 0.0) {
            return fail("mcmc.lattice_spacing must be positive".into());
        }
        Ok(())
    }

    pub fn samples_per_chain(&self) -> usize {
        (self.n_steps - self.burn_in) / self.thinning
    }
}

/// Chain position with its cached energy and mean-free gradient.
#[derive(Debug, Clone)]
pub struct MalaState {
    pub x: Array2<f64>,
    pub energy: f64,
    pub grad: Array2<f64>,
}

impl MalaState {
    pub fn new<M: EnergyModel + ?Sized>(x: &MeanFreeConfiguration, model: &M) -> Result<Self> {
        let (energy, mut grad) = model.energy_and_gradient(x.coords())?;
        if !energy.is_finite() {
            return Err(Error::NonFinite(format!("starting energy {energy}")));
        }
        remove_center(&mut grad);
        Ok(MalaState { x: x.coords().to_owned(), energy, grad })
    }
}

/// Log acceptance probability of moving from `a` to `b` under a Langevin proposal of
/// step `eps`, including the proposal asymmetry.
pub fn mala_log_ratio(a: &MalaState, b: &MalaState, eps: f64) -> f64 {
    if eps == 0.0 {
        return 0.0;
    }
    // log q(a | b) − log q(b | a) with q(y | x) ∝ exp(−|y − x + ε∇U(x)|² / 4ε)
    let fwd: f64 = (&b.x - &a.x + &(&a.grad * eps)).iter().map(|v| v * v).sum();
    let bwd: f64 = (&a.x - &b.x + &(&b.grad * eps)).iter().map(|v| v * v).sum();
    a.energy - b.energy - (bwd - fwd) / (4.0 * eps)
}

/// One MALA transition on the mean-free subspace; returns whether the proposal was
/// accepted. Proposals with infinite energy are rejected.
pub fn mala_transition<M: EnergyModel + ?Sized, R: Rng + ?Sized>(
    state: &mut MalaState,
    model: &M,
    eps: f64,
    rng: &mut R,
) -> bool {
    if eps == 0.0 {
        return true;
    }
    let (n, d) = state.x.dim();
    let mut noise = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal));
    remove_center(&mut noise);
    let mut x_new = &state.x - &(&state.grad * eps) + &(noise * (2.0 * eps).sqrt());
    remove_center(&mut x_new);
    let u: f64 = rng.gen();
    let proposal = match model.energy_and_gradient(x_new.view()) {
        Ok((e, mut g)) if e.is_finite() && g.iter().all(|v| v.is_finite()) => {
            remove_center(&mut g);
            MalaState { x: x_new, energy: e, grad: g }
        }
        _ => return false,
    };
    let log_alpha = mala_log_ratio(state, &proposal, eps);
    if u.ln() < log_alpha {
        *state = proposal;
        true
    } else {
        false
    }
}

/// Single step from `x`, returning the new position and whether it moved.
pub fn mala_step<M: EnergyModel + ?Sized, R: Rng + ?Sized>(
    x: &MeanFreeConfiguration,
    model: &M,
    step_size: f64,
    rng: &mut R,
) -> Result<(MeanFreeConfiguration, bool)> {
    let mut state = MalaState::new(x, model)?;
    let accepted = mala_transition(&mut state, model, step_size, rng);
    let moved = accepted && step_size > 0.0;
    let y = if moved { MeanFreeConfiguration::from_raw_projected(state.x) } else { x.clone() };
    Ok((y, accepted))
}

/// Particles on a square or cubic grid, centered.
pub fn lattice(n: usize, dim: usize, spacing: f64) -> MeanFreeConfiguration {
    let side = (1..).find(|s: &usize| s.pow(dim as u32) >= n).unwrap_or(1);
    let mut x = Array2::zeros((n, dim));
    for (i, mut row) in x.axis_iter_mut(Axis(0)).enumerate() {
        let mut rest = i;
        for v in row.iter_mut() {
            *v = (rest % side) as f64 * spacing;
            rest /= side;
        }
    }
    MeanFreeConfiguration::from_raw_projected(x)
}

/// Post-burn-in samples of every chain, concatenated in chain order.
#[derive(Debug, Clone)]
pub struct McmcRun {
    pub samples: Vec<MeanFreeConfiguration>,
    pub energies: Vec<f64>,
    /// Acceptance rate after burn-in, per chain.
    pub acceptance: Vec<f64>,
    pub burn_in_acceptance: Vec<f64>,
}

impl McmcRun {
    pub fn acceptance_rate(&self) -> f64 {
        self.acceptance.iter().sum::<f64>() / self.acceptance.len().max(1) as f64
    }
}

struct ChainOutput {
    samples: Vec<MeanFreeConfiguration>,
    energies: Vec<f64>,
    acceptance: f64,
    burn_in_acceptance: f64,
}

fn initial_state<M: EnergyModel + ?Sized>(model: &M, cfg: &McmcConfig, chain: usize, rng: &mut ChaCha8Rng) -> Result<MeanFreeConfiguration> {
    let (n, dim) = (model.typing().n_particles(), cfg.dim);
    let start = match cfg.init {
        McmcInit::PriorDraw => MeanFreePrior::new(n, dim).draw(rng),
        McmcInit::Lattice => lattice(n, dim, cfg.lattice_spacing),
        McmcInit::Provided => cfg.initial_states[chain % cfg.initial_states.len()].clone(),
    };
    if cfg.relax_steps == 0 {
        return Ok(start);
    }
    let relaxed = gradient_descent(model, start.coords(), cfg.relax_steps, 0.0, false)?;
    Ok(MeanFreeConfiguration::from_raw_projected(relaxed.x))
}

fn run_one<M: EnergyModel + ?Sized>(model: &M, cfg: &McmcConfig, chain: usize) -> Result<ChainOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(chain as u64));
    let start = initial_state(model, cfg, chain, &mut rng)?;
    let mut state = MalaState::new(&start, model)?;
    let mut accepted_burn = 0usize;
    for _ in 0..cfg.burn_in {
        accepted_burn += mala_transition(&mut state, model, cfg.step_size, &mut rng) as usize;
    }
    let burn_in_acceptance = if cfg.burn_in > 0 { accepted_burn as f64 / cfg.burn_in as f64 } else { 1.0 };
    if burn_in_acceptance < MIN_ACCEPTANCE {
        return Err(Error::LowAcceptance { rate: burn_in_acceptance, min: MIN_ACCEPTANCE, step_size: cfg.step_size });
    }
    let per_chain = cfg.samples_per_chain();
    let mut samples = Vec::with_capacity(per_chain);
    let mut energies = Vec::with_capacity(per_chain);
    let mut accepted = 0usize;
    let sampling_steps = per_chain * cfg.thinning;
    for step in 1..=sampling_steps {
        accepted += mala_transition(&mut state, model, cfg.step_size, &mut rng) as usize;
        if step % cfg.thinning == 0 {
            samples.push(MeanFreeConfiguration::from_raw_projected(state.x.clone()));
            energies.push(state.energy);
        }
    }
    Ok(ChainOutput {
        samples,
        energies,
        acceptance: accepted as f64 / sampling_steps.max(1) as f64,
        burn_in_acceptance,
    })
}

/// Runs `cfg.n_chains` independent chains (chain `c` seeded with `seed + c`),
/// discards burn-in, thins, and concatenates the chains in index order.
pub fn run_chain<M: EnergyModel + ?Sized>(model: &M, cfg: &McmcConfig) -> Result<McmcRun> {
    cfg.validate()?;
    let n = model.typing().n_particles();
    if cfg.initial_states.iter().any(|x| x.n_particles() != n) {
        return Err(Error::Validation(format!("mcmc initial states must have {n} particles")));
    }
    let outputs: Vec<Result<ChainOutput>> = (0..cfg.n_chains).into_par_iter().map(|c| run_one(model, cfg, c)).collect();
    let mut run = McmcRun { samples: Vec::new(), energies: Vec::new(), acceptance: Vec::new(), burn_in_acceptance: Vec::new() };
    for out in outputs {
        let out = out?;
        run.samples.extend(out.samples);
        run.energies.extend(out.energies);
        run.acceptance.push(out.acceptance);
        run.burn_in_acceptance.push(out.burn_in_acceptance);
    }
    Ok(run)
}

/// Stacks configurations row-wise into one `(count·N) x D` array.
pub fn stack(samples: &[MeanFreeConfiguration]) -> Array2<f64> {
    let views: Vec<ArrayView2<'_, f64>> = samples.iter().map(|s| s.coords()).collect();
    if views.is_empty() {
        return Array2::zeros((0, 0));
    }
    ndarray::concatenate(Axis(0), &views).expect("equal shapes")
}
