//! Command-line front end: argument definitions and one function per command.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{parse_schedule, RunConfig};
use crate::energy::System;
use crate::error::Error;
use crate::eval::{
    dw4_state_threshold, free_energy_difference, histogram, importance_weights, mcmc_free_energy, mean_pair_distance,
    minimize_structures, path_stats, transport_cost_diagnostic, write_histogram_csv, EvalReport, FreeEnergyReport,
};
use crate::matching::{train, PairingStrategy, TrainPaths};
use crate::ode::{compare_integrators, nll, sample_flow, Direction, EgnnField, IntegratorSpec, SampleSet};
use crate::sampler::{generate_dataset, run_chain, Dataset};
use crate::store::{write_atomic, SCHEMA_VERSION};

#[derive(Debug, Parser)]
#[command(name = "eqflow", version, about = "Equivariant flow matching for Boltzmann generators")]
pub struct Cli {
    /// TOML run configuration layered over the system preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Use the reduced smoke preset.
    #[arg(long, global = true)]
    pub smoke: bool,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for default output paths (falls back to $EQFLOW_OUT_DIR, then ./runs).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a reference dataset with MALA.
    GenData(GenDataArgs),
    /// Train a flow-matching model.
    Train(TrainArgs),
    /// Draw samples from a trained flow.
    Sample(SampleArgs),
    /// NLL, ESS and path-length report; optionally the integrator comparison table.
    Eval(EvalArgs),
    /// Locally minimize generated or reference structures.
    Minimize(MinimizeArgs),
    /// DW4 free-energy difference from the reweighted generator and a long MCMC run.
    FreeEnergy(FreeEnergyArgs),
    /// Mean transport cost of every pairing strategy over a range of batch sizes.
    DiagnoseTransport(TransportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    pub system: Option<System>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub thinning: Option<usize>,
    #[arg(long)]
    pub chains: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub system: Option<System>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub strategy: Option<PairingStrategy>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Learning-rate phases as `LR:EPOCHS,...`.
    #[arg(long, conflicts_with = "epochs")]
    pub schedule: Option<String>,
    /// Epochs for every phase of the preset schedule.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Checkpoint path (default `<out-dir>/<system>-<strategy>.ckpt`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Metrics CSV (default next to the checkpoint).
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `rk4:STEPS` or `dopri5:ATOL,RTOL[,MAX_STEPS]`.
    #[arg(long)]
    pub integrator: Option<IntegratorSpec>,
    /// Also integrate the log-density change.
    #[arg(long)]
    pub logp: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Sample file with log densities (default: draw `--n` new samples).
    #[arg(long)]
    pub samples: Option<PathBuf>,
    #[arg(long)]
    pub test_dataset: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub nll_count: Option<usize>,
    #[arg(long)]
    pub integrator: Option<IntegratorSpec>,
    /// Write the rk4-vs-reference error table.
    #[arg(long)]
    pub compare_integrators: bool,
    /// Report path (default `<out-dir>/eval.json`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MinimizeArgs {
    /// Generate `--n` samples from this checkpoint when no input file is given.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, conflicts_with = "dataset")]
    pub samples: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    /// Per-structure CSV (default `<out-dir>/minimize.csv`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FreeEnergyArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub samples: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Sampling steps of the MCMC reference, summed over chains.
    #[arg(long)]
    pub reference_steps: Option<usize>,
    #[arg(long)]
    pub no_reference: bool,
    #[arg(long)]
    pub bootstrap: Option<usize>,
    /// Report path (default `<out-dir>/free_energy.json`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TransportArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Comma-separated batch sizes.
    #[arg(long, value_delimiter = ',')]
    pub batch_sizes: Option<Vec<usize>>,
    /// CSV path (default `<out-dir>/transport.csv`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses the command line and runs it.
pub fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::GenData(a) => gen_data(&cli, a),
        Command::Train(a) => train_cmd(&cli, a),
        Command::Sample(a) => sample_cmd(&cli, a),
        Command::Eval(a) => eval_cmd(&cli, a),
        Command::Minimize(a) => minimize_cmd(&cli, a),
        Command::FreeEnergy(a) => free_energy_cmd(&cli, a),
        Command::DiagnoseTransport(a) => transport_cmd(&cli, a),
    }
}

/// Preset, then file, then global flags. Command-specific flags are applied by the caller.
fn resolve(cli: &Cli, system: Option<System>, strategy: Option<PairingStrategy>) -> anyhow::Result<RunConfig> {
    let smoke = cli.smoke.then_some(true);
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::read(p, system, strategy, smoke)?,
        None => {
            let Some(system) = system else {
                bail!("no system given: pass one (dw4, lj13 or lj55) or a --config that sets it");
            };
            RunConfig::preset(system, strategy.unwrap_or(PairingStrategy::EquivariantBatchOt), cli.smoke)
        }
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.out_dir {
        cfg.paths.out_dir = Some(d.clone());
    }
    Ok(cfg)
}

fn existing(path: Option<&Path>, what: &str, flag: &str) -> anyhow::Result<PathBuf> {
    let Some(p) = path else {
        bail!("no {what} given (use {flag} or set it in the config)");
    };
    if !p.exists() {
        bail!("{what} {} does not exist", p.display());
    }
    Ok(p.to_path_buf())
}

/// `dir/stem.suffix` next to `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    write_atomic(path, &w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?)?;
    Ok(())
}

fn load_checkpoint(cli: &Cli, path: Option<&PathBuf>) -> anyhow::Result<(RunConfig, Checkpoint, String)> {
    let from_file = match (path, &cli.config) {
        (Some(_), _) | (None, None) => None,
        (None, Some(_)) => resolve(cli, None, None).ok().and_then(|c| c.paths.checkpoint),
    };
    let path = existing(path.map(|p| p.as_path()).or(from_file.as_deref()), "checkpoint", "--checkpoint")?;
    let ckpt = Checkpoint::read(&path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = resolve(cli, Some(ckpt.meta.system), Some(ckpt.meta.train.strategy))?;
    let hash = ckpt.hash()?;
    Ok((cfg, ckpt, hash))
}

/// Samples from `path` (checked against the checkpoint) or freshly drawn with log densities.
fn samples_for(
    cfg: &RunConfig,
    ckpt: &Checkpoint,
    ckpt_hash: &str,
    path: Option<&Path>,
    n: usize,
    spec: &IntegratorSpec,
) -> anyhow::Result<SampleSet> {
    match path {
        Some(p) => {
            let set = SampleSet::read(p).with_context(|| format!("reading {}", p.display()))?;
            match &set.meta.checkpoint_hash {
                Some(h) if h == ckpt_hash => {}
                Some(h) => return Err(Error::HashMismatch { expected: ckpt_hash.into(), found: h.clone() }.into()),
                None => bail!("{} was not drawn from a checkpoint", p.display()),
            }
            if set.logp.is_none() {
                bail!("{} has no log densities; re-run `sample --logp`", p.display());
            }
            Ok(set)
        }
        None => {
            let field = EgnnField::new(&ckpt.params, cfg.system.typing())?;
            log::info!("drawing {n} samples with {spec}");
            let mut set = sample_flow(&field, &cfg.system.prior(), n, spec, cfg.seed, true)?;
            set.meta.system = Some(cfg.system);
            set.meta.checkpoint_hash = Some(ckpt_hash.into());
            Ok(set)
        }
    }
}

fn gen_data(cli: &Cli, a: &GenDataArgs) -> anyhow::Result<()> {
    let mut cfg = resolve(cli, a.system, None)?;
    let d = &mut cfg.data;
    if let Some(c) = a.count {
        d.count = c;
    }
    d.step_size = a.step_size.or(d.step_size);
    d.burn_in = a.burn_in.or(d.burn_in);
    d.thinning = a.thinning.or(d.thinning);
    d.n_chains = a.chains.or(d.n_chains);
    cfg.validate()?;
    let mcmc = cfg.mcmc_config();
    log::info!(
        "{}: {} chains x {} steps (burn-in {}, thinning {}, step size {:e})",
        cfg.system,
        mcmc.n_chains,
        mcmc.n_steps,
        mcmc.burn_in,
        mcmc.thinning,
        mcmc.step_size
    );
    let ds = generate_dataset(cfg.system, cfg.data.count, &mcmc)?;
    ds.write(&a.out)?;
    println!(
        "wrote {} {} samples to {} (acceptance {:.3})",
        ds.len(),
        cfg.system,
        a.out.display(),
        ds.meta.acceptance_rate.unwrap_or(f64::NAN)
    );
    Ok(())
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> anyhow::Result<()> {
    let resume = match &a.resume {
        Some(p) => Some(Checkpoint::read(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let system = a.system.or(resume.as_ref().map(|c| c.meta.system));
    let strategy = a.strategy.or(resume.as_ref().map(|c| c.meta.train.strategy));
    let mut cfg = resolve(cli, system, strategy)?;
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(s) = &a.schedule {
        cfg.train.schedule = parse_schedule(s)?;
    }
    if let Some(e) = a.epochs {
        cfg.train.schedule.iter_mut().for_each(|p| p.epochs = e);
    }
    if let Some(d) = &a.dataset {
        cfg.paths.dataset = Some(d.clone());
    }
    cfg.validate()?;
    let ds_path = existing(cfg.paths.dataset.as_deref(), "training dataset", "--dataset")?;
    let ds = Dataset::read(&ds_path).with_context(|| format!("reading {}", ds_path.display()))?;
    if ds.system() != cfg.system {
        bail!("dataset {} holds {} samples, not {}", ds_path.display(), ds.system(), cfg.system);
    }
    let out = a
        .out
        .clone()
        .or(cfg.paths.checkpoint.clone())
        .unwrap_or_else(|| cfg.out_dir().join(format!("{}-{}.ckpt", cfg.system, cfg.train.strategy)));
    let metrics = a.metrics.clone().unwrap_or_else(|| sibling(&out, "metrics.csv"));
    let paths = TrainPaths { checkpoint: Some(out.clone()), metrics: Some(metrics.clone()) };
    let outcome = train(&ds, &cfg.train_config(), &cfg.egnn(), &paths, resume)?;
    let m = &outcome.checkpoint.meta;
    println!(
        "trained {} epochs ({} steps); probe loss {:.5} -> {:.5}; checkpoint {}, metrics {}",
        m.epochs_done,
        m.step,
        m.probe_loss.first().copied().unwrap_or(f64::NAN),
        m.probe_loss.last().copied().unwrap_or(f64::NAN),
        out.display(),
        metrics.display()
    );
    Ok(())
}

fn sample_cmd(cli: &Cli, a: &SampleArgs) -> anyhow::Result<()> {
    let (mut cfg, ckpt, hash) = load_checkpoint(cli, a.checkpoint.as_ref())?;
    if let Some(s) = a.integrator {
        cfg.integrator = s;
    }
    cfg.validate()?;
    let n = a.n.unwrap_or(cfg.eval.n_samples);
    let field = EgnnField::new(&ckpt.params, cfg.system.typing())?;
    let mut set = sample_flow(&field, &cfg.system.prior(), n, &cfg.integrator, cfg.seed, a.logp)?;
    set.meta.system = Some(cfg.system);
    set.meta.checkpoint_hash = Some(hash);
    let out = a.out.clone().unwrap_or_else(|| cfg.out_dir().join("samples.eqf"));
    set.write(&out)?;
    let stats = path_stats(&set)?;
    println!(
        "wrote {n} samples to {} (mean path length {:.4}, arc/chord {:.4}, mean field evals {:.1})",
        out.display(),
        stats.mean,
        stats.arc_chord_ratio,
        set.n_field_evals.iter().sum::<usize>() as f64 / n as f64
    );
    Ok(())
}

#[derive(Serialize)]
struct ComparisonRow {
    integrator: String,
    median_position_error: f64,
    mean_position_error: f64,
    median_logp_error: Option<f64>,
    mean_logp_error: Option<f64>,
    mean_field_evals: f64,
}

fn eval_cmd(cli: &Cli, a: &EvalArgs) -> anyhow::Result<()> {
    let (mut cfg, ckpt, hash) = load_checkpoint(cli, a.checkpoint.as_ref())?;
    if let Some(s) = a.integrator {
        cfg.integrator = s;
    }
    if let Some(n) = a.n {
        cfg.eval.n_samples = n;
    }
    if let Some(n) = a.nll_count {
        cfg.eval.nll_count = n;
    }
    if let Some(p) = &a.test_dataset {
        cfg.paths.test_dataset = Some(p.clone());
    }
    cfg.validate()?;
    let out = a.out.clone().unwrap_or_else(|| cfg.out_dir().join("eval.json"));
    let model = cfg.system.model();
    let prior = cfg.system.prior();
    let field = EgnnField::new(&ckpt.params, cfg.system.typing())?;

    let set = samples_for(&cfg, &ckpt, &hash, a.samples.as_deref(), cfg.eval.n_samples, &cfg.integrator)?;
    let ens = importance_weights(&set, model.as_ref())?;
    let mut report = EvalReport {
        schema_version: SCHEMA_VERSION,
        system: Some(cfg.system),
        seed: cfg.seed,
        config_hash: Some(cfg.hash()?),
        checkpoint_hash: Some(hash),
        integrator: Some(set.meta.integrator),
        n_samples: set.len(),
        ess_percent: Some(ens.ess_percent()?),
        n_zero_weight: ens.n_zero_weight(),
        path_length: Some(path_stats(&set)?),
        ..Default::default()
    };

    if cfg.eval.nll_count > 0 {
        match &cfg.paths.test_dataset {
            Some(p) => {
                let test = Dataset::read(p).with_context(|| format!("reading {}", p.display()))?;
                if test.system() != cfg.system {
                    bail!("test dataset {} holds {} samples, not {}", p.display(), test.system(), cfg.system);
                }
                let k = cfg.eval.nll_count.min(test.len());
                log::info!("NLL over {k} test configurations");
                report.nll = Some(nll(&field, &test.samples[..k], &prior, &cfg.integrator)?);
            }
            None => log::warn!("no test dataset configured; skipping the NLL"),
        }
    }

    let energies: Vec<f64> = ens.energies.iter().copied().filter(|e| e.is_finite()).collect();
    if !energies.is_empty() {
        write_histogram_csv(&sibling(&out, "energy_hist.csv"), &histogram(&energies, cfg.eval.histogram_bins, None)?)?;
    }

    if a.compare_integrators {
        let k = cfg.eval.n_samples.min(256);
        let starts = prior.sample(&mut ChaCha8Rng::seed_from_u64(cfg.seed), k);
        let mut candidates: Vec<IntegratorSpec> = cfg.eval.compare_steps.iter().map(|&s| IntegratorSpec::rk4(s)).collect();
        candidates.push(cfg.integrator);
        let rows = compare_integrators(&field, &starts, Direction::Forward, &cfg.eval.reference_integrator, &candidates, true)?;
        let rows: Vec<ComparisonRow> = rows
            .into_iter()
            .map(|r| ComparisonRow {
                integrator: r.integrator.to_string(),
                median_position_error: r.median_position_error,
                mean_position_error: r.mean_position_error,
                median_logp_error: r.median_logp_error,
                mean_logp_error: r.mean_logp_error,
                mean_field_evals: r.mean_field_evals,
            })
            .collect();
        let table = sibling(&out, "integrators.csv");
        write_csv(&table, &rows)?;
        println!("{:<28} {:>14} {:>14} {:>10}", "integrator", "median |dx|", "median |dlogp|", "evals");
        for r in &rows {
            println!(
                "{:<28} {:>14.3e} {:>14.3e} {:>10.1}",
                r.integrator,
                r.median_position_error,
                r.median_logp_error.unwrap_or(f64::NAN),
                r.mean_field_evals
            );
        }
        println!("integrator table: {}", table.display());
    }

    report.write_json(&out)?;
    println!(
        "NLL {}  ESS {:.2}%  mean path length {:.4}  -> {}",
        report.nll.as_ref().map(|r| format!("{:.4}", r.nll)).unwrap_or_else(|| "n/a".into()),
        report.ess_percent.unwrap_or(f64::NAN),
        report.path_length.as_ref().map(|p| p.mean).unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct MinimizeRow {
    index: usize,
    energy_before: f64,
    energy_after: f64,
    iterations: usize,
    converged: bool,
}

fn minimize_cmd(cli: &Cli, a: &MinimizeArgs) -> anyhow::Result<()> {
    let (cfg, samples) = match (&a.samples, &a.dataset) {
        (Some(p), _) => {
            let set = SampleSet::read(p).with_context(|| format!("reading {}", p.display()))?;
            let Some(system) = set.meta.system else {
                bail!("{} does not record its system", p.display());
            };
            if let Some(c) = &a.checkpoint {
                let found = Checkpoint::read(c)?.hash()?;
                if set.meta.checkpoint_hash.as_deref() != Some(found.as_str()) {
                    return Err(Error::HashMismatch { expected: found, found: set.meta.checkpoint_hash.unwrap_or_default() }.into());
                }
            }
            (resolve(cli, Some(system), None)?, set.samples)
        }
        (None, Some(p)) => {
            let ds = Dataset::read(p).with_context(|| format!("reading {}", p.display()))?;
            (resolve(cli, Some(ds.system()), None)?, ds.samples)
        }
        (None, None) => {
            let (cfg, ckpt, hash) = load_checkpoint(cli, a.checkpoint.as_ref())?;
            let n = a.n.unwrap_or(cfg.eval.n_samples);
            let field = EgnnField::new(&ckpt.params, cfg.system.typing())?;
            let mut set = sample_flow(&field, &cfg.system.prior(), n, &cfg.integrator, cfg.seed, false)?;
            set.meta.checkpoint_hash = Some(hash);
            (cfg, set.samples)
        }
    };
    let mut samples = samples;
    if let Some(n) = a.n {
        samples.truncate(n);
    }
    let max_iters = a.max_iters.unwrap_or(cfg.eval.minimize_max_iters);
    let tol = a.tol.unwrap_or(cfg.eval.minimize_tol);
    let model = cfg.system.model();
    let (items, report) = minimize_structures(&samples, model.as_ref(), max_iters, tol)?;
    let rows: Vec<MinimizeRow> = items
        .iter()
        .enumerate()
        .filter_map(|(index, m)| {
            m.as_ref().map(|m| MinimizeRow {
                index,
                energy_before: m.energy_before,
                energy_after: m.energy_after,
                iterations: m.iterations,
                converged: m.converged,
            })
        })
        .collect();
    let out = a.out.clone().unwrap_or_else(|| cfg.out_dir().join("minimize.csv"));
    write_csv(&out, &rows)?;
    println!(
        "minimized {} of {} structures ({} converged, {} skipped); lowest energy {}; -> {}",
        rows.len(),
        report.n_input,
        report.n_converged,
        report.n_skipped,
        report.lowest_energy.map(|e| format!("{e:.8}")).unwrap_or_else(|| "n/a".into()),
        out.display()
    );
    Ok(())
}

fn free_energy_cmd(cli: &Cli, a: &FreeEnergyArgs) -> anyhow::Result<()> {
    let (mut cfg, ckpt, hash) = load_checkpoint(cli, a.checkpoint.as_ref())?;
    if cfg.system != System::Dw4 {
        bail!("free-energy is defined for dw4 only (its two states are separated by the mean pair distance)");
    }
    if let Some(n) = a.n {
        cfg.eval.n_samples = n;
    }
    if let Some(s) = a.reference_steps {
        cfg.eval.reference_steps = s;
    }
    if let Some(b) = a.bootstrap {
        cfg.eval.bootstrap = b;
    }
    cfg.validate()?;
    let out = a.out.clone().unwrap_or_else(|| cfg.out_dir().join("free_energy.json"));
    let model = cfg.system.model();
    let threshold = dw4_state_threshold();

    let set = samples_for(&cfg, &ckpt, &hash, a.samples.as_deref(), cfg.eval.n_samples, &cfg.integrator)?;
    let ens = importance_weights(&set, model.as_ref())?;
    let generator = free_energy_difference(&ens, mean_pair_distance, threshold, cfg.eval.bootstrap, cfg.seed)?;
    let gen_coord: Vec<f64> = set.samples.iter().map(mean_pair_distance).collect();

    let (reference, ref_coord) = if a.no_reference {
        (None, Vec::new())
    } else {
        let mut mcmc = cfg.mcmc_config();
        // independent of the chains that produced the training data
        mcmc.seed = cfg.seed.wrapping_add(1 << 32);
        mcmc.thinning = 10;
        let per_chain = (cfg.eval.reference_steps / mcmc.n_chains).max(mcmc.thinning);
        mcmc.n_steps = mcmc.burn_in + per_chain;
        log::info!("reference MCMC: {} chains x {per_chain} sampling steps", mcmc.n_chains);
        let run = run_chain(model.as_ref(), &mcmc)?;
        let trace: Vec<f64> = run.samples.iter().map(mean_pair_distance).collect();
        (Some(mcmc_free_energy(&trace, threshold, mcmc.n_chains)?), trace)
    };

    let lo = gen_coord.iter().chain(&ref_coord).copied().fold(f64::INFINITY, f64::min);
    let hi = gen_coord.iter().chain(&ref_coord).copied().fold(f64::NEG_INFINITY, f64::max);
    let range = (lo < hi).then_some((lo, hi));
    write_histogram_csv(&sibling(&out, "generator_hist.csv"), &histogram(&gen_coord, cfg.eval.histogram_bins, range)?)?;
    if !ref_coord.is_empty() {
        write_histogram_csv(&sibling(&out, "reference_hist.csv"), &histogram(&ref_coord, cfg.eval.histogram_bins, range)?)?;
    }

    let fe = FreeEnergyReport::new("mean_pair_distance", threshold, generator, reference);
    let report = EvalReport {
        schema_version: SCHEMA_VERSION,
        system: Some(cfg.system),
        seed: cfg.seed,
        config_hash: Some(cfg.hash()?),
        checkpoint_hash: set.meta.checkpoint_hash.clone(),
        integrator: Some(set.meta.integrator),
        n_samples: set.len(),
        ess_percent: Some(ens.ess_percent()?),
        n_zero_weight: ens.n_zero_weight(),
        free_energy: Some(fe.clone()),
        ..Default::default()
    };
    report.write_json(&out)?;
    println!(
        "generator dF = {:.4} +- {:.4}; reference {}; within 2 sigma: {}; -> {}",
        fe.generator.delta_f,
        fe.generator.std_error,
        fe.reference.map(|r| format!("{:.4} +- {:.4}", r.value, r.std_error)).unwrap_or_else(|| "n/a".into()),
        fe.within_two_sigma.map(|b| b.to_string()).unwrap_or_else(|| "n/a".into()),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TransportRow {
    strategy: PairingStrategy,
    batch_size: usize,
    mean_cost: f64,
    std_cost: f64,
}

fn transport_cmd(cli: &Cli, a: &TransportArgs) -> anyhow::Result<()> {
    let from_cfg = match &cli.config {
        Some(_) if a.dataset.is_none() => resolve(cli, None, None)?.paths.dataset,
        _ => None,
    };
    let ds_path = existing(a.dataset.as_deref().or(from_cfg.as_deref()), "dataset", "--dataset")?;
    let ds = Dataset::read(&ds_path).with_context(|| format!("reading {}", ds_path.display()))?;
    let mut cfg = resolve(cli, Some(ds.system()), None)?;
    if let Some(b) = &a.batch_sizes {
        cfg.eval.transport_batch_sizes = b.clone();
    }
    cfg.validate()?;
    let (sizes, dropped): (Vec<usize>, Vec<usize>) = cfg.eval.transport_batch_sizes.iter().partition(|&&b| b <= ds.len());
    if !dropped.is_empty() {
        log::warn!("batch sizes {dropped:?} exceed the dataset size {}; skipped", ds.len());
    }
    let rows = transport_cost_diagnostic(
        &ds.samples,
        &cfg.system.prior(),
        &cfg.system.typing(),
        &PairingStrategy::ALL,
        &sizes,
        cfg.seed,
    )?;
    let rows: Vec<TransportRow> = rows
        .into_iter()
        .map(|r| TransportRow { strategy: r.strategy, batch_size: r.batch_size, mean_cost: r.mean_cost, std_cost: r.std_cost })
        .collect();
    let out = a.out.clone().unwrap_or_else(|| cfg.out_dir().join("transport.csv"));
    write_csv(&out, &rows)?;
    println!("{:<12} {:>6} {:>12} {:>10}", "strategy", "batch", "mean cost", "std");
    for r in &rows {
        println!("{:<12} {:>6} {:>12.4} {:>10.4}", r.strategy.name(), r.batch_size, r.mean_cost, r.std_cost);
    }
    println!("-> {}", out.display());
    Ok(())
}
