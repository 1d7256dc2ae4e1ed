//! Fixed-step rk4 and Dormand–Prince 5(4) on the augmented state `(x, log p)`.
//!
//! Samples are integrated independently (each adaptive trajectory keeps its own step
//! size and acceptance history) but advanced in lockstep, so every stage evaluates
//! the field once on a stacked batch.

use ndarray::Array2;

use super::{Direction, FlowResult, IntegratorSpec, VectorField};
use crate::error::{Error, Result};
use crate::geom::MeanFreeConfiguration;

/// Samples advanced together; bounds the memory of the stage buffers.
const GROUP: usize = 2048;

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [&[f64]; 7] = [
    &[],
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
    &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order minus embedded fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

// PI step-size control.
const BETA: f64 = 0.04;
const EXPO: f64 = 0.2 - 0.75 * BETA;
const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
const H_MIN: f64 = 1e-14;

/// Right-hand side on flat augmented states `[x (N·D values), log p]`.
struct Rhs<'a, F: ?Sized> {
    field: &'a F,
    direction: Direction,
    logp: bool,
    n: usize,
    d: usize,
}

impl<F: VectorField + ?Sized> Rhs<'_, F> {
    fn nd(&self) -> usize {
        self.n * self.d
    }

    /// Components entering the error norm.
    fn n_err(&self) -> usize {
        self.nd() + usize::from(self.logp)
    }

    /// Derivatives for a batch of `(s, y)`; `None` marks a non-finite result.
    fn eval(&self, s: &[f64], ys: &[&[f64]]) -> Vec<Option<Vec<f64>>> {
        if ys.is_empty() {
            return Vec::new();
        }
        let nd = self.nd();
        let mut flat = Vec::with_capacity(ys.len() * nd);
        for y in ys {
            flat.extend_from_slice(&y[..nd]);
        }
        let xs = Array2::from_shape_vec((ys.len() * self.n, self.d), flat).expect("stacked states");
        let (sign, ts): (f64, Vec<f64>) = match self.direction {
            Direction::Forward => (1.0, s.iter().map(|s| s.clamp(0.0, 1.0)).collect()),
            Direction::Reverse => (-1.0, s.iter().map(|s| (1.0 - s).clamp(0.0, 1.0)).collect()),
        };
        let (v, div) = if self.logp {
            let (v, div) = self.field.velocity_and_divergence(&ts, xs.view());
            (v, Some(div))
        } else {
            (self.field.velocity(&ts, xs.view()), None)
        };
        let v = v.as_standard_layout();
        let v = v.as_slice().expect("standard layout");
        (0..ys.len())
            .map(|k| {
                let mut out: Vec<f64> = v[k * nd..(k + 1) * nd].iter().map(|u| sign * u).collect();
                out.push(div.as_ref().map_or(0.0, |dv| -sign * dv[k]));
                out.iter().all(|u| u.is_finite()).then_some(out)
            })
            .collect()
    }
}

/// Per-trajectory bookkeeping.
struct Track {
    start: Vec<f64>,
    y: Vec<f64>,
    s: f64,
    evals: usize,
    steps: usize,
    rejected: usize,
    path: f64,
    particle_path: f64,
    // adaptive only
    h: f64,
    k1: Vec<f64>,
    fac_old: f64,
    last_rejected: bool,
    attempts: usize,
    failed: Option<Error>,
    done: bool,
}

impl Track {
    fn new(x: &MeanFreeConfiguration) -> Self {
        let mut y: Vec<f64> = x.coords().iter().copied().collect();
        let start = y.clone();
        y.push(0.0);
        Track {
            start,
            y,
            s: 0.0,
            evals: 0,
            steps: 0,
            rejected: 0,
            path: 0.0,
            particle_path: 0.0,
            h: 0.0,
            k1: Vec::new(),
            fac_old: 1e-4,
            last_rejected: false,
            attempts: 0,
            failed: None,
            done: false,
        }
    }

    fn active(&self) -> bool {
        !self.done && self.failed.is_none()
    }

    fn fail(&mut self, e: Error) {
        self.failed = Some(e);
    }

    /// Accepts `y_new`, re-projecting the increment onto the mean-free subspace (the
    /// start is already mean-free) and extending the path.
    fn accept(&mut self, y_new: Vec<f64>, n: usize, d: usize) {
        let mut delta: Vec<f64> = y_new.iter().zip(&self.y).map(|(a, b)| a - b).collect();
        for c in 0..d {
            let mean = (0..n).map(|i| delta[i * d + c]).sum::<f64>() / n as f64;
            for i in 0..n {
                delta[i * d + c] -= mean;
            }
        }
        let mut total = 0.0;
        let mut per_particle = 0.0;
        for i in 0..n {
            let sq: f64 = delta[i * d..(i + 1) * d].iter().map(|v| v * v).sum();
            total += sq;
            per_particle += sq.sqrt();
        }
        self.path += total.sqrt();
        self.particle_path += per_particle / n as f64;
        for (y, dv) in self.y.iter_mut().zip(&delta) {
            *y += dv;
        }
        self.steps += 1;
    }

    fn finish(self, n: usize, d: usize, logp: bool) -> Result<FlowResult> {
        if let Some(e) = self.failed {
            return Err(e);
        }
        let nd = n * d;
        let chord = self.y[..nd].iter().zip(&self.start).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let endpoint = Array2::from_shape_vec((n, d), self.y[..nd].to_vec()).expect("state shape");
        Ok(FlowResult {
            endpoint: match MeanFreeConfiguration::new(endpoint.clone()) {
                Ok(x) => x,
                Err(_) => MeanFreeConfiguration::from_raw_projected(endpoint),
            },
            delta_logp: logp.then_some(self.y[nd]),
            path_length: self.path,
            particle_path_length: self.particle_path,
            chord,
            n_field_evals: self.evals,
            n_steps: self.steps,
            n_rejected: self.rejected,
        })
    }
}

fn axpy(y: &[f64], h: f64, terms: &[(f64, &[f64])]) -> Vec<f64> {
    let mut out = y.to_vec();
    for &(w, k) in terms {
        if w != 0.0 {
            for (o, v) in out.iter_mut().zip(k) {
                *o += h * w * v;
            }
        }
    }
    out
}

/// Integrates every configuration of `xs`. The outer error reports invalid input;
/// the inner results report per-sample solver failures.
pub fn integrate_many<F: VectorField + ?Sized>(
    field: &F,
    xs: &[MeanFreeConfiguration],
    direction: Direction,
    spec: &IntegratorSpec,
    track_logp: bool,
) -> Result<Vec<Result<FlowResult>>> {
    spec.validate()?;
    let (n, d) = (field.n_particles(), field.dim());
    if let Some(x) = xs.iter().find(|x| x.coords().dim() != (n, d)) {
        return Err(Error::shape(format!("({n}, {d})"), format!("{:?}", x.coords().dim())));
    }
    let rhs = Rhs { field, direction, logp: track_logp, n, d };
    let mut out = Vec::with_capacity(xs.len());
    for group in xs.chunks(GROUP) {
        let mut tracks: Vec<Track> = group.iter().map(Track::new).collect();
        match *spec {
            IntegratorSpec::Rk4 { n_steps } => rk4(&rhs, &mut tracks, n_steps),
            IntegratorSpec::Dopri5 { atol, rtol, max_steps } => dopri5(&rhs, &mut tracks, atol, rtol, max_steps),
        }
        out.extend(tracks.into_iter().map(|t| t.finish(n, d, track_logp)));
    }
    Ok(out)
}

/// Evaluates the field for the tracks listed in `idx` at `(s[k], ys[k])`, failing
/// tracks whose derivative is not finite.
fn eval_into<F: VectorField + ?Sized>(
    rhs: &Rhs<'_, F>,
    tracks: &mut [Track],
    idx: &[usize],
    s: &[f64],
    ys: &[Vec<f64>],
) -> Vec<Option<Vec<f64>>> {
    let refs: Vec<&[f64]> = ys.iter().map(Vec::as_slice).collect();
    let ks = rhs.eval(s, &refs);
    for (&i, k) in idx.iter().zip(&ks) {
        tracks[i].evals += 1;
        if k.is_none() {
            let s_fail = tracks[i].s;
            tracks[i].fail(Error::NonFinite(format!("vector field at s = {s_fail:.6}")));
        }
    }
    ks
}

fn rk4<F: VectorField + ?Sized>(rhs: &Rhs<'_, F>, tracks: &mut [Track], n_steps: usize) {
    let h = 1.0 / n_steps as f64;
    for step in 0..n_steps {
        let s0 = step as f64 * h;
        let mut idx: Vec<usize> = (0..tracks.len()).filter(|&i| tracks[i].active()).collect();
        if idx.is_empty() {
            return;
        }
        let mut stages: Vec<Vec<Vec<f64>>> = vec![Vec::new(); idx.len()];
        for (c, w) in [(0.0, 0.0), (0.5, 0.5), (0.5, 0.5), (1.0, 1.0)] {
            let ys: Vec<Vec<f64>> = idx
                .iter()
                .zip(&stages)
                .map(|(&i, ks)| match ks.last() {
                    Some(k) => axpy(&tracks[i].y, h, &[(w, k.as_slice())]),
                    None => tracks[i].y.clone(),
                })
                .collect();
            let s = vec![s0 + c * h; idx.len()];
            let ks = eval_into(rhs, tracks, &idx, &s, &ys);
            for (st, k) in stages.iter_mut().zip(ks) {
                if let Some(k) = k {
                    st.push(k);
                }
            }
        }
        // drop tracks that failed in any stage
        let keep: Vec<bool> = idx.iter().map(|&i| tracks[i].active()).collect();
        let mut it = keep.iter();
        idx.retain(|_| *it.next().expect("same length"));
        let mut it = keep.iter();
        stages.retain(|_| *it.next().expect("same length"));
        for (&i, k) in idx.iter().zip(&stages) {
            let y_new = axpy(
                &tracks[i].y,
                h / 6.0,
                &[(1.0, k[0].as_slice()), (2.0, k[1].as_slice()), (2.0, k[2].as_slice()), (1.0, k[3].as_slice())],
            );
            tracks[i].accept(y_new, rhs.n, rhs.d);
            tracks[i].s = if step + 1 == n_steps { 1.0 } else { (step + 1) as f64 * h };
        }
    }
    for t in tracks.iter_mut() {
        t.done = true;
    }
}

fn dopri5<F: VectorField + ?Sized>(rhs: &Rhs<'_, F>, tracks: &mut [Track], atol: f64, rtol: f64, max_steps: usize) {
    let n_err = rhs.n_err();
    let all: Vec<usize> = (0..tracks.len()).collect();

    // initial derivative and step-size guess
    let ys: Vec<Vec<f64>> = tracks.iter().map(|t| t.y.clone()).collect();
    let k0 = eval_into(rhs, tracks, &all, &vec![0.0; all.len()], &ys);
    let mut h0 = vec![0.0; tracks.len()];
    let mut probe = Vec::new();
    let mut probe_idx = Vec::new();
    for (i, k) in k0.into_iter().enumerate() {
        let Some(k) = k else { continue };
        let t = &mut tracks[i];
        let sk: Vec<f64> = t.y[..n_err].iter().map(|y| atol + rtol * y.abs()).collect();
        let dnf: f64 = k[..n_err].iter().zip(&sk).map(|(f, s)| (f / s).powi(2)).sum();
        let dny: f64 = t.y[..n_err].iter().zip(&sk).map(|(y, s)| (y / s).powi(2)).sum();
        let h = if dnf <= 1e-10 || dny <= 1e-10 { 1e-6 } else { (dny / dnf).sqrt() * 0.01 }.min(1.0);
        h0[i] = h;
        probe.push(axpy(&t.y, h, &[(1.0, k.as_slice())]));
        probe_idx.push(i);
        t.k1 = k;
    }
    let s_probe: Vec<f64> = probe_idx.iter().map(|&i| h0[i]).collect();
    let k_probe = eval_into(rhs, tracks, &probe_idx, &s_probe, &probe);
    for (&i, k) in probe_idx.iter().zip(k_probe) {
        let Some(k) = k else { continue };
        let t = &mut tracks[i];
        let h = h0[i];
        let sk: Vec<f64> = t.y[..n_err].iter().map(|y| atol + rtol * y.abs()).collect();
        let dnf: f64 = t.k1[..n_err].iter().zip(&sk).map(|(f, s)| (f / s).powi(2)).sum();
        let der2 = k[..n_err].iter().zip(&t.k1).zip(&sk).map(|((a, b), s)| ((a - b) / s).powi(2)).sum::<f64>().sqrt() / h;
        let der12 = der2.max(dnf.sqrt());
        let h1 = if der12 <= 1e-15 { (h * 1e-3).max(1e-6) } else { (0.01 / der12).powf(0.2) };
        t.h = (100.0 * h).min(h1).min(1.0);
    }

    loop {
        let idx: Vec<usize> = (0..tracks.len()).filter(|&i| tracks[i].active()).collect();
        if idx.is_empty() {
            return;
        }
        let mut hs = Vec::with_capacity(idx.len());
        let mut last = Vec::with_capacity(idx.len());
        for &i in &idx {
            let t = &mut tracks[i];
            t.attempts += 1;
            let is_last = t.s + 1.01 * t.h >= 1.0;
            if is_last {
                t.h = 1.0 - t.s;
            }
            hs.push(t.h);
            last.push(is_last);
        }
        let over: Vec<usize> = idx.iter().copied().filter(|&i| tracks[i].attempts > max_steps).collect();
        for i in over {
            let (reached, last_step) = (tracks[i].s, tracks[i].h);
            tracks[i].fail(Error::SolverMaxSteps { max_steps, reached, last_step });
        }

        // stages 2..7, stage 7 at the candidate solution (first-same-as-last)
        let mut ks: Vec<Vec<Vec<f64>>> = idx.iter().map(|&i| vec![tracks[i].k1.clone()]).collect();
        for stage in 1..7 {
            let live: Vec<usize> = (0..idx.len()).filter(|&j| tracks[idx[j]].active()).collect();
            let ys: Vec<Vec<f64>> = live
                .iter()
                .map(|&j| {
                    let terms: Vec<(f64, &[f64])> = A[stage].iter().zip(&ks[j]).map(|(&a, k)| (a, k.as_slice())).collect();
                    axpy(&tracks[idx[j]].y, hs[j], &terms)
                })
                .collect();
            let s: Vec<f64> = live.iter().map(|&j| tracks[idx[j]].s + C[stage] * hs[j]).collect();
            let ids: Vec<usize> = live.iter().map(|&j| idx[j]).collect();
            let out = eval_into(rhs, tracks, &ids, &s, &ys);
            for (&j, k) in live.iter().zip(out) {
                if let Some(k) = k {
                    ks[j].push(k);
                }
            }
        }

        for (j, &i) in idx.iter().enumerate() {
            if !tracks[i].active() {
                continue;
            }
            let h = hs[j];
            let k = &ks[j];
            let t = &mut tracks[i];
            let terms: Vec<(f64, &[f64])> = A[6].iter().zip(k).map(|(&a, k)| (a, k.as_slice())).collect();
            let y_new = axpy(&t.y, h, &terms);
            let err = {
                let sum: f64 = (0..n_err)
                    .map(|c| {
                        let e = h * (0..7).map(|m| E[m] * k[m][c]).sum::<f64>();
                        let sc = atol + rtol * t.y[c].abs().max(y_new[c].abs());
                        (e / sc).powi(2)
                    })
                    .sum();
                (sum / n_err as f64).sqrt()
            };
            let fac11 = err.powf(EXPO);
            if err <= 1.0 {
                let fac = (fac11 / t.fac_old.powf(BETA) / SAFETY).clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
                let mut h_new = h / fac;
                t.fac_old = err.max(1e-4);
                if t.last_rejected {
                    h_new = h_new.min(h);
                }
                t.last_rejected = false;
                t.accept(y_new, rhs.n, rhs.d);
                t.k1 = k[6].clone();
                if last[j] {
                    t.s = 1.0;
                    t.done = true;
                } else {
                    t.s += h;
                }
                t.h = h_new;
            } else {
                t.h = h / (fac11 / SAFETY).min(1.0 / FAC_MIN);
                t.last_rejected = true;
                t.rejected += 1;
            }
            if !t.done && t.h < H_MIN {
                let s = t.s;
                t.fail(Error::StepUnderflow(s));
            }
        }
    }
}
