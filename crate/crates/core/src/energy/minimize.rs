use ndarray::{Array2, ArrayView2};

use super::EnergyModel;
use crate::error::{Error, Result};

const ARMIJO_C: f64 = 1e-4;
const MIN_STEP: f64 = 1e-20;

#[derive(Debug, Clone)]
pub struct DescentOutcome {
    pub x: Array2<f64>,
    pub energy: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Energy after every accepted step, starting with the initial energy;
    /// empty unless requested.
    pub trace: Vec<f64>,
}

/// Gradient descent with Armijo backtracking, stopping once `|∇U|∞ < tol`.
///
/// Trial steps come from the Barzilai–Borwein ratio of the previous step and
/// gradient change; the sufficient-decrease test makes the energy non-increasing.
pub fn gradient_descent<M: EnergyModel + ?Sized>(
    model: &M,
    x0: ArrayView2<'_, f64>,
    max_iters: usize,
    tol: f64,
    record_trace: bool,
) -> Result<DescentOutcome> {
    let (mut e, mut g) = model.energy_and_gradient(x0)?;
    if !e.is_finite() {
        return Err(Error::NonFinite(format!("starting energy {e}")));
    }
    let mut x = x0.to_owned();
    let mut trace = if record_trace { vec![e] } else { Vec::new() };
    let mut alpha: f64 = 1e-3;
    let mut prev: Option<(Array2<f64>, Array2<f64>)> = None;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iters {
        if g.iter().fold(0.0_f64, |m, v| m.max(v.abs())) < tol {
            converged = true;
            break;
        }
        if let Some((px, pg)) = prev.take() {
            let s = &x - &px;
            let y = &g - &pg;
            let sy: f64 = (&s * &y).sum();
            let ss: f64 = (&s * &s).sum();
            alpha = if sy > 0.0 { (ss / sy).clamp(1e-12, 1e3) } else { (alpha * 2.0).min(1e3) };
        }
        let g2: f64 = g.iter().map(|v| v * v).sum();
        let (x_new, e_new, g_new) = loop {
            let trial = &x - &(&g * alpha);
            let accepted = match model.energy_and_gradient(trial.view()) {
                Ok((et, gt)) if et.is_finite() && et <= e - ARMIJO_C * alpha * g2 => Some((et, gt)),
                _ => None,
            };
            if let Some((et, gt)) = accepted {
                break (trial, et, gt);
            }
            alpha *= 0.5;
            if alpha < MIN_STEP {
                return Ok(DescentOutcome { x, energy: e, iterations, converged, trace });
            }
        };
        prev = Some((std::mem::replace(&mut x, x_new), std::mem::replace(&mut g, g_new)));
        e = e_new;
        iterations += 1;
        if record_trace {
            trace.push(e);
        }
    }
    if !converged {
        converged = g.iter().fold(0.0_f64, |m, v| m.max(v.abs())) < tol;
    }
    Ok(DescentOutcome { x, energy: e, iterations, converged, trace })
}
