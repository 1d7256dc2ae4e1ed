//! Group actions, optimal alignment and the symmetry-aware transport cost.
//!
//! The equivariant cost is the sequential approximation of the minimum over the
//! permutation/rotation group: first the best type-preserving permutation under
//! plain squared distance (Hungarian, per block), then the best proper rotation of
//! the permuted configuration (Kabsch). Reflections are not searched.

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2};

use super::config::{Configuration, MeanFreeConfiguration, ParticleTyping};
use super::hungarian;
use crate::error::{Error, Result};

/// Orthogonality tolerance for rotations handed to [`apply_group_action`].
pub const ORTHO_TOL: f64 = 1e-10;

/// A permutation followed by a proper rotation that maps `x1` onto `x0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    /// Row `i` of the aligned configuration is taken from row `permutation[i]`.
    pub permutation: Vec<usize>,
    /// `D x D`, orthogonal with determinant +1.
    pub rotation: Array2<f64>,
    /// Squared distance remaining after alignment.
    pub cost: f64,
}

impl Alignment {
    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        act(x, &self.permutation, self.rotation.view())
    }
}

/// Row `i` of the result is `rot · x[perm[i]]`.
pub(crate) fn act(x: ArrayView2<'_, f64>, perm: &[usize], rot: ArrayView2<'_, f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    let mut out = Array2::zeros((n, d));
    for (i, &src) in perm.iter().enumerate() {
        for a in 0..d {
            let mut acc = 0.0;
            for b in 0..d {
                acc += rot[[a, b]] * x[[src, b]];
            }
            out[[i, a]] = acc;
        }
    }
    out
}

fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::shape(format!("permutation of length {n}"), perm.len()));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return Err(Error::Validation(format!("{perm:?} is not a bijection on 0..{n}")));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Max entry of `|R Rᵀ - I|`.
pub fn orthogonality_defect(rot: ArrayView2<'_, f64>) -> f64 {
    let rrt = rot.dot(&rot.t());
    let mut worst = 0.0_f64;
    for ((i, j), v) in rrt.indexed_iter() {
        let target = if i == j { 1.0 } else { 0.0 };
        worst = worst.max((v - target).abs());
    }
    worst
}

pub fn determinant(m: ArrayView2<'_, f64>) -> f64 {
    let (r, c) = m.dim();
    DMatrix::from_fn(r, c, |i, j| m[[i, j]]).determinant()
}

/// Applies a permutation and an orthogonal matrix (rotation or reflection).
pub fn apply_group_action(x: &Configuration, perm: &[usize], rot: ArrayView2<'_, f64>) -> Result<Configuration> {
    let (n, d) = (x.n_particles(), x.dim());
    check_permutation(perm, n)?;
    if rot.dim() != (d, d) {
        return Err(Error::shape(format!("{d}x{d} rotation"), format!("{:?}", rot.dim())));
    }
    let defect = orthogonality_defect(rot);
    if defect > ORTHO_TOL {
        return Err(Error::Validation(format!("matrix is not orthogonal (defect {defect:e})")));
    }
    Configuration::new(act(x.coords(), perm, rot))
}

/// Group action on a mean-free configuration; the result stays mean-free.
pub fn apply_group_action_mean_free(
    x: &MeanFreeConfiguration,
    perm: &[usize],
    rot: ArrayView2<'_, f64>,
) -> Result<MeanFreeConfiguration> {
    let moved = apply_group_action(&x.as_configuration(), perm, rot)?;
    Ok(MeanFreeConfiguration::from_raw_projected(moved.into_inner()))
}

pub(crate) fn sq_dist_views(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// Squared Frobenius distance.
pub fn euclidean_cost(x0: &Configuration, x1: &Configuration) -> Result<f64> {
    if x0.coords().dim() != x1.coords().dim() {
        return Err(Error::shape(format!("{:?}", x0.coords().dim()), format!("{:?}", x1.coords().dim())));
    }
    Ok(sq_dist_views(x0.coords(), x1.coords()))
}

pub(crate) fn permutation_views(x0: ArrayView2<'_, f64>, x1: ArrayView2<'_, f64>, typing: &ParticleTyping) -> Vec<usize> {
    let d = x0.ncols();
    let mut perm = vec![0usize; x0.nrows()];
    for block in typing.blocks() {
        let k = block.len();
        let cost = Array2::from_shape_fn((k, k), |(a, b)| {
            let (i, j) = (block[a], block[b]);
            (0..d).map(|c| (x0[[i, c]] - x1[[j, c]]).powi(2)).sum::<f64>()
        });
        let (assign, _) = hungarian::solve_unchecked(cost.view());
        for (a, &b) in assign.iter().enumerate() {
            perm[block[a]] = block[b];
        }
    }
    perm
}

/// Type-preserving permutation `s` minimizing `Σ_i |x0_i - x1_{s(i)}|²`.
pub fn optimal_permutation(x0: &Configuration, x1: &Configuration, typing: &ParticleTyping) -> Result<Vec<usize>> {
    if x0.coords().dim() != x1.coords().dim() {
        return Err(Error::shape(format!("{:?}", x0.coords().dim()), format!("{:?}", x1.coords().dim())));
    }
    if typing.n_particles() != x0.n_particles() {
        return Err(Error::shape(format!("typing over {} particles", x0.n_particles()), typing.n_particles()));
    }
    if x0.coords().iter().chain(x1.coords().iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("coordinates".into()));
    }
    Ok(permutation_views(x0.coords(), x1.coords(), typing))
}

/// Proper rotation `R` minimizing `Σ_i |x0_i - R x1_i|²` (views assumed centered).
///
/// Uses the SVD of the cross-covariance `H = x1ᵀ x0 = U S Vᵀ`; the result is
/// `V E Uᵀ` with `E` flipping the direction of the smallest singular value when
/// needed to keep the determinant at +1. For rank-deficient `H` the optimum is not
/// unique and whichever proper rotation the SVD yields is returned.
pub(crate) fn kabsch_views(x0: ArrayView2<'_, f64>, x1: ArrayView2<'_, f64>) -> Array2<f64> {
    let d = x0.ncols();
    let mut h = DMatrix::<f64>::zeros(d, d);
    for (r0, r1) in x0.rows().into_iter().zip(x1.rows()) {
        for a in 0..d {
            for b in 0..d {
                h[(a, b)] += r1[a] * r0[b];
            }
        }
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("U requested");
    let v = svd.v_t.expect("V requested").transpose();
    let mut e = DMatrix::<f64>::identity(d, d);
    if (&v * u.transpose()).determinant() < 0.0 {
        let smallest = svd
            .singular_values
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |best, (i, &s)| if s < best.1 { (i, s) } else { best })
            .0;
        e[(smallest, smallest)] = -1.0;
    }
    let r = v * e * u.transpose();
    Array2::from_shape_fn((d, d), |(a, b)| r[(a, b)])
}

pub fn kabsch_rotation(x0: &MeanFreeConfiguration, x1: &MeanFreeConfiguration) -> Result<Array2<f64>> {
    if x0.coords().dim() != x1.coords().dim() {
        return Err(Error::shape(format!("{:?}", x0.coords().dim()), format!("{:?}", x1.coords().dim())));
    }
    Ok(kabsch_views(x0.coords(), x1.coords()))
}

pub(crate) fn align_views(x0: ArrayView2<'_, f64>, x1: ArrayView2<'_, f64>, typing: &ParticleTyping) -> Alignment {
    let permutation = permutation_views(x0, x1, typing);
    let d = x0.ncols();
    let permuted = act(x1, &permutation, Array2::eye(d).view());
    let rotation = kabsch_views(x0, permuted.view());
    let aligned = act(permuted.view(), &(0..permuted.nrows()).collect::<Vec<_>>(), rotation.view());
    let cost = sq_dist_views(x0, aligned.view());
    Alignment { permutation, rotation, cost }
}

/// Symmetry-aware squared distance together with the alignment that attains it.
/// Never exceeds [`euclidean_cost`].
pub fn equivariant_cost(
    x0: &MeanFreeConfiguration,
    x1: &MeanFreeConfiguration,
    typing: &ParticleTyping,
) -> Result<(f64, Alignment)> {
    if x0.coords().dim() != x1.coords().dim() {
        return Err(Error::shape(format!("{:?}", x0.coords().dim()), format!("{:?}", x1.coords().dim())));
    }
    if typing.n_particles() != x0.n_particles() {
        return Err(Error::shape(format!("typing over {} particles", x0.n_particles()), typing.n_particles()));
    }
    let al = align_views(x0.coords(), x1.coords(), typing);
    Ok((al.cost, al))
}
