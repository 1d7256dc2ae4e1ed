//! Random group elements, used for property checks and diagnostics.

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use super::config::ParticleTyping;

/// Haar-distributed orthogonal matrix; `proper` forces determinant +1.
pub fn random_orthogonal<R: Rng + ?Sized>(d: usize, proper: bool, rng: &mut R) -> Array2<f64> {
    let g = DMatrix::<f64>::from_fn(d, d, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    if proper && q.determinant() < 0.0 {
        q.column_mut(0).neg_mut();
    }
    Array2::from_shape_fn((d, d), |(i, j)| q[(i, j)])
}

/// Uniform permutation within each block of the typing.
pub fn random_permutation<R: Rng + ?Sized>(typing: &ParticleTyping, rng: &mut R) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..typing.n_particles()).collect();
    for block in typing.blocks() {
        let mut shuffled = block.clone();
        shuffled.shuffle(rng);
        for (&dst, &src) in block.iter().zip(&shuffled) {
            perm[dst] = src;
        }
    }
    perm
}

/// Rotation by `angle` in the plane.
pub fn rotation_2d(angle: f64) -> Array2<f64> {
    let (s, c) = angle.sin_cos();
    ndarray::array![[c, -s], [s, c]]
}

/// Rotation by `angle` about a uniformly random axis.
pub fn small_rotation_3d<R: Rng + ?Sized>(angle: f64, rng: &mut R) -> Array2<f64> {
    let axis = nalgebra::Vector3::<f64>::from_fn(|_, _| rng.sample(StandardNormal));
    let rot = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
    Array2::from_shape_fn((3, 3), |(i, j)| rot[(i, j)])
}
