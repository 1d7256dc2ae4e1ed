use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::forward::forward_batch;
use super::*;
use crate::geom::{act, random_orthogonal, random_permutation};

/// Fan-in initialized parameters whose coordinate heads are random as well.
pub(crate) fn dense_params(cfg: EgnnConfig, seed: u64) -> EgnnParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = EgnnParams::init(cfg, &mut rng).unwrap();
    let bound = 1.0 / (cfg.n_hidden as f64).sqrt();
    for l in p.layout.layers.clone() {
        l.d_w2.vec_mut(p.as_flat_mut()).mapv_inplace(|_| rng.gen_range(-bound..bound));
        l.d_b2.vec_mut(p.as_flat_mut()).mapv_inplace(|_| rng.gen_range(-bound..bound));
    }
    p
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

fn mean_free(n: usize, d: usize, rng: &mut ChaCha8Rng) -> MeanFreeConfiguration {
    MeanFreeConfiguration::project(gaussian(n, d, rng)).unwrap()
}

fn max_abs(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

#[test]
fn single_particle_field_is_zero() {
    let cfg = EgnnConfig::new(3, 8, 1, 3).unwrap();
    let p = dense_params(cfg, 1);
    let x = MeanFreeConfiguration::new(Array2::zeros((1, 3))).unwrap();
    let typing = ParticleTyping::single(1);
    let eval = forward(&p, 0.4, &x, &typing).unwrap();
    assert!(eval.v.iter().all(|&v| v == 0.0));
    let dir = Array2::from_elem((1, 3), 1.0);
    let j = directional_jacobian(&p, 0.4, &x, dir.view(), &typing).unwrap();
    assert!(j.iter().all(|&v| v == 0.0));
}

#[test]
fn two_particles_move_oppositely() {
    let cfg = EgnnConfig::new(3, 8, 1, 2).unwrap();
    let p = dense_params(cfg, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = mean_free(2, 2, &mut rng);
    let v = forward(&p, 0.7, &x, &ParticleTyping::single(2)).unwrap().v;
    assert!(max_abs(&v) > 1e-3);
    for k in 0..2 {
        assert!((v[[0, k]] + v[[1, k]]).abs() < 1e-12);
    }
}

fn check_equivariance(n: usize, d: usize, typing: &ParticleTyping, seed: u64) {
    let cfg = EgnnConfig::new(3, 16, typing.n_types(), d).unwrap();
    let p = dense_params(cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..10 {
        let x = mean_free(n, d, &mut rng);
        let t = rng.gen::<f64>();
        let perm = random_permutation(typing, &mut rng);
        let rot = random_orthogonal(d, trial % 2 == 0, &mut rng);
        let gx = MeanFreeConfiguration::project(act(x.coords(), &perm, rot.view())).unwrap();
        let v = forward(&p, t, &x, typing).unwrap().v;
        let gv = forward(&p, t, &gx, typing).unwrap().v;
        let expected = act(v.view(), &perm, rot.view());
        assert!(max_abs(&(&gv - &expected)) < 1e-9, "trial {trial}: {} scale {}", max_abs(&(&gv - &expected)), max_abs(&v));
        for k in 0..d {
            assert!(gv.column(k).sum().abs() < 1e-9);
        }
    }
}

#[test]
fn equivariant_under_permutations_rotations_and_reflections() {
    check_equivariance(4, 2, &ParticleTyping::single(4), 3);
    check_equivariance(6, 3, &ParticleTyping::single(6), 4);
    check_equivariance(5, 3, &ParticleTyping::new(vec![0, 1, 0, 2, 1]).unwrap(), 5);
}

#[test]
fn same_type_permutation_permutes_rows() {
    let typing = ParticleTyping::new(vec![0, 0, 1, 1, 1]).unwrap();
    let cfg = EgnnConfig::new(2, 8, 2, 3).unwrap();
    let p = dense_params(cfg, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = mean_free(5, 3, &mut rng);
    let perm = vec![1, 0, 4, 2, 3];
    let id = Array2::eye(3);
    let px = MeanFreeConfiguration::new(act(x.coords(), &perm, id.view())).unwrap();
    let v = forward(&p, 0.2, &x, &typing).unwrap().v;
    let pv = forward(&p, 0.2, &px, &typing).unwrap().v;
    assert!(max_abs(&(&pv - &act(v.view(), &perm, id.view()))) < 1e-12);
}

#[test]
fn zero_sum_output_for_mixed_types() {
    let typing = ParticleTyping::new(vec![0, 1, 1, 2]).unwrap();
    let cfg = EgnnConfig::new(4, 8, 3, 3).unwrap();
    let p = dense_params(cfg, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = mean_free(4, 3, &mut rng);
    let v = forward(&p, 0.5, &x, &typing).unwrap().v;
    for k in 0..3 {
        assert!(v.column(k).sum().abs() < 1e-9);
    }
}

#[test]
fn fresh_network_is_the_zero_field() {
    let cfg = EgnnConfig::new(3, 8, 1, 2).unwrap();
    let p = EgnnParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = mean_free(4, 2, &mut rng);
    assert!(forward(&p, 0.3, &x, &ParticleTyping::single(4)).unwrap().v.iter().all(|&v| v == 0.0));
}

#[test]
fn batched_evaluation_matches_single() {
    let cfg = EgnnConfig::new(3, 8, 1, 3).unwrap();
    let p = dense_params(cfg, 8);
    let typing = ParticleTyping::single(13);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let b = 70;
    let xs: Vec<_> = (0..b).map(|_| mean_free(13, 3, &mut rng)).collect();
    let ts: Vec<f64> = (0..b).map(|_| rng.gen()).collect();
    let mut stacked = Array2::zeros((13 * b, 3));
    for (k, x) in xs.iter().enumerate() {
        stacked.slice_mut(s![k * 13..(k + 1) * 13, ..]).assign(&x.coords());
    }
    let whole = forward_batch(&p, &ts, stacked.view(), &typing).v;
    let chunked = velocity_chunked(&p, &ts, stacked.view(), &typing);
    assert_eq!(whole, chunked);
    for k in [0, 33, 69] {
        let single = forward(&p, ts[k], &xs[k], &typing).unwrap().v;
        assert!(max_abs(&(&single - &whole.slice(s![k * 13..(k + 1) * 13, ..]))) < 1e-12);
    }
}

fn random_batch(n: usize, d: usize, b: usize, rng: &mut ChaCha8Rng) -> FlowBatch {
    let mut x_t = gaussian(n * b, d, rng);
    super::graph::center_blocks(&mut x_t, n);
    let mut u = gaussian(n * b, d, rng);
    super::graph::center_blocks(&mut u, n);
    FlowBatch { t: (0..b).map(|_| rng.gen()).collect(), x_t, u }
}

fn check_gradient_fd(cfg: EgnnConfig, typing: &ParticleTyping, b: usize, seed: u64) {
    let p = dense_params(cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let batch = random_batch(typing.n_particles(), cfg.dim, b, &mut rng);
    let exact = loss_gradient(&p, &batch, typing).unwrap();
    let h = 1e-6;
    for i in 0..p.len() {
        let eval_at = |delta: f64| {
            let mut q = p.clone();
            q.as_flat_mut()[i] += delta;
            loss_gradient(&q, &batch, typing).unwrap().loss
        };
        let fd = (eval_at(h) - eval_at(-h)) / (2.0 * h);
        let g = exact.grad[i];
        // central differences lose ~1e-10·|loss| to rounding; coordinates far below
        // that scale are compared against it instead of their own size
        let rel = (g - fd).abs() / fd.abs().max(g.abs()).max(1e-5 * exact.loss.max(1.0));
        assert!(rel < 1e-4, "coordinate {i}: exact {g}, fd {fd}");
    }
}

#[test]
fn gradient_matches_finite_differences_one_layer() {
    check_gradient_fd(EgnnConfig::new(1, 4, 1, 2).unwrap(), &ParticleTyping::single(3), 1, 9);
}

#[test]
fn gradient_matches_finite_differences_deep_mixed_types() {
    check_gradient_fd(EgnnConfig::new(3, 4, 2, 2).unwrap(), &ParticleTyping::new(vec![0, 1, 1]).unwrap(), 3, 10);
    check_gradient_fd(EgnnConfig::new(2, 5, 1, 3).unwrap(), &ParticleTyping::single(4), 2, 11);
}

#[test]
fn zero_loss_batch_has_zero_gradient() {
    let cfg = EgnnConfig::new(2, 4, 1, 3).unwrap();
    let p = dense_params(cfg, 12);
    let batch = FlowBatch { t: vec![0.3, 0.8], x_t: Array2::zeros((2, 3)), u: Array2::zeros((2, 3)) };
    let out = loss_gradient(&p, &batch, &ParticleTyping::single(1)).unwrap();
    assert_eq!(out.loss, 0.0);
    assert!(out.grad.iter().all(|&g| g == 0.0));
}

#[test]
fn identical_items_give_single_item_gradient() {
    let cfg = EgnnConfig::new(3, 8, 1, 3).unwrap();
    let p = dense_params(cfg, 13);
    let typing = ParticleTyping::single(13);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let one = random_batch(13, 3, 1, &mut rng);
    let b = 60;
    let many = FlowBatch {
        t: vec![one.t[0]; b],
        x_t: ndarray::concatenate(ndarray::Axis(0), &vec![one.x_t.view(); b]).unwrap(),
        u: ndarray::concatenate(ndarray::Axis(0), &vec![one.u.view(); b]).unwrap(),
    };
    let g1 = loss_gradient(&p, &one, &typing).unwrap();
    let gb = loss_gradient(&p, &many, &typing).unwrap();
    assert!((g1.loss - gb.loss).abs() < 1e-10 * g1.loss.abs().max(1.0));
    for (a, b) in g1.grad.iter().zip(&gb.grad) {
        assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
    }
}

#[test]
fn directional_jacobian_matches_finite_differences() {
    let typing = ParticleTyping::new(vec![0, 0, 1, 1, 0]).unwrap();
    let cfg = EgnnConfig::new(3, 8, 2, 3).unwrap();
    let p = dense_params(cfg, 14);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..5 {
        let x = mean_free(5, 3, &mut rng);
        let dir = gaussian(5, 3, &mut rng);
        let t = rng.gen::<f64>();
        let jv = directional_jacobian(&p, t, &x, dir.view(), &typing).unwrap();
        let h = 1e-6;
        let at = |sign: f64| {
            let shifted = &x.coords() + &(&dir * (sign * h));
            forward_batch(&p, &[t], shifted.view(), &typing).v
        };
        let fd = (at(1.0) - at(-1.0)) / (2.0 * h);
        let rel = max_abs(&(&jv - &fd)) / max_abs(&fd);
        assert!(rel < 1e-5, "relative error {rel}");
    }
}

#[test]
fn directional_jacobian_is_linear() {
    let cfg = EgnnConfig::new(3, 8, 1, 2).unwrap();
    let p = dense_params(cfg, 15);
    let typing = ParticleTyping::single(4);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = mean_free(4, 2, &mut rng);
    let (d1, d2) = (gaussian(4, 2, &mut rng), gaussian(4, 2, &mut rng));
    let alpha = -1.7;
    let j = |d: &Array2<f64>| directional_jacobian(&p, 0.6, &x, d.view(), &typing).unwrap();
    let combined = j(&(&d1 * alpha + &d2));
    let separate = j(&d1) * alpha + j(&d2);
    assert!(max_abs(&(&combined - &separate)) < 1e-10);
}

#[test]
fn divergence_is_trace_of_finite_difference_jacobian() {
    let cfg = EgnnConfig::new(3, 8, 1, 3).unwrap();
    let p = dense_params(cfg, 16);
    let n = 6;
    let typing = ParticleTyping::single(n);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let b = 3;
    let batch = random_batch(n, 3, b, &mut rng);
    let (v, div) = velocity_and_divergence(&p, &batch.t, batch.x_t.view(), &typing).unwrap();
    assert_eq!(v, forward_batch(&p, &batch.t, batch.x_t.view(), &typing).v);
    let h = 1e-5;
    for k in 0..b {
        let x = batch.x_t.slice(s![k * n..(k + 1) * n, ..]).to_owned();
        let mut trace = 0.0;
        for i in 0..n {
            for d in 0..3 {
                let mut xp = x.clone();
                xp[[i, d]] += h;
                let mut xm = x.clone();
                xm[[i, d]] -= h;
                let vp = forward_batch(&p, &[batch.t[k]], xp.view(), &typing).v;
                let vm = forward_batch(&p, &[batch.t[k]], xm.view(), &typing).v;
                trace += (vp[[i, d]] - vm[[i, d]]) / (2.0 * h);
            }
        }
        assert!((trace - div[k]).abs() < 1e-6 * trace.abs().max(1.0), "{trace} vs {}", div[k]);
    }
}

#[test]
fn rejects_malformed_inputs() {
    let cfg = EgnnConfig::new(1, 4, 1, 2).unwrap();
    let p = dense_params(cfg, 17);
    let typing = ParticleTyping::single(3);
    let x = MeanFreeConfiguration::new(Array2::zeros((3, 2))).unwrap();
    assert!(forward(&p, 1.5, &x, &typing).is_err());
    assert!(forward(&p, 0.5, &x, &ParticleTyping::single(4)).is_err());
    assert!(forward(&p, 0.5, &x, &ParticleTyping::new(vec![0, 1, 1]).unwrap()).is_err());
    let bad_dir = Array2::zeros((2, 2));
    assert!(directional_jacobian(&p, 0.5, &x, bad_dir.view(), &typing).is_err());
}
