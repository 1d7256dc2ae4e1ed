use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::energy::MeanFreePrior;
use crate::geom::{apply_group_action_mean_free, random_orthogonal, random_permutation};
use crate::net::tests::dense_params;
use crate::net::EgnnConfig;

fn draws(n: usize, d: usize, b: usize, seed: u64) -> Vec<MeanFreeConfiguration> {
    MeanFreePrior::new(n, d).sample(&mut ChaCha8Rng::seed_from_u64(seed), b)
}

fn frob(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn all_specs() -> [IntegratorSpec; 2] {
    [IntegratorSpec::rk4(10), IntegratorSpec::dopri5(1e-8, 1e-8)]
}

#[test]
fn constant_field_translates_along_a_straight_line() {
    let c = array![[0.3, -0.2], [-0.5, 0.1], [0.2, 0.1]];
    let field = ConstantField(c.clone());
    for spec in all_specs() {
        for (x, r) in draws(3, 2, 4, 1).iter().zip(integrate_many(&field, &draws(3, 2, 4, 1), Direction::Forward, &spec, true).unwrap()) {
            let r = r.unwrap();
            let expected = &x.coords() + &c;
            assert!(frob(&(&r.endpoint.coords() - &expected)) < 1e-12, "{spec}");
            assert_eq!(r.delta_logp, Some(0.0));
            assert!((r.path_length - frob(&c)).abs() < 1e-12);
            assert!((r.chord - frob(&c)).abs() < 1e-12);
        }
    }
}

#[test]
fn linear_field_matches_the_closed_form_solution() {
    let (n, d, alpha) = (4, 3, 0.7);
    let field = LinearField { alpha, n_particles: n, dim: d };
    let xs = draws(n, d, 5, 2);
    let closed = -alpha * (n * d) as f64;
    for spec in [IntegratorSpec::rk4(100), IntegratorSpec::dopri5(1e-10, 1e-10)] {
        let out = integrate_many(&field, &xs, Direction::Forward, &spec, true).unwrap();
        for (x, r) in xs.iter().zip(out) {
            let r = r.unwrap();
            let expected = x.coords().mapv(|v| v * alpha.exp());
            assert!(frob(&(&r.endpoint.coords() - &expected)) < 1e-6 * frob(&expected), "{spec}");
            assert!((r.delta_logp.unwrap() - closed).abs() < 1e-6 * closed.abs(), "{spec}");
            // a straight radial path: arc equals chord
            assert!((r.path_length - r.chord).abs() < 1e-9 * r.chord);
        }
        let back = integrate_many(&field, &xs, Direction::Reverse, &spec, true).unwrap();
        for (x, r) in xs.iter().zip(back) {
            let r = r.unwrap();
            let expected = x.coords().mapv(|v| v * (-alpha).exp());
            assert!(frob(&(&r.endpoint.coords() - &expected)) < 1e-6 * frob(&expected));
            assert!((r.delta_logp.unwrap() + closed).abs() < 1e-6 * closed.abs());
        }
    }
}

#[test]
fn rk4_converges_at_fourth_order() {
    let field = LinearField { alpha: 1.5, n_particles: 3, dim: 2 };
    let x = &draws(3, 2, 1, 3)[0];
    let exact = x.coords().mapv(|v| v * 1.5_f64.exp());
    let err = |n| frob(&(&integrate(&field, x, Direction::Forward, &IntegratorSpec::rk4(n), false).unwrap().endpoint.coords() - &exact));
    for n in [5, 10, 20] {
        let ratio = err(n) / err(2 * n);
        assert!((14.0..18.0).contains(&ratio), "n = {n}: ratio {ratio}");
    }
}

#[test]
fn evaluation_counts_are_bookkept() {
    let field = LinearField { alpha: 0.4, n_particles: 3, dim: 2 };
    let xs = draws(3, 2, 3, 4);
    for n in [1, 7, 20] {
        for r in integrate_many(&field, &xs, Direction::Forward, &IntegratorSpec::rk4(n), false).unwrap() {
            let r = r.unwrap();
            assert_eq!((r.n_field_evals, r.n_steps, r.n_rejected), (4 * n, n, 0));
        }
    }
    for r in integrate_many(&field, &xs, Direction::Forward, &IntegratorSpec::dopri5(1e-6, 1e-6), true).unwrap() {
        let r = r.unwrap();
        // initial derivative, step-size probe, six stages per attempt
        assert_eq!(r.n_field_evals, 2 + 6 * (r.n_steps + r.n_rejected));
        assert!(r.n_steps > 1);
    }
}

#[test]
fn adaptive_solver_reports_exhausted_step_budget() {
    let field = LinearField { alpha: 3.0, n_particles: 3, dim: 2 };
    let spec = IntegratorSpec::Dopri5 { atol: 1e-12, rtol: 1e-12, max_steps: 3 };
    let err = integrate(&field, &draws(3, 2, 1, 5)[0], Direction::Forward, &spec, true).unwrap_err();
    match err {
        Error::SolverMaxSteps { max_steps, reached, .. } => {
            assert_eq!(max_steps, 3);
            assert!(reached > 0.0 && reached < 1.0);
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn single_particle_field_has_zero_divergence() {
    let params = dense_params(EgnnConfig::new(2, 8, 1, 3).unwrap(), 0);
    let x = MeanFreeConfiguration::new(Array2::zeros((1, 3))).unwrap();
    assert_eq!(divergence(&params, 0.3, &x, &ParticleTyping::single(1)).unwrap(), 0.0);
}

#[test]
fn network_divergence_matches_finite_difference_trace() {
    let (n, d) = (4, 3);
    let typing = ParticleTyping::single(n);
    let params = dense_params(EgnnConfig::new(3, 8, 1, d).unwrap(), 1);
    let field = EgnnField::new(&params, typing.clone()).unwrap();
    for (k, x) in draws(n, d, 3, 6).into_iter().enumerate() {
        let t = 0.2 + 0.3 * k as f64;
        let exact = divergence(&params, t, &x, &typing).unwrap();
        let h = 1e-6;
        let mut fd = 0.0;
        for i in 0..n {
            for c in 0..d {
                let mut p = x.coords().to_owned();
                let mut m = p.clone();
                p[[i, c]] += h;
                m[[i, c]] -= h;
                fd += (field.velocity(&[t], p.view())[[i, c]] - field.velocity(&[t], m.view())[[i, c]]) / (2.0 * h);
            }
        }
        assert!((exact - fd).abs() < 1e-5 * fd.abs().max(1.0), "{exact} vs {fd}");
    }
}

#[test]
fn forward_then_reverse_returns_to_the_start() {
    let typing = ParticleTyping::single(4);
    let params = dense_params(EgnnConfig::new(3, 16, 1, 2).unwrap(), 2);
    let field = EgnnField::new(&params, typing).unwrap();
    let spec = IntegratorSpec::dopri5(1e-7, 1e-7);
    let xs = draws(4, 2, 6, 7);
    let fwd: Vec<FlowResult> = integrate_many(&field, &xs, Direction::Forward, &spec, true).unwrap().into_iter().map(|r| r.unwrap()).collect();
    let ends: Vec<MeanFreeConfiguration> = fwd.iter().map(|r| r.endpoint.clone()).collect();
    let back = integrate_many(&field, &ends, Direction::Reverse, &spec, true).unwrap();
    for ((x, f), b) in xs.iter().zip(&fwd).zip(back) {
        let b = b.unwrap();
        assert!(f.chord > 0.1, "field should move the sample");
        assert!(frob(&(&b.endpoint.coords() - &x.coords())) < 1e-5);
        assert!((f.delta_logp.unwrap() + b.delta_logp.unwrap()).abs() < 1e-5);
        assert!(f.delta_logp.unwrap().abs() > 1e-3);
    }
}

#[test]
fn zero_field_keeps_prior_samples_and_densities() {
    let cfg = EgnnConfig::new(2, 8, 1, 2).unwrap();
    let params = EgnnParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let field = EgnnField::new(&params, ParticleTyping::single(4)).unwrap();
    let prior = MeanFreePrior::new(4, 2);
    let set = sample_flow(&field, &prior, 8, &IntegratorSpec::rk4(5), 11, true).unwrap();
    let draws = prior.sample(&mut ChaCha8Rng::seed_from_u64(11), 8);
    let logp = set.logp.as_ref().unwrap();
    for (k, (x, z)) in set.samples.iter().zip(&draws).enumerate() {
        assert_eq!(x, z);
        assert_eq!(logp[k], prior.log_density(z.coords()).unwrap());
        assert_eq!(set.path_length[k], 0.0);
    }
    let report = nll(&field, &draws, &prior, &IntegratorSpec::dopri5(1e-6, 1e-6)).unwrap();
    let expected = -logp.iter().sum::<f64>() / 8.0;
    assert!((report.nll - expected).abs() < 1e-12);
    assert_eq!((report.n_evaluated, report.n_failed), (8, 0));
}

#[test]
fn likelihood_of_generated_samples_matches_their_forward_density() {
    let typing = ParticleTyping::new(vec![0, 0, 1, 1, 1]).unwrap();
    let params = dense_params(EgnnConfig::new(3, 16, 2, 3).unwrap(), 3);
    let field = EgnnField::new(&params, typing.clone()).unwrap();
    let prior = MeanFreePrior::new(5, 3);
    let spec = IntegratorSpec::dopri5(1e-6, 1e-6);
    let set = sample_flow(&field, &prior, 6, &spec, 4, true).unwrap();
    let lp = log_likelihood(&field, &set.samples, &prior, &spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (k, (x, l)) in set.samples.iter().zip(lp).enumerate() {
        let forward = set.logp.as_ref().unwrap()[k];
        assert!((l.unwrap() - forward).abs() < 1e-4);
        // the model density is invariant under relabelings within a type and O(3)
        let perm = random_permutation(&typing, &mut rng);
        let rot = random_orthogonal(3, k % 2 == 0, &mut rng);
        let moved = apply_group_action_mean_free(x, &perm, rot.view()).unwrap();
        let l2 = log_likelihood(&field, &[moved], &prior, &spec).unwrap().pop().unwrap().unwrap();
        assert!((l2 - forward).abs() < 1e-4, "{l2} vs {forward}");
    }
}

#[test]
fn sampling_is_deterministic_and_files_round_trip() {
    let params = dense_params(EgnnConfig::new(2, 8, 1, 2).unwrap(), 4);
    let field = EgnnField::new(&params, ParticleTyping::single(4)).unwrap();
    let prior = MeanFreePrior::new(4, 2);
    let spec = IntegratorSpec::rk4(8);
    let a = sample_flow(&field, &prior, 10, &spec, 3, true).unwrap();
    let b = sample_flow(&field, &prior, 10, &spec, 3, true).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, sample_flow(&field, &prior, 10, &spec, 4, true).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.eqf");
    a.write(&path).unwrap();
    assert_eq!(SampleSet::read(&path).unwrap(), a);
    let no_logp = sample_flow(&field, &prior, 10, &spec, 3, false).unwrap();
    assert!(no_logp.logp.is_none());
    assert_eq!(no_logp.samples, a.samples);
    no_logp.write(&path).unwrap();
    assert_eq!(SampleSet::read(&path).unwrap(), no_logp);
    std::fs::write(&path, b"EQFLOWv1junk").unwrap();
    assert!(SampleSet::read(&path).is_err());
}

#[test]
fn integrator_comparison_ranks_step_counts() {
    let params = dense_params(EgnnConfig::new(2, 16, 1, 2).unwrap(), 5);
    let field = EgnnField::new(&params, ParticleTyping::single(4)).unwrap();
    let xs = draws(4, 2, 8, 8);
    let rows = compare_integrators(
        &field,
        &xs,
        Direction::Forward,
        &IntegratorSpec::dopri5(1e-9, 1e-9),
        &[IntegratorSpec::rk4(4), IntegratorSpec::rk4(8), IntegratorSpec::rk4(16)],
        true,
    )
    .unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0].median_position_error, 0.0);
    for w in rows[1..].windows(2) {
        assert!(w[1].mean_position_error < w[0].mean_position_error);
        assert!(w[1].mean_logp_error.unwrap() < w[0].mean_logp_error.unwrap());
    }
    assert_eq!(rows[3].mean_field_evals, 64.0);
}

#[test]
fn integrator_specs_parse_and_validate() {
    assert_eq!("rk4:20".parse::<IntegratorSpec>().unwrap(), IntegratorSpec::rk4(20));
    assert_eq!("dopri5:1e-5,1e-6".parse::<IntegratorSpec>().unwrap(), IntegratorSpec::dopri5(1e-5, 1e-6));
    let s = IntegratorSpec::Dopri5 { atol: 1e-8, rtol: 1e-7, max_steps: 50 };
    assert_eq!(s.to_string().parse::<IntegratorSpec>().unwrap(), s);
    for bad in ["rk4:0", "rk4", "dopri5:0,1e-5", "dopri5:1e-5", "euler:3", "dopri5:1e-5,1e-5,0"] {
        assert!(bad.parse::<IntegratorSpec>().is_err(), "{bad}");
    }
    let json = serde_json::to_string(&IntegratorSpec::rk4(3)).unwrap();
    assert_eq!(json, r#"{"method":"rk4","n_steps":3}"#);
    let field = LinearField { alpha: 1.0, n_particles: 3, dim: 2 };
    assert!(integrate_many(&field, &draws(4, 2, 1, 0), Direction::Forward, &IntegratorSpec::rk4(2), false).is_err());
    assert!(sample_flow(&field, &MeanFreePrior::new(3, 2), 0, &IntegratorSpec::rk4(2), 0, false).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn paths_are_at_least_as_long_as_chords(seed in 0u64..1000, steps in 1usize..12) {
        let params = dense_params(EgnnConfig::new(2, 8, 1, 2).unwrap(), seed);
        let field = EgnnField::new(&params, ParticleTyping::single(3)).unwrap();
        for spec in [IntegratorSpec::rk4(steps), IntegratorSpec::dopri5(1e-5, 1e-5)] {
            for r in integrate_many(&field, &draws(3, 2, 4, seed), Direction::Forward, &spec, false).unwrap() {
                let r = r.unwrap();
                prop_assert!(r.path_length >= r.chord * (1.0 - 1e-12));
                prop_assert!(r.particle_path_length >= 0.0);
                prop_assert!(r.delta_logp.is_none());
                let drift = r.endpoint.coords().mean_axis(ndarray::Axis(0)).unwrap().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
                prop_assert!(drift < 1e-12);
            }
        }
    }
}
