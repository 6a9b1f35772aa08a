//! Sampler identities: the SGD limit, prior scaling, the running mean, and chain bookkeeping.

use langevin::data::{make_conjugate_problem, ConjugateRegressionProblem, LabeledDataset};
use langevin::linalg::Matrix;
use langevin::model::{Model, Targets};
use langevin::net::Architecture;
use langevin::params::ParamVector;
use langevin::precond::{self, PrecondConfig, PrecondKind};
use langevin::prior::Prior;
use langevin::rng::{seeded, standard_normal};
use langevin::sgld::{run_chain, Chain, ChainConfig, MeanSchedule, Sampler, SamplerConfig, Schedule};
use nalgebra::DMatrix;

fn problem() -> ConjugateRegressionProblem {
    make_conjugate_problem(40, 3, 0.5, DMatrix::identity(3, 3), 11).unwrap()
}

fn toy_classification(n: usize, seed: u64) -> LabeledDataset {
    let mut rng = seeded(seed);
    let x: Vec<f64> = (0..n * 4).map(|_| standard_normal(&mut rng)).collect();
    let labels = (0..n)
        .map(|i| usize::from(x[4 * i] + x[4 * i + 1] > 0.0) + usize::from(x[4 * i + 2] > 1.0))
        .collect();
    LabeledDataset::new(Matrix::from_vec(n, 4, x), Targets::Labels(labels)).unwrap()
}

#[test]
fn noise_off_prior_off_identity_is_plain_sgd() {
    let data = toy_classification(64, 1);
    let arch = Architecture::classifier(4, &[5], 3).unwrap();
    let theta0 = arch.init_params(&mut seeded(2));
    let cfg = SamplerConfig {
        schedule: Schedule::ConstantHalving {
            eta0: 0.3,
            halve_every: 7,
        },
        inject_noise: false,
        ..SamplerConfig::default()
    };
    let pc = precond::build(PrecondKind::Identity, arch.layout(), PrecondConfig::default()).unwrap();
    let mut sampler = Sampler::new(&arch, None, pc, cfg, data.len()).unwrap();
    let mut chain = Chain::new(theta0.clone(), 3);
    let mut sgd = theta0;
    for (t, batch) in data.minibatches(16, 4).unwrap().iter().cycle().take(20).enumerate() {
        sampler.step(&mut chain, batch).unwrap();
        let eta = 0.3 / 2f64.powi((t / 7) as i32);
        let g = arch.backprop(&sgd, batch).unwrap().gradient;
        for (th, gi) in sgd.values_mut().iter_mut().zip(g.values()) {
            *th -= eta * gi;
        }
        assert_eq!(chain.theta.values(), sgd.values(), "step {}", t + 1);
    }
}

#[test]
fn doubling_n_halves_the_prior_term_exactly() {
    let p = problem();
    let model = p.model();
    let prior = Prior::gaussian(0.37).unwrap();
    let theta = ParamVector::from_values(model.layout().clone(), vec![0.3, -1.7, 2.2]).unwrap();
    let term = |n| {
        let pc = precond::build(PrecondKind::Identity, model.layout(), PrecondConfig::default()).unwrap();
        Sampler::new(&model, Some(&prior), pc, SamplerConfig::default(), n)
            .unwrap()
            .prior_term(&theta)
            .unwrap()
    };
    for n in [1, 40, 60_000] {
        let (once, twice) = (term(n), term(2 * n));
        for (a, b) in once.values().iter().zip(twice.values()) {
            assert_eq!(*a, 2.0 * b);
        }
    }
}

#[test]
fn harmonic_mean_is_the_trajectory_average() {
    let p = problem();
    let model = p.model();
    let prior = p.prior().unwrap();
    let batch = p.dataset().to_batch();
    let cfg = SamplerConfig {
        schedule: Schedule::constant(0.05),
        mean: MeanSchedule::Harmonic,
        burn_in: 0,
        ..SamplerConfig::default()
    };
    let pc = precond::build(PrecondKind::RmsProp, model.layout(), PrecondConfig::default()).unwrap();
    let mut sampler = Sampler::new(&model, Some(&prior), pc, cfg, p.n()).unwrap();
    let mut chain = Chain::new(ParamVector::zeros(model.layout().clone()), 5);
    let mut sum = vec![0.0; p.d()];
    let steps = 500;
    for _ in 0..steps {
        sampler.step(&mut chain, &batch).unwrap();
        for (s, v) in sum.iter_mut().zip(chain.theta.values()) {
            *s += v;
        }
    }
    for (m, s) in chain.mean.values().iter().zip(&sum) {
        assert!((m - s / steps as f64).abs() <= 1e-12, "{m} vs {}", s / steps as f64);
    }
}

#[test]
fn post_burn_in_mean_averages_only_the_tail() {
    let p = problem();
    let model = p.model();
    let prior = p.prior().unwrap();
    let batch = p.dataset().to_batch();
    let cfg = SamplerConfig {
        schedule: Schedule::constant(0.05),
        burn_in: 30,
        thin: 10,
        ..SamplerConfig::default()
    };
    let pc = precond::build(PrecondKind::Identity, model.layout(), PrecondConfig::default()).unwrap();
    let mut sampler = Sampler::new(&model, Some(&prior), pc, cfg, p.n()).unwrap();
    let theta0 = ParamVector::from_values(model.layout().clone(), vec![5.0, 5.0, 5.0]).unwrap();
    let mut chain = Chain::new(theta0, 6);
    let mut tail = vec![0.0; p.d()];
    for t in 1..=100u64 {
        sampler.step(&mut chain, &batch).unwrap();
        if t <= 30 {
            assert!(chain.mean.values().iter().all(|&m| m == 5.0));
        } else {
            for (s, v) in tail.iter_mut().zip(chain.theta.values()) {
                *s += v;
            }
        }
    }
    for (m, s) in chain.mean.values().iter().zip(&tail) {
        assert!((m - s / 70.0).abs() <= 1e-12);
    }
    // snapshots at steps 40, 50, ..., 100
    assert_eq!(chain.snapshot_count, 7);
    assert_eq!(chain.snapshots.len(), 7);
}

fn chain_config(updates: u64) -> ChainConfig {
    ChainConfig {
        sampler: SamplerConfig {
            schedule: Schedule::constant(0.01),
            burn_in: 5,
            thin: 5,
            ..SamplerConfig::default()
        },
        precond: PrecondKind::QuasiDiagonalOp,
        precond_config: PrecondConfig::default(),
        minibatch: 10,
        updates,
        eval_every: 10,
        noise_seed: 1,
        data_seed: 2,
        train_eval_limit: None,
        keep_snapshots: true,
    }
}

#[test]
fn zero_updates_leave_the_initial_state() {
    let data = toy_classification(30, 7);
    let arch = Architecture::classifier(4, &[3], 3).unwrap();
    let theta0 = arch.init_params(&mut seeded(8));
    let out = run_chain(
        &arch,
        None,
        &data,
        None,
        theta0.clone(),
        &chain_config(0),
        &mut |_, _| Ok(()),
    )
    .unwrap();
    assert_eq!(out.chain.theta, theta0);
    assert_eq!(out.chain.mean, theta0);
    assert_eq!(out.chain.step, 0);
    assert_eq!(out.trace.len(), 1);
    assert_eq!(out.trace[0].step, 0);
    assert_eq!(out.chain.snapshot_count, 0);
}

#[test]
fn chains_are_reproducible_and_seeds_matter() {
    let data = toy_classification(50, 9);
    let arch = Architecture::classifier(4, &[6], 3).unwrap();
    let prior = Prior::gaussian(1.0).unwrap();
    let theta0 = arch.init_params(&mut seeded(10));
    let run = |cfg: &ChainConfig| {
        let mut seen = Vec::new();
        let out = run_chain(
            &arch,
            Some(&prior),
            &data,
            Some(&data),
            theta0.clone(),
            cfg,
            &mut |step, th| {
                seen.push((step, th.clone()));
                Ok(())
            },
        )
        .unwrap();
        (out, seen)
    };
    let cfg = chain_config(33);
    let (a, seen_a) = run(&cfg);
    let (b, seen_b) = run(&cfg);
    assert_eq!(a.chain.theta, b.chain.theta);
    assert_eq!(a.trace, b.trace);
    assert_eq!(seen_a, seen_b);
    // steps 10, 15, ..., 30; plus rows at 0, 10, 20, 30, 33
    assert_eq!(seen_a.iter().map(|s| s.0).collect::<Vec<_>>(), vec![10, 15, 20, 25, 30]);
    assert_eq!(
        a.trace.iter().map(|r| r.step).collect::<Vec<_>>(),
        vec![0, 10, 20, 30, 33]
    );
    assert_eq!(a.chain.snapshots.len(), 5);

    let mut other = cfg.clone();
    other.noise_seed = 99;
    assert_ne!(run(&other).0.chain.theta, a.chain.theta);
    let mut reorder = cfg;
    reorder.data_seed = 99;
    assert_ne!(run(&reorder).0.chain.theta, a.chain.theta);
}
