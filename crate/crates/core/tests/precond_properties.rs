//! Properties shared by every preconditioner kind, plus the Fisher reparameterization check.

use std::sync::Arc;

use langevin::linalg::Matrix;
use langevin::model::{Backprop, Batch, Model, OutputHead, Targets};
use langevin::net::Architecture;
use langevin::params::{BlockLayout, ParamVector};
use langevin::precond::{self, FisherState, FisherUpdate, Observation, PrecondConfig, PrecondKind};
use langevin::rng::{seeded, standard_normal, Rng};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| standard_normal(rng)).collect()
}

/// Small regression network and a stream of random minibatch backprops.
fn update_stream(sizes: Vec<usize>, batches: usize, seed: u64) -> (Architecture, Vec<Backprop>) {
    let arch = Architecture::new(sizes, OutputHead::Gaussian { sigma: 1.0 }).unwrap();
    let mut rng = seeded(seed);
    let theta = ParamVector::from_values(arch.layout().clone(), normal_vec(&mut rng, arch.dim())).unwrap();
    let (inputs, outputs) = (arch.layer_sizes()[0], arch.outputs());
    let bps = (0..batches)
        .map(|_| {
            let b = 1 + (standard_normal(&mut rng).abs() * 4.0) as usize;
            let x = Matrix::from_vec(b, inputs, normal_vec(&mut rng, b * inputs));
            let y = Targets::Real(Matrix::from_vec(b, outputs, normal_vec(&mut rng, b * outputs)));
            arch.backprop(&theta, &Batch::new(x, y).unwrap()).unwrap()
        })
        .collect();
    (arch, bps)
}

fn updated(
    kind: PrecondKind,
    layout: &Arc<BlockLayout>,
    bps: &[Backprop],
    mode: FisherUpdate,
) -> Box<dyn precond::Preconditioner> {
    let cfg = PrecondConfig {
        fisher_update: mode,
        ..PrecondConfig::default()
    };
    let mut pc = precond::build(kind, layout, cfg).unwrap();
    for (t, bp) in bps.iter().enumerate() {
        let obs = Observation {
            gradient: &bp.gradient,
            fisher: Some(&bp.per_example),
        };
        pc.update(&obs, 1.0 / ((t + 1) as f64).sqrt()).unwrap();
    }
    pc
}

fn arch_sizes() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..5, 2..4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn apply_is_linear_and_positive_definite(sizes in arch_sizes(), seed in 0u64..1000, a in -3.0f64..3.0) {
        let (arch, bps) = update_stream(sizes, 6, seed);
        let layout = arch.layout().clone();
        let mut rng = seeded(seed + 1);
        for kind in PrecondKind::ALL {
            let mut pc = updated(kind, &layout, &bps, FisherUpdate::ExampleMean);
            let g = ParamVector::from_values(layout.clone(), normal_vec(&mut rng, layout.dim())).unwrap();
            let h = ParamVector::from_values(layout.clone(), normal_vec(&mut rng, layout.dim())).unwrap();
            let mut combo = langevin::params::axpy(a, &g, &h).unwrap();
            pc.apply(&mut combo).unwrap();
            let (mut cg, mut ch) = (g.clone(), h.clone());
            pc.apply(&mut cg).unwrap();
            pc.apply(&mut ch).unwrap();
            let expected = langevin::params::axpy(a, &cg, &ch).unwrap();
            let scale = 1.0 + expected.norm();
            for (x, y) in combo.values().iter().zip(expected.values()) {
                prop_assert!((x - y).abs() <= 1e-10 * scale, "{:?}: {} vs {}", kind, x, y);
            }
            for _ in 0..100 {
                let v = ParamVector::from_values(layout.clone(), normal_vec(&mut rng, layout.dim())).unwrap();
                let mut cv = v.clone();
                pc.apply(&mut cv).unwrap();
                prop_assert!(v.dot(&cv).unwrap() > 0.0, "{:?} not positive definite", kind);
            }
        }
    }

    #[test]
    fn fisher_state_stays_symmetric_and_factorizable(dim in 1usize..12, seed in 0u64..1000, steps in 1usize..40) {
        let mut rng = seeded(seed);
        let mut state = FisherState::new(dim, 1e-4);
        for t in 0..steps {
            // rank-one updates with wildly varying scales
            let scale = 10f64.powf(standard_normal(&mut rng) * 2.0);
            let v: Vec<f64> = normal_vec(&mut rng, dim).into_iter().map(|x| x * scale).collect();
            let gamma = if t % 5 == 0 { 1.0 } else { 1.0 / ((t + 1) as f64).sqrt() };
            state.update(&v, gamma).unwrap();
            let j = &state.j;
            let asym = (j - j.transpose()).amax();
            prop_assert!(asym <= 1e-12 * (1.0 + j.amax()));
            // PSD up to rounding; an absolute 1e-4 ridge is not enough once entries reach 1e12
            let min_eig = j.clone().symmetric_eigenvalues().min();
            prop_assert!(min_eig >= -1e-12 * (1.0 + j.amax()), "min eigenvalue {}", min_eig);
            let reg = j + DMatrix::identity(dim, dim) * (1e-10 * (1.0 + j.amax()));
            prop_assert!(reg.cholesky().is_some());
        }
    }

    #[test]
    fn unit_blocks_make_quasi_diagonal_equal_diagonal(inputs in 1usize..5, seed in 0u64..1000) {
        // gradients of a small network, regridded onto a layout of size-1 blocks
        let (arch, bps) = update_stream(vec![inputs, 3], 5, seed);
        let flat = Arc::new(BlockLayout::uniform(arch.dim(), 1).unwrap());
        let regrid = |bp: &Backprop| -> (ParamVector, Vec<Vec<f64>>) {
            let g = ParamVector::from_values(flat.clone(), bp.gradient.values().to_vec()).unwrap();
            let ex = (0..bp.per_example.len()).map(|b| bp.per_example.example_gradient(b).into_values()).collect();
            (g, ex)
        };
        let mut dop = precond::build(PrecondKind::DiagonalOp, &flat, PrecondConfig::default()).unwrap();
        let mut qdop = precond::build(PrecondKind::QuasiDiagonalOp, &flat, PrecondConfig::default()).unwrap();
        for (t, bp) in bps.iter().enumerate() {
            let (g, examples) = regrid(bp);
            let per_example = unit_block_examples(&flat, &examples);
            let obs = Observation { gradient: &g, fisher: Some(&per_example) };
            let gamma = 1.0 / ((t + 1) as f64).sqrt();
            dop.update(&obs, gamma).unwrap();
            qdop.update(&obs, gamma).unwrap();
        }
        let mut rng = seeded(seed + 7);
        let v = ParamVector::from_values(flat.clone(), normal_vec(&mut rng, flat.dim())).unwrap();
        let (mut a, mut b) = (v.clone(), v);
        dop.apply(&mut a).unwrap();
        qdop.apply(&mut b).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
        let (mut na, mut nb) = (a.clone(), b);
        dop.sample_noise(&mut seeded(seed), &mut na).unwrap();
        qdop.sample_noise(&mut seeded(seed), &mut nb).unwrap();
        for (x, y) in na.values().iter().zip(nb.values()) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }
}

/// Per-example gradients on a layout of size-1 blocks, as a zero-hidden-layer
/// model with one constant input would produce them.
fn unit_block_examples(layout: &Arc<BlockLayout>, examples: &[Vec<f64>]) -> langevin::model::PerExampleGradients {
    let b = examples.len();
    let dim = layout.dim();
    let mut deltas = Matrix::zeros(b, dim);
    for (i, e) in examples.iter().enumerate() {
        deltas.row_mut(i).copy_from_slice(e);
    }
    let factors = langevin::model::LayerFactors {
        offset: 0,
        inputs: Matrix::from_vec(b, 1, vec![1.0; b]),
        deltas,
    };
    langevin::model::PerExampleGradients::new(layout.clone(), vec![factors]).unwrap()
}

// ---------------------------------------------------------------------------
// Natural-gradient invariance

/// Two-output linear Gaussian regression on scalar inputs; θ has 4 coordinates.
struct Toy {
    arch: Architecture,
    batch: Batch,
    xs: Vec<f64>,
    sigma: f64,
}

impl Toy {
    fn new() -> Self {
        let sigma = 0.7;
        let arch = Architecture::new(vec![1, 2], OutputHead::Gaussian { sigma }).unwrap();
        let xs = vec![-1.3, -0.4, 0.2, 0.9, 1.7];
        let ys = vec![0.3, -1.0, 0.8, 0.1, 1.2, -0.4, 2.0, 0.5, 1.1, -0.7];
        let batch = Batch::new(
            Matrix::from_vec(xs.len(), 1, xs.clone()),
            Targets::Real(Matrix::from_vec(xs.len(), 2, ys)),
        )
        .unwrap();
        Self { arch, batch, xs, sigma }
    }

    fn gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        let t = ParamVector::from_values(self.arch.layout().clone(), theta.as_slice().to_vec()).unwrap();
        DVector::from_vec(self.arch.backprop(&t, &self.batch).unwrap().gradient.into_values())
    }

    /// Exact Fisher vectors: `∂μ_k/∂θ / σ` for each input and output.
    fn fisher_vectors(&self) -> Vec<DVector<f64>> {
        let mut out = Vec::new();
        for &x in &self.xs {
            for k in 0..2 {
                let mut v = DVector::zeros(4);
                v[2 * k] = 1.0 / self.sigma;
                v[2 * k + 1] = x / self.sigma;
                out.push(v);
            }
        }
        out
    }
}

/// Smooth invertible map `θ = h(φ) = Tφ + c·φ²` (elementwise square) and its Jacobian.
struct Reparam {
    t: DMatrix<f64>,
    c: f64,
}

impl Reparam {
    fn map(&self, phi: &DVector<f64>) -> DVector<f64> {
        &self.t * phi + phi.map(|p| self.c * p * p)
    }

    fn jacobian(&self, phi: &DVector<f64>) -> DMatrix<f64> {
        &self.t + DMatrix::from_diagonal(&phi.map(|p| 2.0 * self.c * p))
    }
}

/// One natural-gradient step through `FisherState` with the exact Fisher built from `vs`.
fn natural_step(point: &DVector<f64>, grad: &DVector<f64>, vs: &[DVector<f64>], eta: f64) -> DVector<f64> {
    let mut state = FisherState::new(point.len(), 0.0);
    for (k, v) in vs.iter().enumerate() {
        // γ_k = 1/k turns the moving average into the exact mean
        state.update(v.as_slice(), 1.0 / (k + 1) as f64).unwrap();
    }
    let step = state.apply(grad.as_slice()).unwrap();
    point - DVector::from_vec(step) * eta
}

fn reparam_mismatch(rp: &Reparam, eta: f64) -> f64 {
    let toy = Toy::new();
    let phi = DVector::from_vec(vec![0.3, -0.2, 0.5, 0.1]);
    let theta = rp.map(&phi);
    let jac = rp.jacobian(&phi);
    let theta_next = natural_step(&theta, &toy.gradient(&theta), &toy.fisher_vectors(), eta);
    let phi_vs: Vec<_> = toy.fisher_vectors().iter().map(|v| jac.transpose() * v).collect();
    let phi_grad = jac.transpose() * toy.gradient(&theta);
    let phi_next = natural_step(&phi, &phi_grad, &phi_vs, eta);
    (rp.map(&phi_next) - theta_next).norm()
}

fn mixing_map() -> DMatrix<f64> {
    DMatrix::from_row_slice(
        4,
        4,
        &[
            2.0, 0.5, 0.0, -0.3, 0.1, 1.5, 0.4, 0.0, 0.0, -0.2, 0.8, 0.3, 0.6, 0.0, 0.1, 1.2,
        ],
    )
}

#[test]
fn full_fisher_step_is_exactly_invariant_under_linear_maps() {
    let rp = Reparam {
        t: mixing_map(),
        c: 0.0,
    };
    for eta in [0.1, 0.05, 0.025] {
        assert!(reparam_mismatch(&rp, eta) < 1e-12, "eta {eta}");
    }
}

#[test]
fn full_fisher_step_is_first_order_invariant_under_smooth_maps() {
    let rp = Reparam {
        t: mixing_map(),
        c: 0.4,
    };
    let mut prev = reparam_mismatch(&rp, 0.1);
    assert!(prev > 1e-8, "the curved map should not be exactly invariant");
    for eta in [0.05, 0.025, 0.0125] {
        let m = reparam_mismatch(&rp, eta);
        assert!(
            prev / m >= 3.5,
            "halving η to {eta} shrank the mismatch only {:.2}x",
            prev / m
        );
        prev = m;
    }
}

#[test]
fn euclidean_step_is_not_invariant() {
    // control: the plain gradient step changes under the same linear map
    let toy = Toy::new();
    let t = mixing_map();
    let phi = DVector::from_vec(vec![0.3, -0.2, 0.5, 0.1]);
    let theta = &t * &phi;
    let eta = 0.05;
    let theta_next = &theta - toy.gradient(&theta) * eta;
    let phi_next = &phi - t.transpose() * toy.gradient(&theta) * eta;
    assert!((&t * phi_next - theta_next).norm() > 1e-3);
}
