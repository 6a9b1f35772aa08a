//! The probabilistic-model interface the sampler runs against.
//!
//! A model maps parameters and inputs to a predictive distribution
//! `p(y | x, θ)`, and returns minibatch gradients of the mean log-loss
//! together with the per-example gradients in factored form. Per-example
//! gradients of a dense layer are rank one inside each neuron block
//! (`delta ⊗ input`), so they are kept as `(inputs, deltas)` pairs rather than
//! materialized as `batch × dim` matrices.

use std::sync::Arc;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::linalg::{gemm, MatRef, Matrix};
use crate::params::{BlockLayout, ParamVector};
use crate::rng::{standard_normal, Rng};

/// Output distribution family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutputHead {
    /// Softmax over classes, log-loss `-ln p(y)`.
    Categorical,
    /// Gaussian with fixed standard deviation, in target units.
    Gaussian { sigma: f64 },
}

/// Supervision targets for a batch of examples.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Labels(Vec<usize>),
    /// One row per example.
    Real(Matrix),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Labels(l) => l.len(),
            Targets::Real(m) => m.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Inputs (one row per example) with their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Targets,
}

impl Batch {
    pub fn new(inputs: Matrix, targets: Targets) -> Result<Self> {
        if inputs.rows() != targets.len() {
            return Err(Error::contract(format!(
                "{} input rows but {} targets",
                inputs.rows(),
                targets.len()
            )));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Predictive distribution for a batch of inputs.
#[derive(Debug, Clone, PartialEq)]
pub enum PredictiveOutput {
    /// Class probabilities, one row per example.
    Categorical { probs: Matrix },
    /// Predicted means, one row per example, with the shared standard deviation.
    Gaussian { mean: Matrix, sigma: f64 },
}

impl PredictiveOutput {
    pub fn len(&self) -> usize {
        match self {
            PredictiveOutput::Categorical { probs } => probs.rows(),
            PredictiveOutput::Gaussian { mean, .. } => mean.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-example log-loss in nats.
    pub fn log_losses(&self, targets: &Targets) -> Result<Vec<f64>> {
        if targets.len() != self.len() {
            return Err(Error::contract(format!(
                "{} predictions but {} targets",
                self.len(),
                targets.len()
            )));
        }
        match (self, targets) {
            (PredictiveOutput::Categorical { probs }, Targets::Labels(labels)) => labels
                .iter()
                .enumerate()
                .map(|(i, &y)| {
                    if y >= probs.cols() {
                        return Err(Error::contract(format!(
                            "label {y} out of range for {} classes",
                            probs.cols()
                        )));
                    }
                    Ok(-probs.get(i, y).ln())
                })
                .collect(),
            (PredictiveOutput::Gaussian { mean, sigma }, Targets::Real(y)) => {
                if *sigma <= 0.0 {
                    return Err(Error::contract(format!(
                        "Gaussian log-loss needs sigma > 0, got {sigma}"
                    )));
                }
                if y.cols() != mean.cols() {
                    return Err(Error::contract(format!(
                        "target width {} vs prediction width {}",
                        y.cols(),
                        mean.cols()
                    )));
                }
                let inv = 1.0 / (2.0 * sigma * sigma);
                let norm = mean.cols() as f64 * sigma.ln();
                Ok((0..mean.rows())
                    .map(|i| {
                        let sq: f64 = mean.row(i).iter().zip(y.row(i)).map(|(m, t)| (t - m) * (t - m)).sum();
                        sq * inv + norm
                    })
                    .collect())
            }
            _ => Err(Error::contract("target kind does not match the output head")),
        }
    }

    pub fn mean_log_loss(&self, targets: &Targets) -> Result<f64> {
        let l = self.log_losses(targets)?;
        Ok(l.iter().sum::<f64>() / l.len().max(1) as f64)
    }

    /// Loss gradient with respect to the head's pre-activations, one row per example.
    ///
    /// Softmax heads give `p - onehot(y)`; Gaussian heads give `(ŷ - y) / σ²`.
    pub(crate) fn output_deltas(&self, targets: &Targets) -> Result<Matrix> {
        match (self, targets) {
            (PredictiveOutput::Categorical { probs }, Targets::Labels(labels)) => {
                let mut d = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    if y >= d.cols() {
                        return Err(Error::contract(format!(
                            "label {y} out of range for {} classes",
                            d.cols()
                        )));
                    }
                    d.row_mut(i)[y] -= 1.0;
                }
                Ok(d)
            }
            (PredictiveOutput::Gaussian { mean, sigma }, Targets::Real(y)) => {
                if y.cols() != mean.cols() || y.rows() != mean.rows() {
                    return Err(Error::contract("target shape does not match predictions"));
                }
                let var = sigma * sigma;
                let mut d = Matrix::zeros(mean.rows(), mean.cols());
                for ((out, m), t) in d.data_mut().iter_mut().zip(mean.data()).zip(y.data()) {
                    let r = m - t;
                    *out = if r == 0.0 {
                        0.0
                    } else if var > 0.0 {
                        r / var
                    } else {
                        return Err(Error::contract(format!(
                            "Gaussian gradient needs sigma > 0, got {sigma}"
                        )));
                    };
                }
                Ok(d)
            }
            _ => Err(Error::contract("target kind does not match the output head")),
        }
    }

    /// Draws one synthetic target per example from the predictive distribution.
    pub fn sample(&self, rng: &mut Rng) -> Targets {
        match self {
            PredictiveOutput::Categorical { probs } => Targets::Labels(
                (0..probs.rows())
                    .map(|i| sample_categorical(probs.row(i), rng))
                    .collect(),
            ),
            PredictiveOutput::Gaussian { mean, sigma } => {
                let mut y = mean.clone();
                for v in y.data_mut() {
                    *v += sigma * standard_normal(rng);
                }
                Targets::Real(y)
            }
        }
    }
}

fn sample_categorical(p: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (k, &pk) in p.iter().enumerate() {
        if pk > 0.0 {
            last_positive = k;
        }
        acc += pk;
        if u < acc {
            return k;
        }
    }
    // rounding left `acc` just below 1
    last_positive
}

/// Per-example gradients of one dense layer.
///
/// Block `j` of the layer starts at `offset + j * inputs.cols()`, and the
/// gradient of example `b` on that block is `deltas[b, j] * inputs.row(b)`.
#[derive(Debug, Clone)]
pub struct LayerFactors {
    pub offset: usize,
    pub inputs: Matrix,
    pub deltas: Matrix,
}

impl LayerFactors {
    pub fn block_size(&self) -> usize {
        self.inputs.cols()
    }

    pub fn units(&self) -> usize {
        self.deltas.cols()
    }

    fn len(&self) -> usize {
        self.units() * self.block_size()
    }
}

/// Per-example gradients of the log-loss (not divided by the batch size).
#[derive(Debug, Clone)]
pub struct PerExampleGradients {
    layout: Arc<BlockLayout>,
    examples: usize,
    layers: Vec<LayerFactors>,
}

impl PerExampleGradients {
    pub fn new(layout: Arc<BlockLayout>, layers: Vec<LayerFactors>) -> Result<Self> {
        let examples = layers.first().map_or(0, |l| l.inputs.rows());
        let mut covered = 0;
        for l in &layers {
            if l.inputs.rows() != examples || l.deltas.rows() != examples {
                return Err(Error::contract("layer factors disagree on the batch size"));
            }
            if l.offset != covered {
                return Err(Error::contract("layer factors are not contiguous"));
            }
            for j in 0..l.units() {
                let blk = layout
                    .blocks()
                    .iter()
                    .find(|b| b.offset == l.offset + j * l.block_size());
                if blk.map(|b| b.size) != Some(l.block_size()) {
                    return Err(Error::LayoutMismatch(format!(
                        "layer at offset {} does not match the block layout",
                        l.offset
                    )));
                }
            }
            covered += l.len();
        }
        if covered != layout.dim() {
            return Err(Error::LayoutMismatch(format!(
                "layer factors cover {covered} of {} coordinates",
                layout.dim()
            )));
        }
        Ok(Self {
            layout,
            examples,
            layers,
        })
    }

    pub fn layout(&self) -> &Arc<BlockLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.examples
    }

    pub fn is_empty(&self) -> bool {
        self.examples == 0
    }

    pub fn layers(&self) -> &[LayerFactors] {
        &self.layers
    }

    /// Dense gradient of example `b`.
    pub fn example_gradient(&self, b: usize) -> ParamVector {
        let mut out = ParamVector::zeros(self.layout.clone());
        let v = out.values_mut();
        for l in &self.layers {
            let x = l.inputs.row(b);
            let bs = l.block_size();
            for (j, &d) in l.deltas.row(b).iter().enumerate() {
                let dst = &mut v[l.offset + j * bs..l.offset + (j + 1) * bs];
                for (o, &xi) in dst.iter_mut().zip(x) {
                    *o = d * xi;
                }
            }
        }
        out
    }

    /// `Σ_b w_b v_b`.
    pub fn weighted_sum(&self, weights: &[f64]) -> ParamVector {
        let mut out = ParamVector::zeros(self.layout.clone());
        let v = out.values_mut();
        for l in &self.layers {
            let mut wd = l.deltas.clone();
            scale_rows(&mut wd, weights);
            let dst = &mut v[l.offset..l.offset + l.len()];
            gemm(
                1.0,
                wd.view().t(),
                l.inputs.view(),
                0.0,
                crate::linalg::MatMut::row_major(dst, l.units(), l.block_size()),
            );
        }
        out
    }

    /// `out += Σ_b w_b v_b ∘ v_b`.
    pub fn accumulate_weighted_squares(&self, weights: &[f64], out: &mut [f64]) {
        for l in &self.layers {
            let mut wd = l.deltas.map(|d| d * d);
            scale_rows(&mut wd, weights);
            let xsq = l.inputs.map(|x| x * x);
            let dst = &mut out[l.offset..l.offset + l.len()];
            gemm(
                1.0,
                wd.view().t(),
                xsq.view(),
                1.0,
                crate::linalg::MatMut::row_major(dst, l.units(), l.block_size()),
            );
        }
    }

    /// For every block, `out[block] += Σ_b w_b v_b[0] · v_b[block]` (the first row
    /// of each block's weighted outer-product sum).
    pub fn accumulate_weighted_first_rows(&self, weights: &[f64], out: &mut [f64]) {
        for l in &self.layers {
            let mut wd = l.deltas.map(|d| d * d);
            scale_rows(&mut wd, weights);
            let mut x0x = l.inputs.clone();
            for b in 0..x0x.rows() {
                let row = x0x.row_mut(b);
                let x0 = row[0];
                for v in row.iter_mut() {
                    *v *= x0;
                }
            }
            let dst = &mut out[l.offset..l.offset + l.len()];
            gemm(
                1.0,
                wd.view().t(),
                x0x.view(),
                1.0,
                crate::linalg::MatMut::row_major(dst, l.units(), l.block_size()),
            );
        }
    }

    /// All per-example gradients as a `batch × dim` matrix.
    pub fn to_dense(&self) -> Matrix {
        let dim = self.layout.dim();
        let mut m = Matrix::zeros(self.examples, dim);
        for b in 0..self.examples {
            m.row_mut(b).copy_from_slice(self.example_gradient(b).values());
        }
        m
    }
}

fn scale_rows(m: &mut Matrix, weights: &[f64]) {
    for (b, &w) in weights.iter().enumerate().take(m.rows()) {
        for v in m.row_mut(b) {
            *v *= w;
        }
    }
}

/// Result of a backpropagation pass over a minibatch.
#[derive(Debug, Clone)]
pub struct Backprop {
    /// Mean per-example log-loss.
    pub mean_loss: f64,
    /// Gradient of the mean log-loss.
    pub gradient: ParamVector,
    pub per_example: PerExampleGradients,
}

/// A differentiable conditional model `p(y | x, θ)`.
pub trait Model: Send + Sync {
    fn layout(&self) -> &Arc<BlockLayout>;

    fn head(&self) -> OutputHead;

    fn input_width(&self) -> usize;

    fn predict(&self, theta: &ParamVector, inputs: &Matrix) -> Result<PredictiveOutput>;

    fn backprop(&self, theta: &ParamVector, batch: &Batch) -> Result<Backprop>;

    /// Draws synthetic targets `ỹ ~ p(· | x, θ)`.
    fn sample_targets(&self, theta: &ParamVector, inputs: &Matrix, rng: &mut Rng) -> Result<Targets> {
        Ok(self.predict(theta, inputs)?.sample(rng))
    }
}

pub(crate) fn strided<'a>(data: &'a [f64], rows: usize, cols: usize, row_stride: usize) -> MatRef<'a> {
    MatRef::strided(data, rows, cols, row_stride, 1)
}
