//! Feedforward ReLU networks.
//!
//! Layer `l` with `n` inputs and `m` units owns `m` consecutive blocks of
//! `n + 1` parameters: the bias, then the incoming weights. Read as a
//! row-major `m × (n + 1)` matrix this is exactly the layer's augmented
//! weight matrix, which lets the forward and backward passes run as GEMMs
//! directly over the flat parameter vector.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{gemm, MatMut, MatRef, Matrix};
use crate::model::{
    strided, Backprop, Batch, LayerFactors, Model, OutputHead, PerExampleGradients, PredictiveOutput, Targets,
};
use crate::params::{BlockLayout, ParamVector};
use crate::rng::{standard_normal, Rng};

/// Layer sizes (input, hidden..., output) plus the output head.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    layer_sizes: Vec<usize>,
    head: OutputHead,
    layout: Arc<BlockLayout>,
}

#[derive(Debug, Clone, Copy)]
struct LayerShape {
    offset: usize,
    fan_in: usize,
    units: usize,
}

impl LayerShape {
    fn params(&self) -> usize {
        self.units * (self.fan_in + 1)
    }

    fn weights<'a>(&self, theta: &'a [f64]) -> MatRef<'a> {
        MatRef::row_major(
            &theta[self.offset..self.offset + self.params()],
            self.units,
            self.fan_in + 1,
        )
    }

    /// Weights without the bias column.
    fn weights_no_bias<'a>(&self, theta: &'a [f64]) -> MatRef<'a> {
        strided(
            &theta[self.offset + 1..self.offset + self.params()],
            self.units,
            self.fan_in,
            self.fan_in + 1,
        )
    }
}

impl Architecture {
    /// `layer_sizes` lists the input width, any hidden widths, and the output width.
    ///
    /// Zero hidden layers gives a linear (softmax or Gaussian) regression.
    pub fn new(layer_sizes: Vec<usize>, head: OutputHead) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::contract(
                "an architecture needs at least an input and an output layer",
            ));
        }
        if let Some(i) = layer_sizes.iter().position(|&s| s == 0) {
            return Err(Error::contract(format!("layer {i} has size 0")));
        }
        if let OutputHead::Gaussian { sigma } = head {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(Error::contract(format!("invalid Gaussian sigma {sigma}")));
            }
        }
        let sizes = layer_sizes.windows(2).flat_map(|w| std::iter::repeat_n(w[0] + 1, w[1]));
        let layout = Arc::new(BlockLayout::from_sizes(sizes)?);
        Ok(Self {
            layer_sizes,
            head,
            layout,
        })
    }

    /// Softmax classifier with ReLU hidden layers.
    pub fn classifier(inputs: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        let mut sizes = vec![inputs];
        sizes.extend_from_slice(hidden);
        sizes.push(classes);
        Self::new(sizes, OutputHead::Categorical)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn outputs(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    fn layers(&self) -> Vec<LayerShape> {
        let mut offset = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let s = LayerShape {
                    offset,
                    fan_in: w[0],
                    units: w[1],
                };
                offset += s.params();
                s
            })
            .collect()
    }

    /// Zero biases and `N(0, 1/fan_in)` weights; deterministic given the generator state.
    pub fn init_params(&self, rng: &mut Rng) -> ParamVector {
        let mut theta = ParamVector::zeros(self.layout.clone());
        let values = theta.values_mut();
        for layer in self.layers() {
            let sd = 1.0 / (layer.fan_in as f64).sqrt();
            for unit in 0..layer.units {
                let start = layer.offset + unit * (layer.fan_in + 1);
                for w in &mut values[start + 1..start + 1 + layer.fan_in] {
                    *w = sd * standard_normal(rng);
                }
            }
        }
        theta
    }

    fn check_inputs(&self, theta: &ParamVector, inputs: &Matrix) -> Result<()> {
        if theta.dim() != self.dim() {
            return Err(Error::LayoutMismatch(format!(
                "parameter dimension {} for an architecture of dimension {}",
                theta.dim(),
                self.dim()
            )));
        }
        if inputs.cols() != self.layer_sizes[0] {
            return Err(Error::contract(format!(
                "input width {} but the network expects {}",
                inputs.cols(),
                self.layer_sizes[0]
            )));
        }
        Ok(())
    }

    /// Runs the network, returning each layer's bias-augmented input and the output
    /// pre-activations.
    fn forward_pass(&self, theta: &[f64], inputs: &Matrix) -> Result<(Vec<Matrix>, Matrix)> {
        let batch = inputs.rows();
        let layers = self.layers();
        let mut augmented = Vec::with_capacity(layers.len());
        let mut current = augment(inputs);
        for (l, layer) in layers.iter().enumerate() {
            let mut z = Matrix::zeros(batch, layer.units);
            gemm(1.0, current.view(), layer.weights(theta).t(), 0.0, z.view_mut());
            if z.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { layer: l });
            }
            augmented.push(current);
            if l + 1 == layers.len() {
                return Ok((augmented, z));
            }
            let mut next = Matrix::zeros(batch, layer.units + 1);
            for b in 0..batch {
                let row = next.row_mut(b);
                row[0] = 1.0;
                for (o, &v) in row[1..].iter_mut().zip(z.row(b)) {
                    *o = v.max(0.0);
                }
            }
            current = next;
        }
        unreachable!("architecture has at least one layer")
    }

    fn head_output(&self, z: Matrix) -> PredictiveOutput {
        match self.head {
            OutputHead::Categorical => PredictiveOutput::Categorical { probs: softmax_rows(z) },
            OutputHead::Gaussian { sigma } => PredictiveOutput::Gaussian { mean: z, sigma },
        }
    }

    pub fn forward(&self, theta: &ParamVector, inputs: &Matrix) -> Result<PredictiveOutput> {
        self.check_inputs(theta, inputs)?;
        let (_, z) = self.forward_pass(theta.values(), inputs)?;
        Ok(self.head_output(z))
    }

    /// Gradient of the mean per-example log-loss over the batch.
    pub fn minibatch_gradient(&self, theta: &ParamVector, batch: &Batch) -> Result<ParamVector> {
        Ok(self.backprop(theta, batch)?.gradient)
    }

    /// Draws `ỹ ~ p_θ(· | x)` for every input row.
    pub fn sample_output(&self, theta: &ParamVector, inputs: &Matrix, rng: &mut Rng) -> Result<Targets> {
        Ok(self.forward(theta, inputs)?.sample(rng))
    }
}

fn augment(inputs: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(inputs.rows(), inputs.cols() + 1);
    for b in 0..inputs.rows() {
        let row = out.row_mut(b);
        row[0] = 1.0;
        row[1..].copy_from_slice(inputs.row(b));
    }
    out
}

/// Row-wise softmax with max-logit subtraction.
pub fn softmax_rows(mut z: Matrix) -> Matrix {
    for b in 0..z.rows() {
        let row = z.row_mut(b);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    z
}

impl Model for Architecture {
    fn layout(&self) -> &Arc<BlockLayout> {
        &self.layout
    }

    fn head(&self) -> OutputHead {
        self.head
    }

    fn input_width(&self) -> usize {
        self.layer_sizes[0]
    }

    fn predict(&self, theta: &ParamVector, inputs: &Matrix) -> Result<PredictiveOutput> {
        self.forward(theta, inputs)
    }

    fn backprop(&self, theta: &ParamVector, batch: &Batch) -> Result<Backprop> {
        if batch.is_empty() {
            return Err(Error::contract("empty minibatch"));
        }
        self.check_inputs(theta, &batch.inputs)?;
        let values = theta.values();
        let (augmented, z) = self.forward_pass(values, &batch.inputs)?;
        let out = self.head_output(z);
        let mean_loss = out.mean_log_loss(&batch.targets)?;
        let mut delta = out.output_deltas(&batch.targets)?;

        let layers = self.layers();
        let scale = 1.0 / batch.len() as f64;
        let mut gradient = ParamVector::zeros(self.layout.clone());
        let mut factors = Vec::with_capacity(layers.len());
        let mut augmented = augmented;
        for (l, layer) in layers.iter().enumerate().rev() {
            let input = augmented.pop().expect("one augmented input per layer");
            let g = &mut gradient.values_mut()[layer.offset..layer.offset + layer.params()];
            gemm(
                scale,
                delta.view().t(),
                input.view(),
                0.0,
                MatMut::row_major(g, layer.units, layer.fan_in + 1),
            );
            let next_delta = if l > 0 {
                let mut d = Matrix::zeros(batch.len(), layer.fan_in);
                gemm(1.0, delta.view(), layer.weights_no_bias(values), 0.0, d.view_mut());
                // ReLU'(z) is 1 where the activation is positive, 0 otherwise (including z = 0).
                for b in 0..d.rows() {
                    let act = &input.row(b)[1..];
                    for (dv, &a) in d.row_mut(b).iter_mut().zip(act) {
                        if a <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                }
                Some(d)
            } else {
                None
            };
            factors.push(LayerFactors {
                offset: layer.offset,
                inputs: input,
                deltas: std::mem::replace(&mut delta, next_delta.unwrap_or_else(|| Matrix::zeros(0, 0))),
            });
        }
        factors.reverse();
        let per_example = PerExampleGradients::new(self.layout.clone(), factors)?;
        Ok(Backprop {
            mean_loss,
            gradient,
            per_example,
        })
    }
}
