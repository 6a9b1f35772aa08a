//! Metrics, ensemble prediction, and sample moments of chain snapshots.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{Model, PredictiveOutput, Targets};
use crate::params::ParamVector;

/// Rows per forward pass during evaluation.
const EVAL_CHUNK: usize = 1000;

/// Mean log-loss and (for categorical heads) accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Mean negative log-likelihood, nats per example.
    pub nll: f64,
    pub accuracy: Option<f64>,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Sum of log-losses and number of correct argmax predictions.
fn score(out: &PredictiveOutput, targets: &Targets) -> Result<(f64, usize)> {
    let nll: f64 = out.log_losses(targets)?.iter().sum();
    let correct = match (out, targets) {
        (PredictiveOutput::Categorical { probs }, Targets::Labels(labels)) => labels
            .iter()
            .enumerate()
            .filter(|&(i, &y)| argmax(probs.row(i)) == y)
            .count(),
        _ => 0,
    };
    Ok((nll, correct))
}

/// Metrics of a predictive output against its targets.
pub fn metrics(out: &PredictiveOutput, targets: &Targets) -> Result<MetricsReport> {
    if targets.is_empty() {
        return Err(Error::contract("cannot evaluate on zero examples"));
    }
    let (nll, correct) = score(out, targets)?;
    Ok(report(nll, correct, targets))
}

fn report(nll_sum: f64, correct: usize, targets: &Targets) -> MetricsReport {
    let n = targets.len() as f64;
    MetricsReport {
        nll: nll_sum / n,
        accuracy: matches!(targets, Targets::Labels(_)).then(|| correct as f64 / n),
    }
}

fn chunks(data: &LabeledDataset) -> impl Iterator<Item = (std::ops::Range<usize>, LabeledDataset)> + '_ {
    (0..data.len()).step_by(EVAL_CHUNK).map(move |start| {
        let r = start..(start + EVAL_CHUNK).min(data.len());
        let idx: Vec<usize> = r.clone().collect();
        (r, data.subset(&idx))
    })
}

/// Single-parameter evaluation (used for the posterior mean θ̄).
pub fn evaluate(model: &dyn Model, theta: &ParamVector, data: &LabeledDataset) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::contract("cannot evaluate on zero examples"));
    }
    let (mut nll, mut correct) = (0.0, 0);
    for (_, part) in chunks(data) {
        let (l, c) = score(&model.predict(theta, part.inputs())?, part.targets())?;
        nll += l;
        correct += c;
    }
    Ok(report(nll, correct, data.targets()))
}

/// Posterior-predictive approximation: the average of member predictive distributions.
///
/// Categorical members average probabilities; Gaussian members average means with the shared σ.
pub fn ensemble_predict(model: &dyn Model, members: &[ParamVector], inputs: &Matrix) -> Result<PredictiveOutput> {
    let (first, rest) = members
        .split_first()
        .ok_or_else(|| Error::contract("ensemble needs at least one member"))?;
    let mut acc = model.predict(first, inputs)?;
    for m in rest {
        add_into(&mut acc, &model.predict(m, inputs)?)?;
    }
    scale_output(&mut acc, 1.0 / members.len() as f64);
    Ok(acc)
}

fn output_values(out: &mut PredictiveOutput) -> &mut [f64] {
    match out {
        PredictiveOutput::Categorical { probs } => probs.data_mut(),
        PredictiveOutput::Gaussian { mean, .. } => mean.data_mut(),
    }
}

fn add_into(acc: &mut PredictiveOutput, member: &PredictiveOutput) -> Result<()> {
    let src = match member {
        PredictiveOutput::Categorical { probs } => probs.data(),
        PredictiveOutput::Gaussian { mean, .. } => mean.data(),
    };
    let dst = output_values(acc);
    if dst.len() != src.len() {
        return Err(Error::contract("ensemble members disagree on output shape"));
    }
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
    Ok(())
}

fn scale_output(out: &mut PredictiveOutput, a: f64) {
    for v in output_values(out) {
        *v *= a;
    }
}

/// Ensemble metrics together with the average of the members' own metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub ensemble: MetricsReport,
    pub mean_member_nll: f64,
    pub members: usize,
}

impl EnsembleReport {
    /// Whether the ensemble NLL is at most the mean member NLL, up to rounding.
    ///
    /// Holds for categorical heads by concavity of the logarithm.
    pub fn satisfies_jensen(&self) -> bool {
        self.ensemble.nll <= self.mean_member_nll + 1e-12 * self.mean_member_nll.abs().max(1.0)
    }
}

/// Streaming ensemble evaluation on a fixed dataset: members are added one at a time, so
/// snapshots never need to be held in memory together.
#[derive(Debug, Clone)]
pub struct EnsembleAccumulator<'a> {
    data: &'a LabeledDataset,
    sum: Option<PredictiveOutput>,
    member_nll_sum: f64,
    members: usize,
}

impl<'a> EnsembleAccumulator<'a> {
    pub fn new(data: &'a LabeledDataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::contract("cannot evaluate on zero examples"));
        }
        Ok(Self {
            data,
            sum: None,
            member_nll_sum: 0.0,
            members: 0,
        })
    }

    /// Adds one member and returns its individual metrics.
    pub fn add(&mut self, model: &dyn Model, theta: &ParamVector) -> Result<MetricsReport> {
        let out = model.predict(theta, self.data.inputs())?;
        let m = metrics(&out, self.data.targets())?;
        match &mut self.sum {
            None => self.sum = Some(out),
            Some(acc) => add_into(acc, &out)?,
        }
        self.member_nll_sum += m.nll;
        self.members += 1;
        Ok(m)
    }

    pub fn members(&self) -> usize {
        self.members
    }

    pub fn predictive(&self) -> Result<PredictiveOutput> {
        let mut out = self
            .sum
            .clone()
            .ok_or_else(|| Error::contract("ensemble needs at least one member"))?;
        scale_output(&mut out, 1.0 / self.members as f64);
        Ok(out)
    }

    pub fn report(&self) -> Result<EnsembleReport> {
        let ensemble = metrics(&self.predictive()?, self.data.targets())?;
        Ok(EnsembleReport {
            ensemble,
            mean_member_nll: self.member_nll_sum / self.members as f64,
            members: self.members,
        })
    }
}

/// Sample mean over all coordinates and the unbiased covariance (divisor `K − 1`)
/// restricted to `coords`.
pub fn sample_moments(snapshots: &[ParamVector], coords: &[usize]) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if snapshots.len() < 2 {
        return Err(Error::contract(format!(
            "covariance needs at least 2 snapshots, got {}",
            snapshots.len()
        )));
    }
    let first = &snapshots[0];
    if let Some(bad) = snapshots.iter().find(|s| !first.same_layout(s)) {
        return Err(Error::LayoutMismatch(format!(
            "snapshot of dimension {} differs from the first",
            bad.dim()
        )));
    }
    if let Some(&c) = coords.iter().find(|&&c| c >= first.dim()) {
        return Err(Error::contract(format!("coordinate {c} out of range")));
    }
    let k = snapshots.len() as f64;
    let mut mean = vec![0.0; first.dim()];
    for s in snapshots {
        for (m, v) in mean.iter_mut().zip(s.values()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= k;
    }
    let p = coords.len();
    let mut cov = DMatrix::zeros(p, p);
    for s in snapshots {
        let v = s.values();
        for a in 0..p {
            let da = v[coords[a]] - mean[coords[a]];
            for b in 0..=a {
                cov[(a, b)] += da * (v[coords[b]] - mean[coords[b]]);
            }
        }
    }
    for a in 0..p {
        for b in 0..=a {
            cov[(a, b)] /= k - 1.0;
            cov[(b, a)] = cov[(a, b)];
        }
    }
    Ok((mean, cov))
}
