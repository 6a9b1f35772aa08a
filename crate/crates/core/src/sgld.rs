//! The preconditioned Langevin sampler: step-size schedules, the per-step update,
//! posterior-mean tracking, snapshotting, and the chain driver.
//!
//! One step with preconditioner `C`, minibatch-mean loss gradient `g`, dataset size `N`
//! and prior density `α`:
//!
//! ```text
//! θ ← θ − η C (g + ∂θ(−ln α)/N) + √(2η/N) · C^{1/2} ξ,   ξ ~ N(0, I)
//! ```

use std::borrow::Cow;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, MinibatchStream};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::model::{Batch, Model};
use crate::params::ParamVector;
use crate::precond::{self, fisher_vectors, FisherVariant, Observation, PrecondConfig, PrecondKind, Preconditioner};
use crate::prior::Prior;
use crate::rng::{seeded, Rng};

/// Step sizes `η_t` for `t = 1, 2, …`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Schedule {
    /// `η0 · 2^{−⌊(t−1)/halve_every⌋}`: the k-th halving takes effect at step `k·halve_every + 1`.
    ConstantHalving { eta0: f64, halve_every: u64 },
    /// `η0 · t^{−1/3}`.
    Polynomial { eta0: f64 },
}

impl Schedule {
    /// A fixed step size.
    pub fn constant(eta: f64) -> Self {
        Schedule::ConstantHalving {
            eta0: eta,
            halve_every: u64::MAX,
        }
    }

    pub fn eta0(&self) -> f64 {
        match *self {
            Schedule::ConstantHalving { eta0, .. } | Schedule::Polynomial { eta0 } => eta0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta0() > 0.0 && self.eta0().is_finite()) {
            return Err(Error::config("eta", "step size must be positive and finite"));
        }
        if let Schedule::ConstantHalving { halve_every: 0, .. } = self {
            return Err(Error::config("halve_every", "must be >= 1"));
        }
        Ok(())
    }

    pub fn step_size(&self, t: u64) -> f64 {
        let t = t.max(1);
        match *self {
            Schedule::ConstantHalving { eta0, halve_every } => {
                let halvings = ((t - 1) / halve_every).min(1000) as i32;
                eta0 / 2f64.powi(halvings)
            }
            Schedule::Polynomial { eta0 } => eta0 / (t as f64).cbrt(),
        }
    }
}

/// Moving-average rate `γ_t` of adaptive preconditioners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GammaSchedule {
    /// `1/√t`.
    InvSqrt,
    Constant(f64),
}

impl GammaSchedule {
    pub fn gamma(&self, t: u64) -> f64 {
        match *self {
            GammaSchedule::InvSqrt => 1.0 / (t.max(1) as f64).sqrt(),
            GammaSchedule::Constant(g) => g,
        }
    }
}

/// Weights `μ_t` of the posterior-mean update `θ̄ ← (1−μ_t) θ̄ + μ_t θ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeanSchedule {
    /// `1/(t − burn_in)` after burn-in, no update before: the running mean of the
    /// post-burn-in trajectory.
    PostBurnIn,
    /// `1/t` from the first step.
    Harmonic,
    Constant(f64),
}

impl MeanSchedule {
    /// `None` when θ̄ is left unchanged at step `t`.
    pub fn mu(&self, t: u64, burn_in: u64) -> Option<f64> {
        match *self {
            MeanSchedule::PostBurnIn => (t > burn_in).then(|| 1.0 / (t - burn_in) as f64),
            MeanSchedule::Harmonic => Some(1.0 / t.max(1) as f64),
            MeanSchedule::Constant(mu) => Some(mu),
        }
    }
}

/// Per-step behaviour of the sampler.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub schedule: Schedule,
    pub gamma: GammaSchedule,
    pub mean: MeanSchedule,
    pub burn_in: u64,
    pub thin: u64,
    /// Turning the noise off gives (preconditioned) SGD.
    pub inject_noise: bool,
    /// Stop updating the preconditioner after this many steps.
    pub freeze_after: Option<u64>,
    pub fisher_variant: FisherVariant,
    /// A minibatch mean log-loss above this counts as divergence.
    pub divergence_nll: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::ConstantHalving {
                eta0: 0.01,
                halve_every: 10_000,
            },
            gamma: GammaSchedule::InvSqrt,
            mean: MeanSchedule::PostBurnIn,
            burn_in: 500,
            thin: 100,
            inject_noise: true,
            freeze_after: None,
            fisher_variant: FisherVariant::Op,
            divergence_nll: 1e6,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.thin == 0 {
            return Err(Error::config("thin", "must be >= 1"));
        }
        if let GammaSchedule::Constant(g) = self.gamma {
            if !(g > 0.0 && g <= 1.0) {
                return Err(Error::config("gamma", "constant rate must lie in (0, 1]"));
            }
        }
        if let MeanSchedule::Constant(m) = self.mean {
            if !(m > 0.0 && m <= 1.0) {
                return Err(Error::config("mean_rate", "constant rate must lie in (0, 1]"));
            }
        }
        Ok(())
    }
}

/// Sampler state of one chain.
#[derive(Debug, Clone)]
pub struct Chain {
    pub theta: ParamVector,
    /// Running posterior mean θ̄; equals θ0 until the mean schedule first fires.
    pub mean: ParamVector,
    pub step: u64,
    pub eta: f64,
    pub rng: Rng,
    /// Stored snapshots, when `keep_snapshots` is set.
    pub snapshots: Vec<ParamVector>,
    pub snapshot_count: u64,
    pub keep_snapshots: bool,
    noise: ParamVector,
}

impl Chain {
    pub fn new(theta0: ParamVector, seed: u64) -> Self {
        Self {
            mean: theta0.clone(),
            noise: ParamVector::zeros(theta0.layout().clone()),
            theta: theta0,
            step: 0,
            eta: 0.0,
            rng: seeded(seed),
            snapshots: Vec::new(),
            snapshot_count: 0,
            keep_snapshots: true,
        }
    }

    /// The `C^{1/2}ξ` draw of the most recent step (zero before the first step).
    pub fn last_noise(&self) -> &ParamVector {
        &self.noise
    }

    /// `θ̄ ← (1−μ) θ̄ + μ θ`.
    pub fn update_mean(&mut self, mu: f64) -> Result<()> {
        if !(mu > 0.0 && mu <= 1.0) {
            return Err(Error::contract(format!("mean rate must lie in (0, 1], got {mu}")));
        }
        for (m, &th) in self.mean.values_mut().iter_mut().zip(self.theta.values()) {
            *m = (1.0 - mu) * *m + mu * th;
        }
        Ok(())
    }

    /// Stores θ when `t > burn_in` and `(t − burn_in) mod thin == 0`; returns whether it did.
    pub fn maybe_snapshot(&mut self, burn_in: u64, thin: u64) -> bool {
        let t = self.step;
        if thin == 0 || t <= burn_in || !(t - burn_in).is_multiple_of(thin) {
            return false;
        }
        self.snapshot_count += 1;
        if self.keep_snapshots {
            self.snapshots.push(self.theta.clone());
        }
        true
    }
}

/// What happened in one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub eta: f64,
    /// Minibatch mean log-loss at the pre-update parameters.
    pub loss: f64,
    /// `√(2η/N)`, the factor multiplying the noise draw.
    pub noise_scale: f64,
    pub snapshot: bool,
}

/// Applies sampler steps to a chain for a fixed model, prior, and preconditioner.
pub struct Sampler<'m> {
    model: &'m dyn Model,
    prior: Option<&'m Prior>,
    precond: Box<dyn Preconditioner>,
    config: SamplerConfig,
    n_data: usize,
}

impl<'m> Sampler<'m> {
    pub fn new(
        model: &'m dyn Model,
        prior: Option<&'m Prior>,
        precond: Box<dyn Preconditioner>,
        config: SamplerConfig,
        n_data: usize,
    ) -> Result<Self> {
        config.validate()?;
        if n_data == 0 {
            return Err(Error::contract("dataset size must be positive"));
        }
        if let Some(p) = prior {
            p.validate()?;
        }
        Ok(Self {
            model,
            prior,
            precond,
            config,
            n_data,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn precond(&self) -> &dyn Preconditioner {
        self.precond.as_ref()
    }

    pub fn precond_mut(&mut self) -> &mut dyn Preconditioner {
        self.precond.as_mut()
    }

    /// The prior contribution `∂θ(−ln α)/N` to the gradient.
    pub fn prior_term(&self, theta: &ParamVector) -> Result<ParamVector> {
        let mut out = ParamVector::zeros(theta.layout().clone());
        if let Some(p) = self.prior {
            p.add_scaled_grad(theta, 1.0 / self.n_data as f64, &mut out)?;
        }
        Ok(out)
    }

    pub fn step(&mut self, chain: &mut Chain, batch: &Batch) -> Result<StepReport> {
        self.step_inner(chain, batch, None)
    }

    /// A step whose noise draw `C^{1/2}ξ` is replaced by `xi`.
    pub fn step_with_noise(&mut self, chain: &mut Chain, batch: &Batch, xi: &ParamVector) -> Result<StepReport> {
        if !xi.same_layout(&chain.theta) {
            return Err(Error::LayoutMismatch("injected noise does not match θ".into()));
        }
        self.step_inner(chain, batch, Some(xi))
    }

    fn step_inner(&mut self, chain: &mut Chain, batch: &Batch, xi: Option<&ParamVector>) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::contract("empty minibatch"));
        }
        let cfg = self.config;
        chain.step += 1;
        let t = chain.step;
        let eta = cfg.schedule.step_size(t);
        chain.eta = eta;
        let diverged = |reason: String| Error::Divergence { step: t, eta, reason };

        let bp = self.model.backprop(&chain.theta, batch)?;
        if !bp.mean_loss.is_finite() || bp.mean_loss > cfg.divergence_nll {
            return Err(diverged(format!("minibatch log-loss {}", bp.mean_loss)));
        }
        let mut g = bp.gradient;
        if let Some(p) = self.prior {
            p.add_scaled_grad(&chain.theta, 1.0 / self.n_data as f64, &mut g)?;
        }

        let frozen = cfg.freeze_after.is_some_and(|f| t > f);
        let kind = self.precond.kind();
        if !frozen && kind != PrecondKind::Identity {
            let fisher = if kind.uses_fisher() {
                Some(match cfg.fisher_variant {
                    FisherVariant::Op => Cow::Borrowed(&bp.per_example),
                    FisherVariant::Mc => Cow::Owned(fisher_vectors(
                        self.model,
                        &chain.theta,
                        batch,
                        FisherVariant::Mc,
                        None,
                        &mut chain.rng,
                    )?),
                })
            } else {
                None
            };
            let obs = Observation {
                gradient: &g,
                fisher: fisher.as_deref(),
            };
            self.precond.update(&obs, cfg.gamma.gamma(t))?;
        }
        self.precond.apply(&mut g)?;

        let noise_scale = (2.0 * eta / self.n_data as f64).sqrt();
        if cfg.inject_noise {
            match xi {
                Some(x) => chain.noise.values_mut().copy_from_slice(x.values()),
                None => self.precond.sample_noise(&mut chain.rng, &mut chain.noise)?,
            }
            for ((th, &gi), &n) in chain
                .theta
                .values_mut()
                .iter_mut()
                .zip(g.values())
                .zip(chain.noise.values())
            {
                *th = *th - eta * gi + noise_scale * n;
            }
        } else {
            for (th, &gi) in chain.theta.values_mut().iter_mut().zip(g.values()) {
                *th -= eta * gi;
            }
        }
        if let Some(i) = chain.theta.values().iter().position(|v| !v.is_finite()) {
            return Err(diverged(format!("non-finite parameter at coordinate {i}")));
        }

        if let Some(mu) = cfg.mean.mu(t, cfg.burn_in) {
            chain.update_mean(mu)?;
        }
        let snapshot = chain.maybe_snapshot(cfg.burn_in, cfg.thin);
        Ok(StepReport {
            step: t,
            eta,
            loss: bp.mean_loss,
            noise_scale,
            snapshot,
        })
    }
}

// ---------------------------------------------------------------------------
// Chain driver

/// Everything `run_chain` needs beyond the model, prior, and data.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainConfig {
    pub sampler: SamplerConfig,
    pub precond: PrecondKind,
    pub precond_config: PrecondConfig,
    pub minibatch: usize,
    pub updates: u64,
    /// Trace interval in steps; 0 records only the initial and final rows.
    pub eval_every: u64,
    /// Seed of the noise stream (and MC Fisher targets).
    pub noise_seed: u64,
    /// Seed of the minibatch order, independent of the noise stream.
    pub data_seed: u64,
    /// Training metrics in the trace use at most this many leading training examples.
    pub train_eval_limit: Option<usize>,
    pub keep_snapshots: bool,
}

/// One row of the metrics trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub eta: f64,
    pub train: MetricsReport,
    pub validation: Option<MetricsReport>,
    pub snapshot_count: u64,
}

pub const TRACE_HEADER: &str = "step,eta,train_nll,train_acc,val_nll,val_acc,snapshot_count";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the trace as CSV with [`TRACE_HEADER`]; missing metrics are empty fields.
pub fn write_trace_csv<W: Write>(rows: &[TraceRow], mut out: W) -> Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.step,
            r.eta,
            r.train.nll,
            opt(r.train.accuracy),
            opt(r.validation.map(|v| v.nll)),
            opt(r.validation.and_then(|v| v.accuracy)),
            r.snapshot_count
        )?;
    }
    Ok(())
}

/// Result of a completed chain.
#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub chain: Chain,
    pub trace: Vec<TraceRow>,
    /// Radicand clamps of the quasi-diagonal factorization, if applicable.
    pub clamp_events: usize,
}

/// A chain that stopped early, with the trace recorded up to that point.
#[derive(Debug)]
pub struct ChainFailure {
    pub error: Error,
    pub trace: Vec<TraceRow>,
}

impl std::fmt::Display for ChainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (after {} trace rows)", self.error, self.trace.len())
    }
}

impl std::error::Error for ChainFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Runs `config.updates` sampler steps over shuffled minibatches of `train`.
///
/// `on_snapshot` sees every stored snapshot as it is taken, so callers can stream
/// ensemble evaluation instead of keeping all snapshots.
pub fn run_chain(
    model: &dyn Model,
    prior: Option<&Prior>,
    train: &LabeledDataset,
    validation: Option<&LabeledDataset>,
    theta0: ParamVector,
    config: &ChainConfig,
    on_snapshot: &mut dyn FnMut(u64, &ParamVector) -> Result<()>,
) -> std::result::Result<ChainOutput, ChainFailure> {
    let mut trace = Vec::new();
    match drive(model, prior, train, validation, theta0, config, on_snapshot, &mut trace) {
        Ok((chain, clamp_events)) => Ok(ChainOutput {
            chain,
            trace,
            clamp_events,
        }),
        Err(error) => Err(ChainFailure { error, trace }),
    }
}

#[allow(clippy::too_many_arguments)]
fn drive(
    model: &dyn Model,
    prior: Option<&Prior>,
    train: &LabeledDataset,
    validation: Option<&LabeledDataset>,
    theta0: ParamVector,
    config: &ChainConfig,
    on_snapshot: &mut dyn FnMut(u64, &ParamVector) -> Result<()>,
    trace: &mut Vec<TraceRow>,
) -> Result<(Chain, usize)> {
    let precond = precond::build(config.precond, model.layout(), config.precond_config)?;
    let mut sampler = Sampler::new(model, prior, precond, config.sampler, train.len())?;
    let mut chain = Chain::new(theta0, config.noise_seed);
    chain.keep_snapshots = config.keep_snapshots;
    let train_eval = match config.train_eval_limit {
        Some(n) if n < train.len() => Cow::Owned(train.head(n)),
        _ => Cow::Borrowed(train),
    };
    let record = |chain: &Chain, trace: &mut Vec<TraceRow>| -> Result<()> {
        trace.push(TraceRow {
            step: chain.step,
            eta: config.sampler.schedule.step_size(chain.step.max(1)),
            train: evaluate(model, &chain.theta, &train_eval)?,
            validation: validation.map(|v| evaluate(model, &chain.theta, v)).transpose()?,
            snapshot_count: chain.snapshot_count,
        });
        Ok(())
    };

    record(&chain, trace)?;
    let mut batches = MinibatchStream::new(train, config.minibatch, config.data_seed)?;
    while chain.step < config.updates {
        let batch = batches.next_batch();
        let report = sampler.step(&mut chain, &batch)?;
        if report.snapshot {
            on_snapshot(report.step, &chain.theta)?;
        }
        if config.eval_every > 0 && report.step % config.eval_every == 0 {
            record(&chain, trace)?;
        }
    }
    if trace.last().is_none_or(|r| r.step != chain.step) {
        record(&chain, trace)?;
    }
    Ok((chain, sampler.precond().clamp_events()))
}
