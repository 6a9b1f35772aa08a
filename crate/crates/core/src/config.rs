//! Run configuration: a flat TOML table with full defaulting.
//!
//! Unknown keys are rejected. Command-line overrides use the same keys
//! (`--set eta=0.1`), so every setting has exactly one name.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::precond::{FisherUpdate, FisherVariant, PrecondConfig, PrecondKind};
use crate::prior::{Prior, DEFAULT_NIG_SCALE, DEFAULT_NIG_SHAPE};
use crate::sgld::{GammaSchedule, MeanSchedule, SamplerConfig, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// Halve η every `halve_every` updates.
    Halving,
    /// `η · t^{-1/3}`.
    Polynomial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorKind {
    Gaussian,
    /// Normal-inverse-gamma through its Student-t marginal.
    Nig,
    /// No prior: the sampler targets the (improper) likelihood alone.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
    /// Use only the first `subset` examples of the training file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subset: Option<usize>,
    /// Test examples carved out of the training file when no test files are given.
    pub test_size: usize,
    pub validation_size: usize,
    /// Seed of the test/validation carving.
    pub split_seed: u64,

    pub hidden: Vec<usize>,

    pub preconditioner: PrecondKind,
    pub fisher_variant: FisherVariant,
    pub fisher_update: FisherUpdate,
    pub epsilon: f64,
    pub gamma: GammaSchedule,
    /// Stop adapting the preconditioner after this many updates.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub freeze_precond_after: Option<u64>,

    pub schedule: ScheduleKind,
    pub eta: f64,
    pub halve_every: u64,

    pub prior: PriorKind,
    pub prior_variance: f64,
    pub nig_shape: f64,
    pub nig_scale: f64,

    pub minibatch: usize,
    pub updates: u64,
    pub burn_in: u64,
    pub thin: u64,
    pub mean_schedule: MeanSchedule,
    pub seed: u64,
    /// Trace interval in updates; 0 records only the first and last rows.
    pub eval_every: u64,
    /// Training-set metrics use at most this many leading training examples.
    pub train_eval_limit: usize,
    pub output_dir: PathBuf,
    /// Write every snapshot of a single run to `ensemble.lbnn`.
    pub save_ensemble: bool,

    pub grid_preconditioners: Vec<PrecondKind>,
    pub grid_eta_euclidean: Vec<f64>,
    pub grid_eta_other: Vec<f64>,
    pub grid_prior_variance: Vec<f64>,

    pub oracle_n: usize,
    pub oracle_d: usize,
    pub oracle_noise_variance: f64,
    pub oracle_prior_variance: f64,
    pub oracle_steps: u64,
    pub oracle_burn_in: u64,
    /// Defaults to `1e-3 · N / 2`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_eta: Option<f64>,
    pub oracle_preconditioners: Vec<PrecondKind>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            subset: None,
            test_size: 0,
            validation_size: 10_000,
            split_seed: 0,
            hidden: vec![400, 400],
            preconditioner: PrecondKind::QuasiDiagonalOp,
            fisher_variant: FisherVariant::Op,
            fisher_update: FisherUpdate::ExampleMean,
            epsilon: 1e-4,
            gamma: GammaSchedule::InvSqrt,
            freeze_precond_after: None,
            schedule: ScheduleKind::Halving,
            eta: 0.01,
            halve_every: 10_000,
            prior: PriorKind::Gaussian,
            prior_variance: 0.1,
            nig_shape: DEFAULT_NIG_SHAPE,
            nig_scale: DEFAULT_NIG_SCALE,
            minibatch: 100,
            updates: 50_000,
            burn_in: 500,
            thin: 100,
            mean_schedule: MeanSchedule::PostBurnIn,
            seed: 1,
            eval_every: 1000,
            train_eval_limit: 10_000,
            output_dir: PathBuf::from("runs"),
            save_ensemble: true,
            grid_preconditioners: vec![
                PrecondKind::Identity,
                PrecondKind::RmsProp,
                PrecondKind::DiagonalOp,
                PrecondKind::QuasiDiagonalOp,
            ],
            grid_eta_euclidean: vec![0.001, 0.01, 0.1, 1.0],
            grid_eta_other: vec![0.0001, 0.001, 0.01, 0.1],
            grid_prior_variance: vec![0.01, 0.1, 1.0],
            oracle_n: 50,
            oracle_d: 2,
            oracle_noise_variance: 2.0,
            oracle_prior_variance: 1.0,
            oracle_steps: 200_000,
            oracle_burn_in: 10_000,
            oracle_eta: None,
            oracle_preconditioners: PrecondKind::ALL.to_vec(),
        }
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(key, format!("must be positive and finite, got {v}")))
    }
}

fn at_least_one(key: &str, v: u64) -> Result<()> {
    if v >= 1 {
        Ok(())
    } else {
        Err(Error::config(key, "must be >= 1"))
    }
}

impl RunConfig {
    /// Parses TOML text, applying `key=value` overrides before deserialization.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o.clone(), "override must look like key=value"))?;
            let key = key.trim();
            let value = value.trim();
            // bare words that are not valid TOML values are taken as strings
            let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(value.to_string()));
            table.insert(key.to_string(), parsed);
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| {
            let msg = e.message().to_string();
            let key = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.starts_with("unknown field"))
                .unwrap_or("config")
                .to_string();
            Error::config(key, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        Self::parse(&text, overrides)
    }

    /// The resolved configuration as TOML; parsing it gives back an equal config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config(
                "epsilon",
                format!("must be finite and >= 0, got {}", self.epsilon),
            ));
        }
        positive("eta", self.eta)?;
        at_least_one("halve_every", self.halve_every)?;
        positive("prior_variance", self.prior_variance)?;
        positive("nig_shape", self.nig_shape)?;
        positive("nig_scale", self.nig_scale)?;
        at_least_one("minibatch", self.minibatch as u64)?;
        at_least_one("thin", self.thin)?;
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden", "layer sizes must be >= 1"));
        }
        if let GammaSchedule::Constant(g) = self.gamma {
            if !(g > 0.0 && g <= 1.0) {
                return Err(Error::config("gamma", "constant rate must lie in (0, 1]"));
            }
        }
        if let MeanSchedule::Constant(m) = self.mean_schedule {
            if !(m > 0.0 && m <= 1.0) {
                return Err(Error::config("mean_schedule", "constant rate must lie in (0, 1]"));
            }
        }
        for (key, grid) in [
            ("grid_eta_euclidean", &self.grid_eta_euclidean),
            ("grid_eta_other", &self.grid_eta_other),
            ("grid_prior_variance", &self.grid_prior_variance),
        ] {
            if grid.is_empty() {
                return Err(Error::config(key, "grid must not be empty"));
            }
            for &v in grid {
                positive(key, v)?;
            }
        }
        if self.grid_preconditioners.is_empty() {
            return Err(Error::config("grid_preconditioners", "grid must not be empty"));
        }
        if self.subset == Some(0) {
            return Err(Error::config("subset", "must be >= 1"));
        }
        at_least_one("oracle_n", self.oracle_n as u64)?;
        at_least_one("oracle_d", self.oracle_d as u64)?;
        positive("oracle_noise_variance", self.oracle_noise_variance)?;
        positive("oracle_prior_variance", self.oracle_prior_variance)?;
        if let Some(e) = self.oracle_eta {
            positive("oracle_eta", e)?;
        }
        Ok(())
    }

    /// Checks that the dataset paths needed by `train` and `grid` are present.
    pub fn require_data(&self) -> Result<()> {
        if self.train_images.is_none() {
            return Err(Error::config("train_images", "missing dataset path"));
        }
        if self.train_labels.is_none() {
            return Err(Error::config("train_labels", "missing dataset path"));
        }
        match (&self.test_images, &self.test_labels) {
            (Some(_), Some(_)) => Ok(()),
            (Some(_), None) => Err(Error::config("test_labels", "missing dataset path")),
            (None, Some(_)) => Err(Error::config("test_images", "missing dataset path")),
            (None, None) if self.test_size == 0 => Err(Error::config(
                "test_images",
                "missing dataset path (or set test_size to carve a test set from the training file)",
            )),
            (None, None) => Ok(()),
        }
    }

    pub fn schedule_for(&self, eta: f64) -> Schedule {
        match self.schedule {
            ScheduleKind::Halving => Schedule::ConstantHalving {
                eta0: eta,
                halve_every: self.halve_every,
            },
            ScheduleKind::Polynomial => Schedule::Polynomial { eta0: eta },
        }
    }

    pub fn sampler_for(&self, eta: f64) -> SamplerConfig {
        SamplerConfig {
            schedule: self.schedule_for(eta),
            gamma: self.gamma,
            mean: self.mean_schedule,
            burn_in: self.burn_in,
            thin: self.thin,
            inject_noise: true,
            freeze_after: self.freeze_precond_after,
            fisher_variant: self.fisher_variant,
            divergence_nll: 1e6,
        }
    }

    pub fn precond_config(&self) -> PrecondConfig {
        PrecondConfig {
            epsilon: self.epsilon,
            fisher_update: self.fisher_update,
        }
    }

    pub fn prior_with_variance(&self, variance: f64) -> Result<Option<Prior>> {
        Ok(match self.prior {
            PriorKind::Gaussian => Some(Prior::gaussian(variance)?),
            PriorKind::Nig => Some(Prior::normal_inverse_gamma(self.nig_shape, self.nig_scale)?),
            PriorKind::None => None,
        })
    }
}
