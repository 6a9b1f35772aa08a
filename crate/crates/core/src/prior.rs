//! Priors over the parameter vector.
//!
//! The sampler needs only `∂θ(−ln α(θ))`, which it scales by `1/N`.
//! The normal-inverse-gamma prior is used through its per-coordinate
//! Student-t marginal, so no variance variable is carried in the chain state.

use std::sync::Arc;

use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::params::{BlockLayout, ParamVector};
use crate::rng::{standard_normal, Rng};

/// Default NIG shape.
pub const DEFAULT_NIG_SHAPE: f64 = 1.0;
/// Default NIG scale.
pub const DEFAULT_NIG_SCALE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub enum Prior {
    /// Independent `N(mean_i, variance_i)` per coordinate; `mean` defaults to zero and a
    /// single-entry `variance` is shared by every coordinate.
    Gaussian { mean: Option<Vec<f64>>, variance: Vec<f64> },
    /// Per-coordinate `θ | s² ~ N(0, s²)`, `s² ~ InvGamma(shape, scale)`.
    NormalInverseGamma { shape: f64, scale: f64 },
}

impl Prior {
    /// Zero-mean isotropic Gaussian.
    pub fn gaussian(variance: f64) -> Result<Self> {
        let p = Prior::Gaussian {
            mean: None,
            variance: vec![variance],
        };
        p.validate()?;
        Ok(p)
    }

    pub fn gaussian_with_mean(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        let p = Prior::Gaussian {
            mean: Some(mean),
            variance,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn normal_inverse_gamma(shape: f64, scale: f64) -> Result<Self> {
        let p = Prior::NormalInverseGamma { shape, scale };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Prior::Gaussian { mean, variance } => {
                if variance.is_empty() {
                    return Err(Error::contract("Gaussian prior needs a variance"));
                }
                if let Some(v) = variance.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
                    return Err(Error::contract(format!("prior variance must be > 0, got {v}")));
                }
                if let Some(m) = mean {
                    if m.iter().any(|v| !v.is_finite()) {
                        return Err(Error::contract("prior mean must be finite"));
                    }
                    if variance.len() != 1 && variance.len() != m.len() {
                        return Err(Error::contract("prior mean and variance lengths differ"));
                    }
                }
                Ok(())
            }
            Prior::NormalInverseGamma { shape, scale } => {
                if !(*shape > 0.0 && *scale > 0.0 && shape.is_finite() && scale.is_finite()) {
                    return Err(Error::contract(format!(
                        "NIG prior needs shape > 0 and scale > 0, got ({shape}, {scale})"
                    )));
                }
                Ok(())
            }
        }
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        if let Prior::Gaussian { mean, variance } = self {
            let bad_mean = mean.as_ref().is_some_and(|m| m.len() != dim);
            let bad_var = variance.len() != 1 && variance.len() != dim;
            if bad_mean || bad_var {
                return Err(Error::LayoutMismatch(format!(
                    "prior does not match parameter dimension {dim}"
                )));
            }
        }
        Ok(())
    }

    fn gaussian_coord(mean: &Option<Vec<f64>>, variance: &[f64], i: usize) -> (f64, f64) {
        let m = mean.as_ref().map_or(0.0, |m| m[i]);
        let v = if variance.len() == 1 { variance[0] } else { variance[i] };
        (m, v)
    }

    /// `−ln α(θ)` up to an additive constant.
    pub fn neg_log_density(&self, theta: &ParamVector) -> Result<f64> {
        self.check_dim(theta.dim())?;
        Ok(match self {
            Prior::Gaussian { mean, variance } => theta
                .values()
                .iter()
                .enumerate()
                .map(|(i, &t)| {
                    let (m, v) = Self::gaussian_coord(mean, variance, i);
                    (t - m) * (t - m) / (2.0 * v)
                })
                .sum(),
            Prior::NormalInverseGamma { shape, scale } => theta
                .values()
                .iter()
                .map(|&t| (shape + 0.5) * (1.0 + t * t / (2.0 * scale)).ln())
                .sum(),
        })
    }

    /// `∂θ(−ln α(θ))`.
    pub fn neg_log_prior_grad(&self, theta: &ParamVector) -> Result<ParamVector> {
        let mut g = ParamVector::zeros(theta.layout().clone());
        self.add_scaled_grad(theta, 1.0, &mut g)?;
        Ok(g)
    }

    /// `out += scale · ∂θ(−ln α(θ))`.
    pub fn add_scaled_grad(&self, theta: &ParamVector, scale: f64, out: &mut ParamVector) -> Result<()> {
        self.check_dim(theta.dim())?;
        theta.check_layout(out)?;
        let dst = out.values_mut();
        match self {
            Prior::Gaussian { mean, variance } => {
                for (i, (o, &t)) in dst.iter_mut().zip(theta.values()).enumerate() {
                    let (m, v) = Self::gaussian_coord(mean, variance, i);
                    *o += scale * (t - m) / v;
                }
            }
            Prior::NormalInverseGamma { shape, scale: beta } => {
                for (o, &t) in dst.iter_mut().zip(theta.values()) {
                    *o += scale * (shape + 0.5) * t / (beta + 0.5 * t * t);
                }
            }
        }
        Ok(())
    }

    /// Independent draw per coordinate.
    pub fn sample(&self, layout: Arc<BlockLayout>, rng: &mut Rng) -> Result<ParamVector> {
        self.check_dim(layout.dim())?;
        let mut theta = ParamVector::zeros(layout);
        match self {
            Prior::Gaussian { mean, variance } => {
                for (i, t) in theta.values_mut().iter_mut().enumerate() {
                    let (m, v) = Self::gaussian_coord(mean, variance, i);
                    *t = m + v.sqrt() * standard_normal(rng);
                }
            }
            Prior::NormalInverseGamma { shape, scale } => {
                // 1/s² ~ Gamma(shape, rate = scale)
                let precision =
                    Gamma::new(*shape, 1.0 / scale).map_err(|e| Error::contract(format!("NIG prior: {e}")))?;
                for t in theta.values_mut() {
                    let s2 = 1.0 / precision.sample(rng);
                    *t = s2.sqrt() * standard_normal(rng);
                }
            }
        }
        theta.ensure_finite()?;
        Ok(theta)
    }
}
