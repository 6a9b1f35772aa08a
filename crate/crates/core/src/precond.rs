//! Preconditioners for Langevin dynamics.
//!
//! A preconditioner is a symmetric positive-definite matrix `C` exposing the
//! four routines the sampler needs: initialization (the constructors),
//! `update` from recent gradient observations, `apply` (`g ← C g`) and
//! `sample_noise` (`ξ ~ N(0, C)`).
//!
//! | kind      | `C`                                | noise                      |
//! |-----------|------------------------------------|----------------------------|
//! | Identity  | `I`                                | `N(0, I)`                  |
//! | RMSProp   | `(D + ε)^{-1/2}`, `D` ≈ avg `g²`   | `(D + ε)^{-1/4} N(0, I)`   |
//! | Full      | `(J + εI)^{-1}`                    | `(J + εI)^{-1/2} N(0, I)`  |
//! | DOP       | `(diag J + ε)^{-1}`                | `(diag J + ε)^{-1/2} N`    |
//! | QDOP      | `A Aᵀ`, quasi-diagonal Cholesky    | `A N(0, I)`                |
//!
//! Fisher-based kinds average outer products of per-example log-loss
//! gradients `ṽ`, computed either at the dataset targets (outer-product, OP)
//! or at targets sampled from the model (Monte Carlo, MC).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::model::{Backprop, Batch, Model, PerExampleGradients};
use crate::params::{read_layout_header, write_layout_header, BlockLayout, ParamVector};
use crate::rng::{fill_standard_normal, Rng};

/// Magic bytes of a serialized quasi-diagonal state.
pub const QD_STATE_MAGIC: &[u8; 4] = b"LBQD";

/// Largest dimension accepted by the dense Fisher preconditioner.
pub const MAX_FULL_FISHER_DIM: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrecondKind {
    /// Plain SGLD, `C = I`; also called Euclidean.
    #[serde(alias = "euclidean")]
    Identity,
    #[serde(rename = "rmsprop")]
    RmsProp,
    #[serde(rename = "fisher")]
    FullFisher,
    #[serde(rename = "dop")]
    DiagonalOp,
    #[serde(rename = "qdop")]
    QuasiDiagonalOp,
}

impl PrecondKind {
    pub const ALL: [PrecondKind; 5] = [
        PrecondKind::Identity,
        PrecondKind::RmsProp,
        PrecondKind::FullFisher,
        PrecondKind::DiagonalOp,
        PrecondKind::QuasiDiagonalOp,
    ];

    /// Display name as used in result tables.
    pub fn label(self) -> &'static str {
        match self {
            PrecondKind::Identity => "Euclidean",
            PrecondKind::RmsProp => "RMSProp",
            PrecondKind::FullFisher => "Fisher",
            PrecondKind::DiagonalOp => "DOP",
            PrecondKind::QuasiDiagonalOp => "QDOP",
        }
    }

    pub fn uses_fisher(self) -> bool {
        matches!(
            self,
            PrecondKind::FullFisher | PrecondKind::DiagonalOp | PrecondKind::QuasiDiagonalOp
        )
    }
}

impl std::str::FromStr for PrecondKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" | "euclidean" => Ok(PrecondKind::Identity),
            "rmsprop" => Ok(PrecondKind::RmsProp),
            "fisher" | "full-fisher" => Ok(PrecondKind::FullFisher),
            "dop" => Ok(PrecondKind::DiagonalOp),
            "qdop" => Ok(PrecondKind::QuasiDiagonalOp),
            _ => Err(Error::config("preconditioner", format!("unknown kind `{s}`"))),
        }
    }
}

/// Which targets the Fisher outer products are computed at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FisherVariant {
    /// Dataset targets `y` (empirical Fisher).
    Op,
    /// Targets sampled from the model, `ỹ ~ p_θ(·|x)`.
    Mc,
}

/// How a minibatch of per-example gradients enters a Fisher moving average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FisherUpdate {
    /// One update `J ← (1−γ)J + γ ṽ ṽᵀ` per example, in batch order, all with the same γ.
    PerExample,
    /// One update per step with the batch average of the outer products `ṽ_b ṽ_bᵀ`.
    ExampleMean,
    /// One update per step with the outer product of the batch-mean gradient.
    MinibatchMean,
}

/// Construction parameters shared by every preconditioner kind.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecondConfig {
    pub epsilon: f64,
    pub fisher_update: FisherUpdate,
}

impl Default for PrecondConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            fisher_update: FisherUpdate::ExampleMean,
        }
    }
}

/// What a preconditioner may learn from in one sampler step.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    /// Minibatch gradient including the prior term.
    pub gradient: &'a ParamVector,
    /// Per-example Fisher vectors `ṽ`, present for Fisher-based kinds.
    pub fisher: Option<&'a PerExampleGradients>,
}

/// The sampler-facing preconditioner interface.
pub trait Preconditioner: Send {
    fn kind(&self) -> PrecondKind;

    /// Moving-average update with decay rate `gamma ∈ (0, 1]`.
    fn update(&mut self, obs: &Observation<'_>, gamma: f64) -> Result<()>;

    /// `g ← C g`.
    fn apply(&mut self, g: &mut ParamVector) -> Result<()>;

    /// Overwrites `out` with a draw from `N(0, C)`.
    fn sample_noise(&mut self, rng: &mut Rng, out: &mut ParamVector) -> Result<()>;

    /// Numerical guard activations so far (radicand clamps for the quasi-diagonal kind).
    fn clamp_events(&self) -> usize {
        0
    }

    /// Dense `C`, assembled column by column through `apply`. Intended for small dimensions.
    fn matrix(&mut self, layout: &Arc<BlockLayout>) -> Result<DMatrix<f64>> {
        let dim = layout.dim();
        let mut m = DMatrix::zeros(dim, dim);
        for j in 0..dim {
            let mut e = ParamVector::zeros(layout.clone());
            e.values_mut()[j] = 1.0;
            self.apply(&mut e)?;
            m.column_mut(j).copy_from_slice(e.values());
        }
        Ok(m)
    }
}

/// Builds a freshly initialized preconditioner of the requested kind.
pub fn build(kind: PrecondKind, layout: &Arc<BlockLayout>, config: PrecondConfig) -> Result<Box<dyn Preconditioner>> {
    if !(config.epsilon >= 0.0 && config.epsilon.is_finite()) {
        return Err(Error::config("epsilon", "regularizer must be finite and >= 0"));
    }
    Ok(match kind {
        PrecondKind::Identity => Box::new(Identity),
        PrecondKind::RmsProp => Box::new(RmsProp::new(layout.dim(), config.epsilon)),
        PrecondKind::FullFisher => Box::new(FullFisher::new(layout.dim(), config.epsilon, config.fisher_update)?),
        PrecondKind::DiagonalOp => Box::new(DiagonalOp::new(layout.dim(), config.epsilon, config.fisher_update)),
        PrecondKind::QuasiDiagonalOp => Box::new(QuasiDiagonalOp::new(
            layout.clone(),
            config.epsilon,
            config.fisher_update,
        )),
    })
}

/// Per-example Fisher vectors `ṽ = ∂θ ℓ(ỹ | x)` for every example of the batch.
///
/// For the OP variant `ỹ = y` and the vectors are those of `data_pass` when it is given.
pub fn fisher_vectors(
    model: &dyn Model,
    theta: &ParamVector,
    batch: &Batch,
    variant: FisherVariant,
    data_pass: Option<&Backprop>,
    rng: &mut Rng,
) -> Result<PerExampleGradients> {
    match (variant, data_pass) {
        (FisherVariant::Op, Some(bp)) => Ok(bp.per_example.clone()),
        (FisherVariant::Op, None) => Ok(model.backprop(theta, batch)?.per_example),
        (FisherVariant::Mc, _) => {
            let synthetic = model.sample_targets(theta, &batch.inputs, rng)?;
            let b = Batch::new(batch.inputs.clone(), synthetic)?;
            Ok(model.backprop(theta, &b)?.per_example)
        }
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma <= 1.0 {
        Ok(())
    } else {
        Err(Error::contract(format!("decay rate must lie in (0, 1], got {gamma}")))
    }
}

fn require_fisher<'a>(obs: &Observation<'a>, kind: PrecondKind) -> Result<&'a PerExampleGradients> {
    obs.fisher
        .ok_or_else(|| Error::contract(format!("{} update needs per-example Fisher vectors", kind.label())))
}

/// Decay of the old state and per-example weights for a multi-example update.
fn example_weights(mode: FisherUpdate, count: usize, gamma: f64) -> (f64, Vec<f64>) {
    match mode {
        FisherUpdate::PerExample => {
            // sequential updates: example b is followed by count-1-b more decays
            let keep = 1.0 - gamma;
            let mut w = vec![0.0; count];
            let mut factor = gamma;
            for b in (0..count).rev() {
                w[b] = factor;
                factor *= keep;
            }
            (keep.powi(count as i32), w)
        }
        FisherUpdate::ExampleMean => (1.0 - gamma, vec![gamma / count as f64; count]),
        FisherUpdate::MinibatchMean => unreachable!("handled through the mean gradient"),
    }
}

fn diag_guard(value: f64, index: usize) -> Result<f64> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Numerical(format!(
            "preconditioner denominator {value} at coordinate {index}; use epsilon > 0"
        )))
    }
}

fn fill_noise(rng: &mut Rng, out: &mut ParamVector) {
    fill_standard_normal(rng, out.values_mut());
}

// ---------------------------------------------------------------------------

/// `C = I`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Identity;

impl Preconditioner for Identity {
    fn kind(&self) -> PrecondKind {
        PrecondKind::Identity
    }

    fn update(&mut self, _obs: &Observation<'_>, _gamma: f64) -> Result<()> {
        Ok(())
    }

    fn apply(&mut self, _g: &mut ParamVector) -> Result<()> {
        Ok(())
    }

    fn sample_noise(&mut self, rng: &mut Rng, out: &mut ParamVector) -> Result<()> {
        fill_noise(rng, out);
        Ok(())
    }
}

// ---------------------------------------------------------------------------

/// Per-coordinate moving average of squared values, initialized to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagState {
    pub d: Vec<f64>,
}

impl DiagState {
    pub fn new(dim: usize) -> Self {
        Self { d: vec![1.0; dim] }
    }

    /// `D_ii ← (1−γ) D_ii + γ g_i²`.
    pub fn rmsprop_update(&mut self, g: &[f64], gamma: f64) -> Result<()> {
        check_gamma(gamma)?;
        if g.len() != self.d.len() {
            return Err(Error::LayoutMismatch("gradient length differs from state".into()));
        }
        for (d, &gi) in self.d.iter_mut().zip(g) {
            *d = (1.0 - gamma) * *d + gamma * gi * gi;
        }
        Ok(())
    }

    /// Diagonal of the Fisher moving average fed with per-example vectors.
    pub fn fisher_update(&mut self, samples: &PerExampleGradients, mode: FisherUpdate, gamma: f64) -> Result<()> {
        check_gamma(gamma)?;
        if samples.layout().dim() != self.d.len() {
            return Err(Error::LayoutMismatch("Fisher vectors do not match state".into()));
        }
        if samples.is_empty() {
            return Ok(());
        }
        if mode == FisherUpdate::MinibatchMean {
            let mean = samples.weighted_sum(&vec![1.0 / samples.len() as f64; samples.len()]);
            return self.rmsprop_update(mean.values(), gamma);
        }
        let (decay, w) = example_weights(mode, samples.len(), gamma);
        for d in &mut self.d {
            *d *= decay;
        }
        samples.accumulate_weighted_squares(&w, &mut self.d);
        Ok(())
    }

    /// `g_i ← (D_ii + ε)^{power} g_i`.
    fn scale(&self, g: &mut [f64], eps: f64, power: f64) -> Result<()> {
        for (i, (gi, &d)) in g.iter_mut().zip(&self.d).enumerate() {
            *gi *= diag_guard(d + eps, i)?.powf(power);
        }
        Ok(())
    }
}

/// RMSProp preconditioner `C = (D + ε)^{-1/2}` with `D` tracking squared minibatch gradients.
#[derive(Debug, Clone)]
pub struct RmsProp {
    pub state: DiagState,
    pub epsilon: f64,
}

impl RmsProp {
    pub fn new(dim: usize, epsilon: f64) -> Self {
        Self {
            state: DiagState::new(dim),
            epsilon,
        }
    }
}

impl Preconditioner for RmsProp {
    fn kind(&self) -> PrecondKind {
        PrecondKind::RmsProp
    }

    fn update(&mut self, obs: &Observation<'_>, gamma: f64) -> Result<()> {
        self.state.rmsprop_update(obs.gradient.values(), gamma)
    }

    fn apply(&mut self, g: &mut ParamVector) -> Result<()> {
        self.state.scale(g.values_mut(), self.epsilon, -0.5)
    }

    fn sample_noise(&mut self, rng: &mut Rng, out: &mut ParamVector) -> Result<()> {
        fill_noise(rng, out);
        self.state.scale(out.values_mut(), self.epsilon, -0.25)
    }
}

/// Diagonal outer-product preconditioner `C = (diag J + ε)^{-1}`.
#[derive(Debug, Clone)]
pub struct DiagonalOp {
    pub state: DiagState,
    pub epsilon: f64,
    pub mode: FisherUpdate,
}

impl DiagonalOp {
    pub fn new(dim: usize, epsilon: f64, mode: FisherUpdate) -> Self {
        Self {
            state: DiagState::new(dim),
            epsilon,
            mode,
        }
    }
}

impl Preconditioner for DiagonalOp {
    fn kind(&self) -> PrecondKind {
        PrecondKind::DiagonalOp
    }

    fn update(&mut self, obs: &Observation<'_>, gamma: f64) -> Result<()> {
        let samples = require_fisher(obs, self.kind())?;
        self.state.fisher_update(samples, self.mode, gamma)
    }

    fn apply(&mut self, g: &mut ParamVector) -> Result<()> {
        self.state.scale(g.values_mut(), self.epsilon, -1.0)
    }

    fn sample_noise(&mut self, rng: &mut Rng, out: &mut ParamVector) -> Result<()> {
        fill_noise(rng, out);
        self.state.scale(out.values_mut(), self.epsilon, -0.5)
    }
}

// ---------------------------------------------------------------------------

/// Dense Fisher moving average, initialized to the identity.
#[derive(Debug, Clone)]
pub struct FisherState {
    pub j: DMatrix<f64>,
    pub epsilon: f64,
}

struct FisherFactors {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    inv_sqrt: DMatrix<f64>,
}

impl FisherState {
    pub fn new(dim: usize, epsilon: f64) -> Self {
        Self {
            j: DMatrix::identity(dim, dim),
            epsilon,
        }
    }

    /// `J ← (1−γ) J + γ ṽ ṽᵀ`.
    pub fn update(&mut self, v: &[f64], gamma: f64) -> Result<()> {
        check_gamma(gamma)?;
        if v.len() != self.j.nrows() {
            return Err(Error::LayoutMismatch("Fisher vector length differs from J".into()));
        }
        let v = DVector::from_column_slice(v);
        self.j.ger(gamma, &v, &v, 1.0 - gamma);
        Ok(())
    }

    /// Moving-average update from a batch of per-example vectors.
    pub fn update_from(&mut self, samples: &PerExampleGradients, mode: FisherUpdate, gamma: f64) -> Result<()> {
        check_gamma(gamma)?;
        if samples.layout().dim() != self.j.nrows() {
            return Err(Error::LayoutMismatch("Fisher vectors do not match J".into()));
        }
        if samples.is_empty() {
            return Ok(());
        }
        match mode {
            FisherUpdate::PerExample => {
                for b in 0..samples.len() {
                    self.update(samples.example_gradient(b).values(), gamma)?;
                }
            }
            FisherUpdate::MinibatchMean => {
                let mean = samples.weighted_sum(&vec![1.0 / samples.len() as f64; samples.len()]);
                self.update(mean.values(), gamma)?;
            }
            FisherUpdate::ExampleMean => {
                let dense = samples.to_dense();
                let v = DMatrix::from_row_slice(dense.rows(), dense.cols(), dense.data());
                let w = gamma / samples.len() as f64;
                self.j.gemm_tr(w, &v, &v, 1.0 - gamma);
                // keep J exactly symmetric
                let n = self.j.nrows();
                for c in 0..n {
                    for r in c + 1..n {
                        let avg = 0.5 * (self.j[(r, c)] + self.j[(c, r)]);
                        self.j[(r, c)] = avg;
                        self.j[(c, r)] = avg;
                    }
                }
            }
        }
        Ok(())
    }

    fn regularized(&self) -> DMatrix<f64> {
        let n = self.j.nrows();
        &self.j + DMatrix::identity(n, n) * self.epsilon
    }

    fn factors(&self) -> Result<FisherFactors> {
        let reg = self.regularized();
        let chol = nalgebra::Cholesky::new(reg.clone()).ok_or_else(|| {
            let min_diag = reg.diagonal().min();
            Error::Numerical(format!(
                "J + εI is not positive definite (ε = {}, min diagonal {min_diag:e})",
                self.epsilon
            ))
        })?;
        let eig = nalgebra::SymmetricEigen::new(reg);
        if let Some(bad) = eig.eigenvalues.iter().find(|&&l| l <= 0.0) {
            return Err(Error::Numerical(format!("J + εI has non-positive eigenvalue {bad:e}")));
        }
        let scaled = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
        let inv_sqrt = &eig.eigenvectors * scaled * eig.eigenvectors.transpose();
        Ok(FisherFactors { chol, inv_sqrt })
    }

    /// `(J + εI)^{-1} v`.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .factors()?
            .chol
            .solve(&DVector::from_column_slice(v))
            .as_slice()
            .to_vec())
    }

    /// One draw of `(J + εI)^{-1/2} N(0, I)`, using the symmetric square root.
    pub fn noise(&self, rng: &mut Rng) -> Result<Vec<f64>> {
        let f = self.factors()?;
        let mut z = vec![0.0; self.j.nrows()];
        fill_standard_normal(rng, &mut z);
        Ok((&f.inv_sqrt * DVector::from_vec(z)).as_slice().to_vec())
    }
}

/// Full Fisher preconditioner `C = (J + εI)^{-1}`; only for small models.
pub struct FullFisher {
    pub state: FisherState,
    pub mode: FisherUpdate,
    cache: Option<FisherFactors>,
}

impl FullFisher {
    pub fn new(dim: usize, epsilon: f64, mode: FisherUpdate) -> Result<Self> {
        if dim > MAX_FULL_FISHER_DIM {
            return Err(Error::config(
                "preconditioner",
                format!("full Fisher needs a dense {dim}×{dim} matrix; limit is {MAX_FULL_FISHER_DIM}"),
            ));
        }
        Ok(Self {
            state: FisherState::new(dim, epsilon),
            mode,
            cache: None,
        })
    }

    fn factors(&mut self) -> Result<&FisherFactors> {
        if self.cache.is_none() {
            self.cache = Some(self.state.factors()?);
        }
        Ok(self.cache.as_ref().unwrap())
    }
}

impl Preconditioner for FullFisher {
    fn kind(&self) -> PrecondKind {
        PrecondKind::FullFisher
    }

    fn update(&mut self, obs: &Observation<'_>, gamma: f64) -> Result<()> {
        let samples = require_fisher(obs, self.kind())?;
        self.cache = None;
        self.state.update_from(samples, self.mode, gamma)
    }

    fn apply(&mut self, g: &mut ParamVector) -> Result<()> {
        let x = self.factors()?.chol.solve(&DVector::from_column_slice(g.values()));
        g.values_mut().copy_from_slice(x.as_slice());
        Ok(())
    }

    fn sample_noise(&mut self, rng: &mut Rng, out: &mut ParamVector) -> Result<()> {
        fill_noise(rng, out);
        let x = &self.factors()?.inv_sqrt * DVector::from_column_slice(out.values());
        out.values_mut().copy_from_slice(x.as_slice());
        Ok(())
    }
}

// ---------------------------------------------------------------------------

/// Sparse factor `A` of one quasi-diagonal block: nonzeros on the diagonal and first row.
#[derive(Debug, Clone, PartialEq)]
pub struct QdBlockFactor {
    /// `A_ii`; `diag[0]` is `A_00`.
    pub diag: Vec<f64>,
    /// `A_0i`; `first_row[0]` repeats `A_00`.
    pub first_row: Vec<f64>,
    /// Number of radicands that had to be clamped.
    pub clamped: usize,
}

impl QdBlockFactor {
    /// Dense `A`, for checks on small blocks.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.diag.len();
        let mut a = DMatrix::from_diagonal(&DVector::from_column_slice(&self.diag));
        for i in 1..n {
            a[(0, i)] = self.first_row[i];
        }
        a
    }
}

/// Quasi-diagonal Cholesky decomposition of one block.
///
/// Given the diagonal and first row of a symmetric positive matrix `J`, returns `A` whose
/// nonzeros lie on the diagonal and first row such that `(Aᵀ)⁻¹ A⁻¹` has the same diagonal
/// and first row as `J + εI`. A radicand `J_ii − (A_00 J_0i)² + ε` that is not positive is
/// clamped to `ε` (or `1e-12` when `ε = 0`) and counted in [`QdBlockFactor::clamped`].
pub fn qd_cholesky(diag: &[f64], first_row: &[f64], epsilon: f64) -> Result<QdBlockFactor> {
    let n = diag.len();
    if n == 0 || first_row.len() != n {
        return Err(Error::contract(
            "quasi-diagonal block needs matching, non-empty diag and first row",
        ));
    }
    let lead = diag[0] + epsilon;
    if !(lead > 0.0 && lead.is_finite()) {
        return Err(Error::Numerical(format!("J_00 + ε = {lead} is not positive")));
    }
    let a00 = 1.0 / lead.sqrt();
    let floor = if epsilon > 0.0 { epsilon } else { 1e-12 };
    let mut a_diag = vec![0.0; n];
    let mut a_row = vec![0.0; n];
    a_diag[0] = a00;
    a_row[0] = a00;
    let mut clamped = 0;
    for i in 1..n {
        let cross = a00 * first_row[i];
        let mut radicand = diag[i] - cross * cross + epsilon;
        if radicand.is_nan() {
            return Err(Error::Numerical(format!("non-finite radicand at local index {i}")));
        }
        if radicand <= 0.0 {
            radicand = floor;
            clamped += 1;
        }
        let aii = 1.0 / radicand.sqrt();
        a_diag[i] = aii;
        a_row[i] = -a00 * a00 * aii * first_row[i];
    }
    Ok(QdBlockFactor {
        diag: a_diag,
        first_row: a_row,
        clamped,
    })
}

/// Per-block diagonal and first row of the Fisher moving average, initialized to `J = I`.
#[derive(Debug, Clone, PartialEq)]
pub struct QdState {
    pub layout: Arc<BlockLayout>,
    pub diag: Vec<f64>,
    /// First row of each block's Fisher sub-matrix, stored at the block's coordinates.
    pub first_row: Vec<f64>,
    pub epsilon: f64,
}

impl QdState {
    pub fn new(layout: Arc<BlockLayout>, epsilon: f64) -> Self {
        let dim = layout.dim();
        let mut first_row = vec![0.0; dim];
        for b in layout.blocks() {
            first_row[b.offset] = 1.0;
        }
        Self {
            layout,
            diag: vec![1.0; dim],
            first_row,
            epsilon,
        }
    }

    /// Rank-one update restricted to the quasi-diagonal pattern:
    /// `diag ← (1−γ) diag + γ u∘u`, `row0 ← (1−γ) row0 + γ u_0 u` per block `u`.
    pub fn update(&mut self, v: &[f64], gamma: f64) -> Result<()> {
        check_gamma(gamma)?;
        if v.len() != self.diag.len() {
            return Err(Error::LayoutMismatch("Fisher vector length differs from state".into()));
        }
        let keep = 1.0 - gamma;
        for blk in self.layout.blocks() {
            let u = &v[blk.range()];
            let u0 = u[0];
            for (k, &uk) in blk.range().zip(u) {
                self.diag[k] = keep * self.diag[k] + gamma * uk * uk;
                self.first_row[k] = keep * self.first_row[k] + gamma * u0 * uk;
            }
        }
        Ok(())
    }

    pub fn update_from(&mut self, samples: &PerExampleGradients, mode: FisherUpdate, gamma: f64) -> Result<()> {
        check_gamma(gamma)?;
        if **samples.layout() != *self.layout {
            return Err(Error::LayoutMismatch(
                "Fisher vectors do not match the block layout".into(),
            ));
        }
        if samples.is_empty() {
            return Ok(());
        }
        if mode == FisherUpdate::MinibatchMean {
            let mean = samples.weighted_sum(&vec![1.0 / samples.len() as f64; samples.len()]);
            return self.update(mean.values(), gamma);
        }
        let (decay, w) = example_weights(mode, samples.len(), gamma);
        for (d, r) in self.diag.iter_mut().zip(&mut self.first_row) {
            *d *= decay;
            *r *= decay;
        }
        samples.accumulate_weighted_squares(&w, &mut self.diag);
        samples.accumulate_weighted_first_rows(&w, &mut self.first_row);
        // both track J_00 of each block; keep them bitwise equal
        for blk in self.layout.blocks() {
            self.first_row[blk.offset] = self.diag[blk.offset];
        }
        Ok(())
    }

    /// Factorizes every block.
    pub fn factorize(&self) -> Result<QdFactor> {
        let dim = self.diag.len();
        let mut diag = vec![0.0; dim];
        let mut first_row = vec![0.0; dim];
        let mut clamped = 0;
        for (b, blk) in self.layout.blocks().iter().enumerate() {
            let f = qd_cholesky(&self.diag[blk.range()], &self.first_row[blk.range()], self.epsilon)
                .map_err(|e| Error::Numerical(format!("block {b}: {e}")))?;
            diag[blk.range()].copy_from_slice(&f.diag);
            first_row[blk.range()].copy_from_slice(&f.first_row);
            clamped += f.clamped;
        }
        Ok(QdFactor {
            layout: self.layout.clone(),
            diag,
            first_row,
            clamped,
        })
    }

    /// Serializes the state with the checkpoint header conventions, followed by
    /// `ε`, the diagonal, and the first rows.
    pub fn write<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = Writer::new(out);
        write_layout_header(&mut w, QD_STATE_MAGIC, &self.layout)?;
        w.f64(self.epsilon)?;
        w.f64s(&self.diag)?;
        w.f64s(&self.first_row)
    }

    pub fn read<R: std::io::Read>(input: R) -> Result<Self> {
        let mut r = Reader::new(input);
        let layout = read_layout_header(&mut r, QD_STATE_MAGIC)?
            .ok_or_else(|| Error::format(0, "empty quasi-diagonal state file"))?;
        let epsilon = r.f64()?;
        let diag = r.f64s(layout.dim())?;
        let first_row = r.f64s(layout.dim())?;
        Ok(Self {
            layout: Arc::new(layout),
            diag,
            first_row,
            epsilon,
        })
    }
}

/// Blockwise sparse factor `A` with `C = A Aᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct QdFactor {
    layout: Arc<BlockLayout>,
    diag: Vec<f64>,
    first_row: Vec<f64>,
    /// Total clamped radicands across blocks.
    pub clamped: usize,
}

impl QdFactor {
    /// `g ← A Aᵀ g`, O(block size) per block.
    pub fn apply(&self, g: &mut [f64]) {
        for blk in self.layout.blocks() {
            let a = &self.diag[blk.range()];
            let r = &self.first_row[blk.range()];
            let x = &mut g[blk.range()];
            // h = Aᵀ x: h_0 = A00 x_0, h_i = A0i x_0 + Aii x_i
            let x0 = x[0];
            let mut head = a[0] * a[0] * x0;
            for i in 1..x.len() {
                let h = r[i] * x0 + a[i] * x[i];
                head += r[i] * h;
                x[i] = a[i] * h;
            }
            x[0] = head;
        }
    }

    /// `z ← A z`.
    pub fn transform(&self, z: &mut [f64]) {
        for blk in self.layout.blocks() {
            let a = &self.diag[blk.range()];
            let r = &self.first_row[blk.range()];
            let x = &mut z[blk.range()];
            let mut head = a[0] * x[0];
            for i in 1..x.len() {
                head += r[i] * x[i];
                x[i] *= a[i];
            }
            x[0] = head;
        }
    }

    pub fn block(&self, b: usize) -> Result<QdBlockFactor> {
        let blk = self.layout.block(b)?;
        Ok(QdBlockFactor {
            diag: self.diag[blk.range()].to_vec(),
            first_row: self.first_row[blk.range()].to_vec(),
            clamped: 0,
        })
    }
}

/// Quasi-diagonal outer-product preconditioner.
///
/// The factor is recomputed lazily, at most once between two updates.
pub struct QuasiDiagonalOp {
    pub state: QdState,
    pub mode: FisherUpdate,
    factor: Option<QdFactor>,
    clamp_events: usize,
}

impl QuasiDiagonalOp {
    pub fn new(layout: Arc<BlockLayout>, epsilon: f64, mode: FisherUpdate) -> Self {
        Self {
            state: QdState::new(layout, epsilon),
            mode,
            factor: None,
            clamp_events: 0,
        }
    }

    pub fn from_state(state: QdState, mode: FisherUpdate) -> Self {
        Self {
            state,
            mode,
            factor: None,
            clamp_events: 0,
        }
    }

    pub fn factor(&mut self) -> Result<&QdFactor> {
        if self.factor.is_none() {
            let f = self.state.factorize()?;
            self.clamp_events += f.clamped;
            self.factor = Some(f);
        }
        Ok(self.factor.as_ref().unwrap())
    }
}

impl Preconditioner for QuasiDiagonalOp {
    fn kind(&self) -> PrecondKind {
        PrecondKind::QuasiDiagonalOp
    }

    /// Radicand clamps seen over every factorization so far.
    fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    fn update(&mut self, obs: &Observation<'_>, gamma: f64) -> Result<()> {
        let samples = require_fisher(obs, self.kind())?;
        self.factor = None;
        self.state.update_from(samples, self.mode, gamma)
    }

    fn apply(&mut self, g: &mut ParamVector) -> Result<()> {
        self.factor()?.apply(g.values_mut());
        Ok(())
    }

    fn sample_noise(&mut self, rng: &mut Rng, out: &mut ParamVector) -> Result<()> {
        fill_noise(rng, out);
        self.factor()?.transform(out.values_mut());
        Ok(())
    }
}
