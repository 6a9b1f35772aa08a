//! Datasets: IDX ingestion, splits, minibatching, and conjugate regression problems.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use flate2::read::GzDecoder;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::linalg::{gemm, Matrix};
use crate::model::{Backprop, Batch, LayerFactors, Model, OutputHead, PerExampleGradients, PredictiveOutput, Targets};
use crate::params::{BlockLayout, ParamVector};
use crate::prior::Prior;
use crate::rng::{derive_seed, fill_standard_normal, seeded, standard_normal};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
/// Magic bytes of a serialized conjugate regression problem.
pub const CONJUGATE_MAGIC: &[u8; 4] = b"LBCP";

/// Immutable inputs (one row per example) and their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    inputs: Matrix,
    targets: Targets,
}

impl LabeledDataset {
    pub fn new(inputs: Matrix, targets: Targets) -> Result<Self> {
        if inputs.rows() != targets.len() {
            return Err(Error::contract(format!(
                "{} input rows but {} targets",
                inputs.rows(),
                targets.len()
            )));
        }
        if let Targets::Real(t) = &targets {
            if t.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::contract("non-finite regression target"));
            }
        }
        if inputs.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("non-finite input value"));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self) -> usize {
        self.inputs.cols()
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    /// Number of classes implied by the labels (largest label + 1), or `None` for real targets.
    pub fn num_classes(&self) -> Option<usize> {
        match &self.targets {
            Targets::Labels(l) => Some(l.iter().max().map_or(0, |&m| m + 1)),
            Targets::Real(_) => None,
        }
    }

    /// Rows `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let cols = self.inputs.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(self.inputs.row(i));
        }
        let targets = match &self.targets {
            Targets::Labels(l) => Targets::Labels(indices.iter().map(|&i| l[i]).collect()),
            Targets::Real(t) => {
                let mut d = Vec::with_capacity(indices.len() * t.cols());
                for &i in indices {
                    d.extend_from_slice(t.row(i));
                }
                Targets::Real(Matrix::from_vec(indices.len(), t.cols(), d))
            }
        };
        Self {
            inputs: Matrix::from_vec(indices.len(), cols, data),
            targets,
        }
    }

    /// The first `n` examples.
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let s = self.subset(indices);
        Batch {
            inputs: s.inputs,
            targets: s.targets,
        }
    }

    pub fn to_batch(&self) -> Batch {
        Batch {
            inputs: self.inputs.clone(),
            targets: self.targets.clone(),
        }
    }

    /// Shuffled split into `(train, validation)` with `round(fraction · len)` validation
    /// examples, clamped so both parts are non-empty.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::config("validation_fraction", "must lie in (0, 1)"));
        }
        let n_val = ((fraction * self.len() as f64).round() as usize).max(1);
        self.split_count(n_val, seed)
    }

    /// Shuffled split with exactly `n_val` validation examples.
    pub fn split_count(&self, n_val: usize, seed: u64) -> Result<(Self, Self)> {
        if self.len() < 2 || n_val == 0 || n_val >= self.len() {
            return Err(Error::contract(format!(
                "cannot take {n_val} validation examples from {}",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut seeded(seed));
        let (val, train) = idx.split_at(n_val);
        Ok((self.subset(train), self.subset(val)))
    }

    /// One epoch of shuffled index batches; the last batch may be short.
    pub fn minibatch_indices(&self, size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
        if size == 0 {
            return Err(Error::config("minibatch", "must be >= 1"));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut seeded(epoch_seed));
        Ok(idx.chunks(size).map(<[usize]>::to_vec).collect())
    }

    pub fn minibatches(&self, size: usize, epoch_seed: u64) -> Result<Vec<Batch>> {
        Ok(self
            .minibatch_indices(size, epoch_seed)?
            .iter()
            .map(|b| self.batch(b))
            .collect())
    }
}

/// Endless minibatch stream: reshuffles every epoch with a seed derived from `(seed, epoch)`.
#[derive(Debug)]
pub struct MinibatchStream<'a> {
    data: &'a LabeledDataset,
    size: usize,
    seed: u64,
    epoch: u64,
    pending: std::vec::IntoIter<Vec<usize>>,
}

impl<'a> MinibatchStream<'a> {
    pub fn new(data: &'a LabeledDataset, size: usize, seed: u64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::contract("cannot draw minibatches from an empty dataset"));
        }
        if size == 0 {
            return Err(Error::config("minibatch", "must be >= 1"));
        }
        Ok(Self {
            data,
            size,
            seed,
            epoch: 0,
            pending: Vec::new().into_iter(),
        })
    }

    /// Next minibatch, starting a new shuffled epoch when the current one is used up.
    pub fn next_batch(&mut self) -> Batch {
        loop {
            if let Some(idx) = self.pending.next() {
                return self.data.batch(&idx);
            }
            let epoch_seed = derive_seed(self.seed, self.epoch);
            self.epoch += 1;
            self.pending = self
                .data
                .minibatch_indices(self.size, epoch_seed)
                .expect("size checked at construction")
                .into_iter();
        }
    }
}

// ---------------------------------------------------------------------------
// IDX files

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(offset as u64, "truncated IDX header"))
}

fn check_magic(bytes: &[u8], expected: u32, what: &str) -> Result<()> {
    let magic = be_u32(bytes, 0)?;
    if magic != expected {
        return Err(Error::format(
            0,
            format!("{what} file has magic {magic:#010x}, expected {expected:#010x}"),
        ));
    }
    Ok(())
}

/// Parses an (uncompressed) IDX image file into `count × (rows·cols)` inputs in `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Matrix> {
    check_magic(bytes, IDX_IMAGES_MAGIC, "image")?;
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let width = rows * cols;
    let need = 16 + count * width;
    if bytes.len() < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("image file truncated: {count} images of {rows}×{cols} need {need} bytes"),
        ));
    }
    let data = bytes[16..need].iter().map(|&p| f64::from(p) / 255.0).collect();
    Ok(Matrix::from_vec(count, width, data))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    check_magic(bytes, IDX_LABELS_MAGIC, "label")?;
    let count = be_u32(bytes, 4)? as usize;
    let need = 8 + count;
    if bytes.len() < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("label file truncated: {count} labels need {need} bytes"),
        ));
    }
    Ok(bytes[8..need].iter().map(|&l| usize::from(l)).collect())
}

/// Loads an IDX image/label pair; gzip-compressed files are detected by their magic bytes.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<LabeledDataset> {
    let inputs = parse_idx_images(&read_all(images.as_ref())?)?;
    let labels = parse_idx_labels(&read_all(labels.as_ref())?)?;
    if inputs.rows() != labels.len() {
        return Err(Error::format(
            4,
            format!("{} images but {} labels", inputs.rows(), labels.len()),
        ));
    }
    LabeledDataset::new(inputs, Targets::Labels(labels))
}

/// Encodes a labelled dataset as an uncompressed IDX pair with square images.
///
/// Pixels are stored as `round(255 · x)`, so inputs that came from IDX files round-trip exactly.
pub fn encode_idx(data: &LabeledDataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let Targets::Labels(labels) = data.targets() else {
        return Err(Error::contract("IDX export needs class labels"));
    };
    let width = data.features();
    let side = (width as f64).sqrt().round() as usize;
    let (rows, cols) = if side * side == width { (side, side) } else { (1, width) };
    let mut img = Vec::with_capacity(16 + data.len() * width);
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for v in [data.len(), rows, cols] {
        img.extend_from_slice(&(v as u32).to_be_bytes());
    }
    for &x in data.inputs().data() {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::contract(format!("input {x} outside [0, 1]")));
        }
        img.push((x * 255.0).round() as u8);
    }
    let mut lbl = Vec::with_capacity(8 + labels.len());
    lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        lbl.push(u8::try_from(l).map_err(|_| Error::contract(format!("label {l} exceeds 255")))?);
    }
    Ok((img, lbl))
}

pub fn write_idx(data: &LabeledDataset, images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
    let (img, lbl) = encode_idx(data)?;
    std::fs::write(images, img)?;
    std::fs::write(labels, lbl)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Conjugate regression

/// Linear-Gaussian regression `y = Xθ + σ·noise` with prior `θ ~ N(0, Σ0)` and its exact posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct ConjugateRegressionProblem {
    pub x: Matrix,
    pub y: Vec<f64>,
    pub noise_variance: f64,
    pub prior_cov: DMatrix<f64>,
    pub post_mean: DVector<f64>,
    pub post_cov: DMatrix<f64>,
}

fn spd_inverse(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    nalgebra::Cholesky::new(m)
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Numerical(format!("{what} is not positive definite")))
}

impl ConjugateRegressionProblem {
    /// Computes the analytic posterior for the given data.
    pub fn from_data(x: Matrix, y: Vec<f64>, noise_variance: f64, prior_cov: DMatrix<f64>) -> Result<Self> {
        let (n, d) = (x.rows(), x.cols());
        if n == 0 || d == 0 || y.len() != n {
            return Err(Error::contract(
                "conjugate problem needs n, d >= 1 and one target per row",
            ));
        }
        if !(noise_variance > 0.0 && noise_variance.is_finite()) {
            return Err(Error::contract("noise variance must be positive"));
        }
        if prior_cov.shape() != (d, d) {
            return Err(Error::contract("prior covariance must be d×d"));
        }
        let xm = DMatrix::from_row_slice(n, d, x.data());
        let precision = spd_inverse(prior_cov.clone(), "prior covariance")? + xm.transpose() * &xm / noise_variance;
        let post_cov = spd_inverse(precision, "posterior precision")?;
        let post_mean = &post_cov * (xm.transpose() * DVector::from_column_slice(&y)) / noise_variance;
        Ok(Self {
            x,
            y,
            noise_variance,
            prior_cov,
            post_mean,
            post_cov,
        })
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn d(&self) -> usize {
        self.x.cols()
    }

    pub fn dataset(&self) -> LabeledDataset {
        LabeledDataset {
            inputs: self.x.clone(),
            targets: Targets::Real(Matrix::from_vec(self.n(), 1, self.y.clone())),
        }
    }

    /// The regression model with the problem's true noise level.
    pub fn model(&self) -> LinearGaussianModel {
        LinearGaussianModel::new(self.d(), self.noise_variance.sqrt())
    }

    /// The prior as a sampler prior; requires a diagonal `Σ0`.
    pub fn prior(&self) -> Result<Prior> {
        let d = self.d();
        for i in 0..d {
            for j in 0..d {
                if i != j && self.prior_cov[(i, j)] != 0.0 {
                    return Err(Error::contract(
                        "sampler priors are diagonal; Σ0 has off-diagonal terms",
                    ));
                }
            }
        }
        Prior::gaussian_with_mean(vec![0.0; d], self.prior_cov.diagonal().as_slice().to_vec())
    }

    /// `Σ_post (Σ0⁻¹ + XᵀX/σ²) − I`, which should vanish.
    pub fn self_check_residual(&self) -> Result<f64> {
        let xm = DMatrix::from_row_slice(self.n(), self.d(), self.x.data());
        let precision =
            spd_inverse(self.prior_cov.clone(), "prior covariance")? + xm.transpose() * &xm / self.noise_variance;
        let r = &self.post_cov * precision - DMatrix::identity(self.d(), self.d());
        Ok(r.amax())
    }

    /// Serializes as magic, version, `n`, `d`, `σ²`, then `X` (row-major), `y`, `Σ0`,
    /// `μ_post`, `Σ_post` as little-endian doubles.
    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let mut w = Writer::new(out);
        w.bytes(CONJUGATE_MAGIC)?;
        w.u32(1)?;
        w.u64(self.n() as u64)?;
        w.u64(self.d() as u64)?;
        w.f64(self.noise_variance)?;
        w.f64s(self.x.data())?;
        w.f64s(&self.y)?;
        w.f64s(self.prior_cov.transpose().as_slice())?;
        w.f64s(self.post_mean.as_slice())?;
        w.f64s(self.post_cov.transpose().as_slice())
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut r = Reader::new(input);
        let mut magic = [0u8; 4];
        r.exact(&mut magic)?;
        if &magic != CONJUGATE_MAGIC {
            return Err(Error::format(0, "not a conjugate problem file"));
        }
        let version = r.u32()?;
        if version != 1 {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let n = r.count(1 << 32)?;
        let d = r.count(1 << 16)?;
        let noise_variance = r.f64()?;
        let x = Matrix::from_vec(n, d, r.f64s(n * d)?);
        let y = r.f64s(n)?;
        let prior_cov = DMatrix::from_row_slice(d, d, &r.f64s(d * d)?);
        let post_mean = DVector::from_vec(r.f64s(d)?);
        let post_cov = DMatrix::from_row_slice(d, d, &r.f64s(d * d)?);
        Ok(Self {
            x,
            y,
            noise_variance,
            prior_cov,
            post_mean,
            post_cov,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

/// Draws `X` with standard normal entries, `θ_true ~ N(0, Σ0)`, and `y = Xθ_true + σ·noise`.
pub fn make_conjugate_problem(
    n: usize,
    d: usize,
    noise_variance: f64,
    prior_cov: DMatrix<f64>,
    seed: u64,
) -> Result<ConjugateRegressionProblem> {
    if n == 0 || d == 0 {
        return Err(Error::contract("conjugate problem needs n, d >= 1"));
    }
    if prior_cov.shape() != (d, d) {
        return Err(Error::contract("prior covariance must be d×d"));
    }
    let chol = nalgebra::Cholesky::new(prior_cov.clone())
        .ok_or_else(|| Error::Numerical("prior covariance is not positive definite".into()))?;
    let mut rng = seeded(seed);
    let mut x = vec![0.0; n * d];
    fill_standard_normal(&mut rng, &mut x);
    let mut z = vec![0.0; d];
    fill_standard_normal(&mut rng, &mut z);
    let theta = chol.l() * DVector::from_vec(z);
    let sigma = noise_variance.sqrt();
    let y = (0..n)
        .map(|i| {
            let mean: f64 = (0..d).map(|j| x[i * d + j] * theta[j]).sum();
            mean + sigma * standard_normal(&mut rng)
        })
        .collect();
    ConjugateRegressionProblem::from_data(Matrix::from_vec(n, d, x), y, noise_variance, prior_cov)
}

/// `ŷ = xᵀθ` with a Gaussian head; the parameter vector is a single block without bias.
#[derive(Debug, Clone)]
pub struct LinearGaussianModel {
    layout: Arc<BlockLayout>,
    sigma: f64,
}

impl LinearGaussianModel {
    pub fn new(d: usize, sigma: f64) -> Self {
        Self {
            layout: Arc::new(BlockLayout::single(d).expect("d >= 1")),
            sigma,
        }
    }

    fn check(&self, theta: &ParamVector, inputs: &Matrix) -> Result<()> {
        if **theta.layout() != *self.layout {
            return Err(Error::LayoutMismatch(
                "parameters do not match the regression model".into(),
            ));
        }
        if inputs.cols() != self.layout.dim() {
            return Err(Error::contract(format!(
                "inputs have {} columns, model expects {}",
                inputs.cols(),
                self.layout.dim()
            )));
        }
        Ok(())
    }
}

impl Model for LinearGaussianModel {
    fn layout(&self) -> &Arc<BlockLayout> {
        &self.layout
    }

    fn head(&self) -> OutputHead {
        OutputHead::Gaussian { sigma: self.sigma }
    }

    fn input_width(&self) -> usize {
        self.layout.dim()
    }

    fn predict(&self, theta: &ParamVector, inputs: &Matrix) -> Result<PredictiveOutput> {
        self.check(theta, inputs)?;
        let mut mean = Matrix::zeros(inputs.rows(), 1);
        let d = self.layout.dim();
        gemm(
            1.0,
            inputs.view(),
            crate::linalg::MatRef::row_major(theta.values(), d, 1),
            0.0,
            mean.view_mut(),
        );
        Ok(PredictiveOutput::Gaussian {
            mean,
            sigma: self.sigma,
        })
    }

    fn backprop(&self, theta: &ParamVector, batch: &Batch) -> Result<Backprop> {
        if batch.is_empty() {
            return Err(Error::contract("empty minibatch"));
        }
        let out = self.predict(theta, &batch.inputs)?;
        let mean_loss = out.mean_log_loss(&batch.targets)?;
        let deltas = out.output_deltas(&batch.targets)?;
        let mut gradient = ParamVector::zeros(self.layout.clone());
        let d = self.layout.dim();
        gemm(
            1.0 / batch.len() as f64,
            deltas.view().t(),
            batch.inputs.view(),
            0.0,
            crate::linalg::MatMut::row_major(gradient.values_mut(), 1, d),
        );
        let per_example = PerExampleGradients::new(
            self.layout.clone(),
            vec![LayerFactors {
                offset: 0,
                inputs: batch.inputs.clone(),
                deltas,
            }],
        )?;
        Ok(Backprop {
            mean_loss,
            gradient,
            per_example,
        })
    }
}
