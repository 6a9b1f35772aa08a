//! Experiment harness behind the CLI: single runs, the validation-selected grid,
//! the conjugate-regression oracle, and re-evaluation of saved checkpoints.
//!
//! Every output file except `timing.csv` is a pure function of the resolved
//! configuration.

use std::borrow::Cow;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{PriorKind, RunConfig};
use crate::data::{load_idx, make_conjugate_problem, ConjugateRegressionProblem, LabeledDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EnsembleAccumulator, EnsembleReport, MetricsReport};
use crate::model::Model;
use crate::net::Architecture;
use crate::params::ParamVector;
use crate::precond::{self, PrecondKind};
use crate::rng::{derive_seed, seeded};
use crate::sgld::{run_chain, write_trace_csv, Chain, ChainConfig, Sampler, SamplerConfig, Schedule, TraceRow};

/// Environment variable holding the number of grid cells run in parallel.
pub const WORKERS_ENV: &str = "LANGEVIN_WORKERS";

pub const SUMMARY_SCHEMA: &str = "langevin-summary/1";

/// Short lowercase name used in file names and CSV cells.
pub fn slug(kind: PrecondKind) -> &'static str {
    match kind {
        PrecondKind::Identity => "euclidean",
        PrecondKind::RmsProp => "rmsprop",
        PrecondKind::FullFisher => "fisher",
        PrecondKind::DiagonalOp => "dop",
        PrecondKind::QuasiDiagonalOp => "qdop",
    }
}

fn prior_slug(kind: PriorKind) -> &'static str {
    match kind {
        PriorKind::Gaussian => "gaussian",
        PriorKind::Nig => "nig",
        PriorKind::None => "none",
    }
}

// ---------------------------------------------------------------------------
// Data

/// Train / validation / test sets of a classification experiment.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: LabeledDataset,
    pub validation: LabeledDataset,
    pub test: LabeledDataset,
    pub classes: usize,
}

impl Splits {
    /// Splits one labelled dataset: `test_size` test examples, then `validation_size`
    /// validation examples from the rest, both drawn with seeds derived from `split_seed`.
    pub fn carve(data: &LabeledDataset, test_size: usize, validation_size: usize, split_seed: u64) -> Result<Self> {
        let (rest, test) = data.split_count(test_size, derive_seed(split_seed, 0))?;
        Self::with_test(&rest, test, validation_size, split_seed)
    }

    fn with_test(rest: &LabeledDataset, test: LabeledDataset, validation_size: usize, split_seed: u64) -> Result<Self> {
        let (train, validation) = rest.split_count(validation_size, derive_seed(split_seed, 1))?;
        let classes = [&train, &validation, &test]
            .iter()
            .filter_map(|d| d.num_classes())
            .max()
            .ok_or_else(|| Error::contract("classification splits need class labels"))?;
        Ok(Self {
            train,
            validation,
            test,
            classes,
        })
    }

    pub fn load(cfg: &RunConfig) -> Result<Self> {
        cfg.require_data()?;
        let mut full = load_idx(cfg.train_images.as_ref().unwrap(), cfg.train_labels.as_ref().unwrap())?;
        if let Some(n) = cfg.subset {
            full = full.head(n);
        }
        match (&cfg.test_images, &cfg.test_labels) {
            (Some(i), Some(l)) => {
                let test = load_idx(i, l)?;
                if test.features() != full.features() {
                    return Err(Error::config("test_images", "test inputs have a different width"));
                }
                Self::with_test(&full, test, cfg.validation_size, cfg.split_seed)
            }
            _ => Self::carve(&full, cfg.test_size, cfg.validation_size, cfg.split_seed),
        }
    }

    pub fn architecture(&self, hidden: &[usize]) -> Result<Architecture> {
        Architecture::classifier(self.train.features(), hidden, self.classes)
    }
}

// ---------------------------------------------------------------------------
// Cells

/// One point of the hyperparameter grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Cell {
    pub index: usize,
    pub kind: PrecondKind,
    pub eta: f64,
    pub prior_variance: f64,
}

impl Cell {
    pub fn name(&self) -> String {
        format!("{}_eta{}_pv{}", slug(self.kind), self.eta, self.prior_variance)
    }
}

/// Metrics of one evaluation mode on the three splits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SplitMetrics {
    pub train: MetricsReport,
    pub validation: MetricsReport,
    pub test: MetricsReport,
}

/// Jensen check of one ensemble evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JensenCheck {
    pub cell: String,
    pub split: &'static str,
    pub ensemble_nll: f64,
    pub mean_member_nll: f64,
    pub ok: bool,
}

/// Where and why a chain left the finite region.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Divergence {
    pub step: u64,
    pub reason: String,
}

impl std::fmt::Display for Divergence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "step {}: {}", self.step, self.reason)
    }
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub cell: Cell,
    /// Set when the chain diverged.
    pub failure: Option<Divergence>,
    pub members: usize,
    pub ensemble: Option<SplitMetrics>,
    pub post_mean: Option<SplitMetrics>,
    pub jensen: Vec<JensenCheck>,
    pub trace: Vec<TraceRow>,
    pub clamp_events: usize,
    pub seconds: f64,
    /// Final chain state, for checkpointing single runs.
    pub chain: Option<Chain>,
}

struct Accumulators<'a> {
    train: EnsembleAccumulator<'a>,
    validation: EnsembleAccumulator<'a>,
    test: EnsembleAccumulator<'a>,
}

impl Accumulators<'_> {
    fn add(&mut self, model: &dyn Model, theta: &ParamVector) -> Result<()> {
        self.train.add(model, theta)?;
        self.validation.add(model, theta)?;
        self.test.add(model, theta)?;
        Ok(())
    }

    fn reports(&self) -> Result<[(&'static str, EnsembleReport); 3]> {
        Ok([
            ("train", self.train.report()?),
            ("validation", self.validation.report()?),
            ("test", self.test.report()?),
        ])
    }
}

/// Runs one chain and evaluates its posterior mean and streamed ensemble.
///
/// Seeds: initialization `derive(seed, 1)`, minibatch order `derive(seed, 2)`,
/// noise `derive(seed, 3)`; the same for every cell so cells differ only in their
/// hyperparameters.
pub fn run_cell(
    cfg: &RunConfig,
    splits: &Splits,
    arch: &Architecture,
    cell: Cell,
    ensemble_out: Option<&Path>,
) -> Result<CellResult> {
    let start = Instant::now();
    let prior = cfg.prior_with_variance(cell.prior_variance)?;
    let theta0 = arch.init_params(&mut seeded(derive_seed(cfg.seed, 1)));
    let chain_cfg = ChainConfig {
        sampler: cfg.sampler_for(cell.eta),
        precond: cell.kind,
        precond_config: cfg.precond_config(),
        minibatch: cfg.minibatch,
        updates: cfg.updates,
        eval_every: cfg.eval_every,
        noise_seed: derive_seed(cfg.seed, 3),
        data_seed: derive_seed(cfg.seed, 2),
        train_eval_limit: Some(cfg.train_eval_limit),
        keep_snapshots: false,
    };
    let train_eval = if cfg.train_eval_limit < splits.train.len() {
        Cow::Owned(splits.train.head(cfg.train_eval_limit))
    } else {
        Cow::Borrowed(&splits.train)
    };
    let mut acc = Accumulators {
        train: EnsembleAccumulator::new(&train_eval)?,
        validation: EnsembleAccumulator::new(&splits.validation)?,
        test: EnsembleAccumulator::new(&splits.test)?,
    };
    let mut writer = ensemble_out.map(|p| File::create(p).map(BufWriter::new)).transpose()?;
    let outcome = run_chain(
        arch,
        prior.as_ref(),
        &splits.train,
        Some(&splits.validation),
        theta0,
        &chain_cfg,
        &mut |_, theta| {
            acc.add(arch, theta)?;
            if let Some(w) = writer.as_mut() {
                theta.write_checkpoint(&mut *w)?;
            }
            Ok(())
        },
    );
    if let Some(mut w) = writer {
        w.flush()?;
    }
    let (failure, trace, chain, clamp_events) = match outcome {
        Ok(out) => (None, out.trace, Some(out.chain), out.clamp_events),
        Err(f) => match f.error {
            Error::Divergence { step, reason, .. } => (Some(Divergence { step, reason }), f.trace, None, 0),
            e => return Err(e),
        },
    };
    let post_mean = chain
        .as_ref()
        .map(|c| -> Result<SplitMetrics> {
            Ok(SplitMetrics {
                train: evaluate(arch, &c.mean, &train_eval)?,
                validation: evaluate(arch, &c.mean, &splits.validation)?,
                test: evaluate(arch, &c.mean, &splits.test)?,
            })
        })
        .transpose()?;
    let members = acc.train.members();
    let (ensemble, jensen) = if failure.is_none() && members > 0 {
        let reports = acc.reports()?;
        let jensen = reports
            .iter()
            .map(|(split, r)| JensenCheck {
                cell: cell.name(),
                split,
                ensemble_nll: r.ensemble.nll,
                mean_member_nll: r.mean_member_nll,
                ok: r.satisfies_jensen(),
            })
            .collect();
        let m = SplitMetrics {
            train: reports[0].1.ensemble,
            validation: reports[1].1.ensemble,
            test: reports[2].1.ensemble,
        };
        (Some(m), jensen)
    } else {
        (None, Vec::new())
    };
    Ok(CellResult {
        cell,
        failure,
        members,
        ensemble,
        post_mean,
        jensen,
        trace,
        clamp_events,
        seconds: start.elapsed().as_secs_f64(),
        chain,
    })
}

// ---------------------------------------------------------------------------
// Results

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Mode {
    Ensemble,
    PostMean,
}

/// One line of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub method: String,
    pub preconditioner: &'static str,
    pub mode: Mode,
    pub prior: &'static str,
    pub prior_variance: f64,
    pub eta: f64,
    pub seed: u64,
    pub members: usize,
    pub metrics: Option<SplitMetrics>,
    pub selected: bool,
    pub status: String,
}

pub const RESULTS_HEADER: &str = "method,preconditioner,mode,prior,prior_variance,eta,seed,members,\
nll_train,acc_train,nll_test,acc_test,nll_val,acc_val,selected,status";

fn num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_results_csv<W: Write>(rows: &[ResultRow], mut out: W) -> Result<()> {
    writeln!(out, "{RESULTS_HEADER}")?;
    for r in rows {
        let m = r.metrics;
        writeln!(
            out,
            "{},{},{:?},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.method,
            r.preconditioner,
            r.mode,
            r.prior,
            r.prior_variance,
            r.eta,
            r.seed,
            r.members,
            num(m.map(|m| m.train.nll)),
            num(m.and_then(|m| m.train.accuracy)),
            num(m.map(|m| m.test.nll)),
            num(m.and_then(|m| m.test.accuracy)),
            num(m.map(|m| m.validation.nll)),
            num(m.and_then(|m| m.validation.accuracy)),
            r.selected,
            r.status
        )?;
    }
    Ok(())
}

fn rows_for(cfg: &RunConfig, r: &CellResult) -> [ResultRow; 2] {
    let status = r
        .failure
        .clone()
        .map_or_else(|| "ok".to_string(), |f| format!("diverged at step {}", f.step));
    let row = |mode: Mode, metrics: Option<SplitMetrics>, members: usize| ResultRow {
        method: format!(
            "{}, {}",
            if mode == Mode::Ensemble { "Ensemble" } else { "PostMean" },
            r.cell.kind.label()
        ),
        preconditioner: slug(r.cell.kind),
        mode,
        prior: prior_slug(cfg.prior),
        prior_variance: r.cell.prior_variance,
        eta: r.cell.eta,
        seed: cfg.seed,
        members,
        metrics,
        selected: false,
        status: status.clone(),
    };
    [
        row(Mode::Ensemble, r.ensemble, r.members),
        row(Mode::PostMean, r.post_mean, 1),
    ]
}

/// Marks, per (preconditioner, mode), the row with the best validation accuracy;
/// ties go to the earlier row.
pub fn select_by_validation(rows: &mut [ResultRow]) {
    let mut best: Vec<((&'static str, Mode), usize, f64)> = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        let Some(acc) = r.metrics.and_then(|m| m.validation.accuracy) else {
            continue;
        };
        let key = (r.preconditioner, r.mode);
        match best.iter_mut().find(|b| b.0 == key) {
            Some(b) if acc > b.2 => {
                b.1 = i;
                b.2 = acc;
            }
            Some(_) => {}
            None => best.push((key, i, acc)),
        }
    }
    for (_, i, _) in best {
        rows[i].selected = true;
    }
}

/// Human-readable table of the selected rows, in Table-1 layout.
pub fn format_table(rows: &[ResultRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<22} {:>11} {:>16} {:>10} {:>15}",
        "Method", "NLL (train)", "Accuracy (train)", "NLL (test)", "Accuracy (test)"
    );
    let pct = |a: Option<f64>| a.map_or_else(|| "-".into(), |a| format!("{:.2}", 100.0 * a));
    for mode in [Mode::Ensemble, Mode::PostMean] {
        for r in rows.iter().filter(|r| r.selected && r.mode == mode) {
            let Some(m) = r.metrics else { continue };
            let _ = writeln!(
                s,
                "{:<22} {:>11.4} {:>16} {:>10.4} {:>15}",
                r.method,
                m.train.nll,
                pct(m.train.accuracy),
                m.test.nll,
                pct(m.test.accuracy)
            );
        }
    }
    s
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub schema: &'static str,
    pub command: &'static str,
    pub seed: u64,
    pub cells: usize,
    pub selected: Vec<ResultRow>,
    pub diverged: Vec<String>,
    pub jensen: Vec<JensenCheck>,
    pub clamp_events: usize,
}

impl Summary {
    pub fn jensen_ok(&self) -> bool {
        self.jensen.iter().all(|j| j.ok)
    }
}

/// Everything a `train` or `grid` invocation produced.
#[derive(Debug)]
pub struct Report {
    pub rows: Vec<ResultRow>,
    pub summary: Summary,
    pub table: String,
    pub cells: Vec<CellResult>,
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn finish(cfg: &RunConfig, command: &'static str, cells: Vec<CellResult>, out: &Path) -> Result<Report> {
    let mut rows: Vec<ResultRow> = cells.iter().flat_map(|c| rows_for(cfg, c)).collect();
    select_by_validation(&mut rows);
    let summary = Summary {
        schema: SUMMARY_SCHEMA,
        command,
        seed: cfg.seed,
        cells: cells.len(),
        selected: rows.iter().filter(|r| r.selected).cloned().collect(),
        diverged: cells
            .iter()
            .filter_map(|c| c.failure.as_ref().map(|f| format!("{}: {f}", c.cell.name())))
            .collect(),
        jensen: cells.iter().flat_map(|c| c.jensen.clone()).collect(),
        clamp_events: cells.iter().map(|c| c.clamp_events).sum(),
    };
    let table = format_table(&rows);

    let mut csv = Vec::new();
    write_results_csv(&rows, &mut csv)?;
    write_file(&out.join("results.csv"), &csv)?;
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Numerical(e.to_string()))?;
    write_file(&out.join("summary.json"), json.as_bytes())?;
    write_file(&out.join("table.txt"), table.as_bytes())?;
    let mut timing = String::from("cell,seconds\n");
    for c in &cells {
        let _ = writeln!(timing, "{},{:.3}", c.cell.name(), c.seconds);
    }
    write_file(&out.join("timing.csv"), timing.as_bytes())?;
    Ok(Report {
        rows,
        summary,
        table,
        cells,
    })
}

fn prepare_output(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out)?;
    write_file(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
    Ok(out)
}

fn trace_bytes(trace: &[TraceRow]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_trace_csv(trace, &mut buf)?;
    Ok(buf)
}

/// Number of parallel workers from [`WORKERS_ENV`], defaulting to the available cores.
pub fn worker_count() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::config(WORKERS_ENV, format!("expected a positive integer, got `{v}`"))),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// `train`: one chain with the configured preconditioner, step size, and prior variance.
///
/// Writes `config.toml`, `trace.csv`, `results.csv`, `summary.json`, `table.txt`,
/// `timing.csv`, `posterior_mean.lbnn`, `final.lbnn`, and (optionally) `ensemble.lbnn`.
/// A diverged chain is an error.
pub fn run_train(cfg: &RunConfig) -> Result<Report> {
    let splits = Splits::load(cfg)?;
    run_train_on(cfg, &splits)
}

pub fn run_train_on(cfg: &RunConfig, splits: &Splits) -> Result<Report> {
    let arch = splits.architecture(&cfg.hidden)?;
    let out = prepare_output(cfg)?;
    let cell = Cell {
        index: 0,
        kind: cfg.preconditioner,
        eta: cfg.eta,
        prior_variance: cfg.prior_variance,
    };
    let ens_path = out.join("ensemble.lbnn");
    let result = run_cell(
        cfg,
        splits,
        &arch,
        cell,
        cfg.save_ensemble.then_some(ens_path.as_path()),
    )?;
    write_file(&out.join("trace.csv"), &trace_bytes(&result.trace)?)?;
    if let Some(failure) = &result.failure {
        return Err(Error::Divergence {
            step: failure.step,
            eta: cfg.eta,
            reason: failure.reason.clone(),
        });
    }
    if let Some(chain) = &result.chain {
        chain
            .mean
            .write_checkpoint(BufWriter::new(File::create(out.join("posterior_mean.lbnn"))?))?;
        chain
            .theta
            .write_checkpoint(BufWriter::new(File::create(out.join("final.lbnn"))?))?;
    }
    finish(cfg, "train", vec![result], &out)
}

/// The grid's cells in a fixed order: preconditioner, then η, then prior variance.
pub fn grid_cells(cfg: &RunConfig) -> Vec<Cell> {
    let variances = if cfg.prior == PriorKind::Gaussian {
        cfg.grid_prior_variance.clone()
    } else {
        vec![cfg.prior_variance]
    };
    let mut cells = Vec::new();
    for &kind in &cfg.grid_preconditioners {
        let etas = if kind == PrecondKind::Identity {
            &cfg.grid_eta_euclidean
        } else {
            &cfg.grid_eta_other
        };
        for &eta in etas {
            for &pv in &variances {
                cells.push(Cell {
                    index: cells.len(),
                    kind,
                    eta,
                    prior_variance: pv,
                });
            }
        }
    }
    cells
}

/// `grid`: every cell of the configured grid, selection by validation accuracy.
///
/// Diverged cells are recorded and do not stop the grid. Per-cell traces go to
/// `cells/<name>/trace.csv`.
pub fn run_grid(cfg: &RunConfig) -> Result<Report> {
    let splits = Splits::load(cfg)?;
    run_grid_on(cfg, &splits)
}

pub fn run_grid_on(cfg: &RunConfig, splits: &Splits) -> Result<Report> {
    let arch = splits.architecture(&cfg.hidden)?;
    let out = prepare_output(cfg)?;
    let cells = grid_cells(cfg);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count()?)
        .build()
        .map_err(|e| Error::config(WORKERS_ENV, e.to_string()))?;
    let results: Vec<Result<CellResult>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&c| run_cell(cfg, splits, &arch, c, None))
            .collect()
    });
    let mut done = Vec::with_capacity(results.len());
    for r in results {
        let mut r = r?;
        let dir = out.join("cells").join(r.cell.name());
        fs::create_dir_all(&dir)?;
        write_file(&dir.join("trace.csv"), &trace_bytes(&r.trace)?)?;
        r.chain = None;
        done.push(r);
    }
    finish(cfg, "grid", done, &out)
}

// ---------------------------------------------------------------------------
// Conjugate oracle

/// Sample moments of one chain against the analytic posterior, per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleRow {
    pub preconditioner: &'static str,
    pub coord: usize,
    pub post_mean: f64,
    pub sample_mean: f64,
    /// Batch-means Monte-Carlo standard error of `sample_mean`.
    pub mcse: f64,
    pub post_var: f64,
    pub sample_var: f64,
}

impl OracleRow {
    /// `|sample_mean − post_mean| / mcse`.
    pub fn mean_z(&self) -> f64 {
        (self.sample_mean - self.post_mean).abs() / self.mcse
    }

    pub fn var_rel_err(&self) -> f64 {
        self.sample_var / self.post_var - 1.0
    }
}

/// Number of batches for the batch-means standard error.
const ORACLE_BATCHES: usize = 100;

/// Full-batch chain on a conjugate problem: `burn_in` steps, then `steps` recorded steps.
///
/// Adaptive preconditioners stop adapting after burn-in, so the recorded part of the
/// chain uses a fixed `C`.
pub fn oracle_chain(
    problem: &ConjugateRegressionProblem,
    kind: PrecondKind,
    cfg: &RunConfig,
    eta: f64,
    seed: u64,
) -> Result<Vec<OracleRow>> {
    let model = problem.model();
    let prior = problem.prior()?;
    let batch = problem.dataset().to_batch();
    let n = problem.n();
    let sampler_cfg = SamplerConfig {
        schedule: Schedule::constant(eta),
        gamma: cfg.gamma,
        burn_in: cfg.oracle_burn_in,
        thin: 1,
        freeze_after: Some(cfg.freeze_precond_after.unwrap_or(cfg.oracle_burn_in)),
        ..SamplerConfig::default()
    };
    let pc = precond::build(kind, model.layout(), cfg.precond_config())?;
    let mut sampler = Sampler::new(&model, Some(&prior), pc, sampler_cfg, n)?;
    let mut chain = Chain::new(ParamVector::zeros(model.layout().clone()), seed);
    chain.keep_snapshots = false;
    for _ in 0..cfg.oracle_burn_in {
        sampler.step(&mut chain, &batch)?;
    }
    let steps = cfg.oracle_steps as usize;
    if steps < 2 * ORACLE_BATCHES {
        return Err(Error::config(
            "oracle_steps",
            format!("needs at least {} steps", 2 * ORACLE_BATCHES),
        ));
    }
    let d = problem.d();
    let mut xs = vec![0.0; steps * d];
    for s in 0..steps {
        sampler.step(&mut chain, &batch)?;
        xs[s * d..(s + 1) * d].copy_from_slice(chain.theta.values());
    }
    let bs = steps / ORACLE_BATCHES;
    Ok((0..d)
        .map(|c| {
            let col = |s: usize| xs[s * d + c];
            let mean = (0..steps).map(col).sum::<f64>() / steps as f64;
            let var = (0..steps).map(|s| (col(s) - mean).powi(2)).sum::<f64>() / (steps - 1) as f64;
            let bm_var = (0..ORACLE_BATCHES)
                .map(|b| ((b * bs..(b + 1) * bs).map(col).sum::<f64>() / bs as f64 - mean).powi(2))
                .sum::<f64>()
                / (ORACLE_BATCHES - 1) as f64;
            OracleRow {
                preconditioner: slug(kind),
                coord: c,
                post_mean: problem.post_mean[c],
                sample_mean: mean,
                mcse: (bm_var / ORACLE_BATCHES as f64).sqrt(),
                post_var: problem.post_cov[(c, c)],
                sample_var: var,
            }
        })
        .collect())
}

pub const ORACLE_HEADER: &str =
    "preconditioner,coord,post_mean,sample_mean,mcse,mean_z,post_var,sample_var,var_rel_err";

/// The step size used by the oracle: `oracle_eta`, or `1e-3 · N / 2`.
pub fn oracle_eta(cfg: &RunConfig) -> f64 {
    cfg.oracle_eta.unwrap_or(1e-3 * cfg.oracle_n as f64 / 2.0)
}

/// `oracle`: conjugate regression testbed; writes `problem.lbcp`, `oracle.csv`, `oracle.txt`.
pub fn run_oracle(cfg: &RunConfig) -> Result<Vec<OracleRow>> {
    let out = prepare_output(cfg)?;
    let prior_cov = DMatrix::identity(cfg.oracle_d, cfg.oracle_d) * cfg.oracle_prior_variance;
    let problem = make_conjugate_problem(
        cfg.oracle_n,
        cfg.oracle_d,
        cfg.oracle_noise_variance,
        prior_cov,
        derive_seed(cfg.seed, 10),
    )?;
    problem.save(out.join("problem.lbcp"))?;
    let eta = oracle_eta(cfg);
    let mut rows = Vec::new();
    for (i, &kind) in cfg.oracle_preconditioners.iter().enumerate() {
        rows.extend(oracle_chain(
            &problem,
            kind,
            cfg,
            eta,
            derive_seed(cfg.seed, 11 + i as u64),
        )?);
    }
    let mut csv = format!("{ORACLE_HEADER}\n");
    let mut txt = format!(
        "{:<10} {:>5} {:>12} {:>12} {:>8} {:>12} {:>12} {:>9}\n",
        "kind", "coord", "post mean", "sample mean", "|z|", "post var", "sample var", "var err"
    );
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            r.preconditioner,
            r.coord,
            r.post_mean,
            r.sample_mean,
            r.mcse,
            r.mean_z(),
            r.post_var,
            r.sample_var,
            r.var_rel_err()
        );
        let _ = writeln!(
            txt,
            "{:<10} {:>5} {:>12.6} {:>12.6} {:>8.2} {:>12.6} {:>12.6} {:>+8.2}%",
            r.preconditioner,
            r.coord,
            r.post_mean,
            r.sample_mean,
            r.mean_z(),
            r.post_var,
            r.sample_var,
            100.0 * r.var_rel_err()
        );
    }
    write_file(&out.join("oracle.csv"), csv.as_bytes())?;
    write_file(&out.join("oracle.txt"), txt.as_bytes())?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Re-evaluation

/// Metrics of a saved posterior mean and/or ensemble on the configured splits.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub members: usize,
    pub post_mean: Option<SplitMetrics>,
    pub ensemble: Option<SplitMetrics>,
}

pub fn run_eval(cfg: &RunConfig, theta: Option<&Path>, ensemble: Option<&Path>) -> Result<EvalReport> {
    if theta.is_none() && ensemble.is_none() {
        return Err(Error::config(
            "checkpoint",
            "give a parameter checkpoint, an ensemble file, or both",
        ));
    }
    let splits = Splits::load(cfg)?;
    let arch = splits.architecture(&cfg.hidden)?;
    let train_eval = splits.train.head(cfg.train_eval_limit);
    let check = |v: &ParamVector| -> Result<()> {
        if **v.layout() != **arch.layout() {
            return Err(Error::LayoutMismatch(format!(
                "checkpoint has dimension {}, architecture {:?} needs {}",
                v.dim(),
                arch.layer_sizes(),
                arch.dim()
            )));
        }
        Ok(())
    };
    let post_mean = theta
        .map(|p| -> Result<SplitMetrics> {
            let v = ParamVector::read_checkpoint(std::io::BufReader::new(File::open(p)?))?;
            check(&v)?;
            Ok(SplitMetrics {
                train: evaluate(&arch, &v, &train_eval)?,
                validation: evaluate(&arch, &v, &splits.validation)?,
                test: evaluate(&arch, &v, &splits.test)?,
            })
        })
        .transpose()?;
    let mut members = 0;
    let ensemble = ensemble
        .map(|p| -> Result<SplitMetrics> {
            let snaps = ParamVector::read_checkpoints(std::io::BufReader::new(File::open(p)?))?;
            let mut acc = Accumulators {
                train: EnsembleAccumulator::new(&train_eval)?,
                validation: EnsembleAccumulator::new(&splits.validation)?,
                test: EnsembleAccumulator::new(&splits.test)?,
            };
            for s in &snaps {
                check(s)?;
                acc.add(&arch, s)?;
            }
            members = snaps.len();
            let r = acc.reports()?;
            Ok(SplitMetrics {
                train: r[0].1.ensemble,
                validation: r[1].1.ensemble,
                test: r[2].1.ensemble,
            })
        })
        .transpose()?;
    Ok(EvalReport {
        members,
        post_mean,
        ensemble,
    })
}
