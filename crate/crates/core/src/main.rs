//! `langevin` command line: train, grid, oracle, eval.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use langevin::config::RunConfig;
use langevin::experiment::{self, EvalReport, Report, SplitMetrics};
use langevin::precond::PrecondKind;
use langevin::Result;

#[derive(Parser)]
#[command(
    name = "langevin",
    version,
    about = "Preconditioned SGLD for Bayesian neural networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one chain with the configured preconditioner, step size, and prior.
    Train(Common),
    /// Run the hyperparameter grid and select per method by validation accuracy.
    Grid(Common),
    /// Compare sampler moments with the exact posterior of a conjugate regression.
    Oracle(Common),
    /// Evaluate saved checkpoints on the configured data.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Single parameter vector, e.g. `posterior_mean.lbnn`.
        #[arg(long)]
        theta: Option<PathBuf>,
        /// Concatenated snapshots, e.g. `ensemble.lbnn`.
        #[arg(long)]
        ensemble: Option<PathBuf>,
    },
    /// Print the resolved configuration as TOML.
    Config(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one key, `key=value` (repeatable; applied after the file).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Directory holding the four standard MNIST IDX files (gzipped or not).
    #[arg(long)]
    mnist_dir: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    preconditioner: Option<PrecondKind>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    updates: Option<u64>,
}

const MNIST_FILES: [(&str, &str); 4] = [
    ("train_images", "train-images-idx3-ubyte"),
    ("train_labels", "train-labels-idx1-ubyte"),
    ("test_images", "t10k-images-idx3-ubyte"),
    ("test_labels", "t10k-labels-idx1-ubyte"),
];

fn mnist_file(dir: &Path, stem: &str) -> PathBuf {
    let gz = dir.join(format!("{stem}.gz"));
    if gz.exists() {
        gz
    } else {
        dir.join(stem)
    }
}

fn toml_str(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut overrides = Vec::new();
        if let Some(dir) = &self.mnist_dir {
            for (key, stem) in MNIST_FILES {
                overrides.push(format!("{key}={}", toml_str(&mnist_file(dir, stem).to_string_lossy())));
            }
        }
        if let Some(o) = &self.output_dir {
            overrides.push(format!("output_dir={}", toml_str(&o.to_string_lossy())));
        }
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        if let Some(k) = self.preconditioner {
            overrides.push(format!("preconditioner={}", toml_str(experiment::slug(k))));
        }
        if let Some(e) = self.eta {
            overrides.push(format!("eta={e:?}"));
        }
        if let Some(u) = self.updates {
            overrides.push(format!("updates={u}"));
        }
        overrides.extend(self.set.iter().cloned());
        match &self.config {
            Some(path) => RunConfig::load(path, &overrides),
            None => RunConfig::parse("", &overrides),
        }
    }
}

fn print_report(report: &Report, out: &Path) {
    print!("{}", report.table);
    for d in &report.summary.diverged {
        eprintln!("diverged: {d}");
    }
    if !report.summary.jensen_ok() {
        eprintln!("warning: an ensemble NLL exceeded the mean member NLL");
    }
    if report.summary.clamp_events > 0 {
        eprintln!("note: {} QDOP radicand clamp events", report.summary.clamp_events);
    }
    println!("results written to {}", out.display());
}

fn print_metrics(name: &str, m: &SplitMetrics) {
    let acc = |a: Option<f64>| a.map_or_else(|| "-".into(), |a| format!("{:.2}%", 100.0 * a));
    println!(
        "{name:<14} train nll {:.4} acc {}  val nll {:.4} acc {}  test nll {:.4} acc {}",
        m.train.nll,
        acc(m.train.accuracy),
        m.validation.nll,
        acc(m.validation.accuracy),
        m.test.nll,
        acc(m.test.accuracy)
    );
}

fn print_eval(r: &EvalReport) {
    if let Some(m) = &r.post_mean {
        print_metrics("theta", m);
    }
    if let Some(m) = &r.ensemble {
        print_metrics(&format!("ensemble ({})", r.members), m);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            let cfg = c.resolve()?;
            let report = experiment::run_train(&cfg)?;
            print_report(&report, &cfg.output_dir);
        }
        Command::Grid(c) => {
            let cfg = c.resolve()?;
            let report = experiment::run_grid(&cfg)?;
            print_report(&report, &cfg.output_dir);
        }
        Command::Oracle(c) => {
            let cfg = c.resolve()?;
            experiment::run_oracle(&cfg)?;
            print!("{}", std::fs::read_to_string(cfg.output_dir.join("oracle.txt"))?);
        }
        Command::Eval {
            common,
            theta,
            ensemble,
        } => {
            let cfg = common.resolve()?;
            print_eval(&experiment::run_eval(&cfg, theta.as_deref(), ensemble.as_deref())?);
        }
        Command::Config(c) => print!("{}", c.resolve()?.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
