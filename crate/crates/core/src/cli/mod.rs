//! Command-line entry points.
//!
//! Every artifact-producing command writes its outputs under `--out` together
//! with one `manifest.json`. Console numbers use six significant digits; JSON
//! keeps full precision.

mod dvh_plot;
mod evaluate;
mod gradcheck;
mod phantom;
mod train_demo;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::RunConfig;
use crate::volume::{load_patient, Patient};

pub use dvh_plot::{dvh_table, DvhTable, DVH_STEP_GY};
pub use gradcheck::{gradcheck_target, GradcheckSummary, ParamSummary};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "dcadose", version, about = "Dual cross-attention dose prediction toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// JSON run config; missing blocks take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the seed of the command (training seed, phantom seed, sampling seed).
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Worker threads for per-patient work.
    #[arg(long, global = true, value_name = "N", default_value_t = 1)]
    pub threads: usize,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthetic phantom cohorts.
    #[command(subcommand)]
    Phantom(PhantomCommand),
    /// Scores a directory of predicted doses against ground-truth patients.
    Evaluate {
        #[arg(long, value_name = "DIR")]
        pred: PathBuf,
        #[arg(long, value_name = "DIR")]
        gt: PathBuf,
    },
    /// Finite-difference check of the analytic gradients.
    Gradcheck {
        #[arg(long, value_enum)]
        target: GradTarget,
        /// Scales the analytic gradients before comparing (negative control).
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
    /// Trains the scaffold on a small cohort and evaluates held-out patients.
    TrainDemo {
        /// Runs both DVH objectives and writes a comparison report.
        #[arg(long)]
        loss_ablation: bool,
    },
    /// Exact DVH curves of a prediction against its patient, as CSV and SVG.
    DvhPlot {
        #[arg(long, value_name = "DIR")]
        patient: PathBuf,
        #[arg(long, value_name = "FILE")]
        pred: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum PhantomCommand {
    /// Writes `--count` phantoms of `--size`³ voxels in the patient directory format.
    Generate {
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = crate::phantom::DEFAULT_SIZE)]
        size: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GradTarget {
    Dca,
    Loss,
    Net,
}

impl GradTarget {
    pub fn name(self) -> &'static str {
        match self {
            GradTarget::Dca => "dca",
            GradTarget::Loss => "loss",
            GradTarget::Net => "net",
        }
    }
}

/// Exit code 1: a run that completed but did not validate (e.g. gradient check thresholds).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ValidationFailure(pub String);

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub started_at: String,
    pub finished_at: String,
    pub inputs: Vec<String>,
    /// Relative to the output directory.
    pub outputs: Vec<String>,
}

/// Shared state of one command invocation.
pub(crate) struct Run {
    pub command: String,
    pub config: RunConfig,
    pub seed: u64,
    pub out: PathBuf,
    pub started_at: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

impl Run {
    fn new(command: &str, config: RunConfig, seed: u64, out: PathBuf) -> anyhow::Result<Self> {
        fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
        Ok(Self {
            command: command.to_string(),
            config,
            seed,
            out,
            started_at: now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn input(&mut self, p: &Path) {
        self.inputs.push(p.display().to_string());
    }

    /// Full path for an output and records it in the manifest.
    pub fn output(&mut self, rel: impl AsRef<Path>) -> PathBuf {
        let rel = rel.as_ref();
        self.outputs.push(rel.to_string_lossy().replace('\\', "/"));
        self.out.join(rel)
    }

    pub fn write_json(&mut self, rel: &str, value: &impl Serialize) -> anyhow::Result<()> {
        let path = self.output(rel);
        write_json(&path, value)
    }

    fn finish(self) -> anyhow::Result<()> {
        let manifest = RunManifest {
            command: self.command,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: self.config.sha256(),
            seed: self.seed,
            started_at: self.started_at,
            finished_at: now(),
            inputs: self.inputs,
            outputs: self.outputs,
        };
        write_json(&self.out.join(MANIFEST), &manifest)
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

/// `%g`-style formatting with six significant digits.
pub fn sig6(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let m = trim_zeros(mantissa);
        return format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs());
    }
    trim_zeros(&format!("{v:.*}", (5 - exp) as usize)).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Loads every patient subdirectory of `dir`, sorted by directory name.
pub fn load_cohort(dir: &Path) -> anyhow::Result<Vec<Patient>> {
    let mut subdirs = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("cannot read {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            subdirs.push(path);
        }
    }
    subdirs.sort();
    if subdirs.is_empty() {
        bail!("{} contains no patient directories", dir.display());
    }
    subdirs
        .iter()
        .map(|d| load_patient(d).with_context(|| format!("malformed patient {}", d.display())))
        .collect()
}

fn load_config(global: &GlobalArgs) -> anyhow::Result<RunConfig> {
    match &global.config {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn out_dir(global: &GlobalArgs) -> PathBuf {
    global.out.clone().unwrap_or_else(|| PathBuf::from("out"))
}

/// Runs a parsed command line and maps the outcome to an exit code.
pub fn run(cli: Cli) -> ExitCode {
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    if g.threads == 0 {
        bail!("--threads must be at least 1");
    }
    // A second call in the same process (tests) finds the pool already built.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(g.threads).build_global();
    let mut config = load_config(g)?;
    let out = out_dir(g);
    match &cli.command {
        Command::Phantom(PhantomCommand::Generate { count, size }) => {
            if let Some(s) = g.seed {
                config.data.phantom_seed = s;
            }
            let seed = config.data.phantom_seed;
            let mut run = Run::new("phantom generate", config, seed, out)?;
            phantom::generate(&mut run, *count, *size)?;
            run.finish()
        }
        Command::Evaluate { pred, gt } => {
            let seed = g.seed.unwrap_or(config.train.seed);
            let mut run = Run::new("evaluate", config, seed, out)?;
            evaluate::evaluate(&mut run, pred, gt)?;
            run.finish()
        }
        Command::Gradcheck {
            target,
            corrupt_backward,
        } => {
            let seed = g.seed.unwrap_or(config.train.seed);
            let mut run = Run::new("gradcheck", config, seed, out)?;
            let outcome = gradcheck::gradcheck(&mut run, *target, *corrupt_backward);
            run.finish()?;
            outcome
        }
        Command::TrainDemo { loss_ablation } => {
            if let Some(s) = g.seed {
                config.train.seed = s;
            }
            config.validate()?;
            let seed = config.train.seed;
            let mut run = Run::new("train-demo", config, seed, out)?;
            train_demo::train_demo(&mut run, *loss_ablation)?;
            run.finish()
        }
        Command::DvhPlot { patient, pred } => {
            let seed = g.seed.unwrap_or(config.train.seed);
            let mut run = Run::new("dvh-plot", config, seed, out)?;
            dvh_plot::dvh_plot(&mut run, patient, pred)?;
            run.finish()
        }
    }
}
