//! `lgmamp` command-line front end.
//!
//! Every command writes its outputs plus a `<command>_manifest.json` into the
//! `--out` directory. Exit codes: 0 success, 2 usage or invalid
//! configuration, 3 training divergence, 4 I/O failure, 1 anything else.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lgmamp::harness::{write_results_csv, write_se_csv, Algorithm, Experiment};
use lgmamp::unfolded::{write_training_log, Checkpoint, LampModel, TrainError};
use lgmamp::{Error, ExperimentConfig};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "lgmamp", version, about = "Train and evaluate learned Gaussian-mixture AMP")]
struct Cli {
    /// Worker threads for Monte-Carlo evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Replace the seeds with `matrix = S`, `train = S + 1`, `eval = S + 2`.
    #[arg(long, value_name = "S")]
    seed_override: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train LGM-AMP (or learned AMP with the true prior when
    /// `training.learn_denoiser = false`).
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Monte-Carlo evaluation of a checkpoint or a baseline.
    Eval {
        #[command(flatten)]
        common: Common,
        /// `amp_l1`, `amp_matched`, or a checkpoint path.
        #[arg(long)]
        model: String,
        #[arg(long)]
        trials: Option<usize>,
        /// Layers to evaluate (default: `T_max`).
        #[arg(long)]
        depth: Option<usize>,
    },
    /// State-evolution prediction for matched AMP.
    Se {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        depth: Option<usize>,
    },
    /// Write one problem instance: the first evaluation draw.
    Gen {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Divergence(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Io(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::DimensionMismatch(_) | Error::TapeMismatch { .. } | Error::Empty => CliError::Usage(e.to_string()),
            Error::Divergence { .. } | Error::NonFiniteGradient(_) => CliError::Divergence(e.to_string()),
            Error::Io(_) => CliError::Io(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    argv: Vec<String>,
    version: String,
    started_at: String,
    finished_at: String,
    config_hash: String,
    seeds: lgmamp::config::Seeds,
    /// Effective configuration after overrides, canonical TOML.
    config: String,
    outputs: Vec<PathBuf>,
    status: String,
}

struct Run {
    command: &'static str,
    started_at: String,
    config: ExperimentConfig,
    out: PathBuf,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn start(command: &'static str, common: &Common) -> Result<Self, CliError> {
        let started_at = now();
        let text = fs::read_to_string(&common.config).map_err(|e| io_err(&common.config, e))?;
        let mut config = ExperimentConfig::from_toml(&text)?;
        if let Some(s) = common.seed_override {
            config.seeds = lgmamp::config::Seeds { matrix: s, train: s.wrapping_add(1), eval: s.wrapping_add(2) };
        }
        fs::create_dir_all(&common.out).map_err(|e| io_err(&common.out, e))?;
        Ok(Self { command, started_at, config, out: common.out.clone(), outputs: Vec::new() })
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>, CliError> {
        let path = self.out.join(name);
        let f = File::create(&path).map_err(|e| io_err(&path, e))?;
        self.outputs.push(path);
        Ok(BufWriter::new(f))
    }

    fn write(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        let path = self.out.join(name);
        fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        self.outputs.push(path);
        Ok(())
    }

    fn finish(self, status: &str) -> Result<(), CliError> {
        let manifest = RunManifest {
            command: self.command.into(),
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION").into(),
            started_at: self.started_at,
            finished_at: now(),
            config_hash: self.config.hash(),
            seeds: self.config.seeds,
            config: self.config.canonical(),
            outputs: self.outputs,
            status: status.into(),
        };
        let path = self.out.join(format!("{}_manifest.json", self.command));
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn train(common: &Common) -> Result<(), CliError> {
    let mut run = Run::start("train", common)?;
    let exp = Experiment::<f64>::new(run.config.clone())?;
    let hash = run.config.hash();
    match exp.train() {
        Ok(outcome) => {
            run.write("checkpoint.json", &(outcome.model.to_checkpoint(&hash).to_json() + "\n"))?;
            write_training_log(&outcome.log, run.create("training_log.csv")?)?;
            for s in &outcome.stages {
                log::info!("{} layer {}: {:.3} dB after {} steps", s.stage.name(), s.layer, s.best_val_db, s.steps);
            }
            run.finish("ok")
        }
        Err(TrainError { source, stage, layer, last_good, log: rows }) => {
            let msg = format!("training failed in {} at layer {layer}: {source}", stage.name());
            if let Some(model) = last_good {
                run.write("checkpoint.json", &(model.to_checkpoint(&hash).to_json() + "\n"))?;
            }
            write_training_log(&rows, run.create("training_log.csv")?)?;
            run.finish("diverged")?;
            Err(match CliError::from(source) {
                CliError::Usage(_) => CliError::Usage(msg),
                CliError::Io(_) => CliError::Io(msg),
                _ => CliError::Divergence(msg),
            })
        }
    }
}

fn eval(common: &Common, model: &str, trials: Option<usize>, depth: Option<usize>) -> Result<(), CliError> {
    let mut run = Run::start("eval", common)?;
    let exp = Experiment::<f64>::new(run.config.clone())?;
    let trials = trials.unwrap_or(run.config.eval.trials);
    let depth = depth.unwrap_or(run.config.t_max);
    let loaded;
    let alg = match model {
        "amp_l1" => Algorithm::AmpL1 { lambda: exp.l1_lambda()? },
        "amp_matched" => Algorithm::AmpMatched,
        path => {
            let path = Path::new(path);
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            let ck = Checkpoint::from_json(&text)?;
            if ck.n != exp.n() || ck.m != exp.m() {
                return Err(CliError::Usage(format!(
                    "checkpoint {} was trained for N = {}, m = {} but the config gives N = {}, m = {}",
                    path.display(),
                    ck.n,
                    ck.m,
                    exp.n(),
                    exp.m()
                )));
            }
            if ck.config_hash != run.config.hash() {
                log::warn!("checkpoint config hash {} differs from this config", ck.config_hash);
            }
            loaded = LampModel::from_checkpoint(&ck)?;
            if run.config.training.learn_denoiser {
                Algorithm::LgmAmp(&loaded)
            } else {
                Algorithm::LampMatched(&loaded)
            }
        }
    };
    let mc = exp.monte_carlo(&alg, trials, depth)?;
    let rows = exp.result_rows(&mc)?;
    write_results_csv(&rows, run.create(&format!("results_{}.csv", alg.name()))?)?;
    run.finish("ok")
}

fn se(common: &Common, depth: Option<usize>) -> Result<(), CliError> {
    let mut run = Run::start("se", common)?;
    let exp = Experiment::<f64>::new(run.config.clone())?;
    let points = exp.state_evolution(depth.unwrap_or(run.config.t_max))?;
    write_se_csv(&points, run.create("se.csv")?)?;
    run.finish("ok")
}

#[derive(Serialize)]
struct Instance {
    #[serde(rename = "N")]
    n: usize,
    m: usize,
    noise_var: f64,
    /// Row-major `m × N`.
    a: Vec<f64>,
    x: Vec<f64>,
    y: Vec<f64>,
}

fn gen(common: &Common) -> Result<(), CliError> {
    use lgmamp::unfolded::SampleSource;
    let mut run = Run::start("gen", common)?;
    let exp = Experiment::<f64>::new(run.config.clone())?;
    let batch = exp.eval_stream(0).draw(1);
    let inst = Instance {
        n: exp.n(),
        m: exp.m(),
        noise_var: exp.noise_var,
        a: exp.a.iter().copied().collect(),
        x: batch.x.row(0).to_vec(),
        y: batch.y.row(0).to_vec(),
    };
    run.write("problem.json", &(serde_json::to_string_pretty(&inst).expect("instance serializes") + "\n"))?;
    run.finish("ok")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(k) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(k).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::Train { common } => train(common),
        Command::Eval { common, model, trials, depth } => eval(common, model, *trials, *depth),
        Command::Se { common, depth } => se(common, *depth),
        Command::Gen { common } => gen(common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
