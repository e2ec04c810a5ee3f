use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use corrreg::harness::config::{parse_config_or, ExperimentConfig, ExperimentKind};
use corrreg::harness::pipeline;
use corrreg::Error;

const EXIT_OTHER: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_INPUT: u8 = 4;
const EXIT_NUMERICAL: u8 = 5;

#[derive(Parser)]
#[command(name = "corrreg", version, about = "Correlation-penalty regularization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic dataset to tensor files.
    GenSynth(Common),
    /// Solve the regularized normal equations of the linear model.
    Solve(Common),
    /// Train one configuration and write its metrics and checkpoints.
    Train(Common),
    /// Train (or solve) and write the input-sensitivity profile.
    Sensitivity(Common),
    /// Generate a colored-MNIST corpus.
    GenCmnist(Common),
    /// Evaluate a checkpoint on every split.
    Eval(Common),
    /// Compare variance with half the mean squared pair difference.
    Prop1(Common),
    /// Run the `[sweep]` grid and write a ranked table.
    Sweep(Common),
}

#[derive(Args)]
struct Common {
    /// TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set objective.beta=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory; defaults to the config's `out` or `runs/<subcommand>`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for `sweep`.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::Config(_) | Error::InvalidSpec(_) | Error::InvalidArgument { .. } => (EXIT_CONFIG, "config"),
            Error::Io(io) if io.kind() == ErrorKind::NotFound => (EXIT_INPUT, "missing_input"),
            Error::BadMagic { .. } | Error::Truncated(_) | Error::CountMismatch { .. } | Error::Json(_) => {
                (EXIT_INPUT, "bad_input")
            }
            Error::Diverged { .. } | Error::NotPositiveDefinite { .. } => (EXIT_NUMERICAL, "numerical"),
            _ => (EXIT_OTHER, "error"),
        };
        Failure {
            code,
            kind,
            message: e.to_string().trim_end().to_string(),
        }
    }
}

fn load(args: &Common, default_kind: ExperimentKind) -> Result<ExperimentConfig, Failure> {
    let text = match &args.config {
        Some(path) => std::fs::read_to_string(path).map_err(|e| Failure {
            code: EXIT_CONFIG,
            kind: "config",
            message: format!("cannot read {}: {e}", path.display()),
        })?,
        None => String::new(),
    };
    let mut overrides = args.set.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    Ok(parse_config_or(&text, &overrides, default_kind)?)
}

fn out_dir(args: &Common, cfg: &ExperimentConfig, name: &str) -> PathBuf {
    args.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| Path::new("runs").join(name))
}

fn print<T: Serialize>(value: &T) -> Result<(), Failure> {
    println!("{}", serde_json::to_string_pretty(value).map_err(Error::from)?);
    Ok(())
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::GenSynth(a) => {
            let cfg = load(&a, ExperimentKind::SynthA)?;
            let out = out_dir(&a, &cfg, "gen-synth");
            print(&pipeline::gen_synth(&cfg, &out)?)
        }
        Command::Solve(a) => {
            let cfg = load(&a, ExperimentKind::ClosedForm)?;
            let out = out_dir(&a, &cfg, "solve");
            let solved = pipeline::solve(&cfg, Some(&out))?;
            print(&serde_json::json!({
                "theta": out.join("theta.json"),
                "provenance": solved.provenance,
                "residual_inf": solved.residual_inf,
            }))
        }
        Command::Train(a) => {
            let cfg = load(&a, ExperimentKind::SynthA)?;
            let out = out_dir(&a, &cfg, "train");
            let run = pipeline::run_train(&cfg, Some(&out))?;
            print(&serde_json::json!({
                "out": out,
                "config_hash": run.record.config_hash,
                "summary": run.record.summary,
                "wall_clock_secs": run.record.wall_clock_secs,
            }))
        }
        Command::Sensitivity(a) => {
            let cfg = load(&a, ExperimentKind::SynthA)?;
            let out = out_dir(&a, &cfg, "sensitivity");
            let s = pipeline::run_sensitivity(&cfg, Some(&out))?;
            print(&serde_json::json!({
                "profile": out.join("profile.json"),
                "beta": s.profile.beta,
                "normalized": s.profile.normalized,
            }))
        }
        Command::GenCmnist(a) => {
            let cfg = load(&a, ExperimentKind::CmnistShift)?;
            let out = out_dir(&a, &cfg, "gen-cmnist");
            let manifest = pipeline::gen_cmnist(&cfg, &out)?;
            print(&serde_json::json!({ "out": out, "splits": manifest.splits }))
        }
        Command::Eval(a) => {
            let cfg = load(&a, ExperimentKind::CmnistShift)?;
            let out = out_dir(&a, &cfg, "eval");
            print(&pipeline::run_eval(&cfg, Some(&out))?)
        }
        Command::Prop1(a) => {
            let cfg = load(&a, ExperimentKind::Prop1)?;
            let out = out_dir(&a, &cfg, "prop1");
            print(&pipeline::run_prop1(&cfg, Some(&out))?)
        }
        Command::Sweep(a) => {
            let cfg = load(&a, ExperimentKind::CmnistShift)?;
            let out = out_dir(&a, &cfg, "sweep");
            let grid = pipeline::expand_grid(&cfg);
            let split = cfg.sweep.rank_split.clone().unwrap_or_else(|| "test".into());
            let table = pipeline::sweep(&grid, &split, a.jobs, Some(&out))?;
            print!("{}", table.to_csv());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return ExitCode::SUCCESS;
            }
            let line = serde_json::json!({ "error": "usage", "exit_code": EXIT_USAGE, "message": e.kind().to_string() });
            eprintln!("{line}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let line = serde_json::json!({ "error": f.kind, "exit_code": f.code, "message": f.message });
            eprintln!("{line}");
            ExitCode::from(f.code)
        }
    }
}
