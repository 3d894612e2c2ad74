//! `lamp`: generate datasets, train networks, and emit evaluation tables.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lamp_core::experiment::{cmd_eval, cmd_gen_data, cmd_roc, cmd_se, cmd_sweep, cmd_train, ExperimentSpec};
use lamp_core::{Error, ErrorCategory};

#[derive(Parser)]
#[command(name = "lamp", version, about = "Grant-free access detection with AMP and learned AMP")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate training, validation and test datasets.
    GenData(Common),
    /// Train every learned method of the experiment.
    Train(Common),
    /// Metrics at the calibrated false alarm, per method, scenario and SNR.
    Eval(Common),
    /// ROC tables, one row per threshold per method.
    Roc(Common),
    /// State-evolution table with the matching empirical AMP error.
    Se(Common),
    /// gen-data, train, eval and roc in sequence.
    Sweep(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment file (TOML). Without it the paper-scale defaults are used.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Overrides the scenario and training seed.
    #[arg(short, long)]
    seed: Option<u64>,
    /// Output directory; defaults to the spec's `output` or `out`.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Worker threads; defaults to the number of cores.
    #[arg(short = 'j', long)]
    threads: Option<usize>,
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        ErrorCategory::Config => 2,
        ErrorCategory::Io => 3,
        ErrorCategory::Numeric => 4,
    }
}

fn load_spec(common: &Common) -> Result<(ExperimentSpec, PathBuf), Error> {
    let mut spec = match &common.config {
        Some(p) => ExperimentSpec::load(p)?,
        None => ExperimentSpec::default(),
    };
    if let Some(s) = common.seed {
        spec = spec.with_seed(s);
        spec.validate()?;
    }
    let out = common
        .output
        .clone()
        .or_else(|| spec.output.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok((spec, out))
}

fn report(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn run(cmd: &Command) -> Result<(), Error> {
    let common = match cmd {
        Command::GenData(c) | Command::Train(c) | Command::Eval(c) | Command::Roc(c) | Command::Se(c) | Command::Sweep(c) => c,
    };
    if let Some(t) = common.threads {
        if t == 0 {
            return Err(Error::Config("thread count must be at least 1".into()));
        }
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let (spec, out) = load_spec(common)?;
    let out: &Path = &out;
    match cmd {
        Command::GenData(_) => report(&cmd_gen_data(&spec, out)?),
        Command::Train(_) => report(&cmd_train(&spec, out)?),
        Command::Eval(_) => report(&[cmd_eval(&spec, out)?]),
        Command::Roc(_) => report(&[cmd_roc(&spec, out)?]),
        Command::Se(_) => report(&[cmd_se(&spec, out)?]),
        Command::Sweep(_) => report(&cmd_sweep(&spec, out)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
