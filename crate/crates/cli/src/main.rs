use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use smash::objectives::Mode;
use smash_cli::{cmd_eval, cmd_sample, cmd_sweep, cmd_synth, cmd_train, one_line, CommonArgs, Sweep};

#[derive(Parser)]
#[command(name = "smash", version, about = "Score-matching point process models: synthesize, train, sample, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset from oracle parameters (JSON or TOML).
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        horizon: f64,
        #[arg(long)]
        num_sequences: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the train/valid split; writes a checkpoint and a history CSV.
    Train(RunArgs),
    /// Dump samples for every predictable test event.
    Sample {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        ckpt: PathBuf,
        /// Use every sequence in --data instead of the test split.
        #[arg(long)]
        whole: bool,
    },
    /// Metrics JSON, calibration CSV and sample dump for the test split.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        whole: bool,
    },
    /// One train+eval per noise scale (applied to time and every location axis).
    SweepNoise {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        sigmas: Vec<f64>,
    },
    /// One train+eval per mark-loss weight.
    SweepAlpha {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        alphas: Vec<f64>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// Level grid `start:stop:step`, overriding both grids of the config.
    #[arg(long)]
    levels: Option<String>,
    #[arg(long)]
    num_samples: Option<usize>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: smash::Error| e.to_string())
}

impl From<RunArgs> for CommonArgs {
    fn from(a: RunArgs) -> Self {
        CommonArgs {
            data: a.data,
            config: a.config,
            out: a.out,
            seed: a.seed,
            mode: a.mode,
            levels: a.levels,
            num_samples: a.num_samples,
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth {
            config,
            horizon,
            num_sequences,
            seed,
            out,
        } => {
            let ds = cmd_synth(&config, horizon, num_sequences, seed, &out)?;
            println!("wrote {} sequences, {} events to {}", ds.sequences.len(), ds.num_events(), out.display());
        }
        Command::Train(a) => {
            let a: CommonArgs = a.into();
            let h = cmd_train(&a)?;
            let best = h.epochs.iter().find(|e| e.epoch == h.best_epoch);
            println!(
                "trained {} epochs; best epoch {} (valid loss {}); checkpoint {}",
                h.epochs.len(),
                h.best_epoch,
                best.map_or(f64::NAN, |e| e.valid_loss),
                a.out.display()
            );
        }
        Command::Sample { run, ckpt, whole } => {
            let a: CommonArgs = run.into();
            let n = cmd_sample(&a, &ckpt, whole)?;
            println!("wrote samples for {n} events to {}", a.out.display());
        }
        Command::Eval { run, ckpt, whole } => {
            let a: CommonArgs = run.into();
            let ev = cmd_eval(&a, &ckpt, whole)?;
            println!("{}", serde_json::to_string(&ev.report)?);
        }
        Command::SweepNoise { run, sigmas } => sweep(Sweep::Noise, run.into(), &sigmas)?,
        Command::SweepAlpha { run, alphas } => sweep(Sweep::Alpha, run.into(), &alphas)?,
    }
    Ok(())
}

fn sweep(kind: Sweep, a: CommonArgs, values: &[f64]) -> Result<()> {
    let rows = cmd_sweep(kind, &a, values)?;
    let failed = rows.iter().filter(|r| r.is_err()).count();
    println!("{} rows ({failed} failed) written to {}", rows.len(), a.out.display());
    Ok(())
}

fn error_line(msg: &str) -> String {
    serde_json::json!({ "error": msg }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", error_line(first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&one_line(&e)));
            ExitCode::FAILURE
        }
    }
}
