use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lasaft::data::WavFormat;
use lasaft_cli::commands::{self, EvaluateArgs, SynthArgs};
use lasaft_cli::CliError;

#[derive(Parser)]
#[command(name = "lasaft", version, about = "Conditioned music source separation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Pcm16,
    Float32,
}

impl From<Format> for WavFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Pcm16 => WavFormat::Pcm16,
            Format::Float32 => WavFormat::Float32,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-source dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 36)]
        tracks: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
        /// Track length in seconds.
        #[arg(long, default_value_t = 6.0)]
        duration: f64,
        #[arg(long, default_value_t = 16000)]
        sample_rate: u32,
        #[arg(long, value_enum, default_value = "pcm16")]
        format: Format,
    },
    /// Train a model; writes the best checkpoint and the history CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// `key=value` or `section.key=value`, applied after the file in order.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Shorthand for `--override train.seed=S`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Extract one instrument from a mixture.
    Separate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        instrument: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "float32")]
        format: Format,
    },
    /// Median SDR on the test partition, merged with earlier report CSVs.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report CSVs to merge; runs named `label@n` average into one row.
        #[arg(long = "runs-csv")]
        runs_csv: Vec<PathBuf>,
        /// Where to write the combined report CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run name for the checkpoint's scores.
        #[arg(long, default_value = "model")]
        run: String,
        /// Also score the mixture as every source's estimate.
        #[arg(long)]
        baseline: bool,
    },
    /// Gradient checks, STFT round-trip, modulation identities, attention
    /// normalization and blend convexity.
    Selftest {
        /// Run only these checks.
        #[arg(long)]
        only: Vec<String>,
        /// Test hook: perturb the named check so that it must fail.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
        /// List check names and exit.
        #[arg(long)]
        list: bool,
    },
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("LASAFT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("LASAFT_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("LASAFT_THREADS: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Synth {
            out,
            tracks,
            seed,
            force,
            duration,
            sample_rate,
            format,
        } => {
            let ds = commands::synth(&SynthArgs {
                out,
                tracks,
                seed,
                force,
                duration,
                sample_rate,
                format: format.into(),
            })?;
            println!("wrote {} tracks to {}", ds.entries.len(), ds.root.display());
        }
        Command::Train { config, mut overrides, seed } => {
            if let Some(s) = seed {
                overrides.push(format!("train.seed={s}"));
            }
            let cfg = commands::load_run_config(&config, &overrides)?;
            let o = commands::train(&cfg)?;
            println!(
                "best step {} (validation MAE {:.5}); wrote {} and {}",
                o.best_step,
                o.best_val_mae,
                o.checkpoint.display(),
                o.history.display()
            );
        }
        Command::Separate {
            checkpoint,
            input,
            instrument,
            out,
            format,
        } => commands::separate(&checkpoint, &input, &instrument, &out, format.into())?,
        Command::Evaluate {
            checkpoint,
            data,
            runs_csv,
            out,
            run,
            baseline,
        } => {
            let (_, table) = commands::evaluate(&EvaluateArgs {
                checkpoint,
                data,
                runs_csv,
                out,
                run,
                baseline,
            })?;
            print!("{table}");
        }
        Command::Selftest { only, corrupt, list } => {
            if list {
                for n in lasaft_cli::selftest::names() {
                    println!("{n}");
                }
                return Ok(());
            }
            let outcomes = commands::selftest(&only, corrupt.as_deref())?;
            let mut failed = Vec::new();
            for o in &outcomes {
                let verdict = if o.passed { "PASS" } else { "FAIL" };
                println!("{verdict} {} ({:.1}s): {}", o.name, o.seconds, o.detail);
                if !o.passed {
                    failed.push(o.name);
                }
            }
            if !failed.is_empty() {
                return Err(CliError::Numeric(format!("failed checks: {}", failed.join(", "))));
            }
            println!("all {} checks passed", outcomes.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
