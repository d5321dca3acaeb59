use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use indexmap::IndexMap;
use lasaft::data::{dataset_split, load_wav, save_wav, synth_track, Dataset, Partition, SynthSpec, Track, WavFormat, DESK_SPLIT};
use lasaft::evaluation::{aggregate_runs, evaluate_mixture_baseline, evaluate_model, format_table, EvalReport, CSV_HEADER};
use lasaft::model::Model;
use lasaft::numerics::RngStream;
use lasaft::training::fit;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::selftest;

pub const CHECKPOINT_FILE: &str = "best.lsft";
pub const HISTORY_FILE: &str = "history.csv";

#[derive(Clone, Debug)]
pub struct SynthArgs {
    pub out: PathBuf,
    pub tracks: usize,
    pub seed: u64,
    pub force: bool,
    pub duration: f64,
    pub sample_rate: u32,
    pub format: WavFormat,
}

/// Per-track synthesis seed: independent streams forked from the run seed.
pub fn track_seed(seed: u64, index: usize) -> u64 {
    RngStream::new(seed).fork(index as u64).next_u64()
}

pub fn synth(args: &SynthArgs) -> Result<Dataset, CliError> {
    if args.tracks == 0 {
        return Err(CliError::Usage("--tracks must be at least 1".into()));
    }
    if args.out.exists() {
        let mut entries = fs::read_dir(&args.out).map_err(|e| CliError::io(&args.out, e))?;
        if entries.next().is_some() && !args.force {
            return Err(CliError::Usage(format!(
                "{} exists and is not empty; pass --force to overwrite",
                args.out.display()
            )));
        }
    }
    let tracks: Vec<Track> = (0..args.tracks)
        .map(|i| {
            let spec = SynthSpec {
                duration: args.duration,
                sample_rate: args.sample_rate,
                seed: track_seed(args.seed, i),
            };
            synth_track(format!("track-{i:03}"), &spec)
        })
        .collect::<lasaft::Result<_>>()?;
    let ids: Vec<String> = tracks.iter().map(|t| t.id.clone()).collect();
    let split = dataset_split(&ids, args.seed, DESK_SPLIT)?;
    let ds = Dataset::write(&args.out, &tracks, &split, args.format)?;
    for p in Partition::ALL {
        log::info!("{p}: {} tracks", ds.ids(p).len());
    }
    Ok(ds)
}

/// Reads the configuration file and applies overrides in order.
pub fn load_run_config(path: &Path, overrides: &[String]) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut cfg = RunConfig::parse(&text, base)?;
    for o in overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub best_step: usize,
    pub best_val_mae: f64,
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutcome, CliError> {
    let root = cfg.data_root.as_ref().expect("validated");
    let out = cfg.out_dir.as_ref().expect("validated");
    let ds = Dataset::open(root)?;
    let train = ds.load_partition(Partition::Train, &cfg.model.instruments)?;
    let val = ds.load_partition(Partition::Validation, &cfg.model.instruments)?;
    if train.is_empty() || val.is_empty() {
        return Err(CliError::Usage(format!(
            "`root`: dataset at {} needs training and validation tracks",
            root.display()
        )));
    }
    let mut model = Model::<f32>::build(&cfg.model, cfg.train.seed)?;
    log::info!(
        "{} parameters, {}+{}, {} training / {} validation tracks",
        model.params.numel(),
        cfg.model.modulation,
        cfg.model.ft_block,
        train.len(),
        val.len()
    );
    let t = Instant::now();
    let report = fit(&mut model, &train, &val, &cfg.train, |row| {
        log::info!(
            "step {} loss {:.5} val mae {:.5} ({:.0}s)",
            row.step,
            row.train_loss,
            row.mean_val_mae(),
            t.elapsed().as_secs_f64()
        )
    })
    .map_err(|e| match e {
        lasaft::Error::NonFinite { what } => CliError::Numeric(format!("non-finite value in {what}")),
        e => e.into(),
    })?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    report.best.save_checkpoint(&checkpoint)?;
    let history = out.join(HISTORY_FILE);
    let mut buf = Vec::new();
    report.history.write_csv(&mut buf)?;
    fs::write(&history, buf).map_err(|e| CliError::io(&history, e))?;
    Ok(TrainOutcome {
        checkpoint,
        history,
        best_step: report.best_step,
        best_val_mae: report.best_val_mae,
    })
}

pub fn separate(checkpoint: &Path, input: &Path, instrument: &str, out: &Path, format: WavFormat) -> Result<(), CliError> {
    let model = Model::<f32>::load_checkpoint(checkpoint)?;
    // resolve the instrument before touching the audio
    model.condition(instrument)?;
    let w = load_wav(input)?;
    let y = model.separate(&w, instrument)?;
    save_wav(&y, out, format)?;
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct EvaluateArgs {
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub runs_csv: Vec<PathBuf>,
    pub out: Option<PathBuf>,
    pub run: String,
    pub baseline: bool,
}

/// Table row label of a run: the name up to an optional `@` suffix, so
/// `lasaft@1`, `lasaft@2`, `lasaft@3` average into one row.
pub fn run_label(run: &str) -> &str {
    run.split('@').next().unwrap_or(run)
}

pub fn evaluate(args: &EvaluateArgs) -> Result<(Vec<EvalReport>, String), CliError> {
    let mut reports = Vec::new();
    for path in &args.runs_csv {
        let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
        reports.extend(EvalReport::read_csv(file)?);
    }
    let needs_data = args.checkpoint.is_some() || args.baseline;
    let tracks = match (&args.data, needs_data) {
        (Some(root), true) => {
            if !root.join(lasaft::data::MANIFEST).is_file() {
                return Err(CliError::Usage(format!("--data: no dataset manifest under {}", root.display())));
            }
            Some(Dataset::open(root)?)
        }
        (None, true) => return Err(CliError::Usage("--data is required with --checkpoint or --baseline".into())),
        _ => None,
    };
    let mut instruments: Vec<String> = reports.first().map(|r| r.instruments.clone()).unwrap_or_default();
    if let (Some(ckpt), Some(ds)) = (&args.checkpoint, &tracks) {
        let model = Model::<f32>::load_checkpoint(ckpt)?;
        instruments = model.config.instruments.clone();
        let test = ds.load_partition(Partition::Test, &instruments)?;
        let r = evaluate_model(&model, &test, &args.run)?;
        for s in &r.skipped {
            log::warn!("skipped {}/{}: {}", s.track, s.instrument, s.reason);
        }
        reports.push(r);
    }
    if let (true, Some(ds)) = (args.baseline, &tracks) {
        if instruments.is_empty() {
            instruments = lasaft::conditioning::DEFAULT_INSTRUMENTS.iter().map(|s| s.to_string()).collect();
        }
        let test = ds.load_partition(Partition::Test, &instruments)?;
        reports.push(evaluate_mixture_baseline(&test, &instruments)?);
    }
    if reports.is_empty() {
        return Err(CliError::Usage("nothing to evaluate: pass --checkpoint, --baseline or --runs-csv".into()));
    }
    let mut groups: IndexMap<String, Vec<EvalReport>> = IndexMap::new();
    for r in &reports {
        groups.entry(run_label(&r.run).to_string()).or_default().push(r.clone());
    }
    let rows = groups
        .into_iter()
        .map(|(label, rs)| Ok((label, aggregate_runs(&rs)?)))
        .collect::<lasaft::Result<Vec<_>>>()?;
    if instruments.is_empty() {
        instruments = rows[0].1.means.keys().cloned().collect();
    }
    if let Some(path) = &args.out {
        write_reports(path, &reports)?;
    }
    Ok((reports, format_table(&instruments, &rows)))
}

pub fn write_reports(path: &Path, reports: &[EvalReport]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Usage(format!("writing {}: {e}", path.display()));
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in reports {
        r.write_csv(&mut w)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Usage(format!("writing {}: {e}", path.display())))?;
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Runs the named suites (all when empty); `corrupt` names one suite whose
/// measured quantity is deliberately perturbed.
pub fn selftest(only: &[String], corrupt: Option<&str>) -> Result<Vec<selftest::Outcome>, CliError> {
    let known = selftest::names();
    for n in only.iter().map(String::as_str).chain(corrupt) {
        if !known.contains(&n) {
            return Err(CliError::Usage(format!("unknown check `{n}`; valid checks: {}", known.join(", "))));
        }
    }
    Ok(known
        .into_iter()
        .filter(|n| only.is_empty() || only.iter().any(|o| o == n))
        .filter_map(|n| selftest::run(n, corrupt == Some(n)))
        .collect())
}
