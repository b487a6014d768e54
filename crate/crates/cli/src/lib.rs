//! Command implementations behind the `smash` binary. Every command is a
//! plain function so that tests can drive the same code paths.

pub mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::json;
use smash::events::{normalize, Dataset, NormDivisor};
use smash::objectives::Mode;
use smash::oracles::OracleConfig;
use smash::sampler::ModelSampler;
use smash::trainer::{self, dataset_for_mode, Checkpoint, Evaluation, History};

pub use config::{ConfigFile, Overrides, RunConfig};

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{what} not found: {}", path.display());
    }
    Ok(())
}

fn require_out_dir(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => bail!("output directory not found: {}", p.display()),
        _ => Ok(()),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Sibling of `out` with its extension replaced, e.g. `m.ckpt` -> `m.history.csv`.
pub fn sibling(out: &Path, ext: &str) -> PathBuf {
    out.with_extension(ext)
}

/// Provenance block written into artifacts: command, seed and the resolved
/// configuration. Paths are left out so that reruns elsewhere compare equal.
pub fn echo(command: &str, seed: u64, rc: &RunConfig) -> serde_json::Value {
    json!({ "command": command, "seed": seed, "config": rc })
}

/// CSV preamble carrying the echo as a `#` comment line.
pub fn csv_preamble(echo: &serde_json::Value) -> String {
    format!("# {}\n", echo)
}

fn file_config(path: Option<&Path>) -> Result<ConfigFile> {
    match path {
        Some(p) => {
            require_file(p, "config")?;
            ConfigFile::load(p)
        }
        None => Ok(ConfigFile::default()),
    }
}

pub fn load_oracle(path: &Path) -> Result<OracleConfig> {
    require_file(path, "oracle parameters")?;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let oc: OracleConfig = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).with_context(|| format!("oracle parameters {}", path.display()))?
    } else {
        toml::from_str(&text).with_context(|| format!("oracle parameters {}", path.display()))?
    };
    oc.validate()?;
    Ok(oc)
}

pub fn cmd_synth(oracle: &Path, horizon: f64, num_sequences: usize, seed: u64, out: &Path) -> Result<Dataset> {
    require_out_dir(out)?;
    let oc = load_oracle(oracle)?;
    let ds = oc.synthesize(horizon, num_sequences, seed)?;
    ds.save_jsonl(out)?;
    Ok(ds)
}

/// Train/valid/test parts of a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

pub fn load_data(path: &Path, mode: Mode) -> Result<Dataset> {
    require_file(path, "data")?;
    let ds = Dataset::load_jsonl(path)?;
    Ok(dataset_for_mode(&ds, mode)?)
}

pub fn split(ds: &Dataset, split_seed: u64) -> Result<Splits> {
    let (train, valid, test) = ds.split(split_seed)?;
    Ok(Splits { train, valid, test })
}

/// Normalizes on the training part and trains.
pub fn fit(rc: &RunConfig, train: &Dataset, valid: &Dataset, mut on_epoch: impl FnMut(&trainer::EpochRecord)) -> Result<(Checkpoint, History)> {
    let (ntr, stats) = normalize(train, NormDivisor::Variance)?;
    let nva = stats.normalize_dataset(valid)?;
    let (model, hist) = trainer::train(&ntr, &nva, &rc.model, &rc.train, &mut on_epoch)?;
    Ok((
        Checkpoint {
            model,
            stats,
            train_config: Some(rc.train.clone()),
        },
        hist,
    ))
}

/// Samples every predictable event of `test` from the checkpoint's model and
/// scores the samples.
pub fn evaluate(ckpt: &Checkpoint, test: &Dataset, rc: &RunConfig, seed: u64) -> Result<Evaluation> {
    let sampler = ModelSampler {
        model: &ckpt.model,
        stats: &ckpt.stats,
        config: rc.sampler.clone(),
    };
    Ok(trainer::evaluate(
        &sampler,
        test,
        rc.sampler.num_samples,
        &rc.time_levels,
        Some(&rc.space_levels),
        seed,
    )?)
}

#[derive(Debug, Clone, Default)]
pub struct CommonArgs {
    pub data: PathBuf,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub mode: Option<Mode>,
    pub levels: Option<String>,
    pub num_samples: Option<usize>,
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            mode: self.mode,
            levels: self.levels.clone(),
            num_samples: self.num_samples,
        }
    }
}

/// Loads the config file and data and resolves the run configuration.
pub fn prepare(args: &CommonArgs) -> Result<(RunConfig, Dataset)> {
    let file = file_config(args.config.as_deref())?;
    let mode = match args.mode {
        Some(m) => m,
        None => file.mode()?.unwrap_or_default(),
    };
    let ds = load_data(&args.data, mode)?;
    let mut ov = args.overrides();
    ov.mode = Some(mode);
    let rc = RunConfig::resolve(&file, ds.num_marks, ds.spatial_dim, &ov)?;
    Ok((rc, ds))
}

pub fn cmd_train(args: &CommonArgs) -> Result<History> {
    require_out_dir(&args.out)?;
    let (rc, ds) = prepare(args)?;
    let parts = split(&ds, rc.data.split_seed)?;
    let (ckpt, hist) = fit(&rc, &parts.train, &parts.valid, |_| {})?;
    ckpt.save(&args.out)?;
    let mut csv = csv_preamble(&echo("train", args.seed, &rc));
    csv.push_str(&hist.to_csv());
    write(&sibling(&args.out, "history.csv"), csv)?;
    Ok(hist)
}

/// Configuration for sampling from a checkpoint: the model and training
/// settings come from the checkpoint, everything else from the file/flags.
fn prepare_checkpoint(args: &CommonArgs, ckpt_path: &Path, whole: bool) -> Result<(RunConfig, Checkpoint, Dataset)> {
    require_file(ckpt_path, "checkpoint")?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    let mc = &ckpt.model.config;
    let mode = if mc.spatial_dim == 0 { Mode::Tpp } else { Mode::Stpp };
    if args.mode.is_some_and(|m| m != mode) {
        bail!("--mode {:?} does not match the checkpoint (spatial_dim = {})", args.mode.unwrap(), mc.spatial_dim);
    }
    let file = file_config(args.config.as_deref())?;
    let ds = load_data(&args.data, mode)?;
    if ds.num_marks != mc.num_marks || ds.spatial_dim != mc.spatial_dim {
        bail!(
            "data has M={} d={}, checkpoint expects M={} d={}",
            ds.num_marks,
            ds.spatial_dim,
            mc.num_marks,
            mc.spatial_dim
        );
    }
    let mut ov = args.overrides();
    ov.mode = Some(mode);
    let mut rc = RunConfig::resolve(&file, ds.num_marks, ds.spatial_dim, &ov)?;
    rc.model = mc.clone();
    if let Some(tc) = &ckpt.train_config {
        rc.train = tc.clone();
    }
    let test = if whole { ds } else { split(&ds, rc.data.split_seed)?.test };
    Ok((rc, ckpt, test))
}

pub fn cmd_sample(args: &CommonArgs, ckpt_path: &Path, whole: bool) -> Result<usize> {
    require_out_dir(&args.out)?;
    let (rc, ckpt, test) = prepare_checkpoint(args, ckpt_path, whole)?;
    let sampler = ModelSampler {
        model: &ckpt.model,
        stats: &ckpt.stats,
        config: rc.sampler.clone(),
    };
    let (_, _, records) = trainer::draw_samples(&sampler, &test, rc.sampler.num_samples, args.seed)?;
    let mut s = json!({ "header": echo("sample", args.seed, &rc) }).to_string();
    s.push('\n');
    for r in &records {
        s.push_str(&r.to_json_line());
        s.push('\n');
    }
    write(&args.out, s)?;
    Ok(records.len())
}

pub fn cmd_eval(args: &CommonArgs, ckpt_path: &Path, whole: bool) -> Result<Evaluation> {
    require_out_dir(&args.out)?;
    let (rc, ckpt, test) = prepare_checkpoint(args, ckpt_path, whole)?;
    let ev = evaluate(&ckpt, &test, &rc, args.seed)?;
    write_evaluation(&args.out, &ev, &echo("eval", args.seed, &rc))?;
    Ok(ev)
}

/// Metrics JSON at `out`, plus calibration CSV and sample dump beside it.
pub fn write_evaluation(out: &Path, ev: &Evaluation, echo: &serde_json::Value) -> Result<()> {
    let mut report = serde_json::to_value(&ev.report)?;
    report["config"] = echo.clone();
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    write(out, text)?;
    let mut csv = csv_preamble(echo);
    csv.push_str(&ev.report.calibration_csv());
    write(&sibling(out, "calibration.csv"), csv)?;
    let mut samples = json!({ "header": echo }).to_string();
    samples.push('\n');
    samples.push_str(&ev.samples_jsonl());
    write(&sibling(out, "samples.jsonl"), samples)
}

/// Which hyperparameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sweep {
    Noise,
    Alpha,
}

impl Sweep {
    fn name(self) -> &'static str {
        match self {
            Sweep::Noise => "sweep-noise",
            Sweep::Alpha => "sweep-alpha",
        }
    }

    fn header(self) -> &'static str {
        match self {
            Sweep::Noise => "sigma,cs_time,mae_time,cs_space,mae_space",
            Sweep::Alpha => "alpha,cs_time,cs_space,ece",
        }
    }

    /// Applies grid value `v` to a copy of the base configuration.
    pub fn apply(self, base: &RunConfig, v: f64) -> RunConfig {
        let mut rc = base.clone();
        match self {
            Sweep::Noise => {
                rc.train.sigma_t = v;
                rc.train.sigma_x.iter_mut().for_each(|s| *s = v);
                rc.sampler.sigma_t = v;
                rc.sampler.sigma_x.iter_mut().for_each(|s| *s = v);
            }
            Sweep::Alpha => rc.train.alpha = v,
        }
        rc
    }

    fn row(self, v: f64, ev: &Evaluation) -> String {
        let r = &ev.report;
        let opt = |x: Option<f64>| x.map_or(String::new(), |x| x.to_string());
        match self {
            Sweep::Noise => format!("{v},{},{},{},{}", r.cs_time, r.mae_time, opt(r.cs_space), opt(r.mae_space)),
            Sweep::Alpha => format!("{v},{},{},{}", r.cs_time, opt(r.cs_space), r.ece),
        }
    }

    fn failed_row(self, v: f64) -> String {
        let n = self.header().matches(',').count();
        format!("{v}{}", ",".repeat(n))
    }
}

/// Outcome of one sweep row.
pub type RowResult = Result<Evaluation>;

/// Runs one train+eval per value, in order. Row `i` uses seed `seed + i`.
/// A failing row is reported in the CSV and the sweep continues.
pub fn run_sweep(kind: Sweep, base: &RunConfig, parts: &Splits, values: &[f64], seed: u64) -> (String, Vec<RowResult>) {
    let mut csv = csv_preamble(&json!({ "command": kind.name(), "seed": seed, "values": values, "config": base }));
    csv.push_str(kind.header());
    csv.push('\n');
    let mut results = Vec::with_capacity(values.len());
    for (i, &v) in values.iter().enumerate() {
        let row_seed = seed + i as u64;
        let res = (|| -> Result<Evaluation> {
            let mut rc = kind.apply(base, v);
            rc.train.seed = row_seed;
            rc.train.validate(rc.model.spatial_dim)?;
            rc.sampler.validate(rc.model.spatial_dim)?;
            let (ckpt, _) = fit(&rc, &parts.train, &parts.valid, |_| {})?;
            evaluate(&ckpt, &parts.test, &rc, row_seed)
        })();
        match &res {
            Ok(ev) => csv.push_str(&kind.row(v, ev)),
            Err(e) => {
                let _ = writeln!(csv, "# row {i} failed: {}", one_line(e));
                csv.push_str(&kind.failed_row(v));
            }
        }
        csv.push('\n');
        results.push(res);
    }
    (csv, results)
}

pub fn cmd_sweep(kind: Sweep, args: &CommonArgs, values: &[f64]) -> Result<Vec<RowResult>> {
    require_out_dir(&args.out)?;
    if values.is_empty() {
        bail!("sweep needs at least one value");
    }
    let (rc, ds) = prepare(args)?;
    let parts = split(&ds, rc.data.split_seed)?;
    let (csv, results) = run_sweep(kind, &rc, &parts, values, args.seed);
    write(&args.out, csv)?;
    Ok(results)
}

/// Error chain on a single line.
pub fn one_line(e: &anyhow::Error) -> String {
    format!("{e:#}").replace(['\n', '\r'], " ")
}
