//! Subcommand implementations. Every command is a pure function of its
//! config file, seed, and input files: datasets are rebuilt from their spec
//! instead of read back, conditional windows come from the held-out tail of
//! the train/test split, and all output files are written deterministically.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use tsdiff_core::data::{
    self, gen_mask, split_train_test, DatasetManifest, MaskSpec, Normalizer, TrendSeasonSample,
    MANIFEST_FORMAT,
};
use tsdiff_core::denoiser::{DenoiserConfig, DenoiserModel};
use tsdiff_core::error::CoreError;
use tsdiff_core::metrics::{self, MetricConfig};
use tsdiff_core::sampling::{
    sample_conditional_batch, sample_unconditional, ConditionSpec, ConditionalMode,
};
use tsdiff_core::schedule::{cosine_schedule, NoiseSchedule, DEFAULT_COSINE_OFFSET};
use tsdiff_core::training::{self, TrainOutputs, TrainState};
use tsdiff_core::Tensor;

use crate::config::{load_config, DatasetSpec, RunConfig};

/// Fraction of dataset windows used for training; the rest are the
/// held-out references that impute and forecast condition on.
pub const TRAIN_FRACTION: f64 = 0.9;

/// Environment variable giving the default output root.
pub const OUT_ENV: &str = "TSDIFF_OUT";

/// Failures split by exit code: usage/config errors exit 2, runtime
/// failures (divergence, non-finite values, broken writes) exit 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> CliError {
        match e {
            CoreError::Diverged { .. } | CoreError::NonFinite { .. } => {
                CliError::Runtime(e.to_string())
            }
            CoreError::Io(ref io) if io.kind() != std::io::ErrorKind::NotFound => {
                CliError::Runtime(e.to_string())
            }
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::from(CoreError::Io(e))
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

type Result<T> = std::result::Result<T, CliError>;

// ---- shared plumbing --------------------------------------------------------

/// --out beats the config's output_dir beats $TSDIFF_OUT; the directory is
/// created if needed.
fn resolve_out(flag: Option<&Path>, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = flag
        .map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .ok_or_else(|| {
            usage(format!(
                "no output directory: pass --out, set output_dir in the config, or export {OUT_ENV}"
            ))
        })?;
    fs::create_dir_all(&dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

/// Model-ready windows plus everything the manifest records about them.
struct Dataset {
    windows: Vec<Tensor>,
    normalizer: Normalizer,
    source: &'static str,
    /// Raw ground-truth parts, kept only by the trend+season generator.
    components: Option<Vec<TrendSeasonSample>>,
}

fn build_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    match spec {
        DatasetSpec::Sines { n_windows, tau, dim, options } => {
            let windows = data::gen_sines(*n_windows, *tau, *dim, seed, options)?;
            // Already in [0, 1]: the identity map keeps stored == raw.
            let normalizer = Normalizer { mins: vec![0.0; *dim], maxs: vec![1.0; *dim] };
            Ok(Dataset { windows, normalizer, source: spec.source_name(), components: None })
        }
        DatasetSpec::TrendSeason { n_windows, tau, options } => {
            let samples = data::gen_trend_season(*n_windows, *tau, seed, options)?;
            let series: Vec<Tensor> = samples.iter().map(|s| s.series.clone()).collect();
            let normalizer = Normalizer::fit(&series)?;
            let windows = normalizer.normalize_batch(&series)?;
            Ok(Dataset {
                windows,
                normalizer,
                source: spec.source_name(),
                components: Some(samples),
            })
        }
        DatasetSpec::Csv { path, tau, stride } => {
            let (windows, normalizer) = data::load_csv(path, *tau, stride.unwrap_or(*tau))?;
            Ok(Dataset { windows, normalizer, source: spec.source_name(), components: None })
        }
    }
}

fn window_shape(windows: &[Tensor]) -> (usize, usize) {
    let shape = windows[0].shape();
    (shape[0], shape[1])
}

fn require_dataset<'a>(cfg: &'a RunConfig, why: &str) -> Result<&'a DatasetSpec> {
    cfg.dataset.as_ref().ok_or_else(|| usage(format!("config has no dataset section; {why}")))
}

fn model_schedule(mcfg: &DenoiserConfig) -> Result<NoiseSchedule> {
    Ok(cosine_schedule(mcfg.timesteps, DEFAULT_COSINE_OFFSET)?)
}

/// The checkpoint rules the run; a config that also pins the geometry must
/// agree with it on tau, dim, and timesteps.
fn check_compat(cfg: &RunConfig, mcfg: &DenoiserConfig) -> Result<()> {
    if let Some(m) = &cfg.model {
        if (m.tau, m.dim, m.timesteps) != (mcfg.tau, mcfg.dim, mcfg.timesteps) {
            return Err(usage(format!(
                "checkpoint disagrees with the config's model section: \
                 tau/dim/timesteps {}x{}/{} vs {}x{}/{}",
                mcfg.tau, mcfg.dim, mcfg.timesteps, m.tau, m.dim, m.timesteps
            )));
        }
    }
    if let Some(ds) = &cfg.dataset {
        let tau = ds.tau();
        let dim = ds.dim();
        if tau != mcfg.tau || dim.is_some_and(|d| d != mcfg.dim) {
            return Err(usage(format!(
                "checkpoint expects {}x{} windows but the dataset yields {}x{}",
                mcfg.tau,
                mcfg.dim,
                tau,
                dim.map_or_else(|| "?".into(), |d| d.to_string())
            )));
        }
    }
    Ok(())
}

// ---- gendata ----------------------------------------------------------------

pub fn gendata(config: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config)?;
    let seed = seed.unwrap_or(cfg.seed);
    let out = resolve_out(out, &cfg)?;
    let spec = require_dataset(&cfg, "gendata needs one to generate")?;
    let ds = build_dataset(spec, seed)?;
    let (tau, dim) = window_shape(&ds.windows);

    let windows_path = out.join("windows.csv");
    data::write_windows_csv(&windows_path, &ds.windows)?;
    if let Some(samples) = &ds.components {
        data::write_components_csv(&out.join("components.csv"), samples)?;
    }
    let manifest = DatasetManifest {
        format: MANIFEST_FORMAT.into(),
        source: ds.source.into(),
        n_windows: ds.windows.len(),
        tau,
        dim,
        seed,
        normalizer: ds.normalizer,
    };
    data::write_manifest(&manifest, &out.join("manifest.json"))?;
    println!(
        "wrote {} windows ({tau}x{dim}, {}) to {}",
        ds.windows.len(),
        ds.source,
        windows_path.display()
    );
    Ok(())
}

// ---- train --------------------------------------------------------------------

pub fn train(config: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config)?;
    let seed = seed.unwrap_or(cfg.seed);
    let out = resolve_out(out, &cfg)?;
    let spec = require_dataset(&cfg, "train needs windows to fit")?;
    let mcfg = cfg.model.clone().ok_or_else(|| usage("config has no model section"))?;
    let tcfg = cfg.train.clone().unwrap_or_default();

    let ds = build_dataset(spec, seed)?;
    let (tau, dim) = window_shape(&ds.windows);
    if (tau, dim) != (mcfg.tau, mcfg.dim) {
        return Err(usage(format!(
            "dataset windows are {tau}x{dim} but the model wants {}x{}",
            mcfg.tau, mcfg.dim
        )));
    }
    let (train_windows, held_out) = split_train_test(&ds.windows, TRAIN_FRACTION);
    log::info!(
        "training on {} windows, holding out {}",
        train_windows.len(),
        held_out.len()
    );

    let schedule = model_schedule(&mcfg)?;
    let checkpoint = out.join("checkpoint.json");
    let loss_csv = out.join("loss.csv");

    let (mut model, resume) = if checkpoint.exists() {
        let (model, state_json) = DenoiserModel::load(&checkpoint)?;
        if model.config() != &mcfg {
            return Err(usage(format!(
                "existing checkpoint {} was trained under a different model config",
                checkpoint.display()
            )));
        }
        let state: TrainState = state_json
            .ok_or_else(|| usage("checkpoint carries no training state to resume from"))
            .and_then(|v| {
                serde_json::from_value(v)
                    .map_err(|e| usage(format!("checkpoint training state is malformed: {e}")))
            })?;
        if state.step >= tcfg.steps {
            println!(
                "training already complete: checkpoint is at step {} of {}",
                state.step, tcfg.steps
            );
            return Ok(());
        }
        println!("resuming from step {}", state.step);
        (model, Some(state))
    } else {
        (DenoiserModel::new(mcfg.clone(), seed)?, None)
    };
    println!("model parameters: {}", model.total_params());

    let outputs = TrainOutputs { loss_csv: Some(&loss_csv), checkpoint: Some(&checkpoint) };
    let summary =
        training::train(&mut model, &schedule, &train_windows, &tcfg, seed, resume, &outputs)?;
    if summary.steps_run == 0 {
        println!("wrote the initialized model to {}", checkpoint.display());
    } else {
        println!(
            "trained {} steps; final loss {:.6} (smoothed {:.6}); checkpoint {}",
            summary.steps_run,
            summary.final_loss,
            summary.final_smoothed,
            checkpoint.display()
        );
    }
    Ok(())
}

// ---- sample -------------------------------------------------------------------

pub fn sample(
    config: &Path,
    checkpoint: &Path,
    out: Option<&Path>,
    seed: Option<u64>,
    workers: usize,
) -> Result<()> {
    let cfg = load_config(config)?;
    let seed = seed.unwrap_or(cfg.seed);
    let out = resolve_out(out, &cfg)?;
    let (model, _) = DenoiserModel::load(checkpoint)?;
    check_compat(&cfg, model.config())?;
    let req = cfg.sample.clone().unwrap_or_default();
    let mcfg = model.config().clone();

    let schedule = model_schedule(&mcfg)?;
    let samples = sample_unconditional(
        &model,
        &schedule,
        req.n_samples,
        mcfg.tau,
        mcfg.dim,
        seed,
        workers,
    )?;
    let samples = data::clamp_to_range(&samples, 0.0, 1.0);
    let path = out.join("samples.csv");
    data::write_windows_csv(&path, &samples)?;
    println!("wrote {} samples ({}x{}) to {}", samples.len(), mcfg.tau, mcfg.dim, path.display());
    Ok(())
}

// ---- impute / forecast ----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Impute,
    Forecast,
}

impl Task {
    fn name(self) -> &'static str {
        match self {
            Task::Impute => "impute",
            Task::Forecast => "forecast",
        }
    }
}

/// Per-run masked-error record written next to the conditional outputs.
#[derive(Debug, Serialize)]
struct MaskedSummary {
    task: String,
    mode: ConditionalMode,
    seed: u64,
    n_windows: usize,
    /// Coordinates the mask hid, summed over all windows.
    missing_coords: usize,
    /// Mean squared error over hidden coordinates; null when none are hidden.
    masked_mse: Option<f64>,
    per_window_mse: Vec<Option<f64>>,
}

pub fn conditional(
    task: Task,
    config: &Path,
    checkpoint: &Path,
    out: Option<&Path>,
    seed: Option<u64>,
    workers: usize,
) -> Result<()> {
    let cfg = load_config(config)?;
    let seed = seed.unwrap_or(cfg.seed);
    let out = resolve_out(out, &cfg)?;
    let (model, _) = DenoiserModel::load(checkpoint)?;
    check_compat(&cfg, model.config())?;
    let mcfg = model.config().clone();

    let cond = cfg
        .condition
        .clone()
        .ok_or_else(|| usage(format!("config has no condition section; {} needs a mask", task.name())))?;
    match (task, &cond.mask) {
        (Task::Impute, MaskSpec::Geometric { .. }) => {}
        (Task::Forecast, MaskSpec::Forecast { .. }) => {}
        (Task::Impute, _) => {
            return Err(usage("impute needs condition.mask.kind = \"geometric\""));
        }
        (Task::Forecast, _) => {
            return Err(usage("forecast needs condition.mask.kind = \"forecast\""));
        }
    }

    let spec = require_dataset(&cfg, "conditioning needs reference windows")?;
    let ds = build_dataset(spec, seed)?;
    let (tau, dim) = window_shape(&ds.windows);
    if (tau, dim) != (mcfg.tau, mcfg.dim) {
        return Err(usage(format!(
            "dataset windows are {tau}x{dim} but the checkpoint wants {}x{}",
            mcfg.tau, mcfg.dim
        )));
    }
    let req = cfg.sample.clone().unwrap_or_default();
    let (_, held_out) = split_train_test(&ds.windows, TRAIN_FRACTION);
    if held_out.len() < req.n_samples {
        return Err(usage(format!(
            "need {} held-out windows but the test split has only {}; \
             grow dataset.n_windows or lower sample.n_samples",
            req.n_samples,
            held_out.len()
        )));
    }
    let references = &held_out[..req.n_samples];

    // Window j gets mask sub-stream j and sampling sub-stream j.
    let mut specs = Vec::with_capacity(references.len());
    for (j, reference) in references.iter().enumerate() {
        let mask = gen_mask(&cond.mask, tau, dim, seed, j as u64)?;
        specs.push(ConditionSpec {
            reference: reference.clone(),
            mask,
            eta: cond.eta,
            gamma: cond.gamma,
            iters: cond.iters,
        });
    }
    let schedule = model_schedule(&mcfg)?;
    let outputs = sample_conditional_batch(&model, &schedule, &specs, req.mode, seed, workers)?;
    let outputs = data::clamp_to_range(&outputs, 0.0, 1.0);

    let outputs_path = out.join("outputs.csv");
    data::write_windows_csv(&outputs_path, &outputs)?;
    write_pairs_csv(&out.join("pairs.csv"), &specs, &outputs)?;

    let mut per_window = Vec::with_capacity(outputs.len());
    let (mut total_err, mut total_missing) = (0.0, 0usize);
    for (spec, output) in specs.iter().zip(&outputs) {
        let (mut err, mut missing) = (0.0, 0usize);
        for ((&m, &target), &got) in
            spec.mask.data().iter().zip(spec.reference.data()).zip(output.data())
        {
            if m == 0.0 {
                err += (got - target) * (got - target);
                missing += 1;
            }
        }
        total_err += err;
        total_missing += missing;
        per_window.push((missing > 0).then(|| err / missing as f64));
    }
    let summary = MaskedSummary {
        task: task.name().into(),
        mode: req.mode,
        seed,
        n_windows: outputs.len(),
        missing_coords: total_missing,
        masked_mse: (total_missing > 0).then(|| total_err / total_missing as f64),
        per_window_mse: per_window,
    };
    let summary_path = out.join("summary.json");
    let file = fs::File::create(&summary_path)?;
    let mut w = std::io::BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, &summary).map_err(CoreError::from)?;
    writeln!(w)?;
    w.flush()?;

    match summary.masked_mse {
        Some(mse) => println!(
            "{} {} windows; masked MSE {:.6} over {} hidden coordinates; outputs in {}",
            task.name(),
            summary.n_windows,
            mse,
            summary.missing_coords,
            out.display()
        ),
        None => println!(
            "{} {} windows; nothing was hidden, outputs in {}",
            task.name(),
            summary.n_windows,
            out.display()
        ),
    }
    Ok(())
}

/// Long-format per-coordinate table: the mask bit, the reference value,
/// and the sampled value, for every window/step/channel.
fn write_pairs_csv(path: &Path, specs: &[ConditionSpec], outputs: &[Tensor]) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "window,step,channel,observed,target,output")?;
    for (j, (spec, output)) in specs.iter().zip(outputs).enumerate() {
        let (tau, dim) = (spec.reference.rows(), spec.reference.cols());
        for t in 0..tau {
            for c in 0..dim {
                writeln!(
                    w,
                    "{j},{t},{c},{},{},{}",
                    spec.mask.get(t, c) as u8,
                    spec.reference.get(t, c),
                    output.get(t, c)
                )?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

// ---- evaluate -----------------------------------------------------------------

/// A dataset argument may be the directory gendata wrote or a windows CSV.
fn series_path(arg: &Path, what: &str) -> Result<PathBuf> {
    let path = if arg.is_dir() { arg.join("windows.csv") } else { arg.to_path_buf() };
    if !path.is_file() {
        return Err(usage(format!("{what} series not found: {}", path.display())));
    }
    Ok(path)
}

fn dataset_label(arg: &Path) -> String {
    arg.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| arg.display().to_string())
}

pub fn evaluate(real: &Path, fake: &Path, out: &Path, seed: u64) -> Result<()> {
    let real_windows = data::read_windows_csv(&series_path(real, "real")?)?;
    let fake_windows = data::read_windows_csv(&series_path(fake, "fake")?)?;
    // Metric contracts assume values inside the normalization range.
    let real_windows = data::clamp_to_range(&real_windows, 0.0, 1.0);
    let fake_windows = data::clamp_to_range(&fake_windows, 0.0, 1.0);
    let report = metrics::evaluate(&real_windows, &fake_windows, &MetricConfig::default(), seed)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", parent.display())))?;
    }
    metrics::write_report(&report, out)?;
    let leaderboard = out.parent().unwrap_or(Path::new(".")).join("leaderboard.csv");
    metrics::append_leaderboard(&report, &dataset_label(fake), &leaderboard)?;
    println!(
        "correlational {:.4}  discriminative {:.4} +- {:.4}  predictive {:.4} +- {:.4}  marginal TV {:.4}",
        report.correlational,
        report.discriminative.mean,
        report.discriminative.std,
        report.predictive.mean,
        report.predictive.std,
        report.marginal_tv
    );
    println!("report {}; row appended to {}", out.display(), leaderboard.display());
    Ok(())
}
