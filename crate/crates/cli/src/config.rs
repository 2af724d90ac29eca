//! Run configuration: one JSON file drives every subcommand, so a config
//! plus a seed is a complete, reproducible run manifest. Flags carry only
//! paths, the seed override, verbosity, and the worker count.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tsdiff_core::data::{MaskSpec, SineOptions, TrendSeasonOptions};
use tsdiff_core::denoiser::DenoiserConfig;
use tsdiff_core::error::CoreError;
use tsdiff_core::sampling::{ConditionalMode, IterSchedule};
use tsdiff_core::training::TrainConfig;

use crate::commands::CliError;

/// Everything a run needs. Sections are optional so one file can serve
/// several subcommands; each command checks for the sections it uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed feeding every named sub-stream; --seed overrides it.
    #[serde(default)]
    pub seed: u64,
    /// Output directory when --out is absent ($TSDIFF_OUT is the last resort).
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub dataset: Option<DatasetSpec>,
    #[serde(default)]
    pub model: Option<DenoiserConfig>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub sample: Option<SampleRequest>,
    #[serde(default)]
    pub condition: Option<ConditionConfig>,
}

/// Where windows come from: a synthetic generator or a CSV on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "source", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// Random sine windows, already in [0, 1].
    Sines {
        n_windows: usize,
        tau: usize,
        dim: usize,
        #[serde(default)]
        options: SineOptions,
    },
    /// Cubic trend + bin-aligned seasonality + noise, single channel.
    TrendSeason {
        n_windows: usize,
        tau: usize,
        #[serde(default)]
        options: TrendSeasonOptions,
    },
    /// Long-format CSV sliced into windows and min-max normalized.
    Csv {
        path: PathBuf,
        tau: usize,
        /// Row offset between windows; unset uses tau (no overlap).
        #[serde(default)]
        stride: Option<usize>,
    },
}

impl DatasetSpec {
    pub fn tau(&self) -> usize {
        match *self {
            DatasetSpec::Sines { tau, .. }
            | DatasetSpec::TrendSeason { tau, .. }
            | DatasetSpec::Csv { tau, .. } => tau,
        }
    }

    /// Channel count when it is knowable without reading files.
    pub fn dim(&self) -> Option<usize> {
        match *self {
            DatasetSpec::Sines { dim, .. } => Some(dim),
            DatasetSpec::TrendSeason { .. } => Some(1),
            DatasetSpec::Csv { .. } => None,
        }
    }

    pub fn source_name(&self) -> &'static str {
        match self {
            DatasetSpec::Sines { .. } => "sines",
            DatasetSpec::TrendSeason { .. } => "trend_season",
            DatasetSpec::Csv { .. } => "csv",
        }
    }

    fn validate(&self) -> Result<(), CoreError> {
        let fail = |m: String| Err(CoreError::InvalidConfig(m));
        match *self {
            DatasetSpec::Sines { n_windows, tau, dim, .. } => {
                if n_windows == 0 || tau == 0 || dim == 0 {
                    return fail("dataset needs n_windows, tau, dim >= 1".into());
                }
            }
            DatasetSpec::TrendSeason { n_windows, tau, .. } => {
                if n_windows == 0 || tau == 0 {
                    return fail("dataset needs n_windows, tau >= 1".into());
                }
            }
            DatasetSpec::Csv { tau, stride, .. } => {
                if tau == 0 {
                    return fail("dataset needs tau >= 1".into());
                }
                if stride == Some(0) {
                    return fail("dataset stride must be >= 1".into());
                }
            }
        }
        Ok(())
    }
}

/// How many series to draw, and how conditional draws are satisfied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleRequest {
    /// Series to draw, or held-out windows to condition on.
    pub n_samples: usize,
    /// guided runs the gradient updates; replace_only skips them.
    pub mode: ConditionalMode,
}

impl Default for SampleRequest {
    fn default() -> Self {
        SampleRequest { n_samples: 8, mode: ConditionalMode::Guided }
    }
}

/// Conditioning inputs shared by impute and forecast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionConfig {
    /// impute wants kind = "geometric", forecast kind = "forecast".
    pub mask: MaskSpec,
    /// Guidance step size; unset uses 0.01 * tau * dim.
    #[serde(default)]
    pub eta: Option<f64>,
    /// Weight of the posterior-consistency term.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Gradient updates per step: a staged budget or a constant count.
    #[serde(default)]
    pub iters: IterSchedule,
}

fn default_gamma() -> f64 {
    0.05
}

impl ConditionConfig {
    fn validate(&self) -> Result<(), CoreError> {
        if let Some(e) = self.eta {
            if !(e >= 0.0) {
                return Err(CoreError::InvalidConfig(format!("condition.eta {e} must be >= 0")));
            }
        }
        if !(self.gamma >= 0.0) {
            return Err(CoreError::InvalidConfig(format!(
                "condition.gamma {} must be >= 0",
                self.gamma
            )));
        }
        match self.mask {
            MaskSpec::Geometric { missing_ratio, mean_missing_len } => {
                if !(missing_ratio >= 0.0 && missing_ratio < 1.0) {
                    return Err(CoreError::InvalidConfig(format!(
                        "condition.mask.missing_ratio {missing_ratio} outside [0, 1)"
                    )));
                }
                if !(mean_missing_len >= 1.0) {
                    return Err(CoreError::InvalidConfig(format!(
                        "condition.mask.mean_missing_len {mean_missing_len} must be >= 1"
                    )));
                }
            }
            MaskSpec::Forecast { .. } => {}
        }
        Ok(())
    }
}

impl RunConfig {
    /// Section-level sanity checks, run before any command does work.
    pub fn validate(&self) -> Result<(), CoreError> {
        if let Some(d) = &self.dataset {
            d.validate()?;
        }
        if let Some(m) = &self.model {
            m.validate()?;
        }
        if let Some(t) = &self.train {
            t.validate()?;
        }
        if let Some(s) = &self.sample {
            if s.n_samples == 0 {
                return Err(CoreError::InvalidConfig("sample.n_samples must be >= 1".into()));
            }
        }
        if let Some(c) = &self.condition {
            c.validate()?;
        }
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))?;
    cfg.validate()
        .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))?;
    Ok(cfg)
}

// ---- key inventory for --help ---------------------------------------------

/// Configs that together exercise every section, enum variant, and field.
fn exemplars() -> Vec<RunConfig> {
    let model = DenoiserConfig {
        tau: 24,
        dim: 2,
        hidden: 64,
        n_heads: 4,
        head_dim: 16,
        enc_layers: 1,
        dec_layers: 2,
        trend_degree: 3,
        top_k: 3,
        timesteps: 100,
    };
    let base = RunConfig {
        seed: 0,
        output_dir: Some(PathBuf::from("out")),
        dataset: Some(DatasetSpec::Sines {
            n_windows: 2000,
            tau: 24,
            dim: 2,
            options: SineOptions::default(),
        }),
        model: Some(model),
        train: Some(TrainConfig::default()),
        sample: Some(SampleRequest::default()),
        condition: Some(ConditionConfig {
            mask: MaskSpec::Geometric { missing_ratio: 0.5, mean_missing_len: 5.0 },
            eta: None,
            gamma: default_gamma(),
            iters: IterSchedule::Staged { budget: 200 },
        }),
    };
    let mut trend = base.clone();
    trend.dataset = Some(DatasetSpec::TrendSeason {
        n_windows: 500,
        tau: 64,
        options: TrendSeasonOptions::default(),
    });
    trend.condition = Some(ConditionConfig {
        mask: MaskSpec::Forecast { horizon: 24 },
        eta: Some(0.1),
        gamma: default_gamma(),
        iters: IterSchedule::Constant(1),
    });
    let mut csv = base.clone();
    csv.dataset = Some(DatasetSpec::Csv {
        path: PathBuf::from("data.csv"),
        tau: 48,
        stride: Some(1),
    });
    vec![base, trend, csv]
}

fn collect_keys(keys: &mut BTreeSet<String>, prefix: &str, value: &serde_json::Value) {
    if let serde_json::Value::Object(map) = value {
        for (k, child) in map {
            let path =
                if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            keys.insert(path.clone());
            collect_keys(keys, &path, child);
        }
    }
}

/// Every dotted key path a config file can contain.
pub fn config_keys() -> BTreeSet<String> {
    let mut keys = BTreeSet::new();
    for ex in exemplars() {
        let v = serde_json::to_value(&ex).expect("exemplar config serializes");
        collect_keys(&mut keys, "", &v);
    }
    keys
}

/// Hand-maintained key reference shown under --help; tests compare it
/// against [`config_keys`] so it cannot drift from the real schema.
pub fn help_text() -> String {
    "\
Config file keys (JSON; see configs/ for complete examples):
  seed                          master seed for every sub-stream (--seed overrides)
  output_dir                    output directory when --out is absent; else $TSDIFF_OUT

  dataset.source                sines | trend_season | csv
  dataset.n_windows             windows to generate (sines, trend_season)
  dataset.tau                   window length
  dataset.dim                   channel count (sines)
  dataset.path                  long-format CSV to slice into windows (csv)
  dataset.stride                row offset between windows; null = tau (csv)
  dataset.options.freq_min      lower sine frequency bound; null = 1/tau (sines)
  dataset.options.freq_max      upper bound, exclusive; null = 0.5 (sines)
  dataset.options.bin_aligned   snap sine frequencies to whole DFT bins (sines)
  dataset.options.correlated    share frequency and phase across channels (sines)
  dataset.options.noise_std     Gaussian noise level (trend_season)
  dataset.options.n_waves       seasonal sinusoid count (trend_season)
  dataset.options.poly_scale    trend coefficient scale; 0 removes it (trend_season)

  model.tau                     window length the denoiser expects
  model.dim                     channel count
  model.hidden                  width; must equal n_heads * head_dim
  model.n_heads                 attention heads
  model.head_dim                per-head width
  model.enc_layers              encoder blocks
  model.dec_layers              decoder blocks
  model.trend_degree            polynomial trend degree
  model.top_k                   Fourier bins kept per block and channel
  model.timesteps               diffusion chain length T

  train.steps                   optimizer steps (0 writes just the initialized checkpoint)
  train.batch_size              windows per step
  train.learning_rate           Adam peak learning rate
  train.warmup_steps            linear warmup length
  train.lr_floor                final learning rate of the linear decay
  train.weight_scale            overall scale of the step weight
  train.time_weight             time-domain loss coefficient
  train.freq_weight             frequency-domain loss coefficient
  train.grad_clip               global gradient-norm cap; null disables clipping
  train.checkpoint_every        extra checkpoints every N steps; 0 = final only
  train.workers                 batch threads: 1 sequential, 0 the default pool

  sample.n_samples              series to draw / held-out windows to condition on
  sample.mode                   guided | replace_only

  condition.mask.kind           geometric | forecast
  condition.mask.missing_ratio  target missing fraction in [0, 1) (geometric)
  condition.mask.mean_missing_len  mean missing-run length (geometric)
  condition.mask.horizon        observed prefix length (forecast)
  condition.eta                 guidance step size; null = 0.01 * tau * dim
  condition.gamma               posterior-consistency weight
  condition.iters.staged.budget total guidance updates, spent 3/2/1 from t = T down
  condition.iters.constant      fixed updates per step (alternative to staged)
"
    .to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn help_lists_every_config_key() {
        let help = help_text();
        for key in config_keys() {
            assert!(help.contains(&key), "--help text is missing the config key {key}");
        }
    }

    #[test]
    fn empty_config_parses_with_defaults() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg.seed, 0);
        assert!(cfg.dataset.is_none() && cfg.model.is_none() && cfg.train.is_none());
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"seed": 1, "bogus": 2}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(
            r#"{"train": {"steps": 5, "bogus": 2}}"#
        )
        .is_err());
        assert!(serde_json::from_str::<RunConfig>(
            r#"{"sample": {"n_samples": 4, "bogus": true}}"#
        )
        .is_err());
    }

    #[test]
    fn exemplars_round_trip_and_validate() {
        for ex in exemplars() {
            ex.validate().unwrap();
            let text = serde_json::to_string(&ex).unwrap();
            let back: RunConfig = serde_json::from_str(&text).unwrap();
            assert_eq!(back, ex);
        }
    }

    #[test]
    fn section_errors_are_caught_before_work() {
        let bad: RunConfig = serde_json::from_str(
            r#"{"condition": {"mask": {"kind": "geometric", "missing_ratio": 1.5}}}"#,
        )
        .unwrap();
        assert!(bad.validate().is_err(), "missing_ratio 1.5 must be rejected");

        let bad: RunConfig = serde_json::from_str(
            r#"{"dataset": {"source": "sines", "n_windows": 0, "tau": 24, "dim": 1}}"#,
        )
        .unwrap();
        assert!(bad.validate().is_err(), "empty dataset must be rejected");
    }
}
