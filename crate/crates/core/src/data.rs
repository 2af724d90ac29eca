//! Dataset generation, CSV ingestion, normalization, and masking.
//!
//! Two synthetic generators cover the benchmark shapes: independent (or
//! optionally correlated) sine mixtures, and a trend-plus-seasonality
//! construction that also returns its ground-truth components for
//! disentanglement checks. Real data enters through sliding windows over a
//! headered CSV. All series are min-max normalized per channel to [0, 1]
//! with the constants kept for exact inversion.
//!
//! Masks mark observed coordinates with 1. The geometric kind alternates
//! missing and observed runs with geometrically distributed lengths tuned
//! to a target missing ratio; the forecast kind observes the first
//! `horizon` steps.
//!
//! Generators are pure functions of (options, seed); file writers format
//! floats with the shortest round-tripping representation so a reread is
//! bit-exact.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::{self, stream};
use crate::tensor::Tensor;

// ---- normalization ------------------------------------------------------

/// Per-channel min-max map onto [0, 1]. Constant channels map to 0.5 and
/// invert to their stored minimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
}

impl Normalizer {
    /// Channel ranges over every window in the set.
    pub fn fit(windows: &[Tensor]) -> Result<Normalizer> {
        let first = windows
            .first()
            .ok_or_else(|| CoreError::Data("cannot fit a normalizer to no windows".into()))?;
        let d = first.cols();
        let mut mins = vec![f64::INFINITY; d];
        let mut maxs = vec![f64::NEG_INFINITY; d];
        for w in windows {
            if w.cols() != d {
                return Err(CoreError::shape(
                    "Normalizer::fit",
                    format!("{} channels vs {d}", w.cols()),
                ));
            }
            for t in 0..w.rows() {
                for c in 0..d {
                    let v = w.get(t, c);
                    mins[c] = mins[c].min(v);
                    maxs[c] = maxs[c].max(v);
                }
            }
        }
        for c in 0..d {
            if mins[c] == maxs[c] {
                log::warn!("channel {c} is constant; it will normalize to 0.5");
            }
        }
        Ok(Normalizer { mins, maxs })
    }

    pub fn dim(&self) -> usize {
        self.mins.len()
    }

    fn check(&self, x: &Tensor, op: &str) -> Result<()> {
        if x.cols() != self.dim() {
            return Err(CoreError::shape(
                op,
                format!("{} channels, normalizer has {}", x.cols(), self.dim()),
            ));
        }
        Ok(())
    }

    pub fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x, "Normalizer::normalize")?;
        Ok(Tensor::from_fn_2d(x.rows(), x.cols(), |t, c| {
            let range = self.maxs[c] - self.mins[c];
            if range == 0.0 {
                0.5
            } else {
                (x.get(t, c) - self.mins[c]) / range
            }
        }))
    }

    pub fn denormalize(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x, "Normalizer::denormalize")?;
        Ok(Tensor::from_fn_2d(x.rows(), x.cols(), |t, c| {
            let range = self.maxs[c] - self.mins[c];
            self.mins[c] + x.get(t, c) * range
        }))
    }

    pub fn normalize_batch(&self, xs: &[Tensor]) -> Result<Vec<Tensor>> {
        xs.iter().map(|x| self.normalize(x)).collect()
    }
}

// ---- sine generator -------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SineOptions {
    /// Lower frequency bound in cycles per step; unset uses 1/tau.
    pub freq_min: Option<f64>,
    /// Upper bound (exclusive); unset uses 0.5 (Nyquist).
    pub freq_max: Option<f64>,
    /// Snap frequencies to whole DFT bins.
    pub bin_aligned: bool,
    /// Share one frequency and phase across channels, offsetting each
    /// channel's phase by pi/8, so channels correlate strongly.
    pub correlated: bool,
}

impl Default for SineOptions {
    fn default() -> Self {
        SineOptions { freq_min: None, freq_max: None, bin_aligned: false, correlated: false }
    }
}

/// n sine windows of shape tau x d with per-channel random frequency and
/// phase, rescaled to [0, 1].
pub fn gen_sines(
    n: usize,
    tau: usize,
    d: usize,
    seed: u64,
    options: &SineOptions,
) -> Result<Vec<Tensor>> {
    if n == 0 || tau == 0 || d == 0 {
        return Err(CoreError::InvalidConfig("gen_sines needs n, tau, d >= 1".into()));
    }
    let f_lo = options.freq_min.unwrap_or(1.0 / tau as f64);
    let f_hi = options.freq_max.unwrap_or(0.5);
    if !(f_lo > 0.0 && f_lo < f_hi && f_hi <= 0.5) {
        return Err(CoreError::InvalidConfig(format!(
            "frequency range [{f_lo}, {f_hi}) must satisfy 0 < lo < hi <= 0.5"
        )));
    }
    let max_bin = (tau / 2).saturating_sub(1).max(1);
    let mut r = rng::substream(seed, stream::DATA, 0);
    let draw = |r: &mut ChaCha8Rng| -> (f64, f64) {
        let f = if options.bin_aligned {
            r.gen_range(1..=max_bin) as f64 / tau as f64
        } else {
            r.gen_range(f_lo..f_hi)
        };
        let phase = r.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        (f, phase)
    };
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let shared = options.correlated.then(|| draw(&mut r));
        let channels: Vec<(f64, f64)> = (0..d)
            .map(|c| match shared {
                Some((f, phase)) => (f, phase + c as f64 * std::f64::consts::PI / 8.0),
                None => draw(&mut r),
            })
            .collect();
        out.push(Tensor::from_fn_2d(tau, d, |j, c| {
            let (f, phase) = channels[c];
            let x = (std::f64::consts::TAU * f * j as f64 + phase).sin();
            (x + 1.0) / 2.0
        }));
    }
    Ok(out)
}

// ---- trend + season generator --------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrendSeasonOptions {
    /// Gaussian noise level added to the composition.
    pub noise_std: f64,
    /// Number of bin-aligned sinusoids in the seasonal part.
    pub n_waves: usize,
    /// Scales the polynomial coefficients; 0 removes the trend.
    pub poly_scale: f64,
}

impl Default for TrendSeasonOptions {
    fn default() -> Self {
        TrendSeasonOptions { noise_std: 0.05, n_waves: 2, poly_scale: 1.0 }
    }
}

/// One generated series with its exact ground-truth parts; `series` is the
/// element-wise sum of the other three by construction.
#[derive(Debug, Clone)]
pub struct TrendSeasonSample {
    pub series: Tensor,
    pub trend: Tensor,
    pub season: Tensor,
    pub noise: Tensor,
    /// DFT bins carrying the seasonal part.
    pub bins: Vec<usize>,
}

/// Single-channel series built as cubic trend + bin-aligned seasonality +
/// Gaussian noise, raw scale (not normalized).
pub fn gen_trend_season(
    n: usize,
    tau: usize,
    seed: u64,
    options: &TrendSeasonOptions,
) -> Result<Vec<TrendSeasonSample>> {
    if n == 0 {
        return Err(CoreError::InvalidConfig("gen_trend_season needs n >= 1".into()));
    }
    if tau < 16 {
        return Err(CoreError::InvalidConfig(format!("gen_trend_season needs tau >= 16, got {tau}")));
    }
    if !(options.noise_std >= 0.0) || !(options.poly_scale >= 0.0) {
        return Err(CoreError::InvalidConfig("noise_std and poly_scale must be >= 0".into()));
    }
    // Seasonal bins skip DC and the single-period bin (a cubic can imitate
    // one full period) and stay low so the trend remains the slow part.
    let min_bin = 2;
    let max_bin =
        (tau / 8).max(min_bin + options.n_waves.saturating_sub(1)).min(tau / 2 - 1);
    let n_bins = max_bin.saturating_sub(min_bin) + 1;
    if options.n_waves == 0 || options.n_waves > n_bins {
        return Err(CoreError::InvalidConfig(format!(
            "n_waves {} outside 1..={n_bins} for tau {tau}",
            options.n_waves
        )));
    }
    let mut r = rng::substream(seed, stream::DATA, 1);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let coef: Vec<f64> =
            (0..4).map(|_| options.poly_scale * r.gen_range(-1.0..1.0)).collect();
        let mut bins: Vec<usize> = Vec::with_capacity(options.n_waves);
        while bins.len() < options.n_waves {
            let k = r.gen_range(min_bin..=max_bin);
            if !bins.contains(&k) {
                bins.push(k);
            }
        }
        let waves: Vec<(usize, f64, f64)> = bins
            .iter()
            .map(|&k| {
                let amp = r.gen_range(0.2..0.6);
                let phase = r.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                (k, amp, phase)
            })
            .collect();

        let trend = Tensor::from_fn_2d(tau, 1, |j, _| {
            let c = j as f64 / tau as f64;
            coef[0] + c * (coef[1] + c * (coef[2] + c * coef[3]))
        });
        let season = Tensor::from_fn_2d(tau, 1, |j, _| {
            waves
                .iter()
                .map(|&(k, amp, phase)| {
                    amp * (std::f64::consts::TAU * k as f64 * j as f64 / tau as f64 + phase).sin()
                })
                .sum()
        });
        let noise = if options.noise_std > 0.0 {
            rng::normal_tensor(&mut r, &[tau, 1]).scale(options.noise_std)
        } else {
            Tensor::zeros(&[tau, 1])
        };
        let series = trend.add(&season)?.add(&noise)?;
        out.push(TrendSeasonSample { series, trend, season, noise, bins });
    }
    Ok(out)
}

// ---- CSV ingestion --------------------------------------------------------

/// Sliding windows over a headered CSV (one column per channel, one row
/// per step), normalized per channel over the whole file.
pub fn load_csv(path: &Path, tau: usize, stride: usize) -> Result<(Vec<Tensor>, Normalizer)> {
    if tau == 0 || stride == 0 {
        return Err(CoreError::InvalidConfig("tau and stride must be >= 1".into()));
    }
    let mut reader = csv::Reader::from_path(path)?;
    let d = reader.headers()?.len();
    if d == 0 {
        return Err(CoreError::Data(format!("{}: no columns", path.display())));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != d {
            return Err(CoreError::Data(format!(
                "{}: row {} has {} fields, header has {d}",
                path.display(),
                i + 2,
                record.len()
            )));
        }
        let mut row = Vec::with_capacity(d);
        for (c, field) in record.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                CoreError::Data(format!(
                    "{}: row {}, column {}: not a number: {field:?}",
                    path.display(),
                    i + 2,
                    c + 1
                ))
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    if rows.len() < tau {
        return Err(CoreError::Data(format!(
            "{}: {} rows, need at least {tau} for one window",
            path.display(),
            rows.len()
        )));
    }
    let series = Tensor::from_vec(&[rows.len(), d], rows.concat())?;
    let normalizer = Normalizer::fit(std::slice::from_ref(&series))?;
    let mut windows = Vec::new();
    let mut start = 0;
    while start + tau <= rows.len() {
        let w = Tensor::from_fn_2d(tau, d, |t, c| series.get(start + t, c));
        windows.push(normalizer.normalize(&w)?);
        start += stride;
    }
    Ok((windows, normalizer))
}

// ---- masks ----------------------------------------------------------------

fn default_missing_len() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum MaskSpec {
    /// Alternating missing/observed runs with geometric lengths; the
    /// observed mean length is derived from the target missing ratio.
    Geometric {
        missing_ratio: f64,
        #[serde(default = "default_missing_len")]
        mean_missing_len: f64,
    },
    /// The first `horizon` steps are observed, everything after is to be
    /// predicted.
    Forecast { horizon: usize },
}

fn sample_run_len(r: &mut ChaCha8Rng, mean: f64) -> usize {
    let p = (1.0 / mean).min(1.0);
    if p >= 1.0 {
        return 1;
    }
    let u: f64 = r.gen();
    ((1.0 - u).ln() / (1.0 - p).ln()).ceil().max(1.0) as usize
}

/// Observed-coordinate mask (1 = observed) of shape tau x d; `index`
/// selects an independent mask stream per window under one seed.
pub fn gen_mask(spec: &MaskSpec, tau: usize, d: usize, seed: u64, index: u64) -> Result<Tensor> {
    if tau == 0 || d == 0 {
        return Err(CoreError::InvalidConfig("mask shape must be non-empty".into()));
    }
    match *spec {
        MaskSpec::Forecast { horizon } => {
            if horizon > tau {
                return Err(CoreError::InvalidConfig(format!(
                    "forecast horizon {horizon} exceeds window length {tau}"
                )));
            }
            if horizon == tau {
                log::warn!("forecast horizon equals the window length; nothing to predict");
            }
            Ok(Tensor::from_fn_2d(tau, d, |t, _| if t < horizon { 1.0 } else { 0.0 }))
        }
        MaskSpec::Geometric { missing_ratio: r0, mean_missing_len } => {
            if !(r0 >= 0.0 && r0 < 1.0) {
                return Err(CoreError::OutOfRange {
                    context: "gen_mask".into(),
                    detail: format!("missing_ratio {r0} outside [0, 1)"),
                });
            }
            if r0 == 0.0 {
                // Limiting case: everything observed.
                return Ok(Tensor::from_fn_2d(tau, d, |_, _| 1.0));
            }
            if !(mean_missing_len >= 1.0) {
                return Err(CoreError::InvalidConfig(format!(
                    "mean_missing_len {mean_missing_len} must be >= 1"
                )));
            }
            let mean_observed = mean_missing_len * (1.0 - r0) / r0;
            if mean_observed < 1.0 {
                log::warn!(
                    "missing ratio {r0} with run length {mean_missing_len} wants observed runs \
                     shorter than one step; the realized ratio will undershoot"
                );
            }
            let mut r = rng::substream(seed, stream::MASK, index);
            let mut grid = vec![1.0; tau * d];
            for c in 0..d {
                let mut missing = r.gen::<f64>() < r0;
                let mut t = 0;
                while t < tau {
                    let mean = if missing { mean_missing_len } else { mean_observed };
                    let run = sample_run_len(&mut r, mean).min(tau - t);
                    if missing {
                        for row in t..t + run {
                            grid[row * d + c] = 0.0;
                        }
                    }
                    t += run;
                    missing = !missing;
                }
            }
            Tensor::from_vec(&[tau, d], grid)
        }
    }
}

// ---- dataset files ---------------------------------------------------------

pub const MANIFEST_FORMAT: &str = "tsdiff-dataset";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub source: String,
    pub n_windows: usize,
    pub tau: usize,
    pub dim: usize,
    pub seed: u64,
    pub normalizer: Normalizer,
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, manifest)?;
    use std::io::Write;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = std::fs::File::open(path)?;
    let manifest: DatasetManifest = serde_json::from_reader(std::io::BufReader::new(file))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(CoreError::Data(format!(
            "{}: unknown manifest format {:?}",
            path.display(),
            manifest.format
        )));
    }
    Ok(manifest)
}

/// One CSV holding every window: columns window, step, c0..c{d-1}. Floats
/// use the shortest round-tripping form, so reading back is exact.
pub fn write_windows_csv(path: &Path, windows: &[Tensor]) -> Result<()> {
    let first = windows
        .first()
        .ok_or_else(|| CoreError::Data("no windows to write".into()))?;
    let d = first.cols();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["window".to_string(), "step".to_string()];
    header.extend((0..d).map(|c| format!("c{c}")));
    w.write_record(&header)?;
    for (i, win) in windows.iter().enumerate() {
        if win.cols() != d {
            return Err(CoreError::shape(
                "write_windows_csv",
                format!("window {i} has {} channels, first has {d}", win.cols()),
            ));
        }
        for t in 0..win.rows() {
            let mut record = vec![i.to_string(), t.to_string()];
            record.extend((0..d).map(|c| win.get(t, c).to_string()));
            w.write_record(&record)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_windows_csv(path: &Path) -> Result<Vec<Tensor>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.len() < 3 || &headers[0] != "window" || &headers[1] != "step" {
        return Err(CoreError::Data(format!(
            "{}: expected header window,step,c0,...",
            path.display()
        )));
    }
    let d = headers.len() - 2;
    let mut windows: Vec<Vec<f64>> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let idx: usize = record[0]
            .parse()
            .map_err(|_| CoreError::Data(format!("bad window id {:?}", &record[0])))?;
        if idx == windows.len() {
            windows.push(Vec::new());
        } else if idx > windows.len() {
            return Err(CoreError::Data(format!("window ids must be contiguous, saw {idx}")));
        }
        for c in 0..d {
            let v: f64 = record[2 + c]
                .parse()
                .map_err(|_| CoreError::Data(format!("bad value {:?}", &record[2 + c])))?;
            windows[idx].push(v);
        }
    }
    if windows.is_empty() {
        return Err(CoreError::Data(format!("{}: no windows", path.display())));
    }
    let tau = windows[0].len() / d;
    windows
        .into_iter()
        .enumerate()
        .map(|(i, data)| {
            if data.len() != tau * d {
                return Err(CoreError::Data(format!("window {i} has a different length")));
            }
            Tensor::from_vec(&[tau, d], data)
        })
        .collect()
}

/// Ground-truth decomposition table for generated trend-season data:
/// columns window, step, series, trend, season, noise.
pub fn write_components_csv(path: &Path, samples: &[TrendSeasonSample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["window", "step", "series", "trend", "season", "noise"])?;
    for (i, s) in samples.iter().enumerate() {
        for t in 0..s.series.rows() {
            w.write_record([
                i.to_string(),
                t.to_string(),
                s.series.get(t, 0).to_string(),
                s.trend.get(t, 0).to_string(),
                s.season.get(t, 0).to_string(),
                s.noise.get(t, 0).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// 0/1 grid, one column per channel.
pub fn write_mask_csv(path: &Path, mask: &Tensor) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let header: Vec<String> = (0..mask.cols()).map(|c| format!("c{c}")).collect();
    w.write_record(&header)?;
    for t in 0..mask.rows() {
        let record: Vec<String> =
            (0..mask.cols()).map(|c| (mask.get(t, c) as u8).to_string()).collect();
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_mask_csv(path: &Path) -> Result<Tensor> {
    let mut reader = csv::Reader::from_path(path)?;
    let d = reader.headers()?.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record?;
        for field in record.iter() {
            match field.trim() {
                "0" => data.push(0.0),
                "1" => data.push(1.0),
                other => {
                    return Err(CoreError::Data(format!("mask entries must be 0/1, got {other:?}")))
                }
            }
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(CoreError::Data(format!("{}: empty mask", path.display())));
    }
    Tensor::from_vec(&[rows, d], data)
}

/// Project windows onto the declared normalization range. Sampled chains can
/// overshoot the data hull; emitted datasets and metric inputs are defined on
/// the declared range, so callers project before writing or scoring.
pub fn clamp_to_range(windows: &[Tensor], lo: f64, hi: f64) -> Vec<Tensor> {
    windows
        .iter()
        .map(|w| {
            let data = w.data().iter().map(|v| v.clamp(lo, hi)).collect();
            Tensor::from_vec(w.shape(), data).expect("shape preserved")
        })
        .collect()
}

/// Leading/trailing split, deterministic order.
pub fn split_train_test(windows: &[Tensor], train_fraction: f64) -> (Vec<Tensor>, Vec<Tensor>) {
    let n_train = ((windows.len() as f64 * train_fraction).round() as usize).min(windows.len());
    let (a, b) = windows.split_at(n_train);
    (a.to_vec(), b.to_vec())
}
