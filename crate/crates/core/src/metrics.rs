//! Sample-quality metrics for generated series.
//!
//! * correlational: mean absolute difference between the real and fake
//!   cross-correlation matrices (time-averaged covariance per sample,
//!   normalized, averaged over samples), scaled by the conventional 1/10.
//!   The constant is kept verbatim even though the score then grows with
//!   the square of the channel count.
//! * discriminative: |test accuracy - 0.5| of a two-layer GRU classifier
//!   trained to tell real from fake on an 80/20 split.
//! * predictive: train a two-layer GRU one-step-ahead regressor on the
//!   fake set, report its mean absolute error on the real set.
//! * marginal_tv: total-variation distance between binned value
//!   histograms, averaged over channels.
//!
//! Every score is a deterministic function of (inputs, seed); recurrent
//! scores are reported as mean and std over seeded folds. Reports carry no
//! timestamps so a rerun is byte-identical.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{CoreError, Result};
use crate::nn::{GruCell, Linear, ParamSet};
use crate::rng::{self, stream};
use crate::tensor::Tensor;
use crate::training::Adam;

/// Variances at or below this are treated as zero when normalizing
/// covariances.
const ZERO_VAR_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreStat {
    pub mean: f64,
    pub std: f64,
}

impl ScoreStat {
    fn over(values: &[f64]) -> ScoreStat {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        ScoreStat { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub n_real: usize,
    pub n_fake: usize,
    pub tau: usize,
    pub dim: usize,
    pub seed: u64,
    pub folds: usize,
    pub histogram_bins: usize,
    /// Recurrent cell used by the classifier and regressor.
    pub cell: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub correlational: f64,
    pub discriminative: ScoreStat,
    pub predictive: ScoreStat,
    pub marginal_tv: f64,
    pub metadata: ReportMetadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub folds: usize,
    pub histogram_bins: usize,
    /// Passes over the training split for the classifier and regressor.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            folds: 3,
            histogram_bins: 50,
            epochs: 8,
            batch_size: 32,
            learning_rate: 0.01,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds == 0 || self.histogram_bins == 0 || self.epochs == 0 || self.batch_size == 0
        {
            return Err(CoreError::InvalidConfig(
                "folds, histogram_bins, epochs and batch_size must be >= 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(CoreError::InvalidConfig("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

fn batch_shape(batch: &[Tensor], name: &str) -> Result<(usize, usize)> {
    let first = batch
        .first()
        .ok_or_else(|| CoreError::Data(format!("{name} batch is empty")))?;
    let shape = first.shape();
    if shape.len() != 2 {
        return Err(CoreError::shape(name, format!("{shape:?}")));
    }
    for (i, s) in batch.iter().enumerate() {
        if s.shape() != shape {
            return Err(CoreError::shape(
                name,
                format!("sample {i} is {:?}, expected {shape:?}", s.shape()),
            ));
        }
    }
    Ok((shape[0], shape[1]))
}

fn matched_shapes(real: &[Tensor], fake: &[Tensor], op: &str) -> Result<(usize, usize)> {
    let (tr, dr) = batch_shape(real, "real")?;
    let (tf, df) = batch_shape(fake, "fake")?;
    if (tr, dr) != (tf, df) {
        return Err(CoreError::shape(op, format!("real {tr}x{dr} vs fake {tf}x{df}")));
    }
    Ok((tr, dr))
}

// ---- correlational ----------------------------------------------------

/// Per-sample correlation matrix from the time-averaged covariance.
/// Channels with (numerically) zero variance contribute zeros; the flag
/// reports that degeneracy.
fn sample_correlation(x: &Tensor) -> (Vec<f64>, bool) {
    let (tau, d) = (x.rows(), x.cols());
    let inv = 1.0 / tau as f64;
    let mut mean = vec![0.0; d];
    for t in 0..tau {
        for c in 0..d {
            mean[c] += x.get(t, c) * inv;
        }
    }
    let mut cov = vec![0.0; d * d];
    for t in 0..tau {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += x.get(t, i) * x.get(t, j) * inv;
            }
        }
    }
    for i in 0..d {
        for j in 0..d {
            cov[i * d + j] -= mean[i] * mean[j];
        }
    }
    let mut degenerate = false;
    let mut corr = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            if cov[i * d + i] <= ZERO_VAR_EPS || cov[j * d + j] <= ZERO_VAR_EPS {
                degenerate = true;
            } else {
                corr[i * d + j] = cov[i * d + j] / (cov[i * d + i] * cov[j * d + j]).sqrt();
            }
        }
    }
    (corr, degenerate)
}

fn mean_correlation(batch: &[Tensor], name: &str) -> Result<Vec<f64>> {
    let (_, d) = batch_shape(batch, name)?;
    let mut acc = vec![0.0; d * d];
    let mut warned = false;
    for x in batch {
        let (corr, degenerate) = sample_correlation(x);
        if degenerate && !warned {
            log::warn!("{name}: zero-variance channel, its correlations set to 0");
            warned = true;
        }
        for (a, c) in acc.iter_mut().zip(&corr) {
            *a += c;
        }
    }
    let inv = 1.0 / batch.len() as f64;
    Ok(acc.into_iter().map(|v| v * inv).collect())
}

/// (1/10) * sum_{i,j} |corr_real(i,j) - corr_fake(i,j)|.
pub fn correlational_score(real: &[Tensor], fake: &[Tensor]) -> Result<f64> {
    matched_shapes(real, fake, "correlational_score").map(|_| ())?;
    let r = mean_correlation(real, "real")?;
    let f = mean_correlation(fake, "fake")?;
    Ok(r.iter().zip(&f).map(|(a, b)| (a - b).abs()).sum::<f64>() / 10.0)
}

/// Pearson correlation of two equal-length slices. Returns 0 when either
/// side has no variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "pearson needs equal lengths");
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= ZERO_VAR_EPS || vb <= ZERO_VAR_EPS {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}

// ---- marginal total variation ------------------------------------------

/// Total-variation distance between per-channel value histograms, averaged
/// over channels. The bin range per channel covers both sets.
pub fn marginal_tv(real: &[Tensor], fake: &[Tensor], bins: usize) -> Result<f64> {
    let (_, d) = matched_shapes(real, fake, "marginal_tv")?;
    if bins == 0 {
        return Err(CoreError::InvalidConfig("histogram needs at least one bin".into()));
    }
    let channel_values = |batch: &[Tensor], c: usize| -> Vec<f64> {
        batch.iter().flat_map(|x| (0..x.rows()).map(move |t| x.get(t, c))).collect()
    };
    let mut total = 0.0;
    for c in 0..d {
        let rv = channel_values(real, c);
        let fv = channel_values(fake, c);
        let lo = rv.iter().chain(&fv).cloned().fold(f64::INFINITY, f64::min);
        let hi = rv.iter().chain(&fv).cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi == lo {
            continue; // both sets are the same point mass: distance 0
        }
        let hist = |values: &[f64]| -> Vec<f64> {
            let mut h = vec![0.0; bins];
            let scale = bins as f64 / (hi - lo);
            for &v in values {
                let b = (((v - lo) * scale) as usize).min(bins - 1);
                h[b] += 1.0 / values.len() as f64;
            }
            h
        };
        let (p, q) = (hist(&rv), hist(&fv));
        total += 0.5 * p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum::<f64>();
    }
    Ok(total / d as f64)
}

// ---- recurrent scorers --------------------------------------------------

/// Two-layer GRU with a linear head, the shared backbone of the
/// discriminative and predictive scores. Hidden width is 4 * dim. The
/// parameter set lives outside so training can update it while the
/// architecture handles stay borrowed.
struct Recurrent {
    cell1: GruCell,
    cell2: GruCell,
    head: Linear,
    hidden: usize,
}

impl Recurrent {
    fn new(ps: &mut ParamSet, dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Recurrent {
        let hidden = 4 * dim;
        Recurrent {
            cell1: GruCell::new(ps, rng, "gru1", dim, hidden),
            cell2: GruCell::new(ps, rng, "gru2", hidden, hidden),
            head: Linear::new(ps, rng, "head", hidden, out_dim, true),
            hidden,
        }
    }

    /// Feeds `steps` time slices (each batch x dim) through both layers,
    /// returning the top-layer state after every step.
    fn run(&self, tape: &mut Tape, bound: &[Var], steps: &[Var], batch: usize) -> Result<Vec<Var>> {
        let mut h1 = tape.constant(Tensor::zeros(&[batch, self.hidden]));
        let mut h2 = tape.constant(Tensor::zeros(&[batch, self.hidden]));
        let mut states = Vec::with_capacity(steps.len());
        for &x in steps {
            h1 = self.cell1.forward(tape, bound, x, h1)?;
            h2 = self.cell2.forward(tape, bound, h1, h2)?;
            states.push(h2);
        }
        Ok(states)
    }
}

/// Time slice t across a set of sequences, one row per sequence.
fn time_slice(batch: &[&Tensor], t: usize) -> Tensor {
    let d = batch[0].cols();
    Tensor::from_fn_2d(batch.len(), d, |b, c| batch[b].get(t, c))
}

fn check_min_size(total: usize) -> Result<()> {
    if total < 64 {
        return Err(CoreError::Data(format!(
            "need at least 64 sequences for a train/test split, got {total}"
        )));
    }
    Ok(())
}

/// |test accuracy - 0.5| of a real-vs-fake GRU classifier, one fold.
pub fn discriminative_score(
    real: &[Tensor],
    fake: &[Tensor],
    cfg: &MetricConfig,
    seed: u64,
) -> Result<f64> {
    cfg.validate()?;
    let (tau, d) = matched_shapes(real, fake, "discriminative_score")?;
    check_min_size(real.len() + fake.len())?;

    let mut r = rng::substream(seed, stream::METRICS, 0);
    let mut pool: Vec<(&Tensor, f64)> = real
        .iter()
        .map(|x| (x, 1.0))
        .chain(fake.iter().map(|x| (x, 0.0)))
        .collect();
    pool.shuffle(&mut r);
    let n_train = (pool.len() * 4) / 5;
    let (train, test) = pool.split_at(n_train);

    let mut params = ParamSet::new();
    let arch = Recurrent::new(&mut params, d, 1, &mut r);
    let mut adam = Adam::new(&params);

    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(cfg.batch_size) {
            let xs: Vec<&Tensor> = chunk.iter().map(|&i| train[i].0).collect();
            let ys = Tensor::from_fn_2d(xs.len(), 1, |b, _| train[chunk[b]].1);
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let steps: Vec<Var> = (0..tau).map(|t| tape.constant(time_slice(&xs, t))).collect();
            let states = arch.run(&mut tape, &bound, &steps, xs.len())?;
            let last = *states.last().expect("tau >= 1");
            let logits = arch.head.forward(&mut tape, &bound, last)?;
            let loss = tape.logistic_loss(logits, &ys)?;
            tape.backward(loss)?;
            let grads: Vec<Tensor> = bound.iter().map(|v| tape.grad_tensor(*v)).collect();
            adam.update(&mut params, &grads, cfg.learning_rate)?;
        }
    }

    // Accuracy on the held-out 20%.
    let xs: Vec<&Tensor> = test.iter().map(|p| p.0).collect();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let steps: Vec<Var> = (0..tau).map(|t| tape.constant(time_slice(&xs, t))).collect();
    let states = arch.run(&mut tape, &bound, &steps, xs.len())?;
    let logits = arch.head.forward(&mut tape, &bound, *states.last().unwrap())?;
    let values = tape.value(logits);
    let mut correct = 0usize;
    for (b, pair) in test.iter().enumerate() {
        let predicted = if values.get(b, 0) > 0.0 { 1.0 } else { 0.0 };
        if predicted == pair.1 {
            correct += 1;
        }
    }
    let accuracy = correct as f64 / test.len() as f64;
    Ok((accuracy - 0.5).abs())
}

/// One-step-ahead MAE on `real` of a GRU regressor trained on `fake`
/// (train-on-synthetic, test-on-real), one fold.
pub fn predictive_score(
    real: &[Tensor],
    fake: &[Tensor],
    cfg: &MetricConfig,
    seed: u64,
) -> Result<f64> {
    cfg.validate()?;
    let (tau, d) = matched_shapes(real, fake, "predictive_score")?;
    if tau < 2 {
        return Err(CoreError::Data("predictive score needs at least 2 time steps".into()));
    }

    let mut r = rng::substream(seed, stream::METRICS, 1);
    let mut params = ParamSet::new();
    let arch = Recurrent::new(&mut params, d, d, &mut r);
    let mut adam = Adam::new(&params);

    // After consuming step t the head predicts step t+1; the loss is the
    // MAE over all predicted coordinates.
    let run_mae = |params: &ParamSet,
                   arch: &Recurrent,
                   xs: &[&Tensor],
                   want_grads: bool|
     -> Result<(f64, Option<Vec<Tensor>>)> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let steps: Vec<Var> = (0..tau).map(|t| tape.constant(time_slice(xs, t))).collect();
        let states = arch.run(&mut tape, &bound, &steps[..tau - 1], xs.len())?;
        let mut total: Option<Var> = None;
        for (t, &state) in states.iter().enumerate() {
            let pred = arch.head.forward(&mut tape, &bound, state)?;
            let err = tape.sub(pred, steps[t + 1])?;
            let term = tape.sum_abs(err)?;
            total = Some(match total {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        let count = (xs.len() * (tau - 1) * d) as f64;
        let mae = tape.scale(total.expect("tau >= 2"), 1.0 / count)?;
        let grads = if want_grads {
            tape.backward(mae)?;
            Some(bound.iter().map(|v| tape.grad_tensor(*v)).collect())
        } else {
            None
        };
        Ok((tape.scalar(mae), grads))
    };

    let mut order: Vec<usize> = (0..fake.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(cfg.batch_size) {
            let xs: Vec<&Tensor> = chunk.iter().map(|&i| &fake[i]).collect();
            let (_, grads) = run_mae(&params, &arch, &xs, true)?;
            adam.update(&mut params, &grads.unwrap(), cfg.learning_rate)?;
        }
    }

    // Test MAE over the full real set, batched to bound the tape size.
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in real.chunks(cfg.batch_size.max(1)) {
        let xs: Vec<&Tensor> = chunk.iter().collect();
        let (mae, _) = run_mae(&params, &arch, &xs, false)?;
        total += mae * (xs.len() * (tau - 1) * d) as f64;
        count += xs.len() * (tau - 1) * d;
    }
    Ok(total / count as f64)
}

/// Runs the full metric suite: single-shot correlational and marginal TV,
/// plus seeded folds of the discriminative and predictive scores.
pub fn evaluate(
    real: &[Tensor],
    fake: &[Tensor],
    cfg: &MetricConfig,
    seed: u64,
) -> Result<MetricReport> {
    cfg.validate()?;
    let (tau, d) = matched_shapes(real, fake, "evaluate")?;
    let correlational = correlational_score(real, fake)?;
    let tv = marginal_tv(real, fake, cfg.histogram_bins)?;
    let mut disc = Vec::with_capacity(cfg.folds);
    let mut pred = Vec::with_capacity(cfg.folds);
    for fold in 0..cfg.folds {
        let fold_seed = seed.wrapping_add(fold as u64);
        disc.push(discriminative_score(real, fake, cfg, fold_seed)?);
        pred.push(predictive_score(real, fake, cfg, fold_seed)?);
    }
    Ok(MetricReport {
        correlational,
        discriminative: ScoreStat::over(&disc),
        predictive: ScoreStat::over(&pred),
        marginal_tv: tv,
        metadata: ReportMetadata {
            n_real: real.len(),
            n_fake: fake.len(),
            tau,
            dim: d,
            seed,
            folds: cfg.folds,
            histogram_bins: cfg.histogram_bins,
            cell: "gru".into(),
        },
    })
}

// ---- report output ------------------------------------------------------

pub fn write_report(report: &MetricReport, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, report)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Appends one row per evaluation run; creates the file with a header on
/// first use.
pub fn append_leaderboard(report: &MetricReport, label: &str, path: &Path) -> Result<()> {
    let fresh = !path.exists();
    let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = std::io::BufWriter::new(file);
    if fresh {
        writeln!(
            w,
            "label,n_real,n_fake,tau,dim,seed,correlational,discriminative_mean,\
             discriminative_std,predictive_mean,predictive_std,marginal_tv"
        )?;
    }
    let m = &report.metadata;
    writeln!(
        w,
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        label,
        m.n_real,
        m.n_fake,
        m.tau,
        m.dim,
        m.seed,
        report.correlational,
        report.discriminative.mean,
        report.discriminative.std,
        report.predictive.mean,
        report.predictive.std,
        report.marginal_tv
    )?;
    w.flush()?;
    Ok(())
}
