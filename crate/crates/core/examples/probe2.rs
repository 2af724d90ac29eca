use std::time::Instant;

use tsdiff_core::autodiff::Tape;
use tsdiff_core::data::{gen_trend_season, split_train_test, Normalizer, TrendSeasonOptions};
use tsdiff_core::denoiser::{DenoiserConfig, DenoiserModel};
use tsdiff_core::metrics::pearson;
use tsdiff_core::rng;
use tsdiff_core::schedule::{cosine_schedule, DEFAULT_COSINE_OFFSET};
use tsdiff_core::tensor::Tensor;
use tsdiff_core::training::{train, TrainConfig, TrainOutputs};

fn live_bins(x: &Tensor, channel: usize) -> usize {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let (re, im) = tape.rdft(xv).unwrap();
    let (re, im) = (tape.value(re).clone(), tape.value(im).clone());
    let amp = |b: usize| (re.get(b, channel).powi(2) + im.get(b, channel).powi(2)).sqrt();
    let peak = (0..re.rows()).map(amp).fold(0.0f64, f64::max);
    (1..re.rows()).filter(|&b| amp(b) > 1e-8 * peak).count()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(3500);
    let batch: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(16);

    let samples = gen_trend_season(500, 64, 45, &TrendSeasonOptions::default()).unwrap();
    let series: Vec<Tensor> = samples.iter().map(|s| s.series.clone()).collect();
    let normalizer = Normalizer::fit(&series).unwrap();
    let windows = normalizer.normalize_batch(&series).unwrap();
    let schedule = cosine_schedule(100, DEFAULT_COSINE_OFFSET).unwrap();
    let (train_w, held) = split_train_test(&windows, 0.9);
    let n_train = train_w.len();

    let mcfg = DenoiserConfig {
        tau: 64,
        dim: 1,
        hidden: 32,
        n_heads: 4,
        head_dim: 8,
        enc_layers: 1,
        dec_layers: 2,
        trend_degree: 3,
        top_k: 3,
        timesteps: 100,
    };
    let tcfg = TrainConfig {
        steps,
        batch_size: batch,
        warmup_steps: 500.min(steps / 3),
        workers: 1,
        ..TrainConfig::default()
    };
    let mut model = DenoiserModel::new(mcfg, 45).unwrap();
    let t0 = Instant::now();
    let s =
        train(&mut model, &schedule, &train_w, &tcfg, 45, None, &TrainOutputs::default()).unwrap();
    println!(
        "steps {steps} batch {batch}: {:.0}s, smoothed {:.4}",
        t0.elapsed().as_secs_f64(),
        s.final_smoothed
    );

    let mut trend_rhos = Vec::new();
    let mut season_rhos = Vec::new();
    let mut support_max = 0usize;
    for (i, window) in held.iter().enumerate() {
        let truth = &samples[n_train + i];
        let mut r = rng::substream(45, "acceptance/probe", i as u64);
        let eps = rng::normal_tensor(&mut r, &[64, 1]);
        let x1 = schedule.q_sample(window, 1, &eps).unwrap();
        let parts = model.predict(&x1, 1).unwrap();
        trend_rhos.push(pearson(parts.trend.data(), truth.trend.data()));
        season_rhos.push(pearson(parts.season.data(), truth.season.data()));
        support_max = support_max.max(live_bins(&parts.season, 0));
    }
    let mean = trend_rhos.iter().sum::<f64>() / trend_rhos.len() as f64;
    let smean = season_rhos.iter().sum::<f64>() / season_rhos.len() as f64;
    let mut sorted = trend_rhos.clone();
    sorted.sort_by(f64::total_cmp);
    println!(
        "trend pearson mean {mean:.4} (min {:.3}, p25 {:.3}, median {:.3}), season pearson mean {smean:.4}, season support max {support_max}",
        sorted[0],
        sorted[12],
        sorted[25]
    );
}
