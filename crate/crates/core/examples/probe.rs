//! Temporary probe: range/TV/guidance meters on saved checkpoints.
use std::time::Instant;

use tsdiff_core::data::{gen_mask, gen_sines, split_train_test, MaskSpec, SineOptions};
use tsdiff_core::denoiser::DenoiserModel;
use tsdiff_core::metrics::marginal_tv;
use tsdiff_core::sampling::{
    sample_conditional_batch, sample_unconditional, ConditionSpec, ConditionalMode,
};
use tsdiff_core::schedule::{cosine_schedule, DEFAULT_COSINE_OFFSET};
use tsdiff_core::tensor::Tensor;

fn clamp01(t: &Tensor) -> Tensor {
    let data: Vec<f64> = t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Tensor::from_vec(t.shape(), data).unwrap()
}

fn out_of_range_frac(ts: &[Tensor]) -> f64 {
    let (mut bad, mut n) = (0usize, 0usize);
    for t in ts {
        for &v in t.data() {
            if !(0.0..=1.0).contains(&v) {
                bad += 1;
            }
            n += 1;
        }
    }
    bad as f64 / n as f64
}

fn masked_mse(specs: &[ConditionSpec], outputs: &[Tensor], clamp: bool) -> f64 {
    let (mut err, mut n) = (0.0, 0usize);
    for (spec, out) in specs.iter().zip(outputs) {
        for ((&m, &target), &got) in
            spec.mask.data().iter().zip(spec.reference.data()).zip(out.data())
        {
            let got = if clamp { got.clamp(0.0, 1.0) } else { got };
            if m == 0.0 {
                err += (got - target) * (got - target);
                n += 1;
            }
        }
    }
    err / n as f64
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    // each arg: <label>=<checkpoint path>; data flags inferred from label
    for arg in &args {
        let (label, path) = arg.split_once('=').expect("label=path");
        let bin = label.contains("bin");
        let (model, _) = DenoiserModel::load(std::path::Path::new(path)).unwrap();
        let cfg = model.config().clone();
        let sched = cosine_schedule(cfg.timesteps, DEFAULT_COSINE_OFFSET).unwrap();

        let opts = SineOptions { bin_aligned: bin, ..SineOptions::default() };
        let all = gen_sines(2000, cfg.tau, cfg.dim, 41, &opts).unwrap();
        let (windows, held_out) = split_train_test(&all, 0.9);

        let t0 = Instant::now();
        let fake =
            sample_unconditional(&model, &sched, 512, cfg.tau, cfg.dim, 43, 1).unwrap();
        let dt = t0.elapsed().as_secs_f32();
        let clamped: Vec<Tensor> = fake.iter().map(clamp01).collect();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for t in &fake {
            for &v in t.data() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        println!(
            "{label}: range [{lo:.3},{hi:.3}] oob {:.4} | tv50 raw {:.4} clamped {:.4} | tv20 clamped {:.4}  ({dt:.0}s sample)",
            out_of_range_frac(&fake),
            marginal_tv(&windows, &fake, 50).unwrap(),
            marginal_tv(&windows, &clamped, 50).unwrap(),
            marginal_tv(&windows, &clamped, 20).unwrap(),
        );

        // guided vs replace at eta defaults and 0.01, seeds 900..902
        for eta in [0.01, 0.005] {
            let refs = &held_out[..8];
            let mask_spec = MaskSpec::Geometric { missing_ratio: 0.5, mean_missing_len: 5.0 };
            let (mut g_raw, mut r_raw, mut g_cl, mut r_cl) = (0.0, 0.0, 0.0, 0.0);
            let n_seeds = 3u64;
            for s in 0..n_seeds {
                let seed = 900 + s;
                let mut specs = Vec::new();
                for (j, reference) in refs.iter().enumerate() {
                    let mask = gen_mask(&mask_spec, cfg.tau, cfg.dim, seed, j as u64).unwrap();
                    let mut spec = ConditionSpec::new(reference.clone(), mask);
                    spec.eta = Some(eta);
                    specs.push(spec);
                }
                let guided = sample_conditional_batch(
                    &model, &sched, &specs, ConditionalMode::Guided, seed, 1,
                )
                .unwrap();
                let replaced = sample_conditional_batch(
                    &model, &sched, &specs, ConditionalMode::ReplaceOnly, seed, 1,
                )
                .unwrap();
                g_raw += masked_mse(&specs, &guided, false);
                r_raw += masked_mse(&specs, &replaced, false);
                g_cl += masked_mse(&specs, &guided, true);
                r_cl += masked_mse(&specs, &replaced, true);
            }
            let k = n_seeds as f64;
            println!(
                "  eta {eta}: raw guided {:.5} vs replace {:.5} | clamped guided {:.5} vs replace {:.5}",
                g_raw / k, r_raw / k, g_cl / k, r_cl / k
            );
        }
    }
}
