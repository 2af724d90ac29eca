//! Training loop for the decomposition denoiser.
//!
//! The objective is a step-weighted sum of a time-domain and a frequency-
//! domain penalty on the clean-signal prediction. For a window corrupted to
//! step t,
//!
//!   loss = w_t * (lambda_time * mse(x0_hat, x0)
//!                 + lambda_freq * spec(x0_hat - x0))
//!
//! where spec is the multiplicity-weighted one-sided DFT energy of the
//! error divided by the grid size, and w_t = scale * alpha_t * (1 -
//! alpha_bar_t) / beta_t^2 downweights the easy low-noise steps. Gradients
//! are taken per example on private tapes and folded in example order, so
//! the batch gradient is bitwise identical for any worker count.
//!
//! Optimization is Adam with linear warmup and linear decay to a floor.
//! Checkpoints embed the optimizer moments and the generator position, so
//! a resumed run reproduces the uninterrupted one exactly.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::denoiser::DenoiserModel;
use crate::error::{CoreError, Result};
use crate::exec;
use crate::nn::ParamSet;
use crate::rng::{self, stream};
use crate::schedule::NoiseSchedule;
use crate::tensor::{bin_multiplicity, n_bins, Tensor};

/// Losses above this are treated as divergence and abort the run.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Trailing window used for the smoothed loss column.
pub const SMOOTH_WINDOW: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Overall scale of the step weight w_t.
    pub weight_scale: f64,
    /// Coefficient of the time-domain term.
    pub time_weight: f64,
    /// Coefficient of the frequency-domain term.
    pub freq_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { weight_scale: 0.01, time_weight: 1.0, freq_weight: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub lr_floor: f64,
    pub weight_scale: f64,
    pub time_weight: f64,
    pub freq_weight: f64,
    /// Global gradient norm cap; unset disables clipping.
    pub grad_clip: Option<f64>,
    /// Extra checkpoints every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Worker threads for the batch: 1 sequential, 0 the default pool.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 64,
            learning_rate: 0.0008,
            warmup_steps: 500,
            lr_floor: 1e-5,
            weight_scale: 0.01,
            time_weight: 1.0,
            freq_weight: 1.0,
            grad_clip: None,
            checkpoint_every: 0,
            workers: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CoreError::InvalidConfig(m));
        // steps == 0 is legal: the run only writes an init checkpoint.
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return fail(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.lr_floor >= 0.0) || self.lr_floor > self.learning_rate {
            return fail(format!(
                "lr_floor {} must lie in [0, learning_rate]",
                self.lr_floor
            ));
        }
        if self.weight_scale <= 0.0 || self.time_weight < 0.0 || self.freq_weight < 0.0 {
            return fail("loss weights must be positive (scale) / non-negative".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return fail(format!("grad_clip {c} must be positive"));
            }
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            weight_scale: self.weight_scale,
            time_weight: self.time_weight,
            freq_weight: self.freq_weight,
        }
    }
}

/// Step weight w_t = scale * alpha_t * (1 - alpha_bar_t) / beta_t^2.
pub fn loss_weight(schedule: &NoiseSchedule, t: usize, scale: f64) -> f64 {
    let beta = schedule.beta(t);
    scale * schedule.alpha(t) * (1.0 - schedule.alpha_bar(t)) / (beta * beta)
}

/// One corrupted training example with its noise draw made explicit, so
/// losses are exactly reproducible.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub x0: Tensor,
    pub t: usize,
    pub eps: Tensor,
}

/// sqrt of the one-sided bin multiplicities, broadcast over channels, used
/// to weight the spectrum so conjugate bins count twice.
fn multiplicity_sqrt(tau: usize, d: usize) -> Tensor {
    Tensor::from_fn_2d(n_bins(tau), d, |k, _| bin_multiplicity(tau, k).sqrt())
}

/// Loss and parameter gradients for a single example, on a private tape.
pub fn example_loss_and_grads(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    ex: &TrainExample,
    weights: &LossWeights,
) -> Result<(f64, Vec<Tensor>)> {
    let cfg = model.config();
    let grid = (cfg.tau * cfg.dim) as f64;

    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape);
    let x_t = schedule.q_sample(&ex.x0, ex.t, &ex.eps)?;
    let xt_var = tape.constant(x_t);
    let out = model.forward(&mut tape, &bound, xt_var, ex.t)?;

    let x0_var = tape.constant(ex.x0.clone());
    let diff = tape.sub(out.x0hat, x0_var)?;

    let l_time = tape.sum_squares(diff)?;
    let (re, im) = tape.rdft(diff)?;
    let w = tape.constant(multiplicity_sqrt(cfg.tau, cfg.dim));
    let rw = tape.mul(re, w)?;
    let iw = tape.mul(im, w)?;
    let sr = tape.sum_squares(rw)?;
    let si = tape.sum_squares(iw)?;
    let l_freq = tape.add(sr, si)?;

    let lt = tape.scale(l_time, weights.time_weight / grid)?;
    let lf = tape.scale(l_freq, weights.freq_weight / grid)?;
    let combined = tape.add(lt, lf)?;
    let w_t = loss_weight(schedule, ex.t, weights.weight_scale);
    let loss = tape.scale(combined, w_t)?;

    tape.backward(loss)?;
    let grads = bound.iter().map(|v| tape.grad_tensor(*v)).collect();
    Ok((tape.scalar(loss), grads))
}

/// Mean loss and mean gradients over a batch. Examples are evaluated on
/// independent tapes (possibly in parallel) and folded in example order;
/// the result does not depend on the worker count.
pub fn batch_loss_and_grads(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    examples: &[TrainExample],
    weights: &LossWeights,
    workers: usize,
) -> Result<(f64, Vec<Tensor>)> {
    if examples.is_empty() {
        return Err(CoreError::InvalidConfig("empty batch".into()));
    }
    let per: Vec<Result<(f64, Vec<Tensor>)>> =
        exec::map_indexed(examples.len(), workers, |i| {
            example_loss_and_grads(model, schedule, &examples[i], weights)
        });

    let inv_b = 1.0 / examples.len() as f64;
    let mut loss = 0.0;
    let mut total: Option<Vec<Tensor>> = None;
    for r in per {
        let (l, grads) = r?;
        loss += l;
        total = Some(match total {
            None => grads,
            Some(acc) => acc
                .into_iter()
                .zip(grads)
                .map(|(a, g)| a.add(&g))
                .collect::<Result<Vec<_>>>()?,
        });
    }
    let total = total.expect("non-empty batch").into_iter().map(|g| g.scale(inv_b)).collect();
    Ok((loss * inv_b, total))
}

// ---- optimizer --------------------------------------------------------

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.96;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: usize,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Adam {
        let zeros: Vec<Tensor> =
            (0..params.len()).map(|i| Tensor::zeros(params.tensor(i).shape())).collect();
        Adam { m: zeros.clone(), v: zeros, step: 0 }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One bias-corrected update of every parameter in place.
    pub fn update(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(CoreError::shape(
                "adam update",
                format!("{} grads for {} params", grads.len(), params.len()),
            ));
        }
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = &grads[i];
            self.m[i] = self.m[i].scale(ADAM_BETA1).add_scaled(g, 1.0 - ADAM_BETA1)?;
            let g2 = g.map(|x| x * x);
            self.v[i] = self.v[i].scale(ADAM_BETA2).add_scaled(&g2, 1.0 - ADAM_BETA2)?;
            let m = &self.m[i];
            let v = &self.v[i];
            let updated = params.tensor(i).zip_map_3(m, v, |p, mi, vi| {
                p - lr * (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS)
            })?;
            params.set_tensor(i, updated);
        }
        Ok(())
    }

    fn to_state(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        (
            self.m.iter().map(|t| t.data().to_vec()).collect(),
            self.v.iter().map(|t| t.data().to_vec()).collect(),
        )
    }

    fn restore(params: &ParamSet, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, step: usize) -> Result<Adam> {
        if m.len() != params.len() || v.len() != params.len() {
            return Err(CoreError::Checkpoint("optimizer state length mismatch".into()));
        }
        let rebuild = |data: Vec<Vec<f64>>| -> Result<Vec<Tensor>> {
            data.into_iter()
                .enumerate()
                .map(|(i, d)| Tensor::from_vec(params.tensor(i).shape(), d))
                .collect()
        };
        Ok(Adam { m: rebuild(m)?, v: rebuild(v)?, step })
    }
}

/// Piecewise-linear learning rate: ramp from 0 over `warmup` steps, then
/// decay linearly from `base` to `floor` at `total`, constant after.
pub fn lr_at(step: usize, base: f64, warmup: usize, floor: f64, total: usize) -> f64 {
    if warmup > 0 && step <= warmup {
        return base * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return base.max(floor);
    }
    let frac = (step - warmup) as f64 / (total - warmup) as f64;
    let lr = base + (floor - base) * frac.min(1.0);
    lr.max(floor)
}

// ---- training loop ----------------------------------------------------

/// Resumable loop state persisted inside checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    pub adam_m: Vec<Vec<f64>>,
    pub adam_v: Vec<Vec<f64>>,
    pub rng_word_pos: u128,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRow {
    pub step: usize,
    pub loss: f64,
    pub smoothed: f64,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps_run: usize,
    pub final_loss: f64,
    pub final_smoothed: f64,
    pub history: Vec<LossRow>,
}

#[derive(Debug, Default, Clone)]
pub struct TrainOutputs<'a> {
    /// Per-step loss table (step, loss, smoothed); appended to on resume.
    pub loss_csv: Option<&'a Path>,
    /// Checkpoint destination, written at the end and every
    /// `checkpoint_every` steps.
    pub checkpoint: Option<&'a Path>,
}

/// Runs (or resumes) training of `model` on the given clean windows.
///
/// All randomness comes from the train sub-stream of `seed`; a run resumed
/// from a checkpoint continues that stream at the stored position and ends
/// bitwise identical to an uninterrupted run.
pub fn train(
    model: &mut DenoiserModel,
    schedule: &NoiseSchedule,
    data: &[Tensor],
    cfg: &TrainConfig,
    seed: u64,
    resume: Option<TrainState>,
    outputs: &TrainOutputs,
) -> Result<TrainSummary> {
    train_partial(model, schedule, data, cfg, seed, resume, outputs, cfg.steps)
}

/// [`train`], but stopping after `stop_at` steps of the configured run, the
/// way an externally killed process would. The learning-rate schedule and
/// batch stream still follow `cfg.steps`, so resuming from the checkpoint
/// this leaves behind reproduces the uninterrupted run exactly.
#[allow(clippy::too_many_arguments)]
pub fn train_partial(
    model: &mut DenoiserModel,
    schedule: &NoiseSchedule,
    data: &[Tensor],
    cfg: &TrainConfig,
    seed: u64,
    resume: Option<TrainState>,
    outputs: &TrainOutputs,
    stop_at: usize,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if stop_at > cfg.steps {
        return Err(CoreError::InvalidConfig(format!(
            "stop_at {stop_at} exceeds the configured {} steps",
            cfg.steps
        )));
    }
    let mcfg = model.config().clone();
    if schedule.t_max() != mcfg.timesteps {
        return Err(CoreError::InvalidConfig(format!(
            "schedule has {} steps but the model expects {}",
            schedule.t_max(),
            mcfg.timesteps
        )));
    }
    if data.is_empty() {
        return Err(CoreError::Data("no training windows".into()));
    }
    for (i, w) in data.iter().enumerate() {
        if w.shape() != [mcfg.tau, mcfg.dim] {
            return Err(CoreError::shape(
                "training data",
                format!("window {i} is {:?}, model wants [{}, {}]", w.shape(), mcfg.tau, mcfg.dim),
            ));
        }
    }

    let mut r = rng::substream(seed, stream::TRAIN, 0);
    let (mut adam, start_step) = match resume {
        None => (Adam::new(model.params()), 0),
        Some(state) => {
            if state.step >= cfg.steps {
                return Err(CoreError::InvalidConfig(format!(
                    "checkpoint is at step {} but the run ends at {}",
                    state.step, cfg.steps
                )));
            }
            let step = state.step;
            let adam = Adam::restore(model.params(), state.adam_m, state.adam_v, step)?;
            r.set_word_pos(state.rng_word_pos);
            (adam, step)
        }
    };

    let mut csv = match outputs.loss_csv {
        Some(path) => {
            let fresh = start_step == 0 || !path.exists();
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(path)?;
            let mut w = std::io::BufWriter::new(file);
            if fresh {
                writeln!(w, "step,loss,smoothed")?;
            }
            Some(w)
        }
        None => None,
    };

    let weights = cfg.loss_weights();
    let mut window: VecDeque<f64> = VecDeque::with_capacity(SMOOTH_WINDOW);
    let mut history = Vec::with_capacity(stop_at.saturating_sub(start_step));
    let mut last = (0.0, 0.0);

    for step in start_step + 1..=stop_at {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let idx = r.gen_range(0..data.len());
            let t = r.gen_range(1..=mcfg.timesteps);
            let eps = rng::normal_tensor(&mut r, &[mcfg.tau, mcfg.dim]);
            batch.push(TrainExample { x0: data[idx].clone(), t, eps });
        }
        let (loss, mut grads) =
            batch_loss_and_grads(model, schedule, &batch, &weights, cfg.workers)?;
        if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
            return Err(CoreError::Diverged { step, loss, t: 0 });
        }

        if let Some(cap) = cfg.grad_clip {
            let norm = grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt();
            if norm > cap {
                let s = cap / norm;
                for g in &mut grads {
                    *g = g.scale(s);
                }
            }
        }

        let lr = lr_at(step, cfg.learning_rate, cfg.warmup_steps, cfg.lr_floor, cfg.steps);
        adam.update(model.params_mut(), &grads, lr)?;

        if window.len() == SMOOTH_WINDOW {
            window.pop_front();
        }
        window.push_back(loss);
        let smoothed = window.iter().sum::<f64>() / window.len() as f64;
        last = (loss, smoothed);
        history.push(LossRow { step, loss, smoothed });
        if let Some(w) = csv.as_mut() {
            writeln!(w, "{step},{loss},{smoothed}")?;
        }

        let at_checkpoint = cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0;
        if at_checkpoint || step == stop_at {
            if let Some(path) = outputs.checkpoint {
                let (m, v) = adam.to_state();
                let state = TrainState { step, adam_m: m, adam_v: v, rng_word_pos: r.get_word_pos() };
                model.save(path, Some(serde_json::to_value(&state)?))?;
            }
        }
    }
    if stop_at == start_step {
        // Zero steps requested: still leave a loadable checkpoint so a
        // steps = 0 run materializes exactly the initialized model.
        if let Some(path) = outputs.checkpoint {
            let (m, v) = adam.to_state();
            let state =
                TrainState { step: start_step, adam_m: m, adam_v: v, rng_word_pos: r.get_word_pos() };
            model.save(path, Some(serde_json::to_value(&state)?))?;
        }
    }
    if let Some(mut w) = csv {
        w.flush()?;
    }

    Ok(TrainSummary {
        steps_run: stop_at.saturating_sub(start_step),
        final_loss: last.0,
        final_smoothed: last.1,
        history,
    })
}
