//! Reverse-process samplers: unconditional generation, replace-based
//! infilling, and reconstruction-guided conditional sampling.
//!
//! All three walk the chain t = T..1, asking the model for x0_hat and
//! drawing x_{t-1} from the diffusion posterior. Conditioning adds two
//! mechanisms on top:
//!
//! * replacement: after every step the observed coordinates are
//!   overwritten with a q-sample of the reference at the new noise level,
//!   so the final output carries the observed values exactly;
//! * guidance: before the posterior draw, x_t takes a few gradient descent
//!   steps on the masked reconstruction error plus a fluency term that
//!   keeps a candidate next state close to the recomputed posterior mean.
//!
//! Every sample consumes three private sub-streams (chain noise,
//! replacement noise, guidance candidates) keyed by sample index, so
//! results are independent of worker count and disabling guidance leaves
//! the chain and replacement draws untouched.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::denoiser::DenoiserModel;
use crate::error::{CoreError, Result};
use crate::exec;
use crate::rng::{self, stream};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Anything that predicts the clean signal on a tape; the sampler and the
/// guidance gradient are generic over it.
pub trait Denoise: Sync {
    /// Records the prediction x0_hat for `x_t` at step `t` on `tape`.
    fn forward_on(&self, tape: &mut Tape, x_t: Var, t: usize) -> Result<Var>;

    /// Plain prediction on a scratch tape.
    fn predict_x0(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.input(x_t.clone());
        let out = self.forward_on(&mut tape, xv, t)?;
        Ok(tape.value(out).clone())
    }
}

impl Denoise for DenoiserModel {
    fn forward_on(&self, tape: &mut Tape, x_t: Var, t: usize) -> Result<Var> {
        let bound = self.params().bind(tape);
        Ok(self.forward(tape, &bound, x_t, t)?.x0hat)
    }

    fn predict_x0(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        Ok(self.predict(x_t, t)?.x0hat)
    }
}

/// Per-step guidance iteration counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterSchedule {
    /// 3 updates in the top third of steps, 2 in the middle, 1 in the
    /// bottom, truncated to `budget` total updates spent from t = T down.
    Staged { budget: usize },
    /// The same count at every step, no budget.
    Constant(usize),
}

impl Default for IterSchedule {
    fn default() -> Self {
        IterSchedule::Staged { budget: 200 }
    }
}

impl IterSchedule {
    /// Update count for every step, indexed by t (entry 0 unused).
    pub fn counts(&self, t_max: usize) -> Vec<usize> {
        let mut k = vec![0usize; t_max + 1];
        match *self {
            IterSchedule::Constant(c) => {
                for t in 1..=t_max {
                    k[t] = c;
                }
            }
            IterSchedule::Staged { budget } => {
                let mut left = budget;
                for t in (1..=t_max).rev() {
                    let stage = if 3 * t > 2 * t_max {
                        3
                    } else if 3 * t > t_max {
                        2
                    } else {
                        1
                    };
                    k[t] = stage.min(left);
                    left -= k[t];
                }
            }
        }
        k
    }
}

/// What a conditional sampler must match: observed values, their mask, and
/// the guidance strengths.
#[derive(Debug, Clone)]
pub struct ConditionSpec {
    /// Reference series x_a; only the masked coordinates are read.
    pub reference: Tensor,
    /// 1.0 marks an observed coordinate, 0.0 a missing one.
    pub mask: Tensor,
    /// Gradient step size; unset uses 0.01 * tau * dim.
    pub eta: Option<f64>,
    /// Weight of the posterior-consistency (fluency) term.
    pub gamma: f64,
    pub iters: IterSchedule,
}

impl ConditionSpec {
    pub fn new(reference: Tensor, mask: Tensor) -> ConditionSpec {
        ConditionSpec { reference, mask, eta: None, gamma: 0.05, iters: IterSchedule::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reference.shape() != self.mask.shape() {
            return Err(CoreError::shape(
                "condition spec",
                format!("reference {:?} vs mask {:?}", self.reference.shape(), self.mask.shape()),
            ));
        }
        if self.mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(CoreError::InvalidConfig("mask entries must be 0 or 1".into()));
        }
        if let Some(e) = self.eta {
            if !(e >= 0.0) {
                return Err(CoreError::InvalidConfig(format!("eta {e} must be >= 0")));
            }
        }
        if !(self.gamma >= 0.0) {
            return Err(CoreError::InvalidConfig(format!("gamma {} must be >= 0", self.gamma)));
        }
        Ok(())
    }

    pub fn effective_eta(&self) -> f64 {
        self.eta.unwrap_or(0.01 * self.reference.len() as f64)
    }
}

/// How a conditional request is satisfied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionalMode {
    Guided,
    ReplaceOnly,
}

/// d/dx_t of the guidance objective: the masked reconstruction error of
/// x0_hat plus gamma times the fluency term built from a fresh posterior
/// candidate (held constant) and the recomputed posterior mean. The
/// fluency term is dropped at gamma = 0 and where the posterior variance
/// vanishes (t = 1).
fn guidance_gradient<M: Denoise + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    x_t: &Tensor,
    t: usize,
    spec: &ConditionSpec,
    guide_rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.input(x_t.clone());
    let x0hat = model.forward_on(&mut tape, xv, t)?;

    let mask = tape.constant(spec.mask.clone());
    let reference = tape.constant(spec.reference.clone());
    let err = tape.sub(x0hat, reference)?;
    let masked = tape.mul(err, mask)?;
    let mut objective = tape.sum_squares(masked)?;

    let pv = schedule.posterior_var(t);
    if spec.gamma > 0.0 && pv > 0.0 {
        let mu_x0 = tape.scale(x0hat, schedule.posterior_coef_x0(t))?;
        let mu_xt = tape.scale(xv, schedule.posterior_coef_xt(t))?;
        let mu = tape.add(mu_x0, mu_xt)?;
        let z = rng::normal_tensor(guide_rng, x_t.shape());
        let candidate = tape.value(mu).add_scaled(&z, pv.sqrt())?;
        let candidate = tape.constant(candidate);
        let dev = tape.sub(candidate, mu)?;
        let sq = tape.sum_squares(dev)?;
        let fluency = tape.scale(sq, spec.gamma / pv)?;
        objective = tape.add(objective, fluency)?;
    }

    tape.backward(objective)?;
    Ok(tape.grad_tensor(xv))
}

/// One-shot guided correction of a clean-signal prediction:
/// x0_tilde = x0_hat - eta * d/dx_t (masked error + gamma * fluency).
pub fn guided_x0<M: Denoise + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    x0hat: &Tensor,
    x_t: &Tensor,
    t: usize,
    spec: &ConditionSpec,
    guide_rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    spec.validate()?;
    let eta = spec.effective_eta();
    if eta == 0.0 {
        return Ok(x0hat.clone());
    }
    let g = guidance_gradient(model, schedule, x_t, t, spec, guide_rng)?;
    x0hat.add_scaled(&g, -eta)
}

/// Overwrites the observed coordinates of `x_prev` (the state after the
/// step from t) with the reference noised to level t-1; at t = 1 they
/// become the reference exactly.
pub fn replace_observed(
    reference: &Tensor,
    mask: &Tensor,
    x_prev: &Tensor,
    t: usize,
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    if reference.shape() != mask.shape() || reference.shape() != x_prev.shape() {
        return Err(CoreError::shape(
            "replace_observed",
            format!(
                "reference {:?}, mask {:?}, x_prev {:?}",
                reference.shape(),
                mask.shape(),
                x_prev.shape()
            ),
        ));
    }
    if t == 0 || t > schedule.t_max() {
        return Err(CoreError::OutOfRange {
            context: "replace_observed".into(),
            detail: format!("t={t} outside 1..={}", schedule.t_max()),
        });
    }
    let ab = schedule.alpha_bar(t - 1);
    let (s_sig, s_noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut data = Vec::with_capacity(x_prev.len());
    for i in 0..x_prev.len() {
        let noised = s_sig * reference.data()[i] + s_noise * eps.data()[i];
        let m = mask.data()[i];
        data.push(m * noised + (1.0 - m) * x_prev.data()[i]);
    }
    Tensor::from_vec(x_prev.shape(), data)
}

fn chain_shape(schedule: &NoiseSchedule, tau: usize, dim: usize) -> Result<()> {
    if tau == 0 || dim == 0 {
        return Err(CoreError::InvalidConfig("sample shape must be non-empty".into()));
    }
    if schedule.t_max() == 0 {
        return Err(CoreError::InvalidConfig("schedule has no steps".into()));
    }
    Ok(())
}

/// Draws `n` series of shape tau x d from the reverse chain. Sample i is a
/// pure function of (seed, i); workers only affect wall time.
pub fn sample_unconditional<M: Denoise + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    n: usize,
    tau: usize,
    dim: usize,
    seed: u64,
    workers: usize,
) -> Result<Vec<Tensor>> {
    chain_shape(schedule, tau, dim)?;
    let results: Vec<Result<Tensor>> = exec::map_indexed(n, workers, |i| {
        let mut chain = rng::substream(seed, stream::SAMPLE_CHAIN, i as u64);
        let mut x = rng::normal_tensor(&mut chain, &[tau, dim]);
        for t in (1..=schedule.t_max()).rev() {
            let x0hat = model.predict_x0(&x, t)?;
            let z = rng::normal_tensor(&mut chain, &[tau, dim]);
            x = schedule.reverse_step(&x0hat, &x, t, &z)?;
            x.ensure_finite("unconditional chain")?;
        }
        Ok(x)
    });
    results.into_iter().collect()
}

fn check_conditional_spec(spec: &ConditionSpec, schedule: &NoiseSchedule) -> Result<()> {
    spec.validate()?;
    let shape = spec.reference.shape();
    if shape.len() != 2 {
        return Err(CoreError::shape("sample_conditional", format!("{shape:?}")));
    }
    chain_shape(schedule, shape[0], shape[1])
}

/// One full reverse chain under a condition, on sub-stream `index` of
/// `seed`. Guided mode runs the per-step gradient updates on x_t before
/// each posterior draw; both modes apply replacement.
fn conditional_chain<M: Denoise + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    spec: &ConditionSpec,
    mode: ConditionalMode,
    seed: u64,
    index: u64,
) -> Result<Tensor> {
    let shape = spec.reference.shape().to_vec();
    let t_max = schedule.t_max();
    let counts = spec.iters.counts(t_max);
    let eta = spec.effective_eta();

    let mut chain = rng::substream(seed, stream::SAMPLE_CHAIN, index);
    let mut rep = rng::substream(seed, stream::SAMPLE_REPLACE, index);
    let mut guide = rng::substream(seed, stream::SAMPLE_GUIDANCE, index);
    let mut x = rng::normal_tensor(&mut chain, &shape);
    for t in (1..=t_max).rev() {
        if mode == ConditionalMode::Guided && eta > 0.0 {
            for _ in 0..counts[t] {
                let g = guidance_gradient(model, schedule, &x, t, spec, &mut guide)?;
                x = x.add_scaled(&g, -eta)?;
                x.ensure_finite("guidance update")?;
            }
        }
        let x0hat = model.predict_x0(&x, t)?;
        let z = rng::normal_tensor(&mut chain, &shape);
        let x_prev = schedule.reverse_step(&x0hat, &x, t, &z)?;
        let eps = rng::normal_tensor(&mut rep, &shape);
        x = replace_observed(&spec.reference, &spec.mask, &x_prev, t, &eps, schedule)?;
        x.ensure_finite("conditional chain")?;
    }
    Ok(x)
}

/// Draws `n` conditional series under one condition. Observed coordinates
/// of every output equal the reference exactly; sample i is a pure
/// function of (seed, i).
pub fn sample_conditional<M: Denoise + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    spec: &ConditionSpec,
    mode: ConditionalMode,
    n: usize,
    seed: u64,
    workers: usize,
) -> Result<Vec<Tensor>> {
    check_conditional_spec(spec, schedule)?;
    let results: Vec<Result<Tensor>> = exec::map_indexed(n, workers, |i| {
        conditional_chain(model, schedule, spec, mode, seed, i as u64)
    });
    results.into_iter().collect()
}

/// One conditional sample per spec (window j on sub-stream j), for
/// imputing or forecasting a whole batch of windows in one call.
pub fn sample_conditional_batch<M: Denoise + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    specs: &[ConditionSpec],
    mode: ConditionalMode,
    seed: u64,
    workers: usize,
) -> Result<Vec<Tensor>> {
    for spec in specs {
        check_conditional_spec(spec, schedule)?;
    }
    let results: Vec<Result<Tensor>> = exec::map_indexed(specs.len(), workers, |j| {
        conditional_chain(model, schedule, &specs[j], mode, seed, j as u64)
    });
    results.into_iter().collect()
}
