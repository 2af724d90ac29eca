//! Forward-process noise schedule and reverse-step algebra.
//!
//! The forward chain corrupts a clean signal x0 through
//! q(x_t | x_{t-1}) = N(sqrt(1-beta_t) x_{t-1}, beta_t I), which collapses to
//! x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps with abar the running product
//! of alpha_t = 1 - beta_t. Conditioned on (x0, x_t) the previous state is
//! Gaussian with mean c0[t] x0 + c1[t] x_t and a scalar variance; those
//! coefficients are precomputed here with the convention abar_0 = 1, which
//! makes the t=1 step exact and noise-free. The reverse step perturbs the
//! posterior mean by the posterior standard deviation (not the variance).

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;
pub const BETA_CLIP: f64 = 0.999;

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    t_max: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    c0: Vec<f64>,
    c1: Vec<f64>,
    post_var: Vec<f64>,
}

/// Cosine schedule: abar follows cos^2(((t/T + s)/(1 + s)) * pi/2),
/// normalized to 1 at t=0, with per-step betas clipped at [`BETA_CLIP`].
pub fn cosine_schedule(t_max: usize, s: f64) -> Result<NoiseSchedule> {
    if t_max == 0 {
        return Err(CoreError::InvalidConfig("cosine_schedule: T must be >= 1".into()));
    }
    if !(s > 0.0) || !s.is_finite() {
        return Err(CoreError::InvalidConfig(format!("cosine_schedule: offset s={s} must be > 0")));
    }
    let f = |t: usize| -> f64 {
        let arg = (t as f64 / t_max as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
        arg.cos().powi(2)
    };
    let mut beta = vec![0.0; t_max + 1];
    let mut alpha = vec![1.0; t_max + 1];
    let mut alpha_bar = vec![1.0; t_max + 1];
    for t in 1..=t_max {
        let b = (1.0 - f(t) / f(t - 1)).min(BETA_CLIP);
        if !(b > 0.0 && b < 1.0) {
            return Err(CoreError::OutOfRange {
                context: "cosine_schedule".into(),
                detail: format!("beta[{t}] = {b}"),
            });
        }
        beta[t] = b;
        alpha[t] = 1.0 - b;
        alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
    }

    let mut c0 = vec![0.0; t_max + 1];
    let mut c1 = vec![0.0; t_max + 1];
    let mut post_var = vec![0.0; t_max + 1];
    for t in 1..=t_max {
        let one_minus = 1.0 - alpha_bar[t];
        c0[t] = alpha_bar[t - 1].sqrt() * beta[t] / one_minus;
        c1[t] = alpha[t].sqrt() * (1.0 - alpha_bar[t - 1]) / one_minus;
        post_var[t] = (1.0 - alpha_bar[t - 1]) / one_minus * beta[t];
    }

    Ok(NoiseSchedule { t_max, beta, alpha, alpha_bar, c0, c1, post_var })
}

impl NoiseSchedule {
    pub fn t_max(&self) -> usize {
        self.t_max
    }

    fn check_t(&self, t: usize, context: &str) -> Result<()> {
        if t == 0 || t > self.t_max {
            return Err(CoreError::OutOfRange {
                context: context.into(),
                detail: format!("t={t} outside 1..={}", self.t_max),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    /// abar_t for t in 0..=T; abar_0 == 1 by convention.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn posterior_coef_x0(&self, t: usize) -> f64 {
        self.c0[t]
    }

    pub fn posterior_coef_xt(&self, t: usize) -> f64 {
        self.c1[t]
    }

    pub fn posterior_var(&self, t: usize) -> f64 {
        self.post_var[t]
    }

    /// Draws the forward corruption x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps.
    pub fn q_sample(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_t(t, "q_sample")?;
        let ab = self.alpha_bar[t];
        x0.scale(ab.sqrt()).add_scaled(eps, (1.0 - ab).sqrt())
    }

    /// Mean of q(x_{t-1} | x_t, x0): c0[t] x0 + c1[t] x_t.
    pub fn posterior_mean(&self, x0: &Tensor, xt: &Tensor, t: usize) -> Result<Tensor> {
        self.check_t(t, "posterior_mean")?;
        x0.scale(self.c0[t]).add_scaled(xt, self.c1[t])
    }

    /// One reverse transition: posterior mean plus the posterior standard
    /// deviation times z. At t=1 the variance is zero, so z is ignored and
    /// the step is deterministic.
    pub fn reverse_step(&self, x0hat: &Tensor, xt: &Tensor, t: usize, z: &Tensor) -> Result<Tensor> {
        self.check_t(t, "reverse_step")?;
        let mean = self.posterior_mean(x0hat, xt, t)?;
        let sd = self.post_var[t].sqrt();
        if sd == 0.0 {
            return Ok(mean);
        }
        mean.add_scaled(z, sd)
    }

    /// Noise implied by a clean estimate: eps = (x_t - sqrt(abar_t) x0) / sqrt(1-abar_t).
    pub fn eps_from_x0(&self, xt: &Tensor, x0: &Tensor, t: usize) -> Result<Tensor> {
        self.check_t(t, "eps_from_x0")?;
        let ab = self.alpha_bar[t];
        xt.add_scaled(x0, -ab.sqrt())?.scale(1.0 / (1.0 - ab).sqrt()).ensure_finite_own("eps_from_x0")
    }

    /// Clean estimate implied by a noise prediction.
    pub fn x0_from_eps(&self, xt: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        self.check_t(t, "x0_from_eps")?;
        let ab = self.alpha_bar[t];
        xt.add_scaled(eps, -(1.0 - ab).sqrt())?.scale(1.0 / ab.sqrt()).ensure_finite_own("x0_from_eps")
    }
}

trait EnsureFiniteOwn: Sized {
    fn ensure_finite_own(self, context: &str) -> Result<Self>;
}

impl EnsureFiniteOwn for Tensor {
    fn ensure_finite_own(self, context: &str) -> Result<Self> {
        self.ensure_finite(context)?;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn t4_matches_closed_form() {
        let s = DEFAULT_COSINE_OFFSET;
        let sched = cosine_schedule(4, s).unwrap();
        let f = |t: f64| ((t / 4.0 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        // The final beta always hits the clip (f(T) ~ 0 makes it ~1), so
        // the closed form holds up to t = T-1 and the last step is clipped.
        for t in 1..=3usize {
            let expect = f(t as f64) / f(0.0);
            assert!(
                close(sched.alpha_bar(t), expect, 1e-12),
                "t={t}: {} vs {expect}",
                sched.alpha_bar(t)
            );
        }
        let clipped = sched.alpha_bar(3) * (1.0 - BETA_CLIP);
        assert!(
            close(sched.alpha_bar(4), clipped, 1e-15),
            "t=4: {} vs clipped {clipped}",
            sched.alpha_bar(4)
        );
    }

    #[test]
    fn alpha_bar_monotone_and_vanishing() {
        let sched = cosine_schedule(1000, DEFAULT_COSINE_OFFSET).unwrap();
        assert_eq!(sched.alpha_bar(0), 1.0);
        for t in 1..=1000 {
            assert!(sched.alpha_bar(t) < sched.alpha_bar(t - 1), "abar not decreasing at {t}");
            assert!(sched.beta(t) > 0.0 && sched.beta(t) <= BETA_CLIP);
        }
        assert!(sched.alpha_bar(1000) < 1e-4);
    }

    #[test]
    fn posterior_matches_scalar_bayes_for_all_t() {
        // Product of the two Gaussians q(x_t|x_{t-1}) and q(x_{t-1}|x0),
        // derived independently from precision-weighted means.
        let sched = cosine_schedule(10, DEFAULT_COSINE_OFFSET).unwrap();
        let mut r = rng::substream(5, "test", 0);
        for t in 1..=10usize {
            for _ in 0..8 {
                let x0 = rng::normal(&mut r) * 1.3;
                let xt = rng::normal(&mut r) * 1.3;
                let expect = if t == 1 {
                    x0 // q(x0 | x0) is degenerate at x0
                } else {
                    let prec_like = sched.alpha(t) / sched.beta(t);
                    let prec_prior = 1.0 / (1.0 - sched.alpha_bar(t - 1));
                    let mean_like = xt / sched.alpha(t).sqrt();
                    let mean_prior = sched.alpha_bar(t - 1).sqrt() * x0;
                    // likelihood mean in x_{t-1} space carries the sqrt(alpha) scale:
                    // q(x_t|x_{t-1}) as a function of x_{t-1} is
                    // N(x_t/sqrt(alpha), beta/alpha).
                    (prec_like * mean_like + prec_prior * mean_prior) / (prec_like + prec_prior)
                };
                let got = sched
                    .posterior_mean(&Tensor::scalar(x0), &Tensor::scalar(xt), t)
                    .unwrap()
                    .data()[0];
                assert!(close(got, expect, 1e-10), "t={t}: {got} vs {expect}");
            }
        }
    }

    #[test]
    fn posterior_variance_matches_scalar_bayes() {
        let sched = cosine_schedule(10, DEFAULT_COSINE_OFFSET).unwrap();
        for t in 2..=10usize {
            let prec = sched.alpha(t) / sched.beta(t) + 1.0 / (1.0 - sched.alpha_bar(t - 1));
            assert!(close(sched.posterior_var(t), 1.0 / prec, 1e-12));
        }
        assert_eq!(sched.posterior_var(1), 0.0);
    }

    #[test]
    fn q_sample_is_nearly_pure_noise_at_t_max() {
        let sched = cosine_schedule(1000, DEFAULT_COSINE_OFFSET).unwrap();
        let x0 = Tensor::filled(&[4, 2], 0.7);
        let mut r = rng::substream(11, "test", 0);
        let eps = rng::normal_tensor(&mut r, &[4, 2]);
        let xt = sched.q_sample(&x0, 1000, &eps).unwrap();
        for (a, b) in xt.data().iter().zip(eps.data()) {
            assert!(close(*a, *b, 0.02), "{a} vs {b}");
        }
    }

    #[test]
    fn q_sample_variance_tracks_one_minus_alpha_bar() {
        let sched = cosine_schedule(100, DEFAULT_COSINE_OFFSET).unwrap();
        let x0 = Tensor::zeros(&[1, 1]);
        let mut r = rng::substream(13, "test", 0);
        for t in [5usize, 50, 100] {
            let n = 20_000;
            let mut acc = 0.0;
            for _ in 0..n {
                let eps = rng::normal_tensor(&mut r, &[1, 1]);
                let xt = sched.q_sample(&x0, t, &eps).unwrap();
                acc += xt.data()[0] * xt.data()[0];
            }
            let var = acc / n as f64;
            let expect = 1.0 - sched.alpha_bar(t);
            assert!(
                (var - expect).abs() < 0.03 * expect.max(0.05),
                "t={t}: {var} vs {expect}"
            );
        }
    }

    #[test]
    fn eps_x0_round_trip() {
        let sched = cosine_schedule(50, DEFAULT_COSINE_OFFSET).unwrap();
        let mut r = rng::substream(17, "test", 0);
        for t in [1usize, 25, 50] {
            let x0 = rng::normal_tensor(&mut r, &[6, 3]);
            let eps = rng::normal_tensor(&mut r, &[6, 3]);
            let xt = sched.q_sample(&x0, t, &eps).unwrap();
            let eps_back = sched.eps_from_x0(&xt, &x0, t).unwrap();
            let x0_back = sched.x0_from_eps(&xt, &eps_back, t).unwrap();
            for (a, b) in eps.data().iter().zip(eps_back.data()) {
                assert!(close(*a, *b, 1e-9), "eps {a} vs {b} at t={t}");
            }
            for (a, b) in x0.data().iter().zip(x0_back.data()) {
                assert!(close(*a, *b, 1e-9), "x0 {a} vs {b} at t={t}");
            }
        }
    }

    #[test]
    fn noise_form_step_equals_x0_form_step() {
        // x_{t-1} = (x_t - beta/sqrt(1-abar) eps) / sqrt(alpha) + sd*z must
        // coincide with the posterior-mean form fed the implied eps.
        let sched = cosine_schedule(30, DEFAULT_COSINE_OFFSET).unwrap();
        let mut r = rng::substream(19, "test", 0);
        for t in [2usize, 15, 30] {
            let x0hat = rng::normal_tensor(&mut r, &[5, 2]);
            let xt = rng::normal_tensor(&mut r, &[5, 2]);
            let z = rng::normal_tensor(&mut r, &[5, 2]);
            let ours = sched.reverse_step(&x0hat, &xt, t, &z).unwrap();

            let eps = sched.eps_from_x0(&xt, &x0hat, t).unwrap();
            let coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
            let mean = xt.add_scaled(&eps, -coef).unwrap().scale(1.0 / sched.alpha(t).sqrt());
            let theirs = mean.add_scaled(&z, sched.posterior_var(t).sqrt()).unwrap();
            for (a, b) in ours.data().iter().zip(theirs.data()) {
                assert!(close(*a, *b, 1e-10), "t={t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn reverse_step_at_t1_ignores_noise() {
        let sched = cosine_schedule(10, DEFAULT_COSINE_OFFSET).unwrap();
        let x0 = Tensor::filled(&[2, 2], 0.4);
        let xt = Tensor::filled(&[2, 2], -1.0);
        let z1 = Tensor::filled(&[2, 2], 3.0);
        let z2 = Tensor::filled(&[2, 2], -3.0);
        let a = sched.reverse_step(&x0, &xt, 1, &z1).unwrap();
        let b = sched.reverse_step(&x0, &xt, 1, &z2).unwrap();
        assert_eq!(a, b);
        // and the t=1 posterior mean is exactly x0
        for v in a.data() {
            assert!(close(*v, 0.4, 1e-12));
        }
    }

    #[test]
    fn t_zero_and_t_over_max_are_rejected() {
        let sched = cosine_schedule(10, DEFAULT_COSINE_OFFSET).unwrap();
        let x = Tensor::zeros(&[1, 1]);
        assert!(sched.q_sample(&x, 0, &x).is_err());
        assert!(sched.q_sample(&x, 11, &x).is_err());
    }
}
