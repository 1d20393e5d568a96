//! Diffusion noise schedules.
//!
//! A schedule fixes the per-step transition coefficients `alpha_t` of the
//! forward chain and the cumulative products `alphabar_t` (with
//! `alphabar_0 = 1`). Training samples a *continuous* noise level
//! `sqrt(alphabar)` from a piecewise uniform distribution over the schedule's
//! intervals, which is what lets inference run under a different, usually
//! much shorter, schedule than the one used for training.
//!
//! All schedule arithmetic is done in `f64`: with per-step variances as small
//! as 1e-6 the cumulative products lose real precision in `f32` over a few
//! thousand steps.

use crate::error::{Error, Result};
use rand::Rng;

/// Variance floor for the first step of inference schedules.
pub const INFERENCE_VAR_START: f64 = 1e-6;

/// Per-step `alpha_t` plus cumulative `alphabar_t` tables for a `T`-step chain.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    /// `alpha_t` for t = 1..=T, stored at index t-1.
    alphas: Vec<f64>,
    /// `alphabar_t` for t = 0..=T; index 0 holds the exact 1.0.
    alphabars: Vec<f64>,
}

/// Posterior coefficients of the reverse diffusion step at a fixed `t`:
/// mean = `coef_clean * x0 + coef_current * x_t`, variance = `variance`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosteriorCoeffs {
    pub coef_clean: f64,
    pub coef_current: f64,
    pub variance: f64,
}

impl NoiseSchedule {
    /// Linear interpolation of the per-step variance `1 - alpha_t` from
    /// `var_start` (t = 1) to `var_end` (t = T). For `T = 1` the single
    /// variance is `var_end`.
    pub fn linear(steps: usize, var_start: f64, var_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArg("schedule needs at least one step".into()));
        }
        for (name, v) in [("var_start", var_start), ("var_end", var_end)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidArg(format!(
                    "{name} = {v} outside (0, 1)"
                )));
            }
        }
        if var_start > var_end {
            return Err(Error::InvalidArg(format!(
                "var_start {var_start} > var_end {var_end}"
            )));
        }
        let alphas: Vec<f64> = (0..steps)
            .map(|i| {
                let frac = if steps == 1 {
                    1.0
                } else {
                    i as f64 / (steps - 1) as f64
                };
                1.0 - (var_start + (var_end - var_start) * frac)
            })
            .collect();
        let mut alphabars = Vec::with_capacity(steps + 1);
        alphabars.push(1.0);
        let mut prod = 1.0;
        for &a in &alphas {
            prod *= a;
            alphabars.push(prod);
        }
        Ok(NoiseSchedule { alphas, alphabars })
    }

    /// Inference-time schedule: the initial forward variance is pinned to
    /// [`INFERENCE_VAR_START`], only the final variance varies.
    pub fn inference(steps: usize, var_end: f64) -> Result<Self> {
        Self::linear(steps, INFERENCE_VAR_START, var_end)
    }

    pub fn steps(&self) -> usize {
        self.alphas.len()
    }

    /// `alpha_t`, 1-based.
    pub fn alpha(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.steps(), "step {t} out of range");
        self.alphas[t - 1]
    }

    /// `alphabar_t`, valid for t = 0..=T with `alphabar_0 = 1`.
    pub fn alphabar(&self, t: usize) -> f64 {
        assert!(t <= self.steps(), "step {t} out of range");
        self.alphabars[t]
    }

    /// Closed-form coefficients of the reverse step posterior at step `t`:
    ///
    /// mean = sqrt(alphabar_{t-1}) (1 - alpha_t) / (1 - alphabar_t) * x0
    ///      + sqrt(alpha_t) (1 - alphabar_{t-1}) / (1 - alphabar_t) * x_t
    /// var  = (1 - alphabar_{t-1}) (1 - alpha_t) / (1 - alphabar_t)
    ///
    /// At t = 1 this collapses to (1, 0, 0) because `alphabar_0 = 1`.
    pub fn posterior_coeffs(&self, t: usize) -> PosteriorCoeffs {
        let a = self.alpha(t);
        let ab = self.alphabar(t);
        let ab_prev = self.alphabar(t - 1);
        let denom = 1.0 - ab;
        PosteriorCoeffs {
            coef_clean: ab_prev.sqrt() * (1.0 - a) / denom,
            coef_current: a.sqrt() * (1.0 - ab_prev) / denom,
            variance: (1.0 - ab_prev) * (1.0 - a) / denom,
        }
    }

    pub fn level_intervals(&self) -> LevelIntervals {
        LevelIntervals {
            bounds: self.alphabars.iter().map(|ab| ab.sqrt()).collect(),
        }
    }
}

/// Noise-level interval boundaries `l_0 = 1, l_i = sqrt(alphabar_i)`,
/// strictly decreasing.
#[derive(Clone, Debug)]
pub struct LevelIntervals {
    bounds: Vec<f64>,
}

impl LevelIntervals {
    pub fn count(&self) -> usize {
        self.bounds.len() - 1
    }

    pub fn bound(&self, i: usize) -> f64 {
        self.bounds[i]
    }

    /// Level for interval `k` (1-based) at uniform coordinate `u` in [0, 1]:
    /// `u = 0` gives the lower bound `l_k`, `u = 1` the upper bound `l_{k-1}`.
    pub fn level_at(&self, k: usize, u: f64) -> f64 {
        assert!(k >= 1 && k <= self.count(), "interval {k} out of range");
        let hi = self.bounds[k - 1];
        let lo = self.bounds[k];
        lo + u * (hi - lo)
    }

    /// Draw a continuous noise level `sqrt(alphabar)`: pick one of the `T`
    /// intervals uniformly, then sample uniformly inside it. The result lies
    /// in `[l_T, 1]`.
    pub fn sample_level<R: Rng>(&self, rng: &mut R) -> f64 {
        let k = rng.random_range(1..=self.count());
        let u: f64 = rng.random();
        self.level_at(k, u)
    }

    /// Analytic CDF of [`Self::sample_level`], used by the test oracle.
    pub fn cdf(&self, x: f64) -> f64 {
        let t = self.count() as f64;
        let mut acc = 0.0;
        for k in 1..=self.count() {
            let hi = self.bounds[k - 1];
            let lo = self.bounds[k];
            if x >= hi {
                acc += 1.0;
            } else if x > lo {
                acc += (x - lo) / (hi - lo);
            }
        }
        acc / t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn linear_schedule_paper_endpoints() {
        let s = NoiseSchedule::linear(2000, 1e-6, 0.01).unwrap();
        assert_eq!(s.alpha(1), 1.0 - 1e-6);
        assert!((s.alpha(2000) - 0.99).abs() < 1e-15);
    }

    #[test]
    fn linear_schedule_single_step() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha(1), 0.5);
        assert_eq!(s.alphabar(1), 0.5);
        assert_eq!(s.alphabar(0), 1.0);
    }

    #[test]
    fn linear_schedule_hand_cumprod() {
        // variances 0.1, 0.2, 0.3 -> alphas 0.9, 0.8, 0.7; cumprod by hand.
        let s = NoiseSchedule::linear(3, 0.1, 0.3).unwrap();
        assert!((s.alpha(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha(2) - 0.8).abs() < 1e-15);
        assert!((s.alpha(3) - 0.7).abs() < 1e-15);
        assert!((s.alphabar(3) - 0.504).abs() < 1e-15);
    }

    #[test]
    fn rejects_invalid_args() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(4, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(4, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::linear(4, 0.3, 0.2).is_err());
    }

    #[test]
    fn alphabar_matches_independent_product() {
        let s = NoiseSchedule::linear(500, 1e-6, 0.2).unwrap();
        let mut prod = 1.0f64;
        for t in 1..=500 {
            prod *= s.alpha(t);
            let rel = (s.alphabar(t) - prod).abs() / prod;
            assert!(rel < 1e-14, "t={t} rel={rel}");
        }
    }

    #[test]
    fn posterior_boundary_step() {
        let s = NoiseSchedule::linear(5, 0.1, 0.3).unwrap();
        let c = s.posterior_coeffs(1);
        assert_eq!(c.coef_clean, 1.0);
        assert_eq!(c.coef_current, 0.0);
        assert_eq!(c.variance, 0.0);
    }

    #[test]
    fn posterior_hand_values() {
        // alphas (0.9, 0.8): alphabar_1 = 0.9, alphabar_2 = 0.72.
        // coef_clean  = sqrt(0.9)*0.2/0.28, coef_current = sqrt(0.8)*0.1/0.28,
        // variance    = 0.1*0.2/0.28.
        let s = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
        let c = s.posterior_coeffs(2);
        assert!((c.coef_clean - 0.677_630_85).abs() < 1e-6, "{c:?}");
        assert!((c.coef_current - 0.319_438_28).abs() < 1e-6, "{c:?}");
        assert!((c.variance - 0.071_428_571).abs() < 1e-9, "{c:?}");
    }

    #[test]
    fn posterior_no_noise_limit() {
        // alpha_t -> 1: variance -> 0 and the mean -> x_t.
        let s = NoiseSchedule::linear(2, 1e-12, 1e-12).unwrap();
        let c = s.posterior_coeffs(2);
        assert!(c.variance >= 0.0 && c.variance < 1e-11);
        // On x0 = x_t the mean weights must sum to ~1 with current dominant.
        assert!((c.coef_clean + c.coef_current - 1.0).abs() < 1e-6);
        assert!(c.coef_current > 0.49);
    }

    #[test]
    fn posterior_variance_nonnegative_everywhere() {
        for (t_steps, vs, ve) in [(1, 0.3, 0.3), (7, 1e-6, 0.5), (200, 1e-4, 0.02)] {
            let s = NoiseSchedule::linear(t_steps, vs, ve).unwrap();
            for t in 1..=t_steps {
                let c = s.posterior_coeffs(t);
                assert!(c.variance >= 0.0, "t={t}");
            }
            assert_eq!(s.posterior_coeffs(1).variance, 0.0);
        }
    }

    /// Bayes-consistency oracle: the closed-form reverse-step Gaussian must
    /// be proportional to the product of the one-step transition and the
    /// marginal at t-1, checked by numerical integration on a 1-D grid.
    #[test]
    fn posterior_matches_numerical_bayes_product() {
        let mut rng = rng_from_seed(7);
        for trial in 0..20 {
            let t_steps = rng.random_range(2..=40);
            let ve: f64 = rng.random_range(0.01..0.5);
            let vs = rng.random_range(1e-6..ve.min(0.02));
            let s = NoiseSchedule::linear(t_steps, vs, ve).unwrap();
            let t = rng.random_range(2..=t_steps);
            let x0: f64 = rng.random_range(-1.0..1.0);
            let xt: f64 = rng.random_range(-2.0..2.0);

            let c = s.posterior_coeffs(t);
            let mean = c.coef_clean * x0 + c.coef_current * xt;
            let var = c.variance;

            // Product density p(u) ∝ N(xt; sqrt(alpha_t) u, 1-alpha_t)
            //                      * N(u; sqrt(alphabar_{t-1}) x0, 1-alphabar_{t-1})
            let a = s.alpha(t);
            let ab_prev = s.alphabar(t - 1);
            let log_prod = |u: f64| -> f64 {
                let d1 = xt - a.sqrt() * u;
                let d2 = u - ab_prev.sqrt() * x0;
                -0.5 * d1 * d1 / (1.0 - a) - 0.5 * d2 * d2 / (1.0 - ab_prev)
            };

            // Trapezoid moments on a grid spanning the closed-form mean.
            let sd = var.sqrt().max(1e-9);
            let (lo, hi) = (mean - 10.0 * sd, mean + 10.0 * sd);
            let n = 20_001;
            let step = (hi - lo) / (n - 1) as f64;
            let peak = log_prod(mean);
            let mut z = 0.0;
            let mut m1 = 0.0;
            let mut m2 = 0.0;
            for i in 0..n {
                let u = lo + i as f64 * step;
                let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
                let p = (log_prod(u) - peak).exp() * w;
                z += p;
                m1 += p * u;
                m2 += p * u * u;
            }
            let num_mean = m1 / z;
            let num_var = m2 / z - num_mean * num_mean;

            let mean_rel = (num_mean - mean).abs() / mean.abs().max(1e-6);
            let var_rel = (num_var - var).abs() / var.max(1e-12);
            assert!(mean_rel < 1e-3, "trial {trial}: mean rel {mean_rel}");
            assert!(var_rel < 1e-3, "trial {trial}: var rel {var_rel}");
        }
    }

    #[test]
    fn level_intervals_bounds_and_forced_draws() {
        let s = NoiseSchedule::linear(1, 0.64, 0.64).unwrap();
        let iv = s.level_intervals();
        assert_eq!(iv.count(), 1);
        // lower end of the single interval is sqrt(alphabar_1) = 0.6
        assert!((iv.level_at(1, 0.0) - 0.6).abs() < 1e-15);
        assert_eq!(iv.level_at(1, 1.0), 1.0);
    }

    #[test]
    fn level_samples_stay_in_range() {
        let s = NoiseSchedule::linear(50, 1e-6, 0.3).unwrap();
        let iv = s.level_intervals();
        let floor = s.alphabar(50).sqrt();
        let mut rng = rng_from_seed(3);
        for _ in 0..10_000 {
            let l = iv.sample_level(&mut rng);
            assert!(l <= 1.0 && l >= floor, "level {l}");
        }
    }

    /// Empirical CDF over 1e5 draws vs the analytic piecewise-uniform CDF.
    #[test]
    fn level_sampler_matches_analytic_cdf() {
        let s = NoiseSchedule::linear(30, 1e-4, 0.4).unwrap();
        let iv = s.level_intervals();
        let mut rng = rng_from_seed(11);
        let n = 100_000;
        let mut draws: Vec<f64> = (0..n).map(|_| iv.sample_level(&mut rng)).collect();
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut ks = 0.0f64;
        for (i, &x) in draws.iter().enumerate() {
            let target = iv.cdf(x);
            let lo = i as f64 / n as f64;
            let hi = (i + 1) as f64 / n as f64;
            ks = ks.max((target - lo).abs()).max((hi - target).abs());
        }
        assert!(ks < 0.01, "Kolmogorov distance {ks}");
    }

    #[test]
    fn inference_schedule_pins_first_variance() {
        let s = NoiseSchedule::inference(10, 0.5).unwrap();
        assert_eq!(s.alpha(1), 1.0 - 1e-6);
        assert!((s.alpha(10) - 0.5).abs() < 1e-15);

        let s = NoiseSchedule::inference(2, 0.2).unwrap();
        assert!((s.alpha(1) - (1.0 - 1e-6)).abs() < 1e-18);
        assert!((s.alpha(2) - 0.8).abs() < 1e-15);
        assert!((s.alphabar(2) - (1.0 - 1e-6) * 0.8).abs() < 1e-15);

        let s = NoiseSchedule::inference(500, 0.01).unwrap();
        for t in 1..=500 {
            assert!(s.alphabar(t) < s.alphabar(t - 1));
        }
    }
}
