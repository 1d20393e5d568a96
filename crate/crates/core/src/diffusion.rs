//! Pure diffusion-process math.
//!
//! The forward chain destroys a signal by repeated Gaussian corruption; its
//! marginal at cumulative level `alphabar` has the closed form
//! `sqrt(alphabar) x0 + sqrt(1 - alphabar) eps`. The denoiser network is
//! trained to predict `eps`, so sampling first inverts that
//! parameterization to an estimate of the clean signal and then applies the
//! reverse-step posterior from [`crate::schedule`].
//!
//! Everything here is a pure function of its inputs; callers own the noise
//! tensors, so determinism is entirely in their hands.

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::{pairwise_sum, Scalar, Tensor};

/// Smallest `alphabar` accepted by [`predict_clean`].
///
/// The inversion divides by `sqrt(alphabar)`; below this floor the division
/// would overflow `f32` intermediates. Long inference schedules with large
/// final variance reach `alphabar` around 1e-67, so the guard sits well
/// beneath anything a valid schedule can produce.
pub const CONDITIONING_FLOOR: f64 = 1e-70;

/// Marginal coefficients `(sqrt(alphabar), sqrt(1 - alphabar))`.
pub fn marginal_coeffs(alphabar: f64) -> (f64, f64) {
    (alphabar.sqrt(), (1.0 - alphabar).sqrt())
}

/// Sample of the forward marginal at cumulative level `alphabar`:
/// `sqrt(alphabar) * clean + sqrt(1 - alphabar) * noise`.
pub fn forward_marginal_sample<T: Scalar>(
    clean: &Tensor<T>,
    alphabar: f64,
    noise: &Tensor<T>,
) -> Result<Tensor<T>> {
    if !(alphabar > 0.0 && alphabar <= 1.0) {
        return Err(Error::InvalidArg(format!(
            "alphabar {alphabar} outside (0, 1]"
        )));
    }
    clean.check_finite("forward_marginal_sample clean")?;
    noise.check_finite("forward_marginal_sample noise")?;
    let (cs, cn) = marginal_coeffs(alphabar);
    let (cs, cn) = (T::of_f64(cs), T::of_f64(cn));
    clean.zip_map(noise, |x, e| cs * x + cn * e)
}

/// Invert the noise parameterization:
/// `clean_est = (noisy - sqrt(1 - alphabar) * noise_est) / sqrt(alphabar)`.
///
/// Exact algebraic inverse of [`forward_marginal_sample`] when `noise_est`
/// is the noise actually injected.
pub fn predict_clean<T: Scalar>(
    noisy: &Tensor<T>,
    noise_est: &Tensor<T>,
    alphabar: f64,
) -> Result<Tensor<T>> {
    if !(alphabar >= CONDITIONING_FLOOR && alphabar <= 1.0) {
        return Err(Error::InvalidArg(format!(
            "alphabar {alphabar} below conditioning floor {CONDITIONING_FLOOR} or above 1"
        )));
    }
    noisy.check_finite("predict_clean noisy")?;
    noise_est.check_finite("predict_clean noise_est")?;
    let (cs, cn) = marginal_coeffs(alphabar);
    let inv = T::of_f64(1.0 / cs);
    let cn = T::of_f64(cn);
    noisy.zip_map(noise_est, |z, e| (z - cn * e) * inv)
}

/// One reverse diffusion step:
/// `coef_clean * clean_est + coef_current * current + sqrt(variance) * noise`.
///
/// At `t = 1` the posterior variance is zero and the result equals
/// `clean_est` exactly.
pub fn reverse_step<T: Scalar>(
    current: &Tensor<T>,
    clean_est: &Tensor<T>,
    t: usize,
    schedule: &NoiseSchedule,
    noise: &Tensor<T>,
) -> Result<Tensor<T>> {
    if t < 1 || t > schedule.steps() {
        return Err(Error::InvalidArg(format!(
            "step {t} outside 1..={}",
            schedule.steps()
        )));
    }
    current.check_same_shape(clean_est)?;
    current.check_same_shape(noise)?;
    current.check_finite("reverse_step current")?;
    clean_est.check_finite("reverse_step clean_est")?;
    let c = schedule.posterior_coeffs(t);
    let (cc, cx, sd) = (
        T::of_f64(c.coef_clean),
        T::of_f64(c.coef_current),
        T::of_f64(c.variance.sqrt()),
    );
    let mut out = Tensor::zeros(current.shape());
    let od = out.data_mut();
    let (cd, xd, nd) = (clean_est.data(), current.data(), noise.data());
    for i in 0..od.len() {
        od[i] = cc * cd[i] + cx * xd[i] + sd * nd[i];
    }
    Ok(out)
}

/// Mean absolute error between the injected and the predicted noise;
/// the training objective of the denoiser.
pub fn base_loss<T: Scalar>(noise: &Tensor<T>, noise_est: &Tensor<T>) -> Result<f64> {
    noise.check_same_shape(noise_est)?;
    let diffs: Vec<T> = noise
        .data()
        .iter()
        .zip(noise_est.data().iter())
        .map(|(&a, &b)| (a - b).abs())
        .collect();
    Ok(pairwise_sum(&diffs) / diffs.len() as f64)
}

/// Residual the diffusion model is trained on: `clean - initial`.
/// With a null initial prediction this degenerates to the clean image and
/// the objective reduces to the base (non-residual) model.
pub fn residual_target<T: Scalar>(clean: &Tensor<T>, initial: &Tensor<T>) -> Result<Tensor<T>> {
    clean.sub(initial)
}
