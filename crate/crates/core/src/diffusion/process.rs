//! Forward corruption, clean-sample prediction and deterministic DDIM
//! sampling. Slice-level kernels do the arithmetic; the [`Tensor`] wrappers
//! validate shapes and ranges.

use super::denoiser::Denoiser;
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

pub(crate) fn forward_diffuse_raw(x0: &[f64], t: usize, eps: &[f64], s: &NoiseSchedule) -> Vec<f64> {
    let ab = s.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect()
}

pub(crate) fn predict_x0_raw(x_t: &[f64], t: usize, eps: &[f64], s: &NoiseSchedule) -> Vec<f64> {
    let ab = s.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x_t.iter().zip(eps).map(|(x, e)| (x - b * e) / a).collect()
}

/// One DDIM update from `t` to `t_prev`; `extra` is only read when `sigma > 0`.
pub(crate) fn ddim_step_raw(
    x_t: &[f64],
    t: usize,
    t_prev: usize,
    eps: &[f64],
    sigma: f64,
    extra: Option<&[f64]>,
    s: &NoiseSchedule,
) -> Vec<f64> {
    let x0 = predict_x0_raw(x_t, t, eps, s);
    let ab_prev = s.alpha_bar(t_prev);
    let a = ab_prev.sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mut out: Vec<f64> = x0.iter().zip(eps).map(|(x, e)| a * x + dir * e).collect();
    if sigma > 0.0 {
        if let Some(extra) = extra {
            for (o, z) in out.iter_mut().zip(extra) {
                *o += sigma * z;
            }
        }
    }
    out
}

/// `sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn forward_diffuse(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    x0.ensure_same_shape(eps, "forward_diffuse")?;
    sched.check_t(t, "forward_diffuse")?;
    x0.with_data(forward_diffuse_raw(x0.data(), t, eps.data(), sched))
}

/// Inverts the forward map given a noise estimate:
/// `(x_t - sqrt(1 - ab_t) eps) / sqrt(ab_t)`.
pub fn predict_x0(x_t: &Tensor, t: usize, eps_pred: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    x_t.ensure_same_shape(eps_pred, "predict_x0")?;
    if t == 0 {
        return Err(Error::invalid("predict_x0 needs t >= 1"));
    }
    sched.check_t(t, "predict_x0")?;
    if sched.alpha_bar(t) <= 0.0 {
        return Err(Error::Numeric(format!("alpha_bar[{t}] is zero")));
    }
    x_t.with_data(predict_x0_raw(x_t.data(), t, eps_pred.data(), sched))
}

#[allow(clippy::too_many_arguments)]
pub fn ddim_step(
    x_t: &Tensor,
    t: usize,
    t_prev: usize,
    eps_pred: &Tensor,
    sigma_t: f64,
    eps_extra: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    x_t.ensure_same_shape(eps_pred, "ddim_step")?;
    x_t.ensure_same_shape(eps_extra, "ddim_step")?;
    sched.check_t(t, "ddim_step")?;
    if t_prev >= t || t == 0 {
        return Err(Error::invalid(format!(
            "ddim_step needs 0 <= t_prev < t, got {t_prev}, {t}"
        )));
    }
    if sigma_t < 0.0 {
        return Err(Error::invalid("sigma_t must be nonnegative"));
    }
    if 1.0 - sched.alpha_bar(t_prev) - sigma_t * sigma_t < 0.0 {
        return Err(Error::invalid("sigma_t too large for t_prev"));
    }
    x_t.with_data(ddim_step_raw(
        x_t.data(),
        t,
        t_prev,
        eps_pred.data(),
        sigma_t,
        Some(eps_extra.data()),
        sched,
    ))
}

/// Evenly spaced descending sub-sequence of `steps` timesteps, starting at `T`.
pub fn ddim_timesteps(t_max: usize, steps: usize) -> Vec<usize> {
    let mut seq: Vec<usize> = (1..=steps)
        .rev()
        .map(|k| ((k * t_max) as f64 / steps as f64).round() as usize)
        .collect();
    seq.dedup();
    seq
}

/// Visits the DDIM chain from `T` down to `t_stop` and returns the pairs
/// `(t, t_prev)` it steps through.
pub fn chain_to(t_max: usize, steps: usize, t_stop: usize) -> Vec<(usize, usize)> {
    let seq = ddim_timesteps(t_max, steps);
    let mut pairs = Vec::new();
    let mut cur = t_max;
    for &s in seq.iter().skip(1) {
        if s <= t_stop {
            break;
        }
        pairs.push((cur, s));
        cur = s;
    }
    if cur > t_stop {
        pairs.push((cur, t_stop));
    }
    pairs
}

pub(crate) fn sample_latent_raw<D: Denoiser + ?Sized>(
    model: &D,
    c: &[f64],
    t_stop: usize,
    steps: usize,
    rng: &mut RngState,
    sched: &NoiseSchedule,
) -> Vec<f64> {
    let mut x = rng.gaussian_vec(model.data_dim());
    for (t, t_prev) in chain_to(sched.t_max(), steps, t_stop) {
        let eps = model.predict(&x, t, c);
        x = ddim_step_raw(&x, t, t_prev, &eps, 0.0, None, sched);
    }
    x
}

/// Runs the deterministic (`sigma = 0`) reverse chain from a Gaussian draw at
/// `T` down to `t_stop`. With `t_stop = 0` this is a full sample.
pub fn sample_latent<D: Denoiser + ?Sized>(
    model: &D,
    c: &Tensor,
    t_stop: usize,
    steps: usize,
    rng: &mut RngState,
    sched: &NoiseSchedule,
    shape: &[usize],
) -> Result<Tensor> {
    sched.check_t(t_stop, "sample_latent")?;
    if steps == 0 || steps > sched.t_max() {
        return Err(Error::invalid(format!(
            "sampler steps must be in 1..={}, got {steps}",
            sched.t_max()
        )));
    }
    if c.len() != model.cond_dim() {
        return Err(Error::invalid("condition dim does not match model"));
    }
    if shape.iter().product::<usize>() != model.data_dim() {
        return Err(Error::invalid("output shape does not match model data dim"));
    }
    let x = sample_latent_raw(model, c.data(), t_stop, steps, rng, sched);
    Tensor::new(shape.to_vec(), x).map_err(|_| Error::Numeric("sampler produced non-finite values".into()))
}
