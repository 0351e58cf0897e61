//! One-step latent cloaking and the noise-prediction discrepancy objective.

use crate::diffusion::process::predict_x0_raw;
use crate::diffusion::{Denoiser, Gradients, NoiseSchedule};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) fn apply_cloak_latent_raw(
    x_t: &[f64],
    t: usize,
    eps_pred: &[f64],
    delta: &[f64],
    sched: &NoiseSchedule,
) -> Vec<f64> {
    let a = sched.alpha_bar(t).sqrt();
    let x0 = predict_x0_raw(x_t, t, eps_pred, sched);
    // Re-noising with the same eps_pred gives sqrt(ab) * (x0 + delta) +
    // sqrt(1 - ab) * eps = x_t + sqrt(ab) * ((x0 + delta) - x0). The
    // residual form keeps a zero cloak an exact fixed point.
    x_t.iter()
        .zip(&x0)
        .zip(delta)
        .map(|((x, z), d)| x + a * ((z + d) - z))
        .collect()
}

/// Denoise `x_t` to a clean estimate with `eps_pred`, add `delta`, and
/// re-noise to `t` with the same `eps_pred`.
pub fn apply_cloak_latent(
    x_t: &Tensor,
    t: usize,
    eps_pred: &Tensor,
    delta: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    x_t.ensure_same_shape(eps_pred, "apply_cloak_latent")?;
    x_t.ensure_same_shape(delta, "apply_cloak_latent")?;
    if t == 0 {
        return Err(Error::invalid("apply_cloak_latent needs t >= 1"));
    }
    sched.check_t(t, "apply_cloak_latent")?;
    x_t.with_data(apply_cloak_latent_raw(
        x_t.data(),
        t,
        eps_pred.data(),
        delta.data(),
        sched,
    ))
}

/// `||eps(x_t) - eps(x_cloaked)||^2` and its gradient with respect to
/// `x_cloaked`. `eps_clean` is `eps(x_t)`, treated as a constant.
pub(crate) fn cloak_objective_raw<D: Denoiser + ?Sized>(
    model: &D,
    eps_clean: &[f64],
    x_cloaked: &[f64],
    t: usize,
    c: &[f64],
) -> (f64, Vec<f64>) {
    let (pred, tape) = model.predict_taped(x_cloaked, t, c);
    let diff: Vec<f64> = pred.iter().zip(eps_clean).map(|(p, e)| p - e).collect();
    let value = diff.iter().map(|d| d * d).sum();
    let d_out: Vec<f64> = diff.iter().map(|d| 2.0 * d).collect();
    let mut g = Gradients {
        input: vec![0.0; x_cloaked.len()],
        ..Default::default()
    };
    model.pullback_into(&tape, &d_out, &mut g);
    (value, g.input)
}

pub fn cloak_objective<D: Denoiser + ?Sized>(
    model: &D,
    x_t: &Tensor,
    x_t_cloaked: &Tensor,
    t: usize,
    c: &Tensor,
) -> Result<(f64, Tensor)> {
    x_t.ensure_same_shape(x_t_cloaked, "cloak_objective")?;
    if x_t.len() != model.data_dim() || c.len() != model.cond_dim() {
        return Err(Error::invalid("cloak_objective: dims do not match model"));
    }
    let eps_clean = model.predict(x_t.data(), t, c.data());
    let (v, g) = cloak_objective_raw(model, &eps_clean, x_t_cloaked.data(), t, c.data());
    Ok((v, x_t.with_data(g)?))
}
