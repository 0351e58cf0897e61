use super::denoiser::{Denoiser, GradRequest, Gradients, MlpDenoiser};
use super::process::forward_diffuse_raw;
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::nn::Adam;
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Squared error `||eps - eps_theta(x_t, t, c)||^2` for an explicit draw of
/// `(t, eps)`, with the gradients selected by `req`.
pub fn denoise_loss_at<D: Denoiser + ?Sized>(
    model: &D,
    x0: &[f64],
    c: &[f64],
    t: usize,
    eps: &[f64],
    sched: &NoiseSchedule,
    req: GradRequest,
) -> (f64, Gradients) {
    let mut grads = Gradients::zeros(model, req);
    let loss = denoise_loss_acc(model, x0, c, t, eps, sched, &mut grads);
    (loss, grads)
}

/// Like [`denoise_loss_at`] but accumulates into existing buffers.
///
/// The input gradient is taken with respect to `x_t`.
pub(crate) fn denoise_loss_acc<D: Denoiser + ?Sized>(
    model: &D,
    x0: &[f64],
    c: &[f64],
    t: usize,
    eps: &[f64],
    sched: &NoiseSchedule,
    grads: &mut Gradients,
) -> f64 {
    let x_t = forward_diffuse_raw(x0, t, eps, sched);
    let (pred, tape) = model.predict_taped(&x_t, t, c);
    let resid: Vec<f64> = pred.iter().zip(eps).map(|(p, e)| p - e).collect();
    let loss = resid.iter().map(|r| r * r).sum();
    let req = grads.request();
    if req.params || req.input || req.cond {
        let d_out: Vec<f64> = resid.iter().map(|r| 2.0 * r).collect();
        model.pullback_into(&tape, &d_out, grads);
    }
    loss
}

#[derive(Debug, Clone)]
pub struct LossDraw {
    pub loss: f64,
    pub t: usize,
    pub param_grad: Vec<f64>,
}

/// Draws `t ~ U{1..T}` and `eps ~ N(0, I)`, returns the loss and its
/// parameter gradient.
pub fn denoise_loss<D: Denoiser + ?Sized>(
    model: &D,
    x0: &Tensor,
    c: &Tensor,
    rng: &mut RngState,
    sched: &NoiseSchedule,
) -> Result<LossDraw> {
    if c.len() != model.cond_dim() {
        return Err(Error::invalid(format!(
            "condition dim {} does not match model {}",
            c.len(),
            model.cond_dim()
        )));
    }
    if x0.len() != model.data_dim() {
        return Err(Error::invalid("x0 does not match model data dim"));
    }
    let t = rng.int_inclusive(1, sched.t_max());
    let eps = rng.gaussian_vec(x0.len());
    let (loss, g) = denoise_loss_at(model, x0.data(), c.data(), t, &eps, sched, GradRequest::PARAMS);
    Ok(LossDraw {
        loss,
        t,
        param_grad: g.params,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpDenoiser,
    /// Mean minibatch loss per step.
    pub losses: Vec<f64>,
}

/// Adam on the denoising loss over `(image, condition)` pairs.
pub fn train_denoiser(
    dataset: &[(Tensor, Tensor)],
    model: &MlpDenoiser,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    rng: &mut RngState,
) -> Result<TrainOutcome> {
    let mut model = model.clone();
    if cfg.steps == 0 {
        return Ok(TrainOutcome {
            model,
            losses: Vec::new(),
        });
    }
    if dataset.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    for (x, c) in dataset {
        if x.len() != model.data_dim() || c.len() != model.cond_dim() {
            return Err(Error::invalid("training pair does not match model dims"));
        }
    }
    let batch = cfg.batch.max(1);
    let mut opt = Adam::new(model.num_params(), cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut grads = Gradients::zeros(&model, GradRequest::PARAMS);
        let mut total = 0.0;
        for _ in 0..batch {
            let (x, c) = &dataset[rng.index(dataset.len())];
            let t = rng.int_inclusive(1, sched.t_max());
            let eps = rng.gaussian_vec(x.len());
            total += denoise_loss_acc(&model, x.data(), c.data(), t, &eps, sched, &mut grads);
        }
        let mean = total / batch as f64;
        if !mean.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {step}")));
        }
        let inv = 1.0 / batch as f64;
        grads.params.iter_mut().for_each(|g| *g *= inv);
        opt.step(model.params_mut(), &grads.params);
        losses.push(mean);
    }
    Ok(TrainOutcome { model, losses })
}
