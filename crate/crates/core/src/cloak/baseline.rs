//! Comparison defenses built on the denoising-loss ascent objective:
//! per-image cloaks and their gradient-averaged universal variant.

use super::pgd::pgd_step_raw;
use crate::diffusion::train::denoise_loss_acc;
use crate::diffusion::{Denoiser, GradRequest, Gradients, MlpDenoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    pub steps: usize,
    pub alpha: f64,
    pub eta: f64,
    pub record_iterates: bool,
}

/// Gradient of `||eps - eps_theta(sqrt(ab) (x + delta) + sqrt(1 - ab) eps, t, c)||^2`
/// with respect to `delta`, drawing `t` then `eps` from `rng`.
pub(crate) fn loss_ascent_gradient(
    model: &MlpDenoiser,
    x: &[f64],
    delta: &[f64],
    c: &[f64],
    sched: &NoiseSchedule,
    rng: &mut RngState,
) -> Vec<f64> {
    let t = rng.int_inclusive(1, sched.t_max());
    let eps = rng.gaussian_vec(x.len());
    let shifted: Vec<f64> = x.iter().zip(delta).map(|(a, d)| a + d).collect();
    let mut g = Gradients::zeros(model, GradRequest::INPUT);
    denoise_loss_acc(model, &shifted, c, t, &eps, sched, &mut g);
    let a = sched.alpha_bar(t).sqrt();
    g.input.iter_mut().for_each(|v| *v *= a);
    g.input
}

#[derive(Debug, Clone)]
pub struct BaselineRun {
    pub deltas: Vec<Tensor>,
    /// Per cloak, `delta` after every step when recording.
    pub iterates: Vec<Vec<Vec<f64>>>,
}

fn check(model: &MlpDenoiser, images: &[Tensor], c: &Tensor, cfg: &BaselineConfig) -> Result<()> {
    if images.is_empty() {
        return Err(Error::invalid("baseline needs at least one image"));
    }
    if images.iter().any(|x| x.len() != model.data_dim()) || c.len() != model.cond_dim() {
        return Err(Error::invalid("baseline inputs do not match model dims"));
    }
    if !(cfg.alpha > 0.0 && cfg.eta > 0.0) {
        return Err(Error::invalid("baseline alpha and eta must be positive"));
    }
    Ok(())
}

/// One cloak per image. Image `i` draws from sub-stream `i` of `rng`.
pub fn image_specific_cloaks(
    model: &MlpDenoiser,
    images: &[Tensor],
    c: &Tensor,
    cfg: &BaselineConfig,
    sched: &NoiseSchedule,
    rng: &RngState,
) -> Result<BaselineRun> {
    check(model, images, c, cfg)?;
    let mut deltas = Vec::with_capacity(images.len());
    let mut iterates = Vec::new();
    for (i, x) in images.iter().enumerate() {
        let mut stream = rng.derive(i as u64);
        let mut delta = vec![0.0; x.len()];
        let mut traj = Vec::new();
        for _ in 0..cfg.steps {
            let g = loss_ascent_gradient(model, x.data(), &delta, c.data(), sched, &mut stream);
            pgd_step_raw(&mut delta, &g, cfg.alpha, cfg.eta);
            if cfg.record_iterates {
                traj.push(delta.clone());
            }
        }
        deltas.push(x.with_data(delta)?);
        iterates.push(traj);
    }
    Ok(BaselineRun { deltas, iterates })
}

/// A single shared cloak updated with the mean of the per-image gradients.
/// Image `i` draws from sub-stream `i` of `rng`, as in the per-image method.
pub fn gradient_avg_universal(
    model: &MlpDenoiser,
    images: &[Tensor],
    c: &Tensor,
    cfg: &BaselineConfig,
    sched: &NoiseSchedule,
    rng: &RngState,
) -> Result<BaselineRun> {
    check(model, images, c, cfg)?;
    let n = images[0].len();
    let mut streams: Vec<RngState> = (0..images.len() as u64).map(|i| rng.derive(i)).collect();
    let mut delta = vec![0.0; n];
    let mut traj = Vec::new();
    let inv = images.len() as f64;
    for _ in 0..cfg.steps {
        let mut mean = vec![0.0; n];
        for (x, stream) in images.iter().zip(streams.iter_mut()) {
            let g = loss_ascent_gradient(model, x.data(), &delta, c.data(), sched, stream);
            for (m, v) in mean.iter_mut().zip(&g) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= inv);
        pgd_step_raw(&mut delta, &mean, cfg.alpha, cfg.eta);
        if cfg.record_iterates {
            traj.push(delta.clone());
        }
    }
    Ok(BaselineRun {
        deltas: vec![images[0].with_data(delta)?],
        iterates: vec![traj],
    })
}

/// Assigns each target image one of `cloaks`, uniformly at random.
pub fn transfer_assignments(n_targets: usize, n_cloaks: usize, rng: &mut RngState) -> Vec<usize> {
    (0..n_targets).map(|_| rng.index(n_cloaks)).collect()
}
