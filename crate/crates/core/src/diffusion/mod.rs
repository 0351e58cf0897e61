//! Conditional diffusion machinery: schedules, forward corruption, the
//! trainable noise predictor, denoising loss and DDIM sampling.

pub mod denoiser;
pub mod process;
pub mod schedule;
pub mod train;

pub use denoiser::{Architecture, Denoiser, GradRequest, Gradients, MlpDenoiser};
pub use process::{chain_to, ddim_step, ddim_timesteps, forward_diffuse, predict_x0, sample_latent};
pub use schedule::{make_schedule, NoiseSchedule, ScheduleKind};
pub use train::{denoise_loss, denoise_loss_at, train_denoiser, LossDraw, TrainConfig, TrainOutcome};

/// Latent codec for image <-> latent transfer. Image and latent space
/// coincide here, so the only implementation is the identity map.
pub trait LatentCodec {
    fn encode(&self, x: &crate::Tensor) -> crate::Tensor;
    fn decode(&self, z: &crate::Tensor) -> crate::Tensor;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCodec;

impl LatentCodec for IdentityCodec {
    fn encode(&self, x: &crate::Tensor) -> crate::Tensor {
        x.clone()
    }

    fn decode(&self, z: &crate::Tensor) -> crate::Tensor {
        z.clone()
    }
}
