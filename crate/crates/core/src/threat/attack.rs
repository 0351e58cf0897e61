//! Simulated personalization attacker and its image generator.

use crate::diffusion::process::sample_latent_raw;
use crate::diffusion::{Denoiser, MlpDenoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::identity::{
    default_low_rank_slices, fine_tune, AttackMethod, PromptTemplate, TextEncoderStub, TuneConfig, TuneScope, Tuned,
};
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const DEFAULT_ATTACK_STEPS: usize = 1000;
pub const DEFAULT_GENERATIONS: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub method: AttackMethod,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// Factor rank for `low_rank`.
    pub rank: usize,
    pub seed: u64,
    /// Index into the evaluation prompts used for personalization.
    pub prompt: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            method: AttackMethod::FullFinetune,
            steps: DEFAULT_ATTACK_STEPS,
            lr: 1e-4,
            batch: 4,
            rank: 4,
            seed: 0,
            prompt: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.method == AttackMethod::LowRank && self.rank == 0 {
            return Err(Error::config("low_rank attack needs rank >= 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("attack lr must be positive"));
        }
        Ok(())
    }

    pub fn scope(&self, model: &MlpDenoiser) -> TuneScope {
        match self.method {
            AttackMethod::FullFinetune => TuneScope::Full,
            AttackMethod::LowRank => TuneScope::LowRank {
                rank: self.rank,
                slices: default_low_rank_slices(model),
            },
            AttackMethod::EmbeddingOnly => TuneScope::EmbeddingOnly,
        }
    }
}

/// Personalizes `base` on the published images under `prompt`.
pub fn personalize_attack(
    published: &[Tensor],
    base: &MlpDenoiser,
    encoder: &TextEncoderStub,
    prompt: &PromptTemplate,
    cfg: &AttackConfig,
    sched: &NoiseSchedule,
    rng: &mut RngState,
) -> Result<Tuned> {
    if published.is_empty() {
        return Err(Error::invalid("attack needs at least one published image"));
    }
    cfg.validate()?;
    let tune = TuneConfig {
        steps: cfg.steps,
        lr: cfg.lr,
        batch: cfg.batch,
        scope: cfg.scope(base),
    };
    fine_tune(published, base, encoder, prompt, &tune, sched, rng)
}

/// `n` full deterministic-sampler generations under `prompt`, clamped to `range`.
#[allow(clippy::too_many_arguments)]
pub fn generate_batch(
    model: &MlpDenoiser,
    encoder: &TextEncoderStub,
    prompt: &PromptTemplate,
    n: usize,
    steps: usize,
    shape: &[usize],
    range: (f64, f64),
    sched: &NoiseSchedule,
    rng: &mut RngState,
) -> Result<Vec<Tensor>> {
    if n == 0 {
        return Err(Error::invalid("generate_batch needs n >= 1"));
    }
    if steps == 0 || steps > sched.t_max() {
        return Err(Error::invalid("sampler steps out of range"));
    }
    if shape.iter().product::<usize>() != model.data_dim() {
        return Err(Error::invalid("output shape does not match model"));
    }
    let c = encoder.encode(prompt);
    (0..n)
        .map(|_| {
            let x = sample_latent_raw(model, &c, 0, steps, rng, sched);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("generation produced non-finite values".into()));
            }
            let x = x.into_iter().map(|v| v.clamp(range.0, range.1)).collect();
            Tensor::new(shape.to_vec(), x)
        })
        .collect()
}
