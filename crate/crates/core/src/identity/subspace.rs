//! Identity learning, context diversification and the Gaussian identity
//! subspace over condition embeddings.

use super::text::{PromptTemplate, TextEncoderStub};
use super::tuning::{fine_tune, TuneConfig, TuneScope, Tuned};
use crate::diffusion::train::denoise_loss_acc;
use crate::diffusion::{Denoiser, GradRequest, Gradients, MlpDenoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Implants the identity into V* by jointly fine-tuning the denoiser and the
/// text encoder on the protector's images with prompt `prompt`.
#[allow(clippy::too_many_arguments)]
pub fn learn_identity(
    train_images: &[Tensor],
    model: &MlpDenoiser,
    encoder: &TextEncoderStub,
    prompt: &PromptTemplate,
    steps: usize,
    lr: f64,
    batch: usize,
    sched: &NoiseSchedule,
    rng: &mut RngState,
) -> Result<Tuned> {
    if train_images.is_empty() {
        return Err(Error::invalid("identity learning needs at least one image"));
    }
    let cfg = TuneConfig {
        steps,
        lr,
        batch,
        scope: TuneScope::Full,
    };
    fine_tune(train_images, model, encoder, prompt, &cfg, sched, rng)
}

/// `c_ID = tau*(P)`.
pub fn core_identity(encoder: &TextEncoderStub, prompt: &PromptTemplate) -> Tensor {
    Tensor::vector(encoder.encode(prompt))
}

/// One prompt-tuned condition embedding per training image.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub anchors: Vec<Vec<f64>>,
    /// Index of the training image each anchor describes.
    pub source_images: Vec<usize>,
    /// Mean anchor objective per step, recorded on the draws used for updates.
    pub losses: Vec<f64>,
}

impl AnchorSet {
    pub fn dim(&self) -> usize {
        self.anchors.first().map(|a| a.len()).unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Rank-2 tensor `[N, dim]`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.anchors.iter().flatten().copied().collect();
        Tensor::new(vec![self.len(), self.dim()], data).expect("anchors are finite")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiversifyConfig {
    pub steps: usize,
    pub lr: f64,
    /// `(t, eps)` draws averaged per update.
    pub batch: usize,
}

/// Gradient of `||eps - eps_theta(x_{t}, t, c)||^2` with respect to `c`.
pub fn anchor_objective<D: Denoiser + ?Sized>(
    model: &D,
    x0: &[f64],
    c: &[f64],
    t: usize,
    eps: &[f64],
    sched: &NoiseSchedule,
) -> (f64, Vec<f64>) {
    let mut g = Gradients::zeros(model, GradRequest::COND);
    let loss = denoise_loss_acc(model, x0, c, t, eps, sched, &mut g);
    (loss, g.cond)
}

/// Prompt-tunes one anchor per image, each starting at `c_id`, with plain
/// gradient descent on the frozen personalized model. Anchor `j` draws its
/// `(t, eps)` from sub-stream `j` of `rng`.
pub fn diversify_contexts(
    train_images: &[Tensor],
    model: &MlpDenoiser,
    c_id: &Tensor,
    cfg: &DiversifyConfig,
    sched: &NoiseSchedule,
    rng: &RngState,
) -> Result<AnchorSet> {
    if c_id.len() != model.cond_dim() {
        return Err(Error::invalid(format!(
            "c_ID has dim {}, model expects {}",
            c_id.len(),
            model.cond_dim()
        )));
    }
    if train_images.iter().any(|x| x.len() != model.data_dim()) {
        return Err(Error::invalid("image size does not match model"));
    }
    let n = train_images.len();
    let batch = cfg.batch.max(1);
    let mut anchors = vec![c_id.data().to_vec(); n];
    let mut streams: Vec<RngState> = (0..n as u64).map(|j| rng.derive(j)).collect();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut step_loss = 0.0;
        for (j, x) in train_images.iter().enumerate() {
            let mut grad = vec![0.0; c_id.len()];
            for _ in 0..batch {
                let t = streams[j].int_inclusive(1, sched.t_max());
                let eps = streams[j].gaussian_vec(x.len());
                let (l, g) = anchor_objective(model, x.data(), &anchors[j], t, &eps, sched);
                step_loss += l;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            let scale = cfg.lr / batch as f64;
            for (c, g) in anchors[j].iter_mut().zip(&grad) {
                *c -= scale * g;
            }
        }
        let mean = step_loss / (n * batch).max(1) as f64;
        if !mean.is_finite() {
            return Err(Error::Numeric(format!("non-finite anchor loss at step {step}")));
        }
        losses.push(mean);
    }
    Ok(AnchorSet {
        anchors,
        source_images: (0..n).collect(),
        losses,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaDivisor {
    /// `N - 1`; a single anchor yields `sigma = 0`.
    Unbiased,
    /// `N`.
    Population,
}

impl std::str::FromStr for SigmaDivisor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unbiased" | "n-1" => Ok(Self::Unbiased),
            "population" | "n" => Ok(Self::Population),
            other => Err(Error::config(format!("unknown sigma divisor `{other}`"))),
        }
    }
}

impl std::fmt::Display for SigmaDivisor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Unbiased => "unbiased",
            Self::Population => "population",
        })
    }
}

/// Diagonal Gaussian over condition embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentitySubspace {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub n_anchors: usize,
    pub divisor: SigmaDivisor,
}

impl IdentitySubspace {
    /// Degenerate subspace concentrated on one point.
    pub fn point(c: &[f64]) -> Self {
        Self {
            mu: c.to_vec(),
            sigma: vec![0.0; c.len()],
            n_anchors: 1,
            divisor: SigmaDivisor::Unbiased,
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn hash(&self) -> String {
        let mut bytes = Vec::with_capacity(16 * self.mu.len());
        for v in self.mu.iter().chain(&self.sigma) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        crate::hash_hex(&bytes)
    }
}

/// Per-dimension mean and standard deviation of the anchors.
pub fn estimate_subspace(anchors: &AnchorSet, divisor: SigmaDivisor) -> Result<IdentitySubspace> {
    let n = anchors.len();
    if n == 0 {
        return Err(Error::invalid("cannot estimate a subspace from zero anchors"));
    }
    let dim = anchors.dim();
    if anchors.anchors.iter().any(|a| a.len() != dim) {
        return Err(Error::invalid("anchors have inconsistent dims"));
    }
    let mut mu = vec![0.0; dim];
    for a in &anchors.anchors {
        for (m, v) in mu.iter_mut().zip(a) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let denom = match divisor {
        SigmaDivisor::Unbiased => n.saturating_sub(1),
        SigmaDivisor::Population => n,
    };
    let sigma = (0..dim)
        .map(|d| {
            if denom == 0 {
                return 0.0;
            }
            let ss: f64 = anchors.anchors.iter().map(|a| (a[d] - mu[d]).powi(2)).sum();
            (ss / denom as f64).sqrt()
        })
        .collect();
    Ok(IdentitySubspace {
        mu,
        sigma,
        n_anchors: n,
        divisor,
    })
}

/// `mu + sigma * clamp(z, -truncation, truncation)` with `z ~ N(0, I)`.
pub fn sample_condition(q: &IdentitySubspace, rng: &mut RngState, truncation: f64) -> Result<Tensor> {
    if truncation.is_nan() || truncation <= 0.0 {
        return Err(Error::invalid("truncation must be positive"));
    }
    Ok(Tensor::vector(sample_condition_raw(q, rng, truncation)))
}

pub(crate) fn sample_condition_raw(q: &IdentitySubspace, rng: &mut RngState, truncation: f64) -> Vec<f64> {
    q.mu.iter()
        .zip(&q.sigma)
        .map(|(m, s)| {
            let z = rng.gaussian().clamp(-truncation, truncation);
            m + s * z
        })
        .collect()
}
