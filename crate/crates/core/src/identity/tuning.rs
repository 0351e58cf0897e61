//! Few-shot fine-tuning of a (denoiser, text encoder) pair on images bound to
//! a prompt. Serves both the defender's identity implanting and the
//! simulated attacker's personalization.

use std::str::FromStr;

use super::text::{PromptTemplate, TextEncoderStub};
use crate::diffusion::train::denoise_loss_acc;
use crate::diffusion::{Denoiser, GradRequest, Gradients, MlpDenoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::Adam;
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Which parameters a fine-tuning run may touch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TuneScope {
    /// Every denoiser parameter and the whole embedding table.
    Full,
    /// Rank-`rank` additive factors on the named weight slices; the text
    /// encoder stays frozen.
    LowRank { rank: usize, slices: Vec<String> },
    /// Only the V* row of the embedding table.
    EmbeddingOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub scope: TuneScope,
}

#[derive(Debug, Clone)]
pub struct Tuned {
    pub model: MlpDenoiser,
    pub encoder: TextEncoderStub,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackMethod {
    FullFinetune,
    LowRank,
    EmbeddingOnly,
}

impl FromStr for AttackMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_finetune" => Ok(Self::FullFinetune),
            "low_rank" => Ok(Self::LowRank),
            "embedding_only" => Ok(Self::EmbeddingOnly),
            other => Err(Error::config(format!("unknown attack method `{other}`"))),
        }
    }
}

impl std::fmt::Display for AttackMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::FullFinetune => "full_finetune",
            Self::LowRank => "low_rank",
            Self::EmbeddingOnly => "embedding_only",
        })
    }
}

/// Weight slices adapted by the low-rank scope unless configured otherwise.
pub fn default_low_rank_slices(model: &MlpDenoiser) -> Vec<String> {
    model
        .slices()
        .iter()
        .filter(|s| s.name.ends_with(".weight"))
        .map(|s| s.name.clone())
        .collect()
}

struct Factor {
    offset: usize,
    rows: usize,
    cols: usize,
    /// Offsets of U (rows x r) and V (r x cols) inside the factor vector.
    u: usize,
    v: usize,
}

fn merge_factors(base: &MlpDenoiser, factors: &[Factor], rank: usize, fp: &[f64]) -> MlpDenoiser {
    let mut m = base.clone();
    let p = m.params_mut();
    for f in factors {
        for r in 0..f.rows {
            let urow = &fp[f.u + r * rank..f.u + (r + 1) * rank];
            if urow.iter().all(|&x| x == 0.0) {
                continue;
            }
            let out = &mut p[f.offset + r * f.cols..f.offset + (r + 1) * f.cols];
            for (k, &uk) in urow.iter().enumerate() {
                let vrow = &fp[f.v + k * f.cols..f.v + (k + 1) * f.cols];
                for (o, vv) in out.iter_mut().zip(vrow) {
                    *o += uk * vv;
                }
            }
        }
    }
    m
}

/// Minimizes `E ||eps - eps_theta(x_t, t, tau(P))||^2` over `images` within
/// the parameter scope of `cfg`.
pub fn fine_tune(
    images: &[Tensor],
    model: &MlpDenoiser,
    encoder: &TextEncoderStub,
    prompt: &PromptTemplate,
    cfg: &TuneConfig,
    sched: &NoiseSchedule,
    rng: &mut RngState,
) -> Result<Tuned> {
    if images.is_empty() {
        return Err(Error::invalid("fine-tuning needs at least one image"));
    }
    if encoder.dim() != model.cond_dim() {
        return Err(Error::invalid("encoder dim does not match model condition dim"));
    }
    if images.iter().any(|x| x.len() != model.data_dim()) {
        return Err(Error::invalid("image size does not match model"));
    }
    let mut model = model.clone();
    let mut encoder = encoder.clone();
    let mut losses = Vec::with_capacity(cfg.steps);
    if cfg.steps == 0 {
        return Ok(Tuned { model, encoder, losses });
    }
    let tokens = prompt.resolve(encoder.vocab().identity_id());
    let batch = cfg.batch.max(1);
    let inv = 1.0 / batch as f64;
    let vstar = encoder.vocab().identity_id();
    let dim = encoder.dim();

    // Draws one minibatch and returns (mean loss, grads scaled by 1/batch).
    let minibatch = |m: &MlpDenoiser, enc: &TextEncoderStub, req: GradRequest, rng: &mut RngState| {
        let c = enc.encode_tokens(&tokens);
        let mut g = Gradients::zeros(m, req);
        let mut total = 0.0;
        for _ in 0..batch {
            let x = &images[rng.index(images.len())];
            let t = rng.int_inclusive(1, sched.t_max());
            let eps = rng.gaussian_vec(x.len());
            total += denoise_loss_acc(m, x.data(), &c, t, &eps, sched, &mut g);
        }
        g.params.iter_mut().for_each(|v| *v *= inv);
        g.cond.iter_mut().for_each(|v| *v *= inv);
        (total * inv, g)
    };

    let check = |loss: f64, step: usize| {
        if loss.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite fine-tuning loss at step {step}")))
        }
    };

    match &cfg.scope {
        TuneScope::Full => {
            let np = model.num_params();
            let mut opt = Adam::new(np + encoder.table().len(), cfg.lr);
            let mut flat: Vec<f64> = model.params().iter().chain(encoder.table()).copied().collect();
            for step in 0..cfg.steps {
                let (loss, g) = minibatch(
                    &model,
                    &encoder,
                    GradRequest {
                        params: true,
                        input: false,
                        cond: true,
                    },
                    rng,
                );
                check(loss, step)?;
                let mut grad = g.params;
                let mut d_table = vec![0.0; encoder.table().len()];
                encoder.pullback_into(&tokens, &g.cond, &mut d_table);
                grad.extend_from_slice(&d_table);
                opt.step(&mut flat, &grad);
                model.params_mut().copy_from_slice(&flat[..np]);
                encoder.table_mut().copy_from_slice(&flat[np..]);
                losses.push(loss);
            }
        }
        TuneScope::EmbeddingOnly => {
            let mut opt = Adam::new(dim, cfg.lr);
            let mut row = encoder.row(vstar).to_vec();
            for step in 0..cfg.steps {
                let (loss, g) = minibatch(&model, &encoder, GradRequest::COND, rng);
                check(loss, step)?;
                let mut d_table = vec![0.0; encoder.table().len()];
                encoder.pullback_into(&tokens, &g.cond, &mut d_table);
                opt.step(&mut row, &d_table[vstar * dim..(vstar + 1) * dim]);
                encoder.table_mut()[vstar * dim..(vstar + 1) * dim].copy_from_slice(&row);
                losses.push(loss);
            }
        }
        TuneScope::LowRank { rank, slices } => {
            if *rank == 0 {
                return Err(Error::invalid("low-rank scope needs rank >= 1"));
            }
            let base = model.clone();
            let mut factors = Vec::new();
            let mut fp = Vec::new();
            for name in slices {
                let s = base
                    .slice(name)
                    .ok_or_else(|| Error::invalid(format!("no parameter slice `{name}`")))?;
                let (rows, cols) = base.slice_matrix_shape(name).unwrap();
                let u = fp.len();
                fp.extend(std::iter::repeat_n(0.0, rows * rank));
                let v = fp.len();
                let scale = (1.0 / cols as f64).sqrt();
                fp.extend((0..rank * cols).map(|_| rng.gaussian() * scale));
                factors.push(Factor {
                    offset: s.offset as usize,
                    rows,
                    cols,
                    u,
                    v,
                });
            }
            let mut opt = Adam::new(fp.len(), cfg.lr);
            for step in 0..cfg.steps {
                let eff = merge_factors(&base, &factors, *rank, &fp);
                let (loss, g) = minibatch(&eff, &encoder, GradRequest::PARAMS, rng);
                check(loss, step)?;
                let mut gf = vec![0.0; fp.len()];
                for f in &factors {
                    let dw = &g.params[f.offset..f.offset + f.rows * f.cols];
                    for r in 0..f.rows {
                        let dwr = &dw[r * f.cols..(r + 1) * f.cols];
                        for k in 0..*rank {
                            let vrow = &fp[f.v + k * f.cols..f.v + (k + 1) * f.cols];
                            // dU[r,k] = sum_c dW[r,c] V[k,c]
                            gf[f.u + r * rank + k] += dwr.iter().zip(vrow).map(|(a, b)| a * b).sum::<f64>();
                            // dV[k,c] += U[r,k] dW[r,c]
                            let urk = fp[f.u + r * rank + k];
                            if urk != 0.0 {
                                let gv = &mut gf[f.v + k * f.cols..f.v + (k + 1) * f.cols];
                                for (o, d) in gv.iter_mut().zip(dwr) {
                                    *o += urk * d;
                                }
                            }
                        }
                    }
                }
                opt.step(&mut fp, &gf);
                losses.push(loss);
            }
            model = merge_factors(&base, &factors, *rank, &fp);
        }
    }
    Ok(Tuned { model, encoder, losses })
}
