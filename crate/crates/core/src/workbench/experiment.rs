//! World construction (base model, encoder, embedder), defender preparation
//! and the per-identity arm runner shared by the pipeline and the reports.

use super::config::ExperimentConfig;
use super::dataset::{render_identity, IdentityDataset, Style, PIXEL_RANGE};
use crate::diffusion::{make_schedule, train_denoiser, Architecture, MlpDenoiser, NoiseSchedule, TrainConfig};
use crate::error::{Error, Result};
use crate::identity::{
    core_identity, diversify_contexts, estimate_subspace, learn_identity, AnchorSet, DiversifyConfig, IdentitySubspace,
    PromptTemplate, TextEncoderStub, Tuned, Vocab, EVAL_PROMPTS,
};
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::threat::{
    attack_and_evaluate, run_protection_experiment, train_identity_embedder, ArmOutcome, AttackerKit, DefenderKit,
    Defense, IdentityEmbedder, Published,
};

/// Identity seed of public corpus identity `k`.
pub fn public_identity_seed(k: usize) -> u64 {
    1_000_000 + k as u64
}

/// The shared pretrained state every arm of one seed starts from.
#[derive(Debug, Clone)]
pub struct World {
    pub sched: NoiseSchedule,
    pub base_model: MlpDenoiser,
    pub base_encoder: TextEncoderStub,
    /// Attacker's base model when its widths differ from the defender's.
    pub alt_base: Option<MlpDenoiser>,
    pub embedder: IdentityEmbedder,
    pub base_losses: Vec<f64>,
}

/// `(image, condition)` pairs of the public corpus: every public identity in
/// every style, bound to the matching prompt with its own identity token.
pub fn public_corpus(cfg: &ExperimentConfig, encoder: &TextEncoderStub) -> Result<Vec<(Tensor, Tensor)>> {
    let vocab = encoder.vocab();
    let mut pairs = Vec::new();
    for k in 0..cfg.public_identities {
        let tok = vocab
            .public_id(k)
            .ok_or_else(|| Error::config(format!("vocabulary lacks public identity {k}")))?;
        for style in Style::ALL {
            let prompt = PromptTemplate::parse(EVAL_PROMPTS[style.prompt_index()], vocab)?;
            let c = Tensor::vector(encoder.encode_tokens(&prompt.resolve(tok)));
            for img in render_identity(
                public_identity_seed(k),
                cfg.image_size,
                cfg.public_per_style,
                cfg.context_spread,
                style,
                2,
            ) {
                pairs.push((img, c.clone()));
            }
        }
    }
    Ok(pairs)
}

fn train_base(
    arch: Architecture,
    corpus: &[(Tensor, Tensor)],
    cfg: &ExperimentConfig,
    sched: &NoiseSchedule,
    stream: u64,
) -> Result<(MlpDenoiser, Vec<f64>)> {
    let mut rng = RngState::with_stream(cfg.seed, stream);
    let init = MlpDenoiser::new(arch, &mut rng)?;
    let tc = TrainConfig {
        steps: cfg.base_steps,
        lr: cfg.base_lr,
        batch: cfg.base_batch,
    };
    let out = train_denoiser(corpus, &init, &tc, sched, &mut rng)?;
    Ok((out.model, out.losses))
}

/// Non-face images: uniform noise, Gaussian noise and smooth random ramps.
pub fn nonface_images(size: usize, n: usize, rng: &mut RngState) -> Vec<Tensor> {
    (0..n)
        .map(|k| {
            let data: Vec<f64> = match k % 3 {
                0 => (0..size * size).map(|_| rng.uniform()).collect(),
                1 => {
                    let (m, s) = (rng.uniform(), 0.05 + 0.3 * rng.uniform());
                    (0..size * size)
                        .map(|_| (m + s * rng.gaussian()).clamp(0.0, 1.0))
                        .collect()
                }
                _ => {
                    let (a, b, c) = (rng.uniform(), rng.gaussian() * 0.5, rng.gaussian() * 0.5);
                    (0..size * size)
                        .map(|i| {
                            let (u, v) = ((i % size) as f64 / size as f64, (i / size) as f64 / size as f64);
                            (a + b * (u - 0.5) + c * (v - 0.5)).clamp(0.0, 1.0)
                        })
                        .collect()
                }
            };
            Tensor::new(vec![1, size, size], data).expect("finite")
        })
        .collect()
}

/// Labelled embedder corpus: public identities, then each protected identity
/// seed, then each extra image group, one class apiece; a final class holds
/// non-face images. Returns the samples and the non-face label.
pub fn embedder_corpus(
    cfg: &ExperimentConfig,
    protected: &[u64],
    extra: &[Vec<Tensor>],
) -> (Vec<(Tensor, usize)>, usize) {
    let seeds: Vec<u64> = (0..cfg.public_identities)
        .map(public_identity_seed)
        .chain(protected.iter().copied())
        .collect();
    let per_style = cfg.embedder_per_identity.div_ceil(3).max(1);
    let mut out = Vec::new();
    for (label, &s) in seeds.iter().enumerate() {
        for style in Style::ALL {
            for img in render_identity(s, cfg.image_size, per_style, cfg.context_spread, style, 3) {
                out.push((img, label));
            }
        }
    }
    for (j, group) in extra.iter().enumerate() {
        for img in group {
            out.push((img.clone(), seeds.len() + j));
        }
    }
    let reject = seeds.len() + extra.len();
    let mut rng = RngState::with_stream(cfg.seed, 13);
    let n_nonface = (out.len() / 3).max(3 * per_style);
    for img in nonface_images(cfg.image_size, n_nonface, &mut rng) {
        out.push((img, reject));
    }
    (out, reject)
}

/// Base models and text encoder of a world, before the embedder.
#[derive(Debug, Clone)]
pub struct BaseModels {
    pub base_model: MlpDenoiser,
    pub base_encoder: TextEncoderStub,
    pub alt_base: Option<MlpDenoiser>,
    pub base_losses: Vec<f64>,
}

pub fn schedule(cfg: &ExperimentConfig) -> Result<NoiseSchedule> {
    make_schedule(cfg.t_max, cfg.schedule_kind)
}

/// Pretrains the base denoiser (and the attacker's alternative widths when
/// configured) on the public corpus.
pub fn train_base_models(cfg: &ExperimentConfig) -> Result<BaseModels> {
    cfg.validate()?;
    let sched = schedule(cfg)?;
    let vocab = Vocab::new(cfg.public_identities);
    let mut enc_rng = RngState::with_stream(cfg.seed, 1);
    let base_encoder = TextEncoderStub::new(vocab, cfg.cond_dim, &mut enc_rng);
    let corpus = public_corpus(cfg, &base_encoder)?;
    let (base_model, base_losses) = train_base(cfg.architecture(), &corpus, cfg, &sched, 10)?;
    let alt_base = if cfg.attack_hidden.is_empty() || cfg.attack_hidden == cfg.hidden {
        None
    } else {
        Some(train_base(cfg.attacker_architecture(), &corpus, cfg, &sched, 11)?.0)
    };
    Ok(BaseModels {
        base_model,
        base_encoder,
        alt_base,
        base_losses,
    })
}

/// Trains the proxy identity embedder. `protected` identity seeds and `extra`
/// image groups become additional classes.
pub fn train_embedder(cfg: &ExperimentConfig, protected: &[u64], extra: &[Vec<Tensor>]) -> Result<IdentityEmbedder> {
    let (samples, reject) = embedder_corpus(cfg, protected, extra);
    let mut emb_rng = RngState::with_stream(cfg.seed, 12);
    train_identity_embedder(&samples, Some(reject), &cfg.embedder, &mut emb_rng)
}

/// Builds the world for `cfg.seed`. `protected` identity seeds and `extra`
/// image groups become additional embedder classes.
pub fn build_world(cfg: &ExperimentConfig, protected: &[u64], extra: &[Vec<Tensor>]) -> Result<World> {
    let base = train_base_models(cfg)?;
    let embedder = train_embedder(cfg, protected, extra)?;
    Ok(World {
        sched: schedule(cfg)?,
        base_model: base.base_model,
        base_encoder: base.base_encoder,
        alt_base: base.alt_base,
        embedder,
        base_losses: base.base_losses,
    })
}

/// The protector's personalized model, core identity, anchors and subspace.
#[derive(Debug, Clone)]
pub struct DefenderState {
    pub tuned: Tuned,
    pub c_id: Tensor,
    pub anchors: AnchorSet,
    pub subspace: IdentitySubspace,
}

pub fn train_prompt(encoder: &TextEncoderStub) -> Result<PromptTemplate> {
    PromptTemplate::parse(EVAL_PROMPTS[0], encoder.vocab())
}

/// Identity learning: fine-tunes the base pair on `train` and reads off the
/// core identity point.
pub fn personalize_defender(
    base_model: &MlpDenoiser,
    base_encoder: &TextEncoderStub,
    train: &[Tensor],
    cfg: &ExperimentConfig,
    sched: &NoiseSchedule,
) -> Result<(Tuned, Tensor)> {
    let prompt = train_prompt(base_encoder)?;
    let mut rng = RngState::with_stream(cfg.seed, 20);
    let tuned = learn_identity(
        train,
        base_model,
        base_encoder,
        &prompt,
        cfg.identity_steps,
        cfg.identity_lr,
        cfg.identity_batch,
        sched,
        &mut rng,
    )?;
    let c_id = core_identity(&tuned.encoder, &prompt);
    Ok((tuned, c_id))
}

/// Context diversification and the subspace fit.
pub fn learn_subspace(
    model: &MlpDenoiser,
    c_id: &Tensor,
    train: &[Tensor],
    cfg: &ExperimentConfig,
    sched: &NoiseSchedule,
) -> Result<(AnchorSet, IdentitySubspace)> {
    let dc = DiversifyConfig {
        steps: cfg.anchor_steps,
        lr: cfg.anchor_lr,
        batch: cfg.anchor_batch,
    };
    let anchors = diversify_contexts(train, model, c_id, &dc, sched, &RngState::with_stream(cfg.seed, 21))?;
    let subspace = estimate_subspace(&anchors, cfg.sigma_divisor)?;
    Ok((anchors, subspace))
}

pub fn prepare_defender(world: &World, train: &[Tensor], cfg: &ExperimentConfig) -> Result<DefenderState> {
    let (tuned, c_id) = personalize_defender(&world.base_model, &world.base_encoder, train, cfg, &world.sched)?;
    let (anchors, subspace) = learn_subspace(&tuned.model, &c_id, train, cfg, &world.sched)?;
    Ok(DefenderState {
        tuned,
        c_id,
        anchors,
        subspace,
    })
}

pub fn defender_kit(state: &DefenderState, cfg: &ExperimentConfig) -> DefenderKit {
    kit_from_parts(&state.tuned.model, &state.c_id, &state.subspace, cfg)
}

pub fn kit_from_parts(
    model: &MlpDenoiser,
    c_id: &Tensor,
    subspace: &IdentitySubspace,
    cfg: &ExperimentConfig,
) -> DefenderKit {
    DefenderKit {
        model: model.clone(),
        c_id: c_id.clone(),
        subspace: subspace.clone(),
        cloak: cfg.cloak_config(),
        baseline: cfg.baseline_config(),
        seed: cfg.seed,
    }
}

pub fn eval_prompts(cfg: &ExperimentConfig, encoder: &TextEncoderStub) -> Result<Vec<PromptTemplate>> {
    cfg.eval_prompts
        .iter()
        .map(|p| PromptTemplate::parse(p, encoder.vocab()))
        .collect()
}

pub fn attacker_kit<'a>(world: &'a World, base: &'a MlpDenoiser, cfg: &ExperimentConfig) -> Result<AttackerKit<'a>> {
    attacker_from_parts(base, &world.base_encoder, &world.embedder, cfg)
}

pub fn attacker_from_parts<'a>(
    base: &'a MlpDenoiser,
    encoder: &'a TextEncoderStub,
    embedder: &'a IdentityEmbedder,
    cfg: &ExperimentConfig,
) -> Result<AttackerKit<'a>> {
    Ok(AttackerKit {
        base,
        encoder,
        embedder,
        attack: cfg.attack_config(),
        train_prompt: train_prompt(encoder)?,
        eval_prompts: eval_prompts(cfg, encoder)?,
        n_generate: cfg.eval_n,
        sampler_steps: cfg.eval_sampler_steps,
        threshold: cfg.eval_threshold,
        range: PIXEL_RANGE,
    })
}

/// Outcomes of every requested defense on one identity, plus the
/// cross-architecture attack on selected publications when configured.
#[derive(Debug, Clone)]
pub struct IdentityRun {
    pub identity: String,
    pub outcomes: Vec<ArmOutcome>,
    pub transfer: Vec<ArmOutcome>,
    pub published: Vec<Published>,
    pub defender: DefenderState,
}

/// Runs every defense for `dataset`. Arms share the attacker's random
/// streams so that differences come from the publications alone.
pub fn run_identity(
    world: &World,
    dataset: &IdentityDataset,
    cfg: &ExperimentConfig,
    defenses: &[Defense],
    transfer: &[Defense],
) -> Result<IdentityRun> {
    let defender = prepare_defender(world, &dataset.train, cfg).map_err(|e| e.in_stage("learn-identity"))?;
    let kit = defender_kit(&defender, cfg);
    let attacker = attacker_kit(world, &world.base_model, cfg)?;
    let mut outcomes = Vec::new();
    let mut published = Vec::new();
    for &d in defenses {
        let (o, p) = run_protection_experiment(&dataset.train, &dataset.test, d, &kit, &attacker, &world.sched)
            .map_err(|e| e.in_stage(&format!("arm {d}")))?;
        outcomes.push(o);
        published.push(p);
    }
    let mut transfer_out = Vec::new();
    if let Some(alt) = &world.alt_base {
        let alt_kit = attacker_kit(world, alt, cfg)?;
        for &d in transfer {
            let p = match published.iter().find(|p| p.defense == d) {
                Some(p) => p.clone(),
                None => {
                    crate::threat::craft_defense(&kit, &dataset.train, &dataset.test, d, PIXEL_RANGE, &world.sched)?
                }
            };
            let train = attack_and_evaluate(&p.train, &dataset.test, &alt_kit, &world.sched, 0)?;
            let test = attack_and_evaluate(&p.test, &dataset.test, &alt_kit, &world.sched, 1)?;
            transfer_out.push(ArmOutcome {
                defense: d,
                train,
                test,
            });
        }
    }
    Ok(IdentityRun {
        identity: dataset.identity.clone(),
        outcomes,
        transfer: transfer_out,
        published,
        defender,
    })
}
