//! One protection arm: craft a defense on the training split, publish both
//! splits through it, personalize the attacker on each, generate and score.

use std::str::FromStr;

use super::attack::{generate_batch, personalize_attack, AttackConfig};
use super::embedder::IdentityEmbedder;
use super::metrics::{evaluate_protection, MetricsReport};
use crate::cloak::{
    apply_cloak_image, gradient_avg_universal, image_specific_cloaks, optimize_cloak, transfer_assignments,
    BaselineConfig, CloakOptConfig,
};
use crate::diffusion::{MlpDenoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::identity::{IdentitySubspace, PromptTemplate, TextEncoderStub, Tuned};
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Defense {
    None,
    ImageSpecificTransfer,
    GradientAvgUniversal,
    IdCloak,
    /// ID-cloak driven by the core identity point alone (ablation).
    IdCloakSinglePoint,
}

impl Defense {
    pub const ALL: [Defense; 5] = [
        Defense::None,
        Defense::ImageSpecificTransfer,
        Defense::GradientAvgUniversal,
        Defense::IdCloak,
        Defense::IdCloakSinglePoint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Defense::None => "none",
            Defense::ImageSpecificTransfer => "image_specific_transfer",
            Defense::GradientAvgUniversal => "gradient_avg_universal",
            Defense::IdCloak => "id_cloak",
            Defense::IdCloakSinglePoint => "id_cloak_single_point",
        }
    }
}

impl std::fmt::Display for Defense {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Defense {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Defense::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::config(format!("unknown defense `{s}`")))
    }
}

/// Everything the protector holds after identity learning.
#[derive(Debug, Clone)]
pub struct DefenderKit {
    /// Personalized denoiser the cloaks are crafted against.
    pub model: MlpDenoiser,
    pub c_id: Tensor,
    pub subspace: IdentitySubspace,
    pub cloak: CloakOptConfig,
    pub baseline: BaselineConfig,
    pub seed: u64,
}

/// Published images of both splits after a defense.
#[derive(Debug, Clone)]
pub struct Published {
    pub defense: Defense,
    pub train: Vec<Tensor>,
    pub test: Vec<Tensor>,
    /// Crafted perturbations (empty for `none`).
    pub cloaks: Vec<Tensor>,
}

fn apply_all(images: &[Tensor], delta: &Tensor, range: (f64, f64)) -> Result<Vec<Tensor>> {
    images.iter().map(|x| apply_cloak_image(x, delta, range)).collect()
}

/// Crafts the perturbations of `defense` from the training split: one per
/// training image for the transfer baseline, a single shared one for the
/// universal defenses, none for `none`.
pub fn craft_cloaks(
    kit: &DefenderKit,
    train: &[Tensor],
    defense: Defense,
    sched: &NoiseSchedule,
) -> Result<Vec<Tensor>> {
    if train.is_empty() {
        return Err(Error::invalid("defense needs training images"));
    }
    let shape = train[0].shape().to_vec();
    let base_rng = RngState::with_stream(kit.seed, 7);
    Ok(match defense {
        Defense::None => Vec::new(),
        Defense::ImageSpecificTransfer => {
            image_specific_cloaks(&kit.model, train, &kit.c_id, &kit.baseline, sched, &base_rng)?.deltas
        }
        Defense::GradientAvgUniversal => {
            gradient_avg_universal(&kit.model, train, &kit.c_id, &kit.baseline, sched, &base_rng)?.deltas
        }
        Defense::IdCloak | Defense::IdCloakSinglePoint => {
            let q = defense_subspace(kit, defense);
            vec![optimize_cloak(&kit.model, &q, &shape, &kit.cloak, sched)?.cloak.delta]
        }
    })
}

/// The condition distribution an ID-cloak variant is optimized over.
pub fn defense_subspace(kit: &DefenderKit, defense: Defense) -> IdentitySubspace {
    if defense == Defense::IdCloakSinglePoint {
        IdentitySubspace::point(kit.c_id.data())
    } else {
        kit.subspace.clone()
    }
}

/// Applies crafted `cloaks` to both splits. Image-specific cloaks go back
/// onto their own training images and are randomly reassigned to test
/// images; a single cloak is shared by every image.
pub fn publish(
    defense: Defense,
    cloaks: Vec<Tensor>,
    train: &[Tensor],
    test: &[Tensor],
    seed: u64,
    range: (f64, f64),
) -> Result<Published> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid("defense needs train and test images"));
    }
    let (train_out, test_out) = match (defense, cloaks.len()) {
        (Defense::None, 0) => (train.to_vec(), test.to_vec()),
        (Defense::ImageSpecificTransfer, n) if n == train.len() => {
            let own = train
                .iter()
                .zip(&cloaks)
                .map(|(x, d)| apply_cloak_image(x, d, range))
                .collect::<Result<Vec<_>>>()?;
            let mut pick = RngState::with_stream(seed, 8);
            let assign = transfer_assignments(test.len(), n, &mut pick);
            let moved = test
                .iter()
                .zip(assign)
                .map(|(x, k)| apply_cloak_image(x, &cloaks[k], range))
                .collect::<Result<Vec<_>>>()?;
            (own, moved)
        }
        (Defense::GradientAvgUniversal | Defense::IdCloak | Defense::IdCloakSinglePoint, 1) => (
            apply_all(train, &cloaks[0], range)?,
            apply_all(test, &cloaks[0], range)?,
        ),
        (d, n) => {
            return Err(Error::data(format!(
                "defense {d} cannot use {n} cloak(s) for {} training images",
                train.len()
            )))
        }
    };
    Ok(Published {
        defense,
        train: train_out,
        test: test_out,
        cloaks,
    })
}

/// Crafts `defense` on `train` and applies it to both splits.
pub fn craft_defense(
    kit: &DefenderKit,
    train: &[Tensor],
    test: &[Tensor],
    defense: Defense,
    range: (f64, f64),
    sched: &NoiseSchedule,
) -> Result<Published> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid("defense needs train and test images"));
    }
    let cloaks = craft_cloaks(kit, train, defense, sched)?;
    publish(defense, cloaks, train, test, kit.seed, range)
}

/// The simulated attacker and the scoring setup.
#[derive(Debug, Clone)]
pub struct AttackerKit<'a> {
    pub base: &'a MlpDenoiser,
    pub encoder: &'a TextEncoderStub,
    pub embedder: &'a IdentityEmbedder,
    pub attack: AttackConfig,
    /// Personalization prompt first, then every evaluation prompt.
    pub train_prompt: PromptTemplate,
    pub eval_prompts: Vec<PromptTemplate>,
    pub n_generate: usize,
    pub sampler_steps: usize,
    pub threshold: f64,
    pub range: (f64, f64),
}

/// The attacker's personalized pair and its generations per evaluation prompt.
#[derive(Debug, Clone)]
pub struct SplitAttack {
    pub tuned: Tuned,
    pub generations: Vec<Vec<Tensor>>,
}

/// Personalizes on `published` and generates for every evaluation prompt.
/// `stream` separates splits of one arm.
pub fn attack_generate(
    published: &[Tensor],
    attacker: &AttackerKit<'_>,
    sched: &NoiseSchedule,
    stream: u64,
) -> Result<SplitAttack> {
    if published.is_empty() {
        return Err(Error::invalid("attack needs at least one published image"));
    }
    let mut rng = RngState::with_stream(attacker.attack.seed, 0x100 + stream);
    let tuned = personalize_attack(
        published,
        attacker.base,
        attacker.encoder,
        &attacker.train_prompt,
        &attacker.attack,
        sched,
        &mut rng,
    )?;
    let shape = published[0].shape();
    let generations = attacker
        .eval_prompts
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let mut g = RngState::with_stream(attacker.attack.seed, 0x200 + k as u64);
            generate_batch(
                &tuned.model,
                &tuned.encoder,
                p,
                attacker.n_generate,
                attacker.sampler_steps,
                shape,
                attacker.range,
                sched,
                &mut g,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SplitAttack { tuned, generations })
}

/// Scores each prompt's generations against `reference`.
pub fn score_generations(
    generations: &[Vec<Tensor>],
    reference: &[Tensor],
    embedder: &IdentityEmbedder,
    threshold: f64,
) -> Result<Vec<MetricsReport>> {
    generations
        .iter()
        .map(|g| evaluate_protection(g, reference, embedder, threshold))
        .collect()
}

/// Personalizes on `published`, then scores generations per evaluation
/// prompt against `reference`.
pub fn attack_and_evaluate(
    published: &[Tensor],
    reference: &[Tensor],
    attacker: &AttackerKit<'_>,
    sched: &NoiseSchedule,
    stream: u64,
) -> Result<Vec<MetricsReport>> {
    let out = attack_generate(published, attacker, sched, stream)?;
    score_generations(&out.generations, reference, attacker.embedder, attacker.threshold)
}

/// Per-prompt reports for the train-applied and test-applied publications.
#[derive(Debug, Clone)]
pub struct ArmOutcome {
    pub defense: Defense,
    pub train: Vec<MetricsReport>,
    pub test: Vec<MetricsReport>,
}

/// Crafts, publishes, attacks and evaluates one defense. Generations are
/// always scored against the clean test split.
pub fn run_protection_experiment(
    train: &[Tensor],
    test: &[Tensor],
    defense: Defense,
    kit: &DefenderKit,
    attacker: &AttackerKit<'_>,
    sched: &NoiseSchedule,
) -> Result<(ArmOutcome, Published)> {
    let published = craft_defense(kit, train, test, defense, attacker.range, sched)?;
    let train_reports = attack_and_evaluate(&published.train, test, attacker, sched, 0)?;
    let test_reports = attack_and_evaluate(&published.test, test, attacker, sched, 1)?;
    Ok((
        ArmOutcome {
            defense,
            train: train_reports,
            test: test_reports,
        },
        published,
    ))
}
