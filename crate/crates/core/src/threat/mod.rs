//! Simulated personalization attacker and proxy protection metrics.

pub mod attack;
pub mod embedder;
pub mod experiment;
pub mod metrics;

pub use attack::{generate_batch, personalize_attack, AttackConfig};
pub use embedder::{train_identity_embedder, EmbedderConfig, IdentityEmbedder};
pub use experiment::{
    attack_and_evaluate, attack_generate, craft_cloaks, craft_defense, defense_subspace, publish,
    run_protection_experiment, score_generations, ArmOutcome, AttackerKit, DefenderKit, Defense, Published,
    SplitAttack,
};
pub use metrics::{evaluate_protection, frechet_distance, MetricsReport};
