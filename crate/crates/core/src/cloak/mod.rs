//! Cloak crafting: one-step latent cloaking, the discrepancy objective,
//! PGD projection, stochastic gradient aggregation and baseline defenses.

pub mod baseline;
pub mod forge;
pub mod latent;
pub mod pgd;

pub use baseline::{gradient_avg_universal, image_specific_cloaks, transfer_assignments, BaselineConfig, BaselineRun};
pub use forge::{
    apply_cloak_image, draw_evaluation_pool, initial_cloak, optimize_cloak, pool_objective, Cloak, CloakInit,
    CloakOptConfig, CloakRun, LatentDraw,
};
pub use latent::{apply_cloak_latent, cloak_objective};
pub use pgd::pgd_step;
