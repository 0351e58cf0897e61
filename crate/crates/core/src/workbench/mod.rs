//! Configuration, datasets, orchestration, persistence and reports.

pub mod config;
pub mod dataset;
pub mod experiment;
pub mod pipeline;
pub mod report;
pub mod store;

pub use config::ExperimentConfig;
pub use dataset::{import_dataset, synth_dataset, IdentityDataset, PIXEL_RANGE};
pub use experiment::{build_world, prepare_defender, run_identity, DefenderState, IdentityRun, World};
