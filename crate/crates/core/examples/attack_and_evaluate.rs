//! Plays the attacker: personalizes the base model on clean and on cloaked
//! publications of the same held-out photos, generates with every
//! evaluation prompt and scores the results.
//!
//! cargo run --release --example attack_and_evaluate

use idcloak::threat::{attack_and_evaluate, craft_defense, Defense, MetricsReport};
use idcloak::workbench::experiment::{attacker_kit, defender_kit};
use idcloak::workbench::{build_world, prepare_defender, synth_dataset, ExperimentConfig, PIXEL_RANGE};

fn main() -> idcloak::Result<()> {
    let cfg = ExperimentConfig::smoke();
    let world = build_world(&cfg, &[cfg.identity_seed], &[])?;
    let ds = synth_dataset(
        cfg.identity_seed,
        cfg.image_size,
        cfg.n_train,
        cfg.n_test,
        cfg.context_spread,
    )?;
    let kit = defender_kit(&prepare_defender(&world, &ds.train, &cfg)?, &cfg);
    let attacker = attacker_kit(&world, &world.base_model, &cfg)?;

    println!("{:<26} {:>8} {:>8} {:>9}", "defense", "ism", "fdfr", "quality");
    for defense in [Defense::None, Defense::GradientAvgUniversal, Defense::IdCloak] {
        let published = craft_defense(&kit, &ds.train, &ds.test, defense, PIXEL_RANGE, &world.sched)?;
        let per_prompt = attack_and_evaluate(&published.test, &ds.test, &attacker, &world.sched, 1)?;
        let m = MetricsReport::mean_of(&per_prompt)?;
        println!(
            "{:<26} {:>8.4} {:>8.3} {:>9.4}",
            defense.name(),
            m.ism_proxy,
            m.fdfr_proxy,
            m.quality_proxy
        );
    }
    Ok(())
}
