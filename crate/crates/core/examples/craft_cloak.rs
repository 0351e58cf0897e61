//! Crafts an identity-specific universal cloak against a personalized
//! model and shows how its objective and budget evolve, then applies the
//! cloak to held-out photos.
//!
//! cargo run --release --example craft_cloak

use idcloak::cloak::{apply_cloak_image, draw_evaluation_pool, optimize_cloak, pool_objective, CloakOptConfig};
use idcloak::workbench::experiment::defender_kit;
use idcloak::workbench::{build_world, prepare_defender, synth_dataset, ExperimentConfig, PIXEL_RANGE};
use idcloak::RngState;

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

    let cloak_cfg = CloakOptConfig {
        record_iterates: true,
        ..kit.cloak.clone()
    };
    let run = optimize_cloak(&kit.model, &kit.subspace, &cfg.image_shape(), &cloak_cfg, &world.sched)?;
    for (k, (obj, linf)) in run.objective.iter().zip(&run.outer_linf).enumerate().step_by(4) {
        println!("outer step {k:>3}: objective {obj:.4}, |delta|_inf {linf:.4}");
    }

    let pool = draw_evaluation_pool(
        &kit.model,
        &kit.subspace,
        &cloak_cfg,
        &world.sched,
        64,
        &mut RngState::new(77),
    );
    let zero = vec![0.0; run.cloak.delta.len()];
    println!(
        "held-out latent objective: no cloak {:.4}, crafted cloak {:.4}",
        pool_objective(&kit.model, &pool, &zero, &world.sched),
        pool_objective(&kit.model, &pool, run.cloak.delta.data(), &world.sched)
    );

    for x in &ds.test[..3] {
        let y = apply_cloak_image(x, &run.cloak.delta, PIXEL_RANGE)?;
        let moved = y
            .data()
            .iter()
            .zip(x.data())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        println!(
            "published test photo moved by at most {moved:.4} (budget {:.4})",
            run.cloak.eta
        );
    }
    Ok(())
}
