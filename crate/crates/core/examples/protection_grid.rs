//! Runs every defense on a few synthetic identities and prints per-arm
//! held-out ISM, FDFR and quality proxies.
//!
//! cargo run --release --example protection_grid -- [identities] [seed] [key=value ...]

use std::time::Instant;

use idcloak::kv::KvRecord;
use idcloak::threat::{Defense, MetricsReport};
use idcloak::workbench::{build_world, run_identity, synth_dataset, ExperimentConfig};

fn main() -> idcloak::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let n_ids: u64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(2);
    let mut cfg = ExperimentConfig::default();
    cfg.seed = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let overrides = args.iter().skip(2).cloned().collect::<Vec<_>>().join("\n");
    cfg.apply(&KvRecord::parse(&overrides)?)?;

    let ids: Vec<u64> = (0..n_ids).map(|i| cfg.identity_seed + i).collect();
    let clock = Instant::now();
    let world = build_world(&cfg, &ids, &[])?;
    println!(
        "world ready in {:.1}s, final base loss {:.4}",
        clock.elapsed().as_secs_f64(),
        world.base_losses.iter().rev().take(100).sum::<f64>() / 100.0
    );
    for &id in &ids {
        let t = Instant::now();
        let ds = synth_dataset(id, cfg.image_size, cfg.n_train, cfg.n_test, cfg.context_spread)?;
        let run = run_identity(&world, &ds, &cfg, &Defense::ALL, &[Defense::None, Defense::IdCloak])?;
        println!("identity {id} ({:.1}s)", t.elapsed().as_secs_f64());
        for o in run.outcomes.iter().chain(&run.transfer) {
            let m = MetricsReport::mean_of(&o.test)?;
            println!(
                "  {:<24} ism {:.4}  fdfr {:.3}  quality {:.4}",
                o.defense.name(),
                m.ism_proxy,
                m.fdfr_proxy,
                m.quality_proxy
            );
        }
    }
    Ok(())
}
