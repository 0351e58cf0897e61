//! Trains the proxy identity embedder and scores three generated sets
//! against one identity's references: its own held-out faces, another
//! identity, and uniform noise.
//!
//! cargo run --release --example embedder_metrics

use idcloak::threat::evaluate_protection;
use idcloak::workbench::dataset::{render_identity, Style};
use idcloak::workbench::experiment::{public_identity_seed, train_embedder};
use idcloak::workbench::ExperimentConfig;
use idcloak::{RngState, Tensor};

fn main() -> idcloak::Result<()> {
    let cfg = ExperimentConfig::smoke();
    let embedder = train_embedder(&cfg, &[cfg.identity_seed], &[])?;
    let render = |seed, offset| render_identity(seed, cfg.image_size, 12, cfg.context_spread, Style::Photo, offset);
    let reference = render(cfg.identity_seed, 1);

    let mut rng = RngState::new(9);
    let n = cfg.image_size * cfg.image_size;
    let noise: Vec<Tensor> = (0..12)
        .map(|_| Tensor::new(cfg.image_shape(), (0..n).map(|_| rng.uniform()).collect()))
        .collect::<idcloak::Result<_>>()?;

    let sets = [
        ("same identity", render(cfg.identity_seed, 2)),
        ("other identity", render(public_identity_seed(0), 2)),
        ("uniform noise", noise),
    ];
    println!("{:<16} {:>8} {:>8} {:>9}", "generated", "ism", "fdfr", "quality");
    for (name, set) in &sets {
        let m = evaluate_protection(set, &reference, &embedder, cfg.eval_threshold)?;
        println!(
            "{name:<16} {:>8.4} {:>8.3} {:>9.4}",
            m.ism_proxy, m.fdfr_proxy, m.quality_proxy
        );
    }
    Ok(())
}
