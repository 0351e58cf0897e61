//! Learns an identity on a small world: fine-tunes the base model on four
//! photos, prompt-tunes one anchor per photo, and fits the Gaussian
//! subspace around the core identity point.
//!
//! cargo run --release --example identity_subspace

use idcloak::identity::sample_condition;
use idcloak::workbench::{build_world, prepare_defender, synth_dataset, ExperimentConfig};
use idcloak::RngState;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

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
    let state = prepare_defender(&world, &ds.train, &cfg)?;

    let losses = &state.tuned.losses;
    println!(
        "identity learning: {} steps, loss {:.4} -> {:.4}",
        losses.len(),
        losses[0],
        losses[losses.len() - 1]
    );
    println!("|c_ID| = {:.4}", norm(state.c_id.data()));
    for (k, a) in state.anchors.anchors.iter().enumerate() {
        let shift: Vec<f64> = a.iter().zip(state.c_id.data()).map(|(x, c)| x - c).collect();
        println!("anchor {k}: distance from c_ID {:.5}", norm(&shift));
    }
    let q = &state.subspace;
    let mean_sigma = q.sigma.iter().sum::<f64>() / q.sigma.len() as f64;
    println!("subspace: dim {}, mean sigma {mean_sigma:.5}", q.dim());

    let mut rng = RngState::new(4);
    for _ in 0..3 {
        let c = sample_condition(q, &mut rng, cfg.cloak.truncation)?;
        let off: Vec<f64> = c.data().iter().zip(&q.mu).map(|(x, m)| x - m).collect();
        println!("sampled condition: distance from mu {:.5}", norm(&off));
    }
    Ok(())
}
