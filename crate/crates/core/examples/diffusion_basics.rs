//! Trains a small conditional denoiser on two rendered identities, then
//! draws DDIM samples for each condition and checks the round-trip algebra.
//!
//! cargo run --release --example diffusion_basics

use idcloak::diffusion::{
    forward_diffuse, make_schedule, predict_x0, sample_latent, train_denoiser, Architecture, MlpDenoiser, ScheduleKind,
    TrainConfig,
};
use idcloak::workbench::dataset::{render_identity, Style};
use idcloak::{RngState, Tensor};

fn main() -> idcloak::Result<()> {
    let sched = make_schedule(100, ScheduleKind::Linear)?;
    let arch = Architecture {
        data_dim: 64,
        hidden: vec![96, 96],
        time_dim: 16,
        cond_dim: 4,
        t_max: 100,
    };
    let model = MlpDenoiser::new(arch, &mut RngState::new(1))?;

    // Two identities, each paired with a fixed one-hot-like condition.
    let conds = [
        Tensor::vector(vec![1.0, 0.0, 0.0, 0.0]),
        Tensor::vector(vec![0.0, 1.0, 0.0, 0.0]),
    ];
    let mut data = Vec::new();
    for (k, c) in conds.iter().enumerate() {
        for img in render_identity(10 + k as u64, 8, 24, 1.0, Style::Photo, 0) {
            data.push((Tensor::vector(img.into_data()), c.clone()));
        }
    }
    let cfg = TrainConfig {
        steps: 1500,
        lr: 1e-3,
        batch: 16,
    };
    let out = train_denoiser(&data, &model, &cfg, &sched, &mut RngState::new(2))?;
    let avg = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    println!(
        "loss: first 100 steps {:.4}, last 100 steps {:.4}",
        avg(&out.losses[..100]),
        avg(&out.losses[out.losses.len() - 100..])
    );

    let mut rng = RngState::new(3);
    for (k, c) in conds.iter().enumerate() {
        let x = sample_latent(&out.model, c, 0, 25, &mut rng, &sched, &[64])?;
        let mean = x.data().iter().sum::<f64>() / 64.0;
        let (lo, hi) = x
            .data()
            .iter()
            .fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        println!("identity {k}: sample mean pixel {mean:.3}, range [{lo:.2}, {hi:.2}]");
    }

    let x0 = data[0].0.clone();
    let eps = Tensor::vector(rng.gaussian_vec(64));
    let x_t = forward_diffuse(&x0, 60, &eps, &sched)?;
    let back = predict_x0(&x_t, 60, &eps, &sched)?;
    let err = back
        .data()
        .iter()
        .zip(x0.data())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    println!("x0 recovered from x_t with the true noise: max error {err:.1e}");
    Ok(())
}
