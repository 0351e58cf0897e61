mod common;

use common::*;
use idcloak::diffusion::{
    ddim_step, denoise_loss, denoise_loss_at, forward_diffuse, make_schedule, predict_x0, sample_latent,
    train_denoiser, Denoiser, GradRequest, Gradients, ScheduleKind, TrainConfig,
};
use idcloak::workbench::dataset::{render_identity, Style};
use idcloak::{RngState, Tensor};
use proptest::prelude::*;

proptest! {
    #[test]
    fn alpha_bar_strictly_decreases(t_max in 1usize..1200, cosine in any::<bool>()) {
        let kind = if cosine { ScheduleKind::Cosine } else { ScheduleKind::Linear };
        let s = make_schedule(t_max, kind).unwrap();
        prop_assert_eq!(s.alpha_bar(0), 1.0);
        prop_assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0] && w[1] > 0.0));
    }

    #[test]
    fn inversion_roundtrip(seed in any::<u64>(), t in 1usize..=1000) {
        let s = sched(1000);
        let mut r = RngState::new(seed);
        let x_t = Tensor::vector(r.gaussian_vec(24));
        let e = Tensor::vector(r.gaussian_vec(24));
        let back = forward_diffuse(&predict_x0(&x_t, t, &e, &s).unwrap(), t, &e, &s).unwrap();
        for (a, b) in back.data().iter().zip(x_t.data()) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
        let x0 = Tensor::vector(r.gaussian_vec(24));
        let recovered = predict_x0(&forward_diffuse(&x0, t, &e, &s).unwrap(), t, &e, &s).unwrap();
        for (a, b) in recovered.data().iter().zip(x0.data()) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn ddim_with_true_noise_lands_on_forward_marginal(seed in any::<u64>(), t in 2usize..=1000, frac in 0.0f64..1.0) {
        let s = sched(1000);
        let t_prev = ((t as f64) * frac) as usize;
        let mut r = RngState::new(seed);
        let x0 = Tensor::vector(r.gaussian_vec(12));
        let e = Tensor::vector(r.gaussian_vec(12));
        let x_t = forward_diffuse(&x0, t, &e, &s).unwrap();
        let zero = Tensor::zeros(vec![12]);
        let stepped = ddim_step(&x_t, t, t_prev, &e, 0.0, &zero, &s).unwrap();
        let expect = forward_diffuse(&x0, t_prev, &e, &s).unwrap();
        for (a, b) in stepped.data().iter().zip(expect.data()) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }
}

#[test]
fn cosine_midpoint_matches_scalar_formula() {
    let s = make_schedule(50, ScheduleKind::Cosine).unwrap();
    let f = |t: f64| {
        (((t / 50.0 + 0.008) / 1.008) * std::f64::consts::FRAC_PI_2)
            .cos()
            .powi(2)
    };
    let mut expect = 1.0;
    for t in 1..=25 {
        expect *= 1.0 - (1.0 - f(t as f64) / f(t as f64 - 1.0)).min(0.999);
    }
    assert!((s.alpha_bar(25) - expect).abs() < 1e-15);
}

#[test]
fn forward_marginal_moments_within_three_standard_errors() {
    let s = sched(1000);
    let t = 500;
    let n = 100_000;
    let x0 = Tensor::vector(vec![1.0]);
    let mut r = RngState::new(77);
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..n {
        let e = Tensor::vector(vec![r.gaussian()]);
        let v = forward_diffuse(&x0, t, &e, &s).unwrap().data()[0];
        sum += v;
        sq += v * v;
    }
    let nf = n as f64;
    let mean = sum / nf;
    let var = (sq - nf * mean * mean) / (nf - 1.0);
    let ab = s.alpha_bar(t);
    let true_var = 1.0 - ab;
    assert!((mean - ab.sqrt()).abs() < 3.0 * (true_var / nf).sqrt(), "mean {mean}");
    assert!(
        (var - true_var).abs() < 3.0 * true_var * (2.0 / (nf - 1.0)).sqrt(),
        "var {var}"
    );
}

#[test]
fn sampler_matches_closed_form_for_linear_predictor() {
    let s = sched(1000);
    let stub = LinearStub { k: 0.3, dim: 5 };
    let c = Tensor::vector(vec![0.0]);
    for (steps, t_stop) in [(50, 0), (7, 0), (20, 333), (1, 0)] {
        let got = sample_latent(&stub, &c, t_stop, steps, &mut RngState::new(5), &s, &[5]).unwrap();
        // Grid k*T/steps for k = steps..1, cut at t_stop, then t_stop itself.
        let mut grid: Vec<usize> = (1..=steps)
            .rev()
            .map(|k| ((k * 1000) as f64 / steps as f64).round() as usize)
            .filter(|&g| g > t_stop)
            .collect();
        grid.push(t_stop);
        let mut factor = 1.0;
        for w in grid.windows(2) {
            let (a, b) = (s.alpha_bar(w[0]), s.alpha_bar(w[1]));
            factor *= b.sqrt() * (1.0 - (1.0 - a).sqrt() * 0.3) / a.sqrt() + (1.0 - b).sqrt() * 0.3;
        }
        let start = RngState::new(5).gaussian_vec(5);
        for (g, x) in got.data().iter().zip(&start) {
            assert!(
                (g - factor * x).abs() <= 1e-12 * (factor * x).abs().max(1.0),
                "steps {steps}"
            );
        }
    }
}

#[test]
fn degenerate_chain_returns_initial_draw() {
    let s = sched(100);
    let m = tiny_model(3);
    let c = Tensor::vector(vec![0.1; 6]);
    let x = sample_latent(&m, &c, 100, 1, &mut RngState::new(8), &s, &[16]).unwrap();
    assert_eq!(x.data(), RngState::new(8).gaussian_vec(16).as_slice());
    let a = sample_latent(&m, &c, 0, 10, &mut RngState::new(8), &s, &[16]).unwrap();
    let b = sample_latent(&m, &c, 0, 10, &mut RngState::new(8), &s, &[16]).unwrap();
    assert_eq!(a, b);
}

/// Predicts a fixed vector regardless of input.
struct Constant(Vec<f64>);

impl Denoiser for Constant {
    type Tape = ();
    fn data_dim(&self) -> usize {
        self.0.len()
    }
    fn cond_dim(&self) -> usize {
        1
    }
    fn num_params(&self) -> usize {
        0
    }
    fn predict_taped(&self, _x: &[f64], _t: usize, _c: &[f64]) -> (Vec<f64>, ()) {
        (self.0.clone(), ())
    }
    fn pullback_into(&self, _tape: &(), _d: &[f64], _acc: &mut Gradients) {}
}

#[test]
fn perfect_predictor_has_zero_loss() {
    let s = sched(100);
    let eps = RngState::new(2).gaussian_vec(9);
    let (loss, g) = denoise_loss_at(
        &Constant(eps.clone()),
        &[0.5; 9],
        &[0.0],
        40,
        &eps,
        &s,
        GradRequest::INPUT,
    );
    assert_eq!(loss, 0.0);
    assert!(g.input.iter().all(|&v| v == 0.0));
}

#[test]
fn denoise_loss_gradients_match_central_differences() {
    for seed in FD_SEEDS {
        let [theta, input, cond] = denoise_loss_fd(seed);
        assert!(theta < FD_TOL, "seed {seed}: parameters {theta}");
        assert!(input < FD_TOL, "seed {seed}: noisy input {input}");
        assert!(cond < FD_TOL, "seed {seed}: condition {cond}");
    }
}

#[test]
fn drawn_loss_is_deterministic() {
    let s = sched(100);
    let m = tiny_model(1);
    let x0 = Tensor::vector(vec![0.2; 16]);
    let c = Tensor::vector(vec![0.3; 6]);
    let a = denoise_loss(&m, &x0, &c, &mut RngState::new(4), &s).unwrap();
    let b = denoise_loss(&m, &x0, &c, &mut RngState::new(4), &s).unwrap();
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    assert_eq!(a.param_grad, b.param_grad);
}

fn two_identity_corpus() -> Vec<(Tensor, Tensor)> {
    let mut pairs = Vec::new();
    for (k, seed) in [11u64, 12].into_iter().enumerate() {
        let mut c = vec![0.0; 6];
        c[k] = 1.0;
        for img in render_identity(seed, 4, 16, 1.0, Style::Photo, 0) {
            pairs.push((Tensor::vector(img.into_data()), Tensor::vector(c.clone())));
        }
    }
    pairs
}

#[test]
fn training_lowers_loss_and_is_reproducible() {
    let s = sched(100);
    let init = tiny_model(9);
    let corpus = two_identity_corpus();
    let cfg = TrainConfig {
        steps: 2000,
        lr: 1e-3,
        batch: 8,
    };
    let a = train_denoiser(&corpus, &init, &cfg, &s, &mut RngState::new(1)).unwrap();
    let b = train_denoiser(&corpus, &init, &cfg, &s, &mut RngState::new(1)).unwrap();
    assert_eq!(a.model, b.model);
    let first: f64 = a.losses[..100].iter().sum();
    let last: f64 = a.losses[a.losses.len() - 100..].iter().sum();
    assert!(last < first, "first {first} last {last}");

    let idle = TrainConfig { steps: 0, ..cfg };
    assert_eq!(
        train_denoiser(&corpus, &init, &idle, &s, &mut RngState::new(1))
            .unwrap()
            .model,
        init
    );
    assert!(train_denoiser(&[], &init, &cfg, &s, &mut RngState::new(1)).is_err());
}
