//! Oracles and fixtures shared by the integration suites and the acceptance run.
#![allow(dead_code)]

use idcloak::cloak::{
    apply_cloak_latent, cloak_objective, gradient_avg_universal, image_specific_cloaks, optimize_cloak, pgd_step,
    BaselineConfig, CloakInit, CloakOptConfig,
};
use idcloak::diffusion::{
    denoise_loss_at, forward_diffuse, make_schedule, predict_x0, sample_latent, Architecture, Denoiser, GradRequest,
    Gradients, MlpDenoiser, NoiseSchedule, ScheduleKind,
};
use idcloak::identity::{
    anchor_objective, estimate_subspace, sample_condition, AnchorSet, IdentitySubspace, SigmaDivisor,
};
use idcloak::{Result, RngState, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-3;
pub const FD_COORDS: usize = 20;
pub const FD_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

pub fn tiny_arch() -> Architecture {
    Architecture {
        data_dim: 16,
        hidden: vec![12, 10],
        time_dim: 8,
        cond_dim: 6,
        t_max: 100,
    }
}

pub fn tiny_model(seed: u64) -> MlpDenoiser {
    MlpDenoiser::new(tiny_arch(), &mut RngState::new(seed)).unwrap()
}

pub fn sched(t_max: usize) -> NoiseSchedule {
    make_schedule(t_max, ScheduleKind::Linear).unwrap()
}

/// Relative error with a floor so vanishing coordinates compare absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Worst relative error of `grad` against central differences of `f` on
/// `FD_COORDS` coordinates drawn from `rng`.
pub fn fd_worst(x: &[f64], grad: &[f64], rng: &mut RngState, f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut probe = x.to_vec();
    for _ in 0..FD_COORDS {
        let i = rng.index(x.len());
        probe[i] = x[i] + FD_STEP;
        let up = f(&probe);
        probe[i] = x[i] - FD_STEP;
        let down = f(&probe);
        probe[i] = x[i];
        worst = worst.max(rel_err(grad[i], (up - down) / (2.0 * FD_STEP)));
    }
    worst
}

pub fn squared_residual(pred: &[f64], eps: &[f64]) -> f64 {
    pred.iter().zip(eps).map(|(p, e)| (p - e) * (p - e)).sum()
}

/// Worst finite-difference errors of the denoise loss for one seed, in the
/// order parameters, noisy input, condition.
pub fn denoise_loss_fd(seed: u64) -> [f64; 3] {
    let s = sched(100);
    let model = tiny_model(seed);
    let arch = model.arch().clone();
    let mut r = RngState::with_stream(seed, 1);
    let x0 = r.gaussian_vec(16);
    let c = r.gaussian_vec(6);
    let eps = r.gaussian_vec(16);
    let t = r.int_inclusive(1, 100);
    let (_, g) = denoise_loss_at(&model, &x0, &c, t, &eps, &s, GradRequest::ALL);

    let theta = fd_worst(model.params(), &g.params, &mut r, |p| {
        let m = MlpDenoiser::from_parts(arch.clone(), p.to_vec()).unwrap();
        denoise_loss_at(&m, &x0, &c, t, &eps, &s, GradRequest::default()).0
    });
    let x_t = forward_diffuse(&Tensor::vector(x0.clone()), t, &Tensor::vector(eps.clone()), &s).unwrap();
    let input = fd_worst(x_t.data(), &g.input, &mut r, |x| {
        squared_residual(&model.predict(x, t, &c), &eps)
    });
    let cond = fd_worst(&c, &g.cond, &mut r, |cc| {
        denoise_loss_at(&model, &x0, cc, t, &eps, &s, GradRequest::default()).0
    });
    [theta, input, cond]
}

/// Worst finite-difference error of the per-anchor objective gradient.
pub fn anchor_fd(seed: u64) -> f64 {
    let s = sched(100);
    let model = tiny_model(seed);
    let mut r = RngState::with_stream(seed, 2);
    let x0 = r.gaussian_vec(16);
    let c = r.gaussian_vec(6);
    let eps = r.gaussian_vec(16);
    let t = r.int_inclusive(1, 100);
    let (_, g) = anchor_objective(&model, &x0, &c, t, &eps, &s);
    // The condition has 6 coordinates; repeated draws still probe each one.
    fd_worst(&c, &g, &mut r, |cc| anchor_objective(&model, &x0, cc, t, &eps, &s).0)
}

/// Worst finite-difference error of the cloak objective gradient with
/// respect to the cloaked latent.
pub fn cloak_fd(seed: u64) -> f64 {
    let model = tiny_model(seed);
    let mut r = RngState::with_stream(seed, 3);
    let x_t = Tensor::vector(r.gaussian_vec(16));
    let cloaked = Tensor::vector(x_t.data().iter().map(|v| v + 0.1 * r.gaussian()).collect());
    let c = Tensor::vector(r.gaussian_vec(6));
    let t = r.int_inclusive(1, 100);
    let (_, g) = cloak_objective(&model, &x_t, &cloaked, t, &c).unwrap();
    fd_worst(cloaked.data(), g.data(), &mut r, |xc| {
        cloak_objective(&model, &x_t, &Tensor::vector(xc.to_vec()), t, &c)
            .unwrap()
            .0
    })
}

/// Small cloak config that keeps optimization cheap on the tiny model.
pub fn tiny_cloak_cfg(seed: u64) -> CloakOptConfig {
    CloakOptConfig {
        n_outer: 12,
        n_inner: 1,
        sampler_steps: 10,
        pre_search: false,
        record_iterates: true,
        seed,
        ..CloakOptConfig::default()
    }
}

pub fn spread_subspace(dim: usize, seed: u64) -> IdentitySubspace {
    let mut r = RngState::new(seed);
    IdentitySubspace {
        mu: r.gaussian_vec(dim),
        sigma: (0..dim).map(|_| 0.2 + 0.5 * r.uniform()).collect(),
        n_anchors: 4,
        divisor: SigmaDivisor::Unbiased,
    }
}

/// The single-sample ascent loop written directly against the public
/// primitives: uniform start, then per step draw `c`, `t` and the chain
/// start, cloak the latent and step on the sign of its gradient.
pub fn direct_single_sample_loop(
    model: &MlpDenoiser,
    q: &IdentitySubspace,
    cfg: &CloakOptConfig,
    s: &NoiseSchedule,
) -> Result<Vec<Vec<f64>>> {
    let shape = vec![model.data_dim()];
    let mut rng = RngState::new(cfg.seed);
    // Uniform start on its own stream, then the optimization stream.
    let mut start = RngState::with_stream(cfg.seed, 1);
    let mut delta = Tensor::vector(
        (0..model.data_dim())
            .map(|_| cfg.eta * (2.0 * start.uniform() - 1.0))
            .collect(),
    );
    if cfg.init == CloakInit::Zero {
        delta = Tensor::zeros(shape.clone());
    }
    let t_hi = if cfg.t_max == 0 { s.t_max() } else { cfg.t_max };
    let mut trajectory = Vec::new();
    for _ in 0..cfg.n_outer {
        let c = sample_condition(q, &mut rng, cfg.truncation)?;
        let t = rng.int_inclusive(cfg.t_min, t_hi);
        let x_t = sample_latent(model, &c, t, cfg.sampler_steps, &mut rng, s, &shape)?;
        let eps = Tensor::vector(model.predict(x_t.data(), t, c.data()));
        let cloaked = apply_cloak_latent(&x_t, t, &eps, &delta, s)?;
        let (_, g) = cloak_objective(model, &x_t, &cloaked, t, &c)?;
        delta = pgd_step(&delta, &g, cfg.alpha, cfg.eta)?;
        trajectory.push(delta.data().to_vec());
    }
    Ok(trajectory)
}

/// Whether the optimizer reproduces the direct loop bit for bit.
pub fn single_sample_reduction_holds(seed: u64) -> bool {
    let s = sched(100);
    let model = tiny_model(seed);
    let q = spread_subspace(6, seed);
    let cfg = tiny_cloak_cfg(seed);
    let run = optimize_cloak(&model, &q, &[16], &cfg, &s).unwrap();
    let direct = direct_single_sample_loop(&model, &q, &cfg, &s).unwrap();
    run.iterates == direct && run.cloak.delta.data() == direct.last().unwrap().as_slice()
}

/// Whether the gradient-averaged universal cloak over one image follows the
/// per-image trajectory bit for bit.
pub fn gradient_average_reduction_holds(seed: u64) -> bool {
    let s = sched(100);
    let model = tiny_model(seed);
    let mut r = RngState::new(seed);
    let img = Tensor::vector(r.gaussian_vec(16));
    let c = Tensor::vector(r.gaussian_vec(6));
    let cfg = BaselineConfig {
        steps: 25,
        alpha: 0.005,
        eta: 16.0 / 255.0,
        record_iterates: true,
    };
    let base = RngState::with_stream(seed, 9);
    let single = image_specific_cloaks(&model, std::slice::from_ref(&img), &c, &cfg, &s, &base).unwrap();
    let avg = gradient_avg_universal(&model, std::slice::from_ref(&img), &c, &cfg, &s, &base).unwrap();
    single.iterates == avg.iterates && single.deltas == avg.deltas
}

/// Two-pass mean and sample standard deviation per dimension.
pub fn brute_force_moments(rows: &[Vec<f64>], unbiased: bool) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len();
    let dim = rows[0].len();
    let mut mu = Vec::with_capacity(dim);
    let mut sd = Vec::with_capacity(dim);
    for d in 0..dim {
        let mut sum = 0.0;
        for row in rows {
            sum += row[d];
        }
        let m = sum / n as f64;
        let mut ss = 0.0;
        for row in rows {
            ss += (row[d] - m) * (row[d] - m);
        }
        let denom = if unbiased { n - 1 } else { n };
        mu.push(m);
        sd.push(if denom == 0 { 0.0 } else { (ss / denom as f64).sqrt() });
    }
    (mu, sd)
}

pub fn anchor_set(rows: Vec<Vec<f64>>) -> AnchorSet {
    let n = rows.len();
    AnchorSet {
        anchors: rows,
        source_images: (0..n).collect(),
        losses: Vec::new(),
    }
}

/// Worst relative deviation of `estimate_subspace` from the brute-force
/// moments over random anchor sets.
pub fn subspace_oracle_worst(trials: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..trials {
        let mut r = RngState::new(seed);
        let n = 2 + r.index(9);
        let dim = 1 + r.index(32);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| r.gaussian_vec(dim).into_iter().map(|v| 3.0 * v + 1.5).collect())
            .collect();
        let q = estimate_subspace(&anchor_set(rows.clone()), SigmaDivisor::Unbiased).unwrap();
        let (mu, sd) = brute_force_moments(&rows, true);
        for (a, b) in q.mu.iter().zip(&mu).chain(q.sigma.iter().zip(&sd)) {
            worst = worst.max((a - b).abs() / b.abs().max(1e-300));
        }
    }
    worst
}

/// Largest deviation of per-dimension draw moments from the subspace
/// parameters, in standard errors. Untruncated draws.
pub fn condition_moment_z(q: &IdentitySubspace, draws: usize, seed: u64) -> f64 {
    let mut r = RngState::new(seed);
    let dim = q.dim();
    let (mut sum, mut sq) = (vec![0.0; dim], vec![0.0; dim]);
    for _ in 0..draws {
        let c = sample_condition(q, &mut r, f64::INFINITY).unwrap();
        for (d, v) in c.data().iter().enumerate() {
            sum[d] += v;
            sq[d] += v * v;
        }
    }
    let n = draws as f64;
    let mut worst: f64 = 0.0;
    for d in 0..dim {
        let mean = sum[d] / n;
        let var = (sq[d] - n * mean * mean) / (n - 1.0);
        let sigma = q.sigma[d];
        worst = worst.max((mean - q.mu[d]).abs() / (sigma / n.sqrt()));
        worst = worst.max((var.sqrt() - sigma).abs() / (sigma / (2.0 * n).sqrt()));
    }
    worst
}

/// Worst error of `forward(predict_x0(x_t))` against `x_t` and of the
/// latent cloak against its linear form, over random draws.
pub fn algebra_worst(trials: u64) -> (f64, f64) {
    let s = sched(1000);
    let (mut round, mut linear): (f64, f64) = (0.0, 0.0);
    for seed in 0..trials {
        let mut r = RngState::new(seed);
        let n = 1 + r.index(64);
        let t = r.int_inclusive(1, 1000);
        let x_t = Tensor::vector(r.gaussian_vec(n));
        let e = Tensor::vector(r.gaussian_vec(n));
        let delta = Tensor::vector((0..n).map(|_| (2.0 * r.uniform() - 1.0) * 16.0 / 255.0).collect());
        let back = forward_diffuse(&predict_x0(&x_t, t, &e, &s).unwrap(), t, &e, &s).unwrap();
        let cloaked = apply_cloak_latent(&x_t, t, &e, &delta, &s).unwrap();
        let a = s.alpha_bar(t).sqrt();
        for i in 0..n {
            round = round.max((back.data()[i] - x_t.data()[i]).abs());
            linear = linear.max((cloaked.data()[i] - (x_t.data()[i] + a * delta.data()[i])).abs());
        }
    }
    (round, linear)
}

/// Noise predictor `eps = k x_t`, for closed-form sampler checks.
pub struct LinearStub {
    pub k: f64,
    pub dim: usize,
}

impl Denoiser for LinearStub {
    type Tape = ();

    fn data_dim(&self) -> usize {
        self.dim
    }

    fn cond_dim(&self) -> usize {
        1
    }

    fn num_params(&self) -> usize {
        0
    }

    fn predict_taped(&self, x_t: &[f64], _t: usize, _c: &[f64]) -> (Vec<f64>, ()) {
        (x_t.iter().map(|v| self.k * v).collect(), ())
    }

    fn pullback_into(&self, _tape: &(), d_out: &[f64], acc: &mut Gradients) {
        for (a, d) in acc.input.iter_mut().zip(d_out) {
            *a += self.k * d;
        }
    }
}
