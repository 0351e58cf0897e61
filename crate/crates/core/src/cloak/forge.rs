//! Universal cloak optimization with stochastic gradient aggregation.
//!
//! Each outer iteration runs `n_inner` inner iterations. An inner iteration
//! draws, in this order from the single optimization stream,
//!
//! 1. `c ~ Q` (one standard normal per embedding dimension, truncated),
//! 2. `t ~ U{t_min..=t_max}`,
//! 3. the Gaussian start of the reverse chain used to reach `x_t`,
//!
//! repeated `batch` times, then cloaks each latent with the surrogate
//! `delta_inner`, accumulates the objective gradient mapped to cloak space
//! and takes a pre-search PGD step on `delta_inner`. The outer update applies
//! the sign of the aggregate to `delta`.

use super::latent::{apply_cloak_latent_raw, cloak_objective_raw};
use super::pgd::pgd_step_raw;
use crate::diffusion::process::sample_latent_raw;
use crate::diffusion::{Denoiser, MlpDenoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::identity::subspace::sample_condition_raw;
use crate::identity::IdentitySubspace;
use crate::kv::KvRecord;
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const DEFAULT_ETA: f64 = 16.0 / 255.0;
pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_OUTER: usize = 200;
pub const DEFAULT_INNER: usize = 10;
pub const DEFAULT_SAMPLER_STEPS: usize = 50;

/// Starting point of the universal cloak.
///
/// A zero cloak leaves the latent untouched, where the discrepancy objective
/// is at its minimum and its gradient vanishes, so sign ascent from exactly
/// zero never moves. `Uniform` starts from `U[-eta, eta]` per pixel instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloakInit {
    Zero,
    Uniform,
}

impl std::str::FromStr for CloakInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Self::Zero),
            "uniform" => Ok(Self::Uniform),
            other => Err(Error::config(format!("unknown cloak init `{other}`"))),
        }
    }
}

impl std::fmt::Display for CloakInit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Zero => "zero",
            Self::Uniform => "uniform",
        })
    }
}

/// Stream of `RngState::with_stream(seed, _)` the uniform start is drawn from,
/// kept apart from the optimization stream.
pub const INIT_STREAM: u64 = 1;

/// The starting cloak for `cfg` (zero when nothing will be optimized).
pub fn initial_cloak(cfg: &CloakOptConfig, n: usize) -> Vec<f64> {
    if cfg.n_outer == 0 || cfg.init == CloakInit::Zero {
        return vec![0.0; n];
    }
    let mut r = RngState::with_stream(cfg.seed, INIT_STREAM);
    (0..n).map(|_| cfg.eta * (2.0 * r.uniform() - 1.0)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CloakOptConfig {
    pub n_outer: usize,
    pub n_inner: usize,
    pub alpha: f64,
    pub eta: f64,
    pub sampler_steps: usize,
    /// Inclusive timestep range; `t_max = 0` means the schedule's `T`.
    pub t_min: usize,
    pub t_max: usize,
    pub batch: usize,
    pub truncation: f64,
    /// Surrogate update of `delta_inner` inside the inner loop.
    pub pre_search: bool,
    /// Multiply inner gradients by `sqrt(alpha_bar_t)` before aggregation.
    pub scale_by_signal: bool,
    /// Keep a copy of `delta` after every outer update.
    pub record_iterates: bool,
    pub init: CloakInit,
    pub seed: u64,
}

impl Default for CloakOptConfig {
    fn default() -> Self {
        Self {
            n_outer: DEFAULT_OUTER,
            n_inner: DEFAULT_INNER,
            alpha: DEFAULT_ALPHA,
            eta: DEFAULT_ETA,
            sampler_steps: DEFAULT_SAMPLER_STEPS,
            t_min: 1,
            t_max: 0,
            batch: 1,
            truncation: 3.0,
            pre_search: true,
            scale_by_signal: true,
            record_iterates: false,
            init: CloakInit::Uniform,
            seed: 0,
        }
    }
}

impl CloakOptConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if !(self.eta > 0.0) || !(self.alpha > 0.0) {
            return Err(Error::invalid("cloak eta and alpha must be positive"));
        }
        let hi = self.resolved_t_max(sched);
        if self.t_min == 0 || self.t_min > hi || hi > sched.t_max() {
            return Err(Error::invalid(format!(
                "cloak timestep range {}..={hi} invalid for T={}",
                self.t_min,
                sched.t_max()
            )));
        }
        if self.sampler_steps == 0 || self.sampler_steps > sched.t_max() {
            return Err(Error::invalid("cloak sampler steps out of range"));
        }
        if !(self.truncation > 0.0) {
            return Err(Error::invalid("truncation must be positive"));
        }
        Ok(())
    }

    pub fn resolved_t_max(&self, sched: &NoiseSchedule) -> usize {
        if self.t_max == 0 {
            sched.t_max()
        } else {
            self.t_max
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cloak {
    pub delta: Tensor,
    pub eta: f64,
    pub alpha: f64,
    pub iterations: usize,
    pub n_inner: usize,
    pub seed: u64,
    pub model_hash: String,
    pub subspace_hash: String,
    /// Producing method, e.g. `id_cloak` or `gradient_avg_universal`.
    pub method: String,
}

impl Cloak {
    pub fn zero(shape: Vec<usize>, eta: f64) -> Self {
        Self {
            delta: Tensor::zeros(shape),
            eta,
            alpha: 0.0,
            iterations: 0,
            n_inner: 0,
            seed: 0,
            model_hash: String::new(),
            subspace_hash: String::new(),
            method: "none".into(),
        }
    }

    pub fn metadata(&self) -> KvRecord {
        let mut kv = KvRecord::new();
        kv.set("method", &self.method);
        kv.set("eta", self.eta);
        kv.set("alpha", self.alpha);
        kv.set("n_outer", self.iterations);
        kv.set("n_inner", self.n_inner);
        kv.set("seed", self.seed);
        kv.set("model_hash", &self.model_hash);
        kv.set("subspace_hash", &self.subspace_hash);
        kv.set("linf", self.delta.linf_norm());
        kv
    }
}

#[derive(Debug, Clone)]
pub struct CloakRun {
    pub cloak: Cloak,
    /// `||delta||_inf` after every outer update.
    pub outer_linf: Vec<f64>,
    /// `||delta_inner||_inf` after every pre-search update.
    pub inner_linf: Vec<f64>,
    /// Mean objective value per outer iteration.
    pub objective: Vec<f64>,
    /// `delta` after each outer update when `record_iterates` is set.
    pub iterates: Vec<Vec<f64>>,
    /// Aggregated gradient of each outer iteration when `record_iterates` is set.
    pub aggregates: Vec<Vec<f64>>,
}

/// A drawn `(c, t, x_t)` triple.
#[derive(Debug, Clone)]
pub struct LatentDraw {
    pub c: Vec<f64>,
    pub t: usize,
    pub x_t: Vec<f64>,
}

pub(crate) fn draw_latent(
    model: &MlpDenoiser,
    q: &IdentitySubspace,
    cfg: &CloakOptConfig,
    sched: &NoiseSchedule,
    rng: &mut RngState,
) -> LatentDraw {
    let c = sample_condition_raw(q, rng, cfg.truncation);
    let t = rng.int_inclusive(cfg.t_min, cfg.resolved_t_max(sched));
    let x_t = sample_latent_raw(model, &c, t, cfg.sampler_steps, rng, sched);
    LatentDraw { c, t, x_t }
}

/// Objective value and its `x_cloaked` gradient for a drawn latent and cloak.
pub(crate) fn latent_gradient(
    model: &MlpDenoiser,
    draw: &LatentDraw,
    delta: &[f64],
    sched: &NoiseSchedule,
) -> (f64, Vec<f64>) {
    let eps = model.predict(&draw.x_t, draw.t, &draw.c);
    let cloaked = apply_cloak_latent_raw(&draw.x_t, draw.t, &eps, delta, sched);
    cloak_objective_raw(model, &eps, &cloaked, draw.t, &draw.c)
}

/// Sample pool for measuring the objective outside the optimization stream.
pub fn draw_evaluation_pool(
    model: &MlpDenoiser,
    q: &IdentitySubspace,
    cfg: &CloakOptConfig,
    sched: &NoiseSchedule,
    n: usize,
    rng: &mut RngState,
) -> Vec<LatentDraw> {
    (0..n).map(|_| draw_latent(model, q, cfg, sched, rng)).collect()
}

/// Mean objective of `delta` over a fixed pool.
pub fn pool_objective(model: &MlpDenoiser, pool: &[LatentDraw], delta: &[f64], sched: &NoiseSchedule) -> f64 {
    let total: f64 = pool
        .iter()
        .map(|d| {
            let eps = model.predict(&d.x_t, d.t, &d.c);
            let cloaked = apply_cloak_latent_raw(&d.x_t, d.t, &eps, delta, sched);
            let pred = model.predict(&cloaked, d.t, &d.c);
            pred.iter().zip(&eps).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        })
        .sum();
    total / pool.len().max(1) as f64
}

/// Optimizes one universal cloak against `model` over conditions drawn from
/// `q`. The random stream is `RngState::new(cfg.seed)`.
pub fn optimize_cloak(
    model: &MlpDenoiser,
    q: &IdentitySubspace,
    shape: &[usize],
    cfg: &CloakOptConfig,
    sched: &NoiseSchedule,
) -> Result<CloakRun> {
    cfg.validate(sched)?;
    if q.dim() != model.cond_dim() {
        return Err(Error::invalid(format!(
            "subspace dim {} does not match model condition dim {}",
            q.dim(),
            model.cond_dim()
        )));
    }
    let n: usize = shape.iter().product();
    if n != model.data_dim() {
        return Err(Error::invalid("cloak shape does not match model data dim"));
    }
    let mut rng = RngState::new(cfg.seed);
    let mut delta = initial_cloak(cfg, n);
    let mut run = CloakRun {
        cloak: Cloak::zero(shape.to_vec(), cfg.eta),
        outer_linf: Vec::with_capacity(cfg.n_outer),
        inner_linf: Vec::new(),
        objective: Vec::with_capacity(cfg.n_outer),
        iterates: Vec::new(),
        aggregates: Vec::new(),
    };
    for outer in 0..cfg.n_outer {
        let mut inner = delta.clone();
        let mut agg = vec![0.0; n];
        let mut obj = 0.0;
        for _ in 0..cfg.n_inner {
            let mut g_inner = vec![0.0; n];
            for _ in 0..cfg.batch.max(1) {
                let draw = draw_latent(model, q, cfg, sched, &mut rng);
                let (v, g) = latent_gradient(model, &draw, &inner, sched);
                obj += v;
                let factor = if cfg.scale_by_signal {
                    sched.alpha_bar(draw.t).sqrt()
                } else {
                    1.0
                };
                for ((a, gi), gx) in agg.iter_mut().zip(g_inner.iter_mut()).zip(&g) {
                    *a += factor * gx;
                    *gi += gx;
                }
            }
            if cfg.pre_search {
                pgd_step_raw(&mut inner, &g_inner, cfg.alpha, cfg.eta);
                run.inner_linf.push(crate::tensor::linf(&inner));
            }
        }
        pgd_step_raw(&mut delta, &agg, cfg.alpha, cfg.eta);
        if cfg.record_iterates {
            run.aggregates.push(agg);
        }
        let denom = (cfg.n_inner * cfg.batch.max(1)).max(1) as f64;
        if !obj.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite cloak objective at iteration {outer}"
            )));
        }
        run.objective.push(obj / denom);
        run.outer_linf.push(crate::tensor::linf(&delta));
        if cfg.record_iterates {
            run.iterates.push(delta.clone());
        }
    }
    run.cloak = Cloak {
        delta: Tensor::new(shape.to_vec(), delta)?,
        eta: cfg.eta,
        alpha: cfg.alpha,
        iterations: cfg.n_outer,
        n_inner: cfg.n_inner,
        seed: cfg.seed,
        model_hash: model.hash(),
        subspace_hash: q.hash(),
        method: "id_cloak".into(),
    };
    Ok(run)
}

/// `clamp(x + delta, lo, hi)`.
pub fn apply_cloak_image(x: &Tensor, delta: &Tensor, range: (f64, f64)) -> Result<Tensor> {
    x.ensure_same_shape(delta, "apply_cloak_image")?;
    let data = x
        .data()
        .iter()
        .zip(delta.data())
        .map(|(a, d)| (a + d).clamp(range.0, range.1))
        .collect();
    x.with_data(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_cloak_leaves_image() {
        let x = Tensor::vector(vec![0.0, 0.5, 1.0]);
        let out = apply_cloak_image(&x, &Tensor::zeros(vec![3]), (0.0, 1.0)).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn image_clamp_saturates() {
        let x = Tensor::vector(vec![1.0, 0.0]);
        let d = Tensor::vector(vec![0.05, -0.05]);
        let out = apply_cloak_image(&x, &d, (0.0, 1.0)).unwrap();
        assert_eq!(out.data(), &[1.0, 0.0]);
        assert!(apply_cloak_image(&x, &Tensor::zeros(vec![3]), (0.0, 1.0)).is_err());
    }

    #[test]
    fn defaults() {
        let c = CloakOptConfig::default();
        assert_eq!((c.n_outer, c.n_inner, c.sampler_steps), (200, 10, 50));
        assert_eq!(c.alpha, 0.05);
        assert_eq!(c.eta, 16.0 / 255.0);
    }
}
