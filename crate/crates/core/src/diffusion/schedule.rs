use std::f64::consts::FRAC_PI_2;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::config(format!("unknown schedule kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::Cosine => "cosine",
        })
    }
}

/// Cumulative signal coefficients `alpha_bar[0..=T]` with `alpha_bar[0] = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alpha_bar: Vec<f64>,
}

pub(crate) const LINEAR_BETA_START: f64 = 1e-4;
pub(crate) const LINEAR_BETA_END: f64 = 0.02;
pub(crate) const COSINE_OFFSET: f64 = 0.008;
pub(crate) const MAX_BETA: f64 = 0.999;

impl NoiseSchedule {
    /// Builds a schedule with `t_max` steps.
    ///
    /// The linear kind spaces betas evenly between `1e-4` and `0.02`, rescaled
    /// by `1000 / T` so short schedules still reach a noise-dominated end
    /// point. The cosine kind follows the squared-cosine signal curve with
    /// betas capped at 0.999.
    pub fn new(t_max: usize, kind: ScheduleKind) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::invalid("schedule needs T >= 1"));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => {
                let scale = 1000.0 / t_max as f64;
                let lo = (LINEAR_BETA_START * scale).min(MAX_BETA);
                let hi = (LINEAR_BETA_END * scale).min(MAX_BETA);
                if t_max == 1 {
                    vec![lo]
                } else {
                    (0..t_max)
                        .map(|i| lo + (hi - lo) * i as f64 / (t_max - 1) as f64)
                        .collect()
                }
            }
            ScheduleKind::Cosine => {
                let f = |t: usize| {
                    let u = (t as f64 / t_max as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                    (u * FRAC_PI_2).cos().powi(2)
                };
                (1..=t_max).map(|t| (1.0 - f(t) / f(t - 1)).min(MAX_BETA)).collect()
            }
        };
        let mut alpha_bar = Vec::with_capacity(t_max + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for b in betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        let sched = Self { kind, alpha_bar };
        sched.validate()?;
        Ok(sched)
    }

    fn validate(&self) -> Result<()> {
        let ab = &self.alpha_bar;
        if ab[0] != 1.0 || *ab.last().unwrap() <= 0.0 {
            return Err(Error::Numeric("schedule end points out of range".into()));
        }
        if ab.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Numeric("alpha_bar is not strictly decreasing".into()));
        }
        Ok(())
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps `T`.
    pub fn t_max(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub(crate) fn check_t(&self, t: usize, what: &str) -> Result<()> {
        if t > self.t_max() {
            return Err(Error::invalid(format!(
                "{what}: timestep {t} outside 0..={}",
                self.t_max()
            )));
        }
        Ok(())
    }
}

/// Convenience constructor mirroring the operation name used in docs.
pub fn make_schedule(t_max: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    NoiseSchedule::new(t_max, kind)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_1000_is_monotone() {
        let s = make_schedule(1000, ScheduleKind::Linear).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar(1000) > 0.0 && s.alpha_bar(1000) < 1e-3);
        assert!(s.alpha_bars().iter().all(|&a| a > 0.0 && a <= 1.0));
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, ScheduleKind::Linear).unwrap();
        let beta1 = LINEAR_BETA_START * 1000.0;
        assert_eq!(s.alpha_bars(), &[1.0, 1.0 - beta1]);
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(matches!(
            make_schedule(0, ScheduleKind::Cosine),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn cosine_matches_scalar_recomputation() {
        let s = make_schedule(50, ScheduleKind::Cosine).unwrap();
        // Independent recomputation: alpha_bar(t) = f(t)/f(0) as long as no beta hits the cap.
        let f = |t: f64| {
            (((t / 50.0 + 0.008) / 1.008) * std::f64::consts::PI / 2.0)
                .cos()
                .powi(2)
        };
        let expected = f(25.0) / f(0.0);
        assert!(
            (s.alpha_bar(25) - expected).abs() < 1e-12,
            "{} vs {expected}",
            s.alpha_bar(25)
        );
        assert!(s.alpha_bar(50) > 0.0);
    }
}
