use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[inline]
pub(crate) fn sign(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// In-place signed ascent step followed by projection onto the l-inf ball.
pub(crate) fn pgd_step_raw(delta: &mut [f64], g: &[f64], alpha: f64, eta: f64) {
    for (d, &gi) in delta.iter_mut().zip(g) {
        *d = (*d + alpha * sign(gi)).clamp(-eta, eta);
    }
}

/// `clip_eta(delta + alpha * sign(g))`, with `sign(0) = 0`.
pub fn pgd_step(delta: &Tensor, g: &Tensor, alpha: f64, eta: f64) -> Result<Tensor> {
    delta.ensure_same_shape(g, "pgd_step")?;
    if !(alpha > 0.0 && eta > 0.0) {
        return Err(Error::invalid("pgd_step needs alpha > 0 and eta > 0"));
    }
    let mut out = delta.data().to_vec();
    pgd_step_raw(&mut out, g.data(), alpha, eta);
    delta.with_data(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_delta() {
        let d = Tensor::vector(vec![0.01, -0.02, 0.0]);
        let out = pgd_step(&d, &Tensor::zeros(vec![3]), 0.05, 16.0 / 255.0).unwrap();
        assert_eq!(out, d);
    }

    #[test]
    fn saturates_at_budget() {
        let d = Tensor::zeros(vec![4]);
        let g = Tensor::vector(vec![1.0, 3.0, 1e-30, 7.0]);
        let out = pgd_step(&d, &g, 0.1, 0.05).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.05));
    }

    #[test]
    fn budget_exact_after_many_steps() {
        let eta = 16.0 / 255.0;
        let mut d = Tensor::zeros(vec![3]);
        let g = Tensor::vector(vec![1.0, -1.0, 1.0]);
        for _ in 0..10 {
            d = pgd_step(&d, &g, 0.05, eta).unwrap();
            assert!(d.linf_norm() <= eta);
        }
        assert_eq!(d.data(), &[eta, -eta, eta]);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let d = Tensor::zeros(vec![1]);
        assert!(pgd_step(&d, &d, 0.0, 0.1).is_err());
        assert!(pgd_step(&d, &d, 0.1, -1.0).is_err());
    }
}
