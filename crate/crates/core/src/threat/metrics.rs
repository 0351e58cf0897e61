//! Proxy protection metrics over generated images.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::embedder::IdentityEmbedder;
use crate::error::{Error, Result};
use crate::kv::KvRecord;
use crate::tensor::Tensor;

/// Proxy metrics for one batch of generations. Lower `ism_proxy`, higher
/// `fdfr_proxy` and higher `quality_proxy` mean stronger protection.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Mean over generations of the best cosine to any reference embedding.
    pub ism_proxy: f64,
    /// Fraction of generations whose top classifier confidence is below threshold.
    pub fdfr_proxy: f64,
    /// Frechet distance between Gaussian fits of generated and reference embeddings.
    pub quality_proxy: f64,
    pub n: usize,
    pub threshold: f64,
}

impl MetricsReport {
    /// Element-wise mean; `n` is summed.
    pub fn mean_of(reports: &[MetricsReport]) -> Result<MetricsReport> {
        if reports.is_empty() {
            return Err(Error::invalid("no reports to average"));
        }
        let k = reports.len() as f64;
        Ok(MetricsReport {
            ism_proxy: reports.iter().map(|r| r.ism_proxy).sum::<f64>() / k,
            fdfr_proxy: reports.iter().map(|r| r.fdfr_proxy).sum::<f64>() / k,
            quality_proxy: reports.iter().map(|r| r.quality_proxy).sum::<f64>() / k,
            n: reports.iter().map(|r| r.n).sum(),
            threshold: reports[0].threshold,
        })
    }

    pub fn to_kv(&self) -> KvRecord {
        let mut kv = KvRecord::new();
        kv.set("ism_proxy", self.ism_proxy);
        kv.set("fdfr_proxy", self.fdfr_proxy);
        kv.set("quality_proxy", self.quality_proxy);
        kv.set("n", self.n);
        kv.set("threshold", self.threshold);
        kv
    }
}

fn gaussian_fit(feats: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = feats[0].len();
    let n = feats.len();
    let mut mu = DVector::zeros(d);
    for f in feats {
        mu += DVector::from_column_slice(f);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    if n > 1 {
        for f in feats {
            let c = DVector::from_column_slice(f) - &mu;
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
    }
    (mu, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)`, clamped at 0.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("frechet distance needs nonempty feature sets"));
    }
    if a.iter().chain(b).any(|f| f.len() != a[0].len()) {
        return Err(Error::invalid("feature dims differ"));
    }
    let (ma, sa) = gaussian_fit(a);
    let (mb, sb) = gaussian_fit(b);
    let ra = psd_sqrt(&sa);
    let cross = psd_sqrt(&(&ra * &sb * &ra));
    let d = (&ma - &mb).norm_squared() + sa.trace() + sb.trace() - 2.0 * cross.trace();
    Ok(d.max(0.0))
}

pub fn evaluate_protection(
    generated: &[Tensor],
    reference: &[Tensor],
    embedder: &IdentityEmbedder,
    threshold: f64,
) -> Result<MetricsReport> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::invalid("evaluation needs generated and reference images"));
    }
    let gen_e = generated
        .iter()
        .map(|x| embedder.embed(x))
        .collect::<Result<Vec<_>>>()?;
    let ref_e = reference
        .iter()
        .map(|x| embedder.embed(x))
        .collect::<Result<Vec<_>>>()?;
    let ism = gen_e
        .iter()
        .map(|g| {
            ref_e
                .iter()
                .map(|r| g.iter().zip(r).map(|(a, b)| a * b).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum::<f64>()
        / gen_e.len() as f64;
    let mut failed = 0usize;
    for x in generated {
        if embedder.confidence(x)? < threshold {
            failed += 1;
        }
    }
    Ok(MetricsReport {
        ism_proxy: ism,
        fdfr_proxy: failed as f64 / generated.len() as f64,
        quality_proxy: frechet_distance(&gen_e, &ref_e)?,
        n: generated.len(),
        threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    #[test]
    fn frechet_of_1d_gaussians_is_closed_form() {
        // 1-D: (m_a - m_b)^2 + (s_a - s_b)^2
        let a: Vec<Vec<f64>> = vec![vec![0.0], vec![2.0]];
        let b: Vec<Vec<f64>> = vec![vec![5.0], vec![9.0]];
        let (va, vb) = (2.0f64, 8.0f64);
        let want = (1.0f64 - 7.0).powi(2) + (va.sqrt() - vb.sqrt()).powi(2);
        assert!((frechet_distance(&a, &b).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn frechet_self_is_zero() {
        let mut r = RngState::new(2);
        let a: Vec<Vec<f64>> = (0..40).map(|_| r.gaussian_vec(8)).collect();
        assert!(frechet_distance(&a, &a).unwrap() < 1e-8);
    }
}
