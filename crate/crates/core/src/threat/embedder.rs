//! Identity embedder: a small MLP mapping images to unit-norm embeddings,
//! trained with a cosine-softmax classifier over a labelled corpus. The
//! classifier confidence doubles as the detection-failure signal.

use crate::error::{Error, Result};
use crate::kv::KvRecord;
use crate::nn::{matvec_acc, matvec_t_acc, outer_acc, silu, silu_grad, Adam};
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderConfig {
    pub hidden: usize,
    pub dim: usize,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// Logit scale applied to the cosine similarities.
    pub scale: f64,
    /// Additive cosine margin subtracted from the target logit in training.
    pub margin: f64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            dim: 32,
            steps: 1500,
            lr: 1e-3,
            batch: 32,
            scale: 10.0,
            margin: 0.35,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IdentityEmbedder {
    in_dim: usize,
    hidden: usize,
    dim: usize,
    classes: usize,
    scale: f64,
    margin: f64,
    /// Class reserved for non-face inputs; excluded from the confidence.
    reject: Option<usize>,
    /// Mean raw embedding over the training corpus, removed before
    /// normalizing identity vectors.
    center: Vec<f64>,
    /// Unit direction from the centre to the non-face class mean, projected
    /// out of identity vectors. Empty without a reject class.
    reject_axis: Vec<f64>,
    /// Typical identity-feature norm; sets the weight of the trailing
    /// non-face coordinate. Zero without a reject class.
    face_scale: f64,
    /// Layout: w1 (hidden x in), b1, w2 (dim x hidden), b2, prototypes (classes x dim).
    params: Vec<f64>,
}

struct Offsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    protos: usize,
    end: usize,
}

struct Forward {
    z1: Vec<f64>,
    a1: Vec<f64>,
    e: Vec<f64>,
    norm: f64,
}

fn unit(v: &[f64]) -> (Vec<f64>, f64) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    (v.iter().map(|x| x / n).collect(), n)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = ex.iter().sum();
    ex.into_iter().map(|e| e / s).collect()
}

impl IdentityEmbedder {
    fn offsets(&self) -> Offsets {
        let w1 = 0;
        let b1 = w1 + self.hidden * self.in_dim;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.dim * self.hidden;
        let protos = b2 + self.dim;
        Offsets {
            w1,
            b1,
            w2,
            b2,
            protos,
            end: protos + self.classes * self.dim,
        }
    }

    fn init(in_dim: usize, classes: usize, cfg: &EmbedderConfig, rng: &mut RngState) -> Self {
        let mut me = Self {
            in_dim,
            hidden: cfg.hidden,
            dim: cfg.dim,
            classes,
            scale: cfg.scale,
            margin: cfg.margin,
            reject: None,
            center: vec![0.0; cfg.dim],
            reject_axis: Vec::new(),
            face_scale: 0.0,
            params: Vec::new(),
        };
        let o = me.offsets();
        let mut p = vec![0.0; o.end];
        let s1 = (1.0 / in_dim as f64).sqrt();
        let s2 = (1.0 / cfg.hidden as f64).sqrt();
        p[o.w1..o.b1].iter_mut().for_each(|v| *v = s1 * rng.gaussian());
        p[o.w2..o.b2].iter_mut().for_each(|v| *v = s2 * rng.gaussian());
        p[o.protos..o.end].iter_mut().for_each(|v| *v = rng.gaussian());
        me.params = p;
        me
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn forward(&self, x: &[f64]) -> Forward {
        let o = self.offsets();
        let p = &self.params;
        let mut z1 = p[o.b1..o.w2].to_vec();
        matvec_acc(&mut z1, &p[o.w1..o.b1], self.hidden, self.in_dim, x);
        let a1: Vec<f64> = z1.iter().map(|&z| silu(z)).collect();
        let mut e = p[o.b2..o.protos].to_vec();
        matvec_acc(&mut e, &p[o.w2..o.b2], self.dim, self.hidden, &a1);
        let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        Forward { z1, a1, e, norm }
    }

    /// Centred feature with the non-face direction removed.
    fn identity_feature(&self, x: &[f64]) -> Vec<f64> {
        let f = self.forward(x);
        let mut centred: Vec<f64> = f.e.iter().zip(&self.center).map(|(a, c)| a - c).collect();
        if !self.reject_axis.is_empty() {
            let k = dot(&centred, &self.reject_axis);
            centred.iter_mut().zip(&self.reject_axis).for_each(|(c, r)| *c -= k * r);
        }
        centred
    }

    /// Unit-norm identity embedding. With a reject class, a trailing
    /// coordinate carries the non-face odds, so inputs the classifier rejects
    /// point away from every confident face.
    pub fn embed(&self, x: &Tensor) -> Result<Vec<f64>> {
        if x.len() != self.in_dim {
            return Err(Error::invalid("image size does not match embedder"));
        }
        let mut v = self.identity_feature(x.data());
        if let Some(r) = self
            .reject
            .filter(|&r| r < self.classes && !self.reject_axis.is_empty())
        {
            let p = softmax(&self.logits(&self.head_unit(x)?));
            v.push(self.face_scale * p[r] / (1.0 - p[r]).max(1e-9));
        }
        Ok(unit(&v).0)
    }

    fn head_unit(&self, x: &Tensor) -> Result<Vec<f64>> {
        if x.len() != self.in_dim {
            return Err(Error::invalid("image size does not match embedder"));
        }
        let f = self.forward(x.data());
        Ok(f.e.iter().map(|v| v / f.norm).collect())
    }

    fn logits(&self, u: &[f64]) -> Vec<f64> {
        let o = self.offsets();
        (0..self.classes)
            .map(|k| {
                let (pk, _) = unit(&self.params[o.protos + k * self.dim..o.protos + (k + 1) * self.dim]);
                self.scale * dot(u, &pk)
            })
            .collect()
    }

    /// Scalar hyperparameters and shapes, for sidecar files.
    pub fn metadata(&self) -> KvRecord {
        let mut kv = KvRecord::new();
        kv.set("in_dim", self.in_dim);
        kv.set("hidden", self.hidden);
        kv.set("dim", self.dim);
        kv.set("classes", self.classes);
        kv.set("scale", self.scale);
        kv.set("margin", self.margin);
        kv.set("reject", self.reject.map(|r| r.to_string()).unwrap_or_default());
        kv.set("hash", self.hash());
        kv
    }

    /// Parameters, centre, then reject axis and face scale when present.
    pub fn state(&self) -> Vec<f64> {
        let mut v = self.params.clone();
        v.extend_from_slice(&self.center);
        if !self.reject_axis.is_empty() {
            v.extend_from_slice(&self.reject_axis);
            v.push(self.face_scale);
        }
        v
    }

    pub fn hash(&self) -> String {
        crate::hash_f64s(&[&self.params, &self.center, &self.reject_axis, &[self.face_scale]])
    }

    /// Inverse of [`metadata`](Self::metadata) plus [`state`](Self::state).
    pub fn from_state(meta: &KvRecord, state: &[f64]) -> Result<Self> {
        let reject = match meta.get("reject").unwrap_or("") {
            "" => None,
            r => Some(r.parse().map_err(|_| Error::data(format!("bad reject class `{r}`")))?),
        };
        let mut m = IdentityEmbedder {
            in_dim: meta.require("in_dim")?,
            hidden: meta.require("hidden")?,
            dim: meta.require("dim")?,
            classes: meta.require("classes")?,
            scale: meta.require("scale")?,
            margin: meta.require("margin")?,
            reject,
            center: Vec::new(),
            reject_axis: Vec::new(),
            face_scale: 0.0,
            params: Vec::new(),
        };
        let np = m.offsets().end;
        let base = np + m.dim;
        if state.len() != base && state.len() != base + m.dim + 1 {
            return Err(Error::data(format!(
                "embedder state has {} values, expected {base} or {}",
                state.len(),
                base + m.dim + 1
            )));
        }
        m.params = state[..np].to_vec();
        m.center = state[np..base].to_vec();
        if state.len() > base {
            m.reject_axis = state[base..base + m.dim].to_vec();
            m.face_scale = state[base + m.dim];
        }
        Ok(m)
    }

    pub fn reject_class(&self) -> Option<usize> {
        self.reject
    }

    /// Face-detection confidence: the probability mass outside the non-face
    /// class, or the top class probability when there is no such class.
    pub fn confidence(&self, x: &Tensor) -> Result<f64> {
        let u = self.head_unit(x)?;
        let p = softmax(&self.logits(&u));
        Ok(match self.reject {
            Some(r) if r < p.len() => 1.0 - p[r],
            _ => p.into_iter().fold(0.0, f64::max),
        })
    }

    pub fn classify(&self, x: &Tensor) -> Result<usize> {
        let u = self.head_unit(x)?;
        let l = self.logits(&u);
        Ok((0..l.len()).max_by(|&a, &b| l[a].total_cmp(&l[b])).unwrap_or(0))
    }

    /// Cross-entropy loss for one sample, accumulating parameter gradients.
    fn loss_acc(&self, x: &[f64], label: usize, grad: &mut [f64]) -> f64 {
        let o = self.offsets();
        let f = self.forward(x);
        let u: Vec<f64> = f.e.iter().map(|v| v / f.norm).collect();
        let protos: Vec<(Vec<f64>, f64)> = (0..self.classes)
            .map(|k| unit(&self.params[o.protos + k * self.dim..o.protos + (k + 1) * self.dim]))
            .collect();
        let mut logits: Vec<f64> = protos.iter().map(|(p, _)| self.scale * dot(&u, p)).collect();
        logits[label] -= self.scale * self.margin;
        let prob = softmax(&logits);
        let loss = -prob[label].max(1e-300).ln();
        let mut du = vec![0.0; self.dim];
        for (k, (pk, pn)) in protos.iter().enumerate() {
            let dl = prob[k] - if k == label { 1.0 } else { 0.0 };
            for (d, p) in du.iter_mut().zip(pk) {
                *d += self.scale * dl * p;
            }
            // through the prototype normalization
            let dp: Vec<f64> = u.iter().map(|ui| self.scale * dl * ui).collect();
            let proj = dot(pk, &dp);
            let g = &mut grad[o.protos + k * self.dim..o.protos + (k + 1) * self.dim];
            for ((gi, dpi), pki) in g.iter_mut().zip(&dp).zip(pk) {
                *gi += (dpi - pki * proj) / pn;
            }
        }
        let proj = dot(&u, &du);
        let de: Vec<f64> = du.iter().zip(&u).map(|(d, ui)| (d - ui * proj) / f.norm).collect();
        for (g, d) in grad[o.b2..o.protos].iter_mut().zip(&de) {
            *g += d;
        }
        outer_acc(&mut grad[o.w2..o.b2], self.dim, self.hidden, &de, &f.a1);
        let mut da1 = vec![0.0; self.hidden];
        matvec_t_acc(&mut da1, &self.params[o.w2..o.b2], self.dim, self.hidden, &de);
        let dz1: Vec<f64> = da1.iter().zip(&f.z1).map(|(d, &z)| d * silu_grad(z)).collect();
        for (g, d) in grad[o.b1..o.w2].iter_mut().zip(&dz1) {
            *g += d;
        }
        outer_acc(&mut grad[o.w1..o.b1], self.hidden, self.in_dim, &dz1, x);
        loss
    }

    /// Mean cross-entropy over a labelled set.
    pub fn loss(&self, samples: &[(Tensor, usize)]) -> f64 {
        let mut scratch = vec![0.0; self.params.len()];
        samples
            .iter()
            .map(|(x, y)| self.loss_acc(x.data(), *y, &mut scratch))
            .sum::<f64>()
            / samples.len().max(1) as f64
    }
}

/// Trains an embedder on `(image, class)` pairs with labels in `0..classes`.
/// `reject` names an optional non-face class.
pub fn train_identity_embedder(
    samples: &[(Tensor, usize)],
    reject: Option<usize>,
    cfg: &EmbedderConfig,
    rng: &mut RngState,
) -> Result<IdentityEmbedder> {
    let classes = samples.iter().map(|(_, y)| y + 1).max().unwrap_or(0);
    let identities = classes - usize::from(reject.is_some_and(|r| r < classes));
    if identities < 2 {
        return Err(Error::invalid("embedder training needs at least two identities"));
    }
    let in_dim = samples[0].0.len();
    if samples.iter().any(|(x, _)| x.len() != in_dim) {
        return Err(Error::invalid("embedder samples differ in size"));
    }
    if cfg.hidden == 0 || cfg.dim == 0 {
        return Err(Error::invalid("embedder widths must be positive"));
    }
    let mut model = IdentityEmbedder::init(in_dim, classes, cfg, rng);
    model.reject = reject;
    let mut opt = Adam::new(model.params.len(), cfg.lr);
    let batch = cfg.batch.max(1);
    let mut grad = vec![0.0; model.params.len()];
    for _ in 0..cfg.steps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut total = 0.0;
        for _ in 0..batch {
            let (x, y) = &samples[rng.index(samples.len())];
            total += model.loss_acc(x.data(), *y, &mut grad);
        }
        if !total.is_finite() {
            return Err(Error::Numeric("embedder loss diverged".into()));
        }
        let inv = 1.0 / batch as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        let mut p = std::mem::take(&mut model.params);
        opt.step(&mut p, &grad);
        model.params = p;
    }
    // class-balanced mean: average of per-class mean features
    let mut sums = vec![vec![0.0; model.dim]; classes];
    let mut counts = vec![0usize; classes];
    for (x, y) in samples {
        for (c, v) in sums[*y].iter_mut().zip(model.forward(x.data()).e) {
            *c += v;
        }
        counts[*y] += 1;
    }
    let present = counts.iter().filter(|&&n| n > 0).count().max(1) as f64;
    let mut center = vec![0.0; model.dim];
    for (sum, &n) in sums.iter().zip(&counts) {
        if n > 0 {
            for (c, v) in center.iter_mut().zip(sum) {
                *c += v / n as f64 / present;
            }
        }
    }
    if let Some(r) = reject.filter(|&r| counts.get(r).is_some_and(|&n| n > 0)) {
        let axis: Vec<f64> = sums[r]
            .iter()
            .zip(&center)
            .map(|(s, c)| s / counts[r] as f64 - c)
            .collect();
        model.reject_axis = unit(&axis).0;
        model.center = center;
        let norms: Vec<f64> = samples
            .iter()
            .filter(|(_, y)| *y != r)
            .map(|(x, _)| unit(&model.identity_feature(x.data())).1)
            .collect();
        model.face_scale = norms.iter().sum::<f64>() / norms.len().max(1) as f64;
    } else {
        model.center = center;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_samples(rng: &mut RngState) -> Vec<(Tensor, usize)> {
        let centers = [
            vec![1.0, 0.0, 0.0, 0.5],
            vec![0.0, 1.0, 0.5, 0.0],
            vec![0.0, 0.0, 1.0, 1.0],
        ];
        (0..60)
            .map(|i| {
                let k = i % 3;
                let x: Vec<f64> = centers[k].iter().map(|c| c + 0.05 * rng.gaussian()).collect();
                (Tensor::vector(x), k)
            })
            .collect()
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let mut rng = RngState::new(4);
        let samples = toy_samples(&mut rng);
        let cfg = EmbedderConfig {
            hidden: 6,
            dim: 3,
            ..Default::default()
        };
        let mut m = IdentityEmbedder::init(4, 3, &cfg, &mut rng);
        let (x, y) = &samples[1];
        let mut g = vec![0.0; m.params.len()];
        m.loss_acc(x.data(), *y, &mut g);
        let h = 1e-6;
        let mut scratch = vec![0.0; m.params.len()];
        for i in (0..m.params.len()).step_by(3) {
            let orig = m.params[i];
            m.params[i] = orig + h;
            let lp = m.loss_acc(x.data(), *y, &mut scratch);
            m.params[i] = orig - h;
            let lm = m.loss_acc(x.data(), *y, &mut scratch);
            m.params[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (fd - g[i]).abs() <= 1e-6 + 1e-5 * fd.abs(),
                "param {i}: {fd} vs {}",
                g[i]
            );
        }
    }

    #[test]
    fn separates_clusters_and_embeds_unit_norm() {
        let mut rng = RngState::new(9);
        let samples = toy_samples(&mut rng);
        let cfg = EmbedderConfig {
            hidden: 16,
            dim: 4,
            steps: 300,
            batch: 8,
            ..Default::default()
        };
        let m = train_identity_embedder(&samples, None, &cfg, &mut rng).unwrap();
        let acc = samples.iter().filter(|(x, y)| m.classify(x).unwrap() == *y).count();
        assert_eq!(acc, samples.len());
        let e = m.embed(&samples[0].0).unwrap();
        assert!((dot(&e, &e) - 1.0).abs() < 1e-12);
        assert!(m.confidence(&samples[0].0).unwrap() > 0.5);
    }

    #[test]
    fn rejects_single_identity() {
        let mut rng = RngState::new(1);
        let s = vec![(Tensor::vector(vec![0.0; 3]), 0)];
        assert!(train_identity_embedder(&s, None, &EmbedderConfig::default(), &mut rng).is_err());
    }
}
