//! Dense-layer kernels, activations and the Adam optimizer shared by the
//! denoiser, the text-encoder stub and the identity embedder.

/// `out += W x` for row-major `W` of shape `rows x cols`.
#[inline]
pub(crate) fn matvec_acc(out: &mut [f64], w: &[f64], rows: usize, cols: usize, x: &[f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    for (r, o) in out.iter_mut().enumerate().take(rows) {
        let row = &w[r * cols..(r + 1) * cols];
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += W^T g`.
#[inline]
pub(crate) fn matvec_t_acc(out: &mut [f64], w: &[f64], rows: usize, cols: usize, g: &[f64]) {
    for r in 0..rows {
        let gr = g[r];
        if gr == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * gr;
        }
    }
}

/// `gw += g x^T`.
#[inline]
pub(crate) fn outer_acc(gw: &mut [f64], rows: usize, cols: usize, g: &[f64], x: &[f64]) {
    for r in 0..rows {
        let gr = g[r];
        if gr == 0.0 {
            continue;
        }
        let row = &mut gw[r * cols..(r + 1) * cols];
        for (o, b) in row.iter_mut().zip(x) {
            *o += gr * b;
        }
    }
}

#[inline]
pub(crate) fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

#[inline]
pub(crate) fn silu_grad(z: f64) -> f64 {
    let s = 1.0 / (1.0 + (-z).exp());
    s * (1.0 + z * (1.0 - s))
}

/// Sinusoidal features of a (possibly fractional) timestep.
pub(crate) fn timestep_features(t: f64, dim: usize, max_period: f64) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(max_period.ln()) * i as f64 / half as f64).exp();
        out[i] = (t * freq).sin();
        out[half + i] = (t * freq).cos();
    }
    out
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silu_grad_matches_difference() {
        for &z in &[-3.0, -0.4, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (silu(z + h) - silu(z - h)) / (2.0 * h);
            assert!((fd - silu_grad(z)).abs() < 1e-8);
        }
    }

    #[test]
    fn kernels_agree_with_naive() {
        let w = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut y = vec![0.0; 2];
        matvec_acc(&mut y, &w, 2, 3, &[1.0, 0.0, -1.0]);
        assert_eq!(y, vec![-2.0, -2.0]);
        let mut xt = vec![0.0; 3];
        matvec_t_acc(&mut xt, &w, 2, 3, &[1.0, 1.0]);
        assert_eq!(xt, vec![5.0, 7.0, 9.0]);
        let mut gw = vec![0.0; 6];
        outer_acc(&mut gw, 2, 3, &[1.0, 2.0], &[1.0, 0.0, 3.0]);
        assert_eq!(gw, vec![1.0, 0.0, 3.0, 2.0, 0.0, 6.0]);
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..500 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            opt.step(&mut p, &g);
        }
        assert!(p.iter().all(|x| x.abs() < 1e-2), "{p:?}");
    }
}
