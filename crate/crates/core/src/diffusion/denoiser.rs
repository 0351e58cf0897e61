//! Conditional noise predictors.
//!
//! [`Denoiser`] is the differentiation contract the rest of the crate relies
//! on: a forward map `(x_t, t, c) -> eps` plus a vector-Jacobian product that
//! yields gradients with respect to the parameters, the noisy input and the
//! condition. [`MlpDenoiser`] is the trainable implementation.

use crate::error::{Error, Result};
use crate::kv::KvRecord;
use crate::nn::{matvec_acc, matvec_t_acc, outer_acc, silu, silu_grad, timestep_features};
use crate::rng::RngState;
use crate::tns::SliceEntry;

/// Which gradients a pullback should produce.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GradRequest {
    pub params: bool,
    pub input: bool,
    pub cond: bool,
}

impl GradRequest {
    pub const PARAMS: Self = Self {
        params: true,
        input: false,
        cond: false,
    };
    pub const INPUT: Self = Self {
        params: false,
        input: true,
        cond: false,
    };
    pub const COND: Self = Self {
        params: false,
        input: false,
        cond: true,
    };
    pub const ALL: Self = Self {
        params: true,
        input: true,
        cond: true,
    };
}

/// Gradient accumulators. Vectors not requested stay empty.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Vec<f64>,
    pub cond: Vec<f64>,
}

impl Gradients {
    pub fn zeros<D: Denoiser + ?Sized>(model: &D, req: GradRequest) -> Self {
        let sized = |on: bool, n: usize| if on { vec![0.0; n] } else { Vec::new() };
        Self {
            params: sized(req.params, model.num_params()),
            input: sized(req.input, model.data_dim()),
            cond: sized(req.cond, model.cond_dim()),
        }
    }

    pub fn request(&self) -> GradRequest {
        GradRequest {
            params: !self.params.is_empty(),
            input: !self.input.is_empty(),
            cond: !self.cond.is_empty(),
        }
    }
}

pub trait Denoiser {
    type Tape;

    fn data_dim(&self) -> usize;
    fn cond_dim(&self) -> usize;
    fn num_params(&self) -> usize;

    fn predict(&self, x_t: &[f64], t: usize, c: &[f64]) -> Vec<f64> {
        self.predict_taped(x_t, t, c).0
    }

    fn predict_taped(&self, x_t: &[f64], t: usize, c: &[f64]) -> (Vec<f64>, Self::Tape);

    /// Adds `J^T d_out` into every non-empty accumulator of `acc`.
    fn pullback_into(&self, tape: &Self::Tape, d_out: &[f64], acc: &mut Gradients);
}

#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub data_dim: usize,
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub cond_dim: usize,
    /// Diffusion length the timestep features are normalized against.
    pub t_max: usize,
}

impl Architecture {
    pub fn to_kv(&self) -> KvRecord {
        let mut kv = KvRecord::new();
        kv.set("data_dim", self.data_dim);
        kv.set(
            "hidden",
            self.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(","),
        );
        kv.set("time_dim", self.time_dim);
        kv.set("cond_dim", self.cond_dim);
        kv.set("t_max", self.t_max);
        kv
    }

    pub fn from_kv(kv: &KvRecord) -> Result<Self> {
        let hidden = parse_widths(&kv.require::<String>("hidden")?)?;
        Ok(Self {
            data_dim: kv.require("data_dim")?,
            hidden,
            time_dim: kv.require("time_dim")?,
            cond_dim: kv.require("cond_dim")?,
            t_max: kv.require("t_max")?,
        })
    }
}

pub fn parse_widths(s: &str) -> Result<Vec<usize>> {
    let widths: Vec<usize> = s
        .split(',')
        .map(|w| {
            w.trim()
                .parse()
                .map_err(|_| Error::config(format!("bad layer width `{w}`")))
        })
        .collect::<Result<_>>()?;
    if widths.is_empty() || widths.contains(&0) {
        return Err(Error::config("layer widths must be positive"));
    }
    Ok(widths)
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    w: usize,
    time: usize,
    cond: usize,
    bias: usize,
    inputs: usize,
    width: usize,
}

/// Fully connected noise predictor with sinusoidal timestep features and
/// additive condition injection at every hidden layer:
///
/// `h_k = silu(W_k h_{k-1} + U_k tau(t) + V_k c + b_k)`,
/// `eps = g(t) x_t + W_o h_L + b_o` with the scalar gate `g(t) = w_g . tau(t) + b_g`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpDenoiser {
    arch: Architecture,
    params: Vec<f64>,
    slices: Vec<SliceEntry>,
}

pub struct MlpTape {
    x: Vec<f64>,
    tfeat: Vec<f64>,
    cond: Vec<f64>,
    pre: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
}

impl MlpDenoiser {
    pub fn new(arch: Architecture, rng: &mut RngState) -> Result<Self> {
        let slices = Self::layout(&arch)?;
        let total = slices.iter().map(|s| s.offset + s.length).max().unwrap_or(0) as usize;
        let mut params = vec![0.0; total];
        for s in &slices {
            if s.name == "skip.bias" {
                params[s.offset as usize] = 1.0;
                continue;
            }
            if s.name.starts_with("skip.") {
                continue;
            }
            let fan_in = match s.name.rsplit('.').next() {
                Some("weight") | Some("time") | Some("cond") => {
                    let rows = Self::rows_of(&arch, &s.name);
                    (s.length as usize / rows).max(1)
                }
                _ => continue,
            };
            let mut scale = (1.0 / fan_in as f64).sqrt();
            if s.name == "out.weight" {
                scale *= 0.5;
            }
            for p in &mut params[s.offset as usize..(s.offset + s.length) as usize] {
                *p = rng.gaussian() * scale;
            }
        }
        Ok(Self { arch, params, slices })
    }

    fn rows_of(arch: &Architecture, name: &str) -> usize {
        if name.starts_with("out.") {
            arch.data_dim
        } else if name.starts_with("skip.") {
            1
        } else {
            let k: usize = name[5..name.find('.').unwrap()].parse().unwrap();
            arch.hidden[k]
        }
    }

    fn layout(arch: &Architecture) -> Result<Vec<SliceEntry>> {
        if arch.data_dim == 0 || arch.cond_dim == 0 || arch.hidden.is_empty() {
            return Err(Error::invalid("architecture dims must be positive"));
        }
        if arch.time_dim % 2 != 0 || arch.time_dim == 0 {
            return Err(Error::invalid("time_dim must be a positive even number"));
        }
        let mut slices = Vec::new();
        let mut offset = 0u64;
        let mut push = |name: String, len: usize| {
            slices.push(SliceEntry {
                name,
                offset,
                length: len as u64,
            });
            offset += len as u64;
        };
        let mut inputs = arch.data_dim;
        for (k, &w) in arch.hidden.iter().enumerate() {
            push(format!("layer{k}.weight"), w * inputs);
            push(format!("layer{k}.time"), w * arch.time_dim);
            push(format!("layer{k}.cond"), w * arch.cond_dim);
            push(format!("layer{k}.bias"), w);
            inputs = w;
        }
        push("out.weight".into(), arch.data_dim * inputs);
        push("out.bias".into(), arch.data_dim);
        push("skip.time".into(), arch.time_dim);
        push("skip.bias".into(), 1);
        Ok(slices)
    }

    pub fn from_parts(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        let slices = Self::layout(&arch)?;
        let total = slices.last().map(|s| s.offset + s.length).unwrap_or(0) as usize;
        if params.len() != total {
            return Err(Error::data(format!(
                "checkpoint has {} parameters, architecture needs {total}",
                params.len()
            )));
        }
        Ok(Self { arch, params, slices })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn slices(&self) -> &[SliceEntry] {
        &self.slices
    }

    pub fn slice(&self, name: &str) -> Option<&SliceEntry> {
        self.slices.iter().find(|s| s.name == name)
    }

    /// `(rows, cols)` of a weight-like slice.
    pub fn slice_matrix_shape(&self, name: &str) -> Option<(usize, usize)> {
        let s = self.slice(name)?;
        let rows = Self::rows_of(&self.arch, name);
        Some((rows, s.length as usize / rows))
    }

    fn layers(&self) -> Vec<Layer> {
        let mut out = Vec::with_capacity(self.arch.hidden.len());
        let mut inputs = self.arch.data_dim;
        for (k, &width) in self.arch.hidden.iter().enumerate() {
            let base = 4 * k;
            out.push(Layer {
                w: self.slices[base].offset as usize,
                time: self.slices[base + 1].offset as usize,
                cond: self.slices[base + 2].offset as usize,
                bias: self.slices[base + 3].offset as usize,
                inputs,
                width,
            });
            inputs = width;
        }
        out
    }

    /// `(out.weight, out.bias, skip.time)`; `skip.bias` follows `skip.time`.
    fn head(&self) -> (&SliceEntry, &SliceEntry, &SliceEntry) {
        let n = 4 * self.arch.hidden.len();
        (&self.slices[n], &self.slices[n + 1], &self.slices[n + 2])
    }

    fn gate(&self, tfeat: &[f64]) -> f64 {
        let o = self.head().2.offset as usize;
        let td = self.arch.time_dim;
        let w = &self.params[o..o + td];
        w.iter().zip(tfeat).map(|(a, b)| a * b).sum::<f64>() + self.params[o + td]
    }

    fn tfeat(&self, t: usize) -> Vec<f64> {
        let scaled = t as f64 * 1000.0 / self.arch.t_max as f64;
        timestep_features(scaled, self.arch.time_dim, 10_000.0)
    }

    pub fn hash(&self) -> String {
        let mut bytes = Vec::with_capacity(self.params.len() * 8 + 64);
        bytes.extend_from_slice(self.arch.to_kv().render().as_bytes());
        for p in &self.params {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        crate::hash_hex(&bytes)
    }
}

impl Denoiser for MlpDenoiser {
    type Tape = MlpTape;

    fn data_dim(&self) -> usize {
        self.arch.data_dim
    }

    fn cond_dim(&self) -> usize {
        self.arch.cond_dim
    }

    fn num_params(&self) -> usize {
        self.params.len()
    }

    fn predict_taped(&self, x_t: &[f64], t: usize, c: &[f64]) -> (Vec<f64>, MlpTape) {
        assert_eq!(x_t.len(), self.arch.data_dim, "input dim");
        assert_eq!(c.len(), self.arch.cond_dim, "condition dim");
        let p = &self.params;
        let tf = self.tfeat(t);
        let td = self.arch.time_dim;
        let cd = self.arch.cond_dim;
        let mut pre = Vec::with_capacity(self.arch.hidden.len());
        let mut act: Vec<Vec<f64>> = Vec::with_capacity(self.arch.hidden.len());
        for l in self.layers() {
            let mut z = p[l.bias..l.bias + l.width].to_vec();
            let input = act.last().map(|a| a.as_slice()).unwrap_or(x_t);
            matvec_acc(&mut z, &p[l.w..l.w + l.width * l.inputs], l.width, l.inputs, input);
            matvec_acc(&mut z, &p[l.time..l.time + l.width * td], l.width, td, &tf);
            matvec_acc(&mut z, &p[l.cond..l.cond + l.width * cd], l.width, cd, c);
            act.push(z.iter().map(|&v| silu(v)).collect());
            pre.push(z);
        }
        let (ow, ob, _) = self.head();
        let last = act.last().unwrap();
        let d = self.arch.data_dim;
        let gate = self.gate(&tf);
        let mut out: Vec<f64> = p[ob.offset as usize..ob.offset as usize + d]
            .iter()
            .zip(x_t)
            .map(|(b, x)| b + gate * x)
            .collect();
        matvec_acc(
            &mut out,
            &p[ow.offset as usize..(ow.offset + ow.length) as usize],
            d,
            last.len(),
            last,
        );
        let tape = MlpTape {
            x: x_t.to_vec(),
            tfeat: tf,
            cond: c.to_vec(),
            pre,
            act,
        };
        (out, tape)
    }

    fn pullback_into(&self, tape: &MlpTape, d_out: &[f64], acc: &mut Gradients) {
        let p = &self.params;
        let req = acc.request();
        let td = self.arch.time_dim;
        let cd = self.arch.cond_dim;
        let d = self.arch.data_dim;
        let (ow, ob, sk) = self.head();
        let layers = self.layers();
        let gate = self.gate(&tape.tfeat);
        if req.input {
            for (g, v) in acc.input.iter_mut().zip(d_out) {
                *g += gate * v;
            }
        }
        if req.params {
            let dg: f64 = d_out.iter().zip(&tape.x).map(|(a, b)| a * b).sum();
            let o = sk.offset as usize;
            for (g, f) in acc.params[o..o + td].iter_mut().zip(&tape.tfeat) {
                *g += dg * f;
            }
            acc.params[o + td] += dg;
        }
        let last = tape.act.last().unwrap();
        let lw = last.len();

        if req.params {
            let gb = &mut acc.params[ob.offset as usize..ob.offset as usize + d];
            for (g, v) in gb.iter_mut().zip(d_out) {
                *g += v;
            }
            outer_acc(
                &mut acc.params[ow.offset as usize..(ow.offset + ow.length) as usize],
                d,
                lw,
                d_out,
                last,
            );
        }
        let mut da = vec![0.0; lw];
        matvec_t_acc(
            &mut da,
            &p[ow.offset as usize..(ow.offset + ow.length) as usize],
            d,
            lw,
            d_out,
        );

        for (k, l) in layers.iter().enumerate().rev() {
            let dz: Vec<f64> = da.iter().zip(&tape.pre[k]).map(|(g, &z)| g * silu_grad(z)).collect();
            let input = if k == 0 { &tape.x } else { &tape.act[k - 1] };
            if req.params {
                let gp = &mut acc.params;
                for (g, v) in gp[l.bias..l.bias + l.width].iter_mut().zip(&dz) {
                    *g += v;
                }
                outer_acc(&mut gp[l.w..l.w + l.width * l.inputs], l.width, l.inputs, &dz, input);
                outer_acc(&mut gp[l.time..l.time + l.width * td], l.width, td, &dz, &tape.tfeat);
                outer_acc(&mut gp[l.cond..l.cond + l.width * cd], l.width, cd, &dz, &tape.cond);
            }
            if req.cond {
                matvec_t_acc(&mut acc.cond, &p[l.cond..l.cond + l.width * cd], l.width, cd, &dz);
            }
            if k > 0 {
                da = vec![0.0; l.inputs];
                matvec_t_acc(&mut da, &p[l.w..l.w + l.width * l.inputs], l.width, l.inputs, &dz);
            } else if req.input {
                matvec_t_acc(
                    &mut acc.input,
                    &p[l.w..l.w + l.width * l.inputs],
                    l.width,
                    l.inputs,
                    &dz,
                );
            }
        }
    }
}
