//! Per-identity image sets: procedural synthesis and `.tns` manifest import.
//!
//! A synthetic identity is a fixed set of face-like shape and texture
//! parameters drawn from the identity seed. Each rendered image additionally
//! draws context parameters (pose shift, zoom, illumination, background,
//! sensor noise) whose magnitude is scaled by `context_spread`.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::tns;

pub const PIXEL_RANGE: (f64, f64) = (0.0, 1.0);

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Synthetic { identity_seed: u64, context_spread: f64 },
    Imported { manifest: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityDataset {
    pub identity: String,
    pub shape: Vec<usize>,
    pub train: Vec<Tensor>,
    pub test: Vec<Tensor>,
    pub source: DatasetSource,
}

impl IdentityDataset {
    pub fn all_images(&self) -> impl Iterator<Item = &Tensor> {
        self.train.iter().chain(&self.test)
    }
}

/// Identity-level rendering parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceParams {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    skin: f64,
    hair: f64,
    hairline: f64,
    eye_sep: f64,
    eye_y: f64,
    eye_size: f64,
    eye_dark: f64,
    mouth_w: f64,
    mouth_y: f64,
    mouth_dark: f64,
    tex_fx: f64,
    tex_fy: f64,
    tex_phase: f64,
    tex_amp: f64,
}

fn lerp(r: &mut RngState, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * r.uniform()
}

impl FaceParams {
    pub fn from_seed(identity_seed: u64) -> Self {
        let mut r = RngState::with_stream(identity_seed, 0x1d);
        Self {
            cx: lerp(&mut r, -0.06, 0.06),
            cy: lerp(&mut r, -0.04, 0.06),
            rx: lerp(&mut r, 0.22, 0.34),
            ry: lerp(&mut r, 0.28, 0.40),
            skin: lerp(&mut r, 0.45, 0.9),
            hair: lerp(&mut r, 0.02, 0.35),
            hairline: lerp(&mut r, -0.25, 0.05),
            eye_sep: lerp(&mut r, 0.09, 0.17),
            eye_y: lerp(&mut r, -0.12, -0.02),
            eye_size: lerp(&mut r, 0.035, 0.07),
            eye_dark: lerp(&mut r, 0.3, 0.8),
            mouth_w: lerp(&mut r, 0.06, 0.16),
            mouth_y: lerp(&mut r, 0.10, 0.20),
            mouth_dark: lerp(&mut r, 0.2, 0.6),
            tex_fx: lerp(&mut r, 1.0, 4.0),
            tex_fy: lerp(&mut r, 1.0, 4.0),
            tex_phase: lerp(&mut r, 0.0, std::f64::consts::TAU),
            tex_amp: lerp(&mut r, 0.0, 0.12),
        }
    }
}

/// Prompt-linked presentation of a rendered image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Style {
    Photo,
    Portrait,
    Mirror,
}

impl Style {
    pub const ALL: [Style; 3] = [Style::Photo, Style::Portrait, Style::Mirror];

    pub fn prompt_index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy)]
struct Context {
    dx: f64,
    dy: f64,
    zoom: f64,
    gain: f64,
    grad_x: f64,
    grad_y: f64,
    background: f64,
    noise: f64,
}

impl Context {
    fn draw(r: &mut RngState, spread: f64) -> Self {
        Self {
            dx: 0.05 * spread * r.gaussian(),
            dy: 0.04 * spread * r.gaussian(),
            zoom: 1.0 + 0.06 * spread * r.gaussian(),
            gain: 1.0 + 0.12 * spread * r.gaussian(),
            grad_x: 0.15 * spread * r.gaussian(),
            grad_y: 0.10 * spread * r.gaussian(),
            background: 0.5 + 0.15 * spread * r.gaussian(),
            noise: 0.01 * spread,
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Renders one image of `face` under a freshly drawn context.
pub fn render(face: &FaceParams, size: usize, spread: f64, style: Style, r: &mut RngState) -> Tensor {
    let ctx = Context::draw(r, spread);
    let (zoom_style, contrast) = match style {
        Style::Photo | Style::Mirror => (1.0, 1.0),
        Style::Portrait => (1.3, 1.25),
    };
    let soft = 0.6 / size as f64;
    let mut data = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let u0 = (j as f64 + 0.5) / size as f64 - 0.5;
            let v0 = (i as f64 + 0.5) / size as f64 - 0.5;
            let zoom = ctx.zoom * zoom_style;
            let mut u = (u0 - ctx.dx) / zoom - face.cx;
            let v = (v0 - ctx.dy) / zoom - face.cy;
            if style == Style::Mirror {
                u = -u - 2.0 * face.cx;
            }
            let rho = ((u / face.rx).powi(2) + (v / face.ry).powi(2)).sqrt();
            let face_mask = sigmoid((1.0 - rho) * face.rx / soft);
            let tex = face.tex_amp * (face.tex_fx * u * 10.0 + face.tex_fy * v * 10.0 + face.tex_phase).sin();
            let mut pix = ctx.background + face_mask * (face.skin * (1.0 + tex) - ctx.background);
            // hair: top band of the head, slightly wider than the face
            let rho_h = ((u / (face.rx * 1.12)).powi(2) + (v / (face.ry * 1.1)).powi(2)).sqrt();
            let head = sigmoid((1.0 - rho_h) * face.rx / soft);
            let above = sigmoid((face.hairline * face.ry - v) / soft);
            let hair_w = head * above;
            pix += hair_w * (face.hair - pix);
            let blob = |bu: f64, bv: f64, su: f64, sv: f64| (-((u - bu) / su).powi(2) - ((v - bv) / sv).powi(2)).exp();
            let eyes = blob(-face.eye_sep, face.eye_y, face.eye_size, face.eye_size * 0.8)
                + blob(face.eye_sep, face.eye_y, face.eye_size, face.eye_size * 0.8);
            pix *= 1.0 - face.eye_dark * eyes.min(1.0) * face_mask;
            let mouth = blob(0.0, face.mouth_y, face.mouth_w, 0.025);
            pix *= 1.0 - face.mouth_dark * mouth.min(1.0) * face_mask;
            pix = 0.5 + contrast * (pix - 0.5);
            pix = pix * ctx.gain + ctx.grad_x * u0 + ctx.grad_y * v0;
            pix += ctx.noise * r.gaussian();
            data.push(pix.clamp(PIXEL_RANGE.0, PIXEL_RANGE.1));
        }
    }
    Tensor::new(vec![1, size, size], data).expect("renderer output is finite")
}

/// Renders `n` images of identity `identity_seed`; `stream` separates
/// independent draws of the same identity.
pub fn render_identity(
    identity_seed: u64,
    size: usize,
    n: usize,
    spread: f64,
    style: Style,
    stream: u64,
) -> Vec<Tensor> {
    let face = FaceParams::from_seed(identity_seed);
    let mut r = RngState::with_stream(identity_seed ^ 0x5eed_0000_0000, stream);
    (0..n).map(|_| render(&face, size, spread, style, &mut r)).collect()
}

/// Synthesizes a protected-identity dataset: photo style, disjoint draws for
/// the train and test splits.
pub fn synth_dataset(
    identity_seed: u64,
    size: usize,
    n_train: usize,
    n_test: usize,
    context_spread: f64,
) -> Result<IdentityDataset> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::invalid("synth_dataset needs n_train, n_test >= 1"));
    }
    if size < 4 {
        return Err(Error::invalid("image size must be at least 4"));
    }
    let all = render_identity(identity_seed, size, n_train + n_test, context_spread, Style::Photo, 1);
    let (train, test) = all.split_at(n_train);
    Ok(IdentityDataset {
        identity: format!("synth-{identity_seed}"),
        shape: vec![1, size, size],
        train: train.to_vec(),
        test: test.to_vec(),
        source: DatasetSource::Synthetic {
            identity_seed,
            context_spread,
        },
    })
}

/// Loads a dataset from a manifest of `key=value` lines: `identity=<name>`,
/// then one `train=<path>` or `test=<path>` line per image. Paths are
/// relative to the manifest's directory.
pub fn import_dataset(manifest: &Path) -> Result<IdentityDataset> {
    let text = fs::read_to_string(manifest)
        .map_err(|e| Error::data(format!("cannot read manifest {}: {e}", manifest.display())))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut identity = None;
    let mut entries: Vec<(bool, PathBuf)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::data(format!("manifest line {}: expected key=value", lineno + 1)))?;
        match k.trim() {
            "identity" => identity = Some(v.trim().to_string()),
            "train" => entries.push((true, base.join(v.trim()))),
            "test" => entries.push((false, base.join(v.trim()))),
            other => {
                return Err(Error::data(format!(
                    "manifest line {}: unknown key `{other}`",
                    lineno + 1
                )))
            }
        }
    }
    let mut seen_train = HashSet::new();
    let mut seen_test = HashSet::new();
    for (is_train, p) in &entries {
        let key = fs::canonicalize(p).unwrap_or_else(|_| p.clone());
        let (own, other) = if *is_train {
            (&mut seen_train, &seen_test)
        } else {
            (&mut seen_test, &seen_train)
        };
        if other.contains(&key) {
            return Err(Error::data(format!(
                "{} appears in both train and test splits",
                p.display()
            )));
        }
        own.insert(key);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    for (is_train, p) in &entries {
        if !p.exists() {
            return Err(Error::data(format!("missing image file {}", p.display())));
        }
        let t = tns::read_tensor(p)?;
        match &shape {
            None => shape = Some(t.shape().to_vec()),
            Some(s) if s.as_slice() != t.shape() => {
                return Err(Error::data(format!(
                    "{} has shape {:?}, expected {:?}",
                    p.display(),
                    t.shape(),
                    s
                )))
            }
            _ => {}
        }
        if *is_train {
            train.push(t);
        } else {
            test.push(t);
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::data("manifest needs at least one train and one test image"));
    }
    Ok(IdentityDataset {
        identity: identity.unwrap_or_else(|| "imported".into()),
        shape: shape.unwrap(),
        train,
        test,
        source: DatasetSource::Imported {
            manifest: manifest.to_path_buf(),
        },
    })
}
