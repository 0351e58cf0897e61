//! On-disk artifacts: `.tns` payloads with `key=value` sidecars.
//!
//! Every artifact `stem` is written as `stem.tns` next to `stem.kv`.

use std::fs;
use std::path::{Path, PathBuf};

use super::dataset::{DatasetSource, IdentityDataset};
use crate::cloak::Cloak;
use crate::diffusion::{Architecture, MlpDenoiser};
use crate::error::{Error, Result};
use crate::identity::{AnchorSet, IdentitySubspace, SigmaDivisor, TextEncoderStub, Vocab};
use crate::kv::KvRecord;
use crate::tensor::Tensor;
use crate::threat::IdentityEmbedder;
use crate::tns;

fn paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{stem}.tns")), dir.join(format!("{stem}.kv")))
}

fn read_sidecar(path: &Path) -> Result<KvRecord> {
    let text = fs::read_to_string(path).map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    KvRecord::parse(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn expect_kind(kv: &KvRecord, kind: &str, path: &Path) -> Result<()> {
    match kv.get("kind") {
        Some(k) if k == kind => Ok(()),
        other => Err(Error::format(
            path,
            format!("expected a `{kind}` artifact, found {}", other.unwrap_or("none")),
        )),
    }
}

pub fn save_model(dir: &Path, stem: &str, model: &MlpDenoiser) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (tp, kp) = paths(dir, stem);
    tns::write_checkpoint(&tp, &Tensor::vector(model.params().to_vec()), model.slices())?;
    let mut kv = KvRecord::new();
    kv.set("kind", "denoiser");
    kv.extend_prefixed("arch", &model.arch().to_kv());
    kv.set("hash", model.hash());
    kv.save(&kp)
}

pub fn load_model(dir: &Path, stem: &str) -> Result<MlpDenoiser> {
    let (tp, kp) = paths(dir, stem);
    let kv = read_sidecar(&kp)?;
    expect_kind(&kv, "denoiser", &kp)?;
    let mut arch_kv = KvRecord::new();
    for (k, v) in kv.iter() {
        if let Some(rest) = k.strip_prefix("arch.") {
            arch_kv.set(rest, v);
        }
    }
    let arch = Architecture::from_kv(&arch_kv).map_err(|e| Error::format(&kp, e.to_string()))?;
    let (t, slices) = tns::read_checkpoint(&tp)?;
    let model = MlpDenoiser::from_parts(arch, t.into_data())?;
    if model.slices() != slices.as_slice() {
        return Err(Error::format(&tp, "slice table does not match the architecture"));
    }
    Ok(model)
}

pub fn save_encoder(dir: &Path, stem: &str, enc: &TextEncoderStub) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (tp, kp) = paths(dir, stem);
    let t = Tensor::new(vec![enc.vocab().len(), enc.dim()], enc.table().to_vec())?;
    tns::write_tensor(&tp, &t)?;
    let mut kv = KvRecord::new();
    kv.set("kind", "text_encoder");
    kv.set("vocab", enc.vocab().words().join(" "));
    kv.set("dim", enc.dim());
    kv.set("hash", enc.hash());
    kv.save(&kp)
}

pub fn load_encoder(dir: &Path, stem: &str) -> Result<TextEncoderStub> {
    let (tp, kp) = paths(dir, stem);
    let kv = read_sidecar(&kp)?;
    expect_kind(&kv, "text_encoder", &kp)?;
    let words = kv
        .require::<String>("vocab")?
        .split_whitespace()
        .map(String::from)
        .collect();
    let t = tns::read_tensor(&tp)?;
    TextEncoderStub::from_table(Vocab::from_words(words)?, kv.require("dim")?, t.into_data())
}

pub fn save_embedder(dir: &Path, stem: &str, e: &IdentityEmbedder) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (tp, kp) = paths(dir, stem);
    tns::write_tensor(&tp, &Tensor::vector(e.state()))?;
    let mut kv = KvRecord::new();
    kv.set("kind", "embedder");
    kv.extend_prefixed("embedder", &e.metadata());
    kv.save(&kp)
}

pub fn load_embedder(dir: &Path, stem: &str) -> Result<IdentityEmbedder> {
    let (tp, kp) = paths(dir, stem);
    let kv = read_sidecar(&kp)?;
    expect_kind(&kv, "embedder", &kp)?;
    let mut meta = KvRecord::new();
    for (k, v) in kv.iter() {
        if let Some(rest) = k.strip_prefix("embedder.") {
            meta.set(rest, v);
        }
    }
    IdentityEmbedder::from_state(&meta, tns::read_tensor(&tp)?.data())
}

pub fn save_vector(dir: &Path, stem: &str, kind: &str, v: &Tensor) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (tp, kp) = paths(dir, stem);
    tns::write_tensor(&tp, v)?;
    let mut kv = KvRecord::new();
    kv.set("kind", kind);
    kv.set("hash", crate::hash_f64s(&[v.data()]));
    kv.save(&kp)
}

pub fn load_vector(dir: &Path, stem: &str, kind: &str) -> Result<Tensor> {
    let (tp, kp) = paths(dir, stem);
    let kv = read_sidecar(&kp)?;
    expect_kind(&kv, kind, &kp)?;
    tns::read_tensor(&tp)
}

pub fn save_anchors(dir: &Path, stem: &str, a: &AnchorSet) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (tp, kp) = paths(dir, stem);
    tns::write_tensor(&tp, &a.to_tensor())?;
    let mut kv = KvRecord::new();
    kv.set("kind", "anchors");
    kv.set(
        "source_images",
        a.source_images
            .iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    kv.set("final_loss", a.losses.last().copied().unwrap_or(f64::NAN));
    kv.save(&kp)
}

pub fn load_anchors(dir: &Path, stem: &str) -> Result<AnchorSet> {
    let (tp, kp) = paths(dir, stem);
    let kv = read_sidecar(&kp)?;
    expect_kind(&kv, "anchors", &kp)?;
    let t = tns::read_tensor(&tp)?;
    let (n, d) = match t.shape() {
        [n, d] => (*n, *d),
        s => return Err(Error::format(&tp, format!("anchors must be rank 2, got {s:?}"))),
    };
    let source_images = kv
        .require::<String>("source_images")?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::format(&kp, "bad source_images")))
        .collect::<Result<Vec<usize>>>()?;
    Ok(AnchorSet {
        anchors: t.data().chunks(d.max(1)).take(n).map(<[f64]>::to_vec).collect(),
        source_images,
        losses: Vec::new(),
    })
}

pub fn save_subspace(dir: &Path, stem: &str, q: &IdentitySubspace) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (tp, kp) = paths(dir, stem);
    let data = q.mu.iter().chain(&q.sigma).copied().collect();
    tns::write_tensor(&tp, &Tensor::new(vec![2, q.dim()], data)?)?;
    let mut kv = KvRecord::new();
    kv.set("kind", "subspace");
    kv.set("n_anchors", q.n_anchors);
    kv.set("divisor", q.divisor);
    kv.set("hash", q.hash());
    kv.save(&kp)
}

pub fn load_subspace(dir: &Path, stem: &str) -> Result<IdentitySubspace> {
    let (tp, kp) = paths(dir, stem);
    let kv = read_sidecar(&kp)?;
    expect_kind(&kv, "subspace", &kp)?;
    let t = tns::read_tensor(&tp)?;
    let d = match t.shape() {
        [2, d] => *d,
        s => return Err(Error::format(&tp, format!("subspace must be [2, dim], got {s:?}"))),
    };
    let divisor: SigmaDivisor = kv.require::<String>("divisor")?.parse()?;
    Ok(IdentitySubspace {
        mu: t.data()[..d].to_vec(),
        sigma: t.data()[d..].to_vec(),
        n_anchors: kv.require("n_anchors")?,
        divisor,
    })
}

pub fn save_cloak(dir: &Path, stem: &str, c: &Cloak) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (tp, kp) = paths(dir, stem);
    tns::write_tensor(&tp, &c.delta)?;
    let mut kv = KvRecord::new();
    kv.set("kind", "cloak");
    kv.extend_prefixed("cloak", &c.metadata());
    kv.save(&kp)
}

pub fn load_cloak(dir: &Path, stem: &str) -> Result<Cloak> {
    let (tp, kp) = paths(dir, stem);
    let kv = read_sidecar(&kp)?;
    expect_kind(&kv, "cloak", &kp)?;
    let get = |k: &str| kv.require::<String>(&format!("cloak.{k}"));
    let num = |k: &str| -> Result<f64> {
        get(k)?
            .parse()
            .map_err(|_| Error::format(&kp, format!("bad cloak.{k}")))
    };
    let int = |k: &str| -> Result<u64> {
        get(k)?
            .parse()
            .map_err(|_| Error::format(&kp, format!("bad cloak.{k}")))
    };
    let delta = tns::read_tensor(&tp)?;
    let eta = num("eta")?;
    if delta.linf_norm() > eta {
        return Err(Error::data(format!("{} exceeds its budget {eta}", tp.display())));
    }
    Ok(Cloak {
        delta,
        eta,
        alpha: num("alpha")?,
        iterations: int("n_outer")? as usize,
        n_inner: int("n_inner")? as usize,
        seed: int("seed")?,
        model_hash: get("model_hash")?,
        subspace_hash: get("subspace_hash")?,
        method: get("method")?,
    })
}

/// Writes `img_000.tns`, `img_001.tns`, ... into `dir`.
pub fn save_images(dir: &Path, images: &[Tensor]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    images
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let p = dir.join(format!("img_{i:03}.tns"));
            tns::write_tensor(&p, x)?;
            Ok(p)
        })
        .collect()
}

/// Reads every `.tns` file of `dir` in name order.
pub fn load_images(dir: &Path) -> Result<Vec<Tensor>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "tns"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::data(format!("no .tns images in {}", dir.display())));
    }
    files.iter().map(|p| tns::read_tensor(p)).collect()
}

pub fn images_hash(images: &[Tensor]) -> String {
    let parts: Vec<&[f64]> = images.iter().map(|x| x.data()).collect();
    crate::hash_f64s(&parts)
}

/// Writes both splits plus an importable `manifest.txt` and a `dataset.kv`.
pub fn save_dataset(dir: &Path, ds: &IdentityDataset) -> Result<()> {
    let train = save_images(&dir.join("train"), &ds.train)?;
    let test = save_images(&dir.join("test"), &ds.test)?;
    let mut manifest = format!("identity={}\n", ds.identity);
    for (split, files) in [("train", &train), ("test", &test)] {
        for f in files {
            let name = f.file_name().expect("file").to_string_lossy();
            manifest.push_str(&format!("{split}={split}/{name}\n"));
        }
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    let mut kv = KvRecord::new();
    kv.set("kind", "dataset");
    kv.set("identity", &ds.identity);
    match &ds.source {
        DatasetSource::Synthetic {
            identity_seed,
            context_spread,
        } => {
            kv.set("source", "synthetic");
            kv.set("identity_seed", identity_seed);
            kv.set("context_spread", context_spread);
        }
        DatasetSource::Imported { manifest } => {
            kv.set("source", "imported");
            kv.set("manifest", manifest.display());
        }
    }
    kv.set("train_hash", images_hash(&ds.train));
    kv.set("test_hash", images_hash(&ds.test));
    kv.save(&dir.join("dataset.kv"))
}

pub fn load_dataset(dir: &Path) -> Result<IdentityDataset> {
    let kp = dir.join("dataset.kv");
    let kv = read_sidecar(&kp)?;
    expect_kind(&kv, "dataset", &kp)?;
    let mut ds = super::dataset::import_dataset(&dir.join("manifest.txt"))?;
    ds.source = match kv.get("source") {
        Some("synthetic") => DatasetSource::Synthetic {
            identity_seed: kv.require("identity_seed")?,
            context_spread: kv.require("context_spread")?,
        },
        _ => DatasetSource::Imported {
            manifest: PathBuf::from(kv.get("manifest").unwrap_or_default()),
        },
    };
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::Architecture;
    use crate::rng::RngState;

    #[test]
    fn model_and_encoder_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = RngState::new(2);
        let arch = Architecture {
            data_dim: 9,
            hidden: vec![5, 4],
            time_dim: 4,
            cond_dim: 3,
            t_max: 20,
        };
        let m = MlpDenoiser::new(arch, &mut r).unwrap();
        save_model(dir.path(), "m", &m).unwrap();
        let back = load_model(dir.path(), "m").unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.arch(), m.arch());

        let enc = TextEncoderStub::new(Vocab::new(2), 3, &mut r);
        save_encoder(dir.path(), "e", &enc).unwrap();
        assert_eq!(load_encoder(dir.path(), "e").unwrap(), enc);
        assert!(load_encoder(dir.path(), "m").is_err());
    }

    #[test]
    fn subspace_and_cloak_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let q = IdentitySubspace {
            mu: vec![0.1, -0.2],
            sigma: vec![0.3, 0.0],
            n_anchors: 4,
            divisor: SigmaDivisor::Population,
        };
        save_subspace(dir.path(), "q", &q).unwrap();
        assert_eq!(load_subspace(dir.path(), "q").unwrap(), q);

        let mut c = Cloak::zero(vec![1, 2, 2], 0.1);
        c.delta = Tensor::new(vec![1, 2, 2], vec![0.1, -0.1, 0.0, 0.05]).unwrap();
        c.method = "id_cloak".into();
        save_cloak(dir.path(), "c", &c).unwrap();
        assert_eq!(load_cloak(dir.path(), "c").unwrap(), c);
    }
}
