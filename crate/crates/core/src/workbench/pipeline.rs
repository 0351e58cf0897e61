//! Staged runs over an experiment directory.
//!
//! Each stage reads its inputs from the directory and writes its outputs
//! back, so the command-line stages and [`run_pipeline`] share one code path.
//! Layout (version [`LAYOUT_VERSION`]):
//!
//! ```text
//! manifest.kv, config.kv
//! data/{train,test}/img_NNN.tns, data/manifest.txt, data/dataset.kv
//! base/{model,encoder,embedder,alt_model}.{tns,kv}
//! identity/{model,encoder,c_id}.{tns,kv}
//! subspace/{anchors,subspace}.{tns,kv}
//! cloaks/<defense>/cloak_NNN.{tns,kv}
//! published/<defense>/{train,test}/img_NNN.tns
//! attack/<attacker>/<defense>/<split>/{model,encoder}.{tns,kv}
//! generations/<attacker>/<defense>/<split>/prompt_K/img_NNN.tns
//! reports/metrics.csv, comparison.csv, ablation.csv, *.svg
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::dataset::{import_dataset, synth_dataset, DatasetSource, IdentityDataset, PIXEL_RANGE};
use super::experiment::{
    attacker_from_parts, kit_from_parts, learn_subspace, personalize_defender, schedule, train_base_models,
    train_embedder,
};
use super::report::{emit_report, write_metrics, MetricsRow};
use super::store;
use crate::cloak::Cloak;
use crate::error::{Error, Result};
use crate::kv::KvRecord;
use crate::tensor::Tensor;
use crate::threat::{attack_generate, craft_cloaks, defense_subspace, evaluate_protection, publish, Defense};

pub const LAYOUT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Data,
    TrainBase,
    LearnIdentity,
    LearnSubspace,
    CraftCloak,
    ApplyCloak,
    Attack,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Data,
        Stage::TrainBase,
        Stage::LearnIdentity,
        Stage::LearnSubspace,
        Stage::CraftCloak,
        Stage::ApplyCloak,
        Stage::Attack,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::TrainBase => "train-base",
            Stage::LearnIdentity => "learn-identity",
            Stage::LearnSubspace => "learn-subspace",
            Stage::CraftCloak => "craft-cloak",
            Stage::ApplyCloak => "apply-cloak",
            Stage::Attack => "attack",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    /// Subdirectories the stage owns.
    fn outputs(self) -> &'static [&'static str] {
        match self {
            Stage::Data => &["data"],
            Stage::TrainBase => &["base"],
            Stage::LearnIdentity => &["identity"],
            Stage::LearnSubspace => &["subspace"],
            Stage::CraftCloak => &["cloaks"],
            Stage::ApplyCloak => &["published"],
            Stage::Attack => &["attack", "generations"],
            Stage::Evaluate | Stage::Report => &[],
        }
    }
}

/// The reproducibility manifest: layout version, the full config, seeds,
/// artifact hashes and stage status. Only the stage runner writes it.
#[derive(Debug, Clone)]
pub struct Manifest {
    path: PathBuf,
    pub kv: KvRecord,
}

impl Manifest {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("manifest.kv");
        let kv = if path.exists() {
            KvRecord::load(&path)?
        } else {
            KvRecord::new()
        };
        Ok(Self { path, kv })
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.kv.set(key, value);
    }

    pub fn save(&self) -> Result<()> {
        self.kv.save(&self.path)
    }
}

fn is_nonempty_dir(p: &Path) -> bool {
    fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Makes `root` ready for a fresh run. A nonempty directory is only cleared
/// with `force`, and only when it holds an experiment manifest.
pub fn prepare_root(root: &Path, force: bool) -> Result<()> {
    if is_nonempty_dir(root) {
        if !force {
            return Err(Error::config(format!(
                "{} is not empty; pass output.force=true (--force) to overwrite",
                root.display()
            )));
        }
        if !root.join("manifest.kv").exists() {
            return Err(Error::config(format!(
                "{} is not empty and holds no experiment manifest; refusing to clear it",
                root.display()
            )));
        }
        fs::remove_dir_all(root)?;
    }
    fs::create_dir_all(root)?;
    Ok(())
}

fn write_header(cfg: &ExperimentConfig, root: &Path, m: &mut Manifest) -> Result<()> {
    fs::create_dir_all(root)?;
    cfg.to_kv().save(&root.join("config.kv"))?;
    m.set("layout_version", LAYOUT_VERSION);
    m.set("seed", cfg.seed);
    m.set("seed.cloak", cfg.cloak_config().seed);
    m.set("seed.attack", cfg.attack_config().seed);
    m.set("seed.identity", cfg.identity_seed);
    m.kv.extend_prefixed("config", &cfg.to_kv());
    Ok(())
}

fn attackers(cfg: &ExperimentConfig) -> Vec<&'static str> {
    if cfg.attack_hidden.is_empty() || cfg.attack_hidden == cfg.hidden {
        vec!["same_arch"]
    } else {
        vec!["same_arch", "alt_arch"]
    }
}

const SPLITS: [(&str, u64); 2] = [("train", 0), ("test", 1)];

fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect())
}

fn load_cloaks(dir: &Path) -> Result<Vec<Cloak>> {
    if !dir.exists() {
        return Err(Error::data(format!("missing cloak directory {}", dir.display())));
    }
    let mut stems: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            name.strip_suffix(".kv").map(String::from)
        })
        .collect();
    stems.sort();
    stems.iter().map(|s| store::load_cloak(dir, s)).collect()
}

fn check_shape(ds: &IdentityDataset, cfg: &ExperimentConfig) -> Result<()> {
    if ds.shape != cfg.image_shape() {
        return Err(Error::data(format!(
            "dataset images have shape {:?} but data.image_size={} expects {:?}",
            ds.shape,
            cfg.image_size,
            cfg.image_shape()
        )));
    }
    Ok(())
}

/// Runs one stage against `root`, recording hashes and status in the manifest.
pub fn run_stage(stage: Stage, cfg: &ExperimentConfig, root: &Path, force: bool) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(root)?;
    let mut m = Manifest::open(root)?;
    if m.kv.get("layout_version").is_none() {
        write_header(cfg, root, &mut m)?;
    }
    for sub in stage.outputs() {
        let p = root.join(sub);
        if is_nonempty_dir(&p) {
            if !force {
                return Err(Error::config(format!(
                    "{} already exists; pass --force to overwrite",
                    p.display()
                )));
            }
            fs::remove_dir_all(&p)?;
        }
    }
    m.set(&format!("stage.{}", stage.name()), "running");
    m.save()?;
    let result = stage_body(stage, cfg, root, &mut m);
    match &result {
        Ok(()) => m.set(&format!("stage.{}", stage.name()), "done"),
        Err(e) => {
            m.set(&format!("stage.{}", stage.name()), "failed");
            m.set("status", "failed");
            m.set("failed_stage", stage.name());
            m.set("error", e.to_string().replace('\n', " "));
        }
    }
    m.save()?;
    result.map_err(|e| e.in_stage(stage.name()))
}

fn stage_body(stage: Stage, cfg: &ExperimentConfig, root: &Path, m: &mut Manifest) -> Result<()> {
    let sched = schedule(cfg)?;
    let data_dir = root.join("data");
    match stage {
        Stage::Data => {
            let ds = match &cfg.import_manifest {
                Some(p) => import_dataset(p)?,
                None => synth_dataset(
                    cfg.identity_seed,
                    cfg.image_size,
                    cfg.n_train,
                    cfg.n_test,
                    cfg.context_spread,
                )?,
            };
            check_shape(&ds, cfg)?;
            store::save_dataset(&data_dir, &ds)?;
            m.set("data.identity", &ds.identity);
            m.set("hash.data.train", store::images_hash(&ds.train));
            m.set("hash.data.test", store::images_hash(&ds.test));
        }
        Stage::TrainBase => {
            let ds = store::load_dataset(&data_dir)?;
            check_shape(&ds, cfg)?;
            let base = train_base_models(cfg)?;
            let (protected, extra) = match ds.source {
                DatasetSource::Synthetic { identity_seed, .. } => (vec![identity_seed], Vec::new()),
                DatasetSource::Imported { .. } => (Vec::new(), vec![ds.train.clone()]),
            };
            let embedder = train_embedder(cfg, &protected, &extra)?;
            let dir = root.join("base");
            store::save_model(&dir, "model", &base.base_model)?;
            store::save_encoder(&dir, "encoder", &base.base_encoder)?;
            store::save_embedder(&dir, "embedder", &embedder)?;
            m.set("hash.base.model", base.base_model.hash());
            m.set("hash.base.encoder", base.base_encoder.hash());
            m.set("hash.base.embedder", embedder.hash());
            if let Some(alt) = &base.alt_base {
                store::save_model(&dir, "alt_model", alt)?;
                m.set("hash.base.alt_model", alt.hash());
            }
            let tail = base.base_losses.len().min(100).max(1);
            let tail_mean = base.base_losses.iter().rev().take(tail).sum::<f64>() / tail as f64;
            m.set("base.final_loss", tail_mean);
        }
        Stage::LearnIdentity => {
            let ds = store::load_dataset(&data_dir)?;
            let base_dir = root.join("base");
            let model = store::load_model(&base_dir, "model")?;
            let encoder = store::load_encoder(&base_dir, "encoder")?;
            let (tuned, c_id) = personalize_defender(&model, &encoder, &ds.train, cfg, &sched)?;
            let dir = root.join("identity");
            store::save_model(&dir, "model", &tuned.model)?;
            store::save_encoder(&dir, "encoder", &tuned.encoder)?;
            store::save_vector(&dir, "c_id", "condition", &c_id)?;
            m.set("hash.identity.model", tuned.model.hash());
            m.set("hash.identity.encoder", tuned.encoder.hash());
            m.set("hash.identity.c_id", crate::hash_f64s(&[c_id.data()]));
        }
        Stage::LearnSubspace => {
            let ds = store::load_dataset(&data_dir)?;
            let id_dir = root.join("identity");
            let model = store::load_model(&id_dir, "model")?;
            let c_id = store::load_vector(&id_dir, "c_id", "condition")?;
            let (anchors, subspace) = learn_subspace(&model, &c_id, &ds.train, cfg, &sched)?;
            let dir = root.join("subspace");
            store::save_anchors(&dir, "anchors", &anchors)?;
            store::save_subspace(&dir, "subspace", &subspace)?;
            m.set("hash.subspace", subspace.hash());
        }
        Stage::CraftCloak => {
            let ds = store::load_dataset(&data_dir)?;
            let id_dir = root.join("identity");
            let model = store::load_model(&id_dir, "model")?;
            let c_id = store::load_vector(&id_dir, "c_id", "condition")?;
            let subspace = store::load_subspace(&root.join("subspace"), "subspace")?;
            let kit = kit_from_parts(&model, &c_id, &subspace, cfg);
            for &d in &cfg.defenses {
                let deltas = craft_cloaks(&kit, &ds.train, d, &sched).map_err(|e| e.in_stage(d.name()))?;
                let dir = root.join("cloaks").join(d.name());
                fs::create_dir_all(&dir)?;
                let universal = matches!(d, Defense::IdCloak | Defense::IdCloakSinglePoint);
                for (i, delta) in deltas.iter().enumerate() {
                    let cloak = Cloak {
                        delta: delta.clone(),
                        eta: cfg.cloak.eta,
                        alpha: if universal { cfg.cloak.alpha } else { cfg.baseline_alpha },
                        iterations: if universal {
                            cfg.cloak.n_outer
                        } else {
                            cfg.baseline_steps
                        },
                        n_inner: if universal { cfg.cloak.n_inner } else { 1 },
                        seed: if universal { kit.cloak.seed } else { kit.seed },
                        model_hash: model.hash(),
                        subspace_hash: if universal {
                            defense_subspace(&kit, d).hash()
                        } else {
                            crate::hash_f64s(&[c_id.data()])
                        },
                        method: d.name().to_string(),
                    };
                    store::save_cloak(&dir, &format!("cloak_{i:03}"), &cloak)?;
                }
                m.set(&format!("hash.cloak.{}", d.name()), store::images_hash(&deltas));
                m.set(&format!("cloak.{}.count", d.name()), deltas.len());
            }
        }
        Stage::ApplyCloak => {
            let ds = store::load_dataset(&data_dir)?;
            for &d in &cfg.defenses {
                let cloaks: Vec<Tensor> = if d == Defense::None {
                    Vec::new()
                } else {
                    load_cloaks(&root.join("cloaks").join(d.name()))?
                        .into_iter()
                        .map(|c| c.delta)
                        .collect()
                };
                let p = publish(d, cloaks, &ds.train, &ds.test, cfg.seed, PIXEL_RANGE)?;
                let dir = root.join("published").join(d.name());
                store::save_images(&dir.join("train"), &p.train)?;
                store::save_images(&dir.join("test"), &p.test)?;
                m.set(
                    &format!("hash.published.{}.train", d.name()),
                    store::images_hash(&p.train),
                );
                m.set(
                    &format!("hash.published.{}.test", d.name()),
                    store::images_hash(&p.test),
                );
            }
        }
        Stage::Attack => {
            let base_dir = root.join("base");
            let encoder = store::load_encoder(&base_dir, "encoder")?;
            let embedder = store::load_embedder(&base_dir, "embedder")?;
            for who in attackers(cfg) {
                let stem = if who == "alt_arch" { "alt_model" } else { "model" };
                let base = store::load_model(&base_dir, stem)?;
                let kit = attacker_from_parts(&base, &encoder, &embedder, cfg)?;
                for &d in &cfg.defenses {
                    for (split, stream) in SPLITS {
                        let published = store::load_images(&root.join("published").join(d.name()).join(split))?;
                        let out = attack_generate(&published, &kit, &sched, stream)
                            .map_err(|e| e.in_stage(&format!("{who}/{}/{split}", d.name())))?;
                        let rel = PathBuf::from(who).join(d.name()).join(split);
                        let adir = root.join("attack").join(&rel);
                        store::save_model(&adir, "model", &out.tuned.model)?;
                        store::save_encoder(&adir, "encoder", &out.tuned.encoder)?;
                        let gdir = root.join("generations").join(&rel);
                        for (k, imgs) in out.generations.iter().enumerate() {
                            store::save_images(&gdir.join(format!("prompt_{k}")), imgs)?;
                        }
                        let all: Vec<Tensor> = out.generations.concat();
                        let key = format!("{who}.{}.{split}", d.name());
                        m.set(&format!("hash.attack.{key}"), out.tuned.model.hash());
                        m.set(&format!("hash.generations.{key}"), store::images_hash(&all));
                    }
                }
            }
        }
        Stage::Evaluate => {
            let ds = store::load_dataset(&data_dir)?;
            let embedder = store::load_embedder(&root.join("base"), "embedder")?;
            let attack = cfg.attack_method.to_string();
            let mut rows = Vec::new();
            for who in attackers(cfg) {
                for &d in &cfg.defenses {
                    for (split, _) in SPLITS {
                        let gdir = root.join("generations").join(who).join(d.name()).join(split);
                        for (k, prompt) in cfg.eval_prompts.iter().enumerate() {
                            let gens = store::load_images(&gdir.join(format!("prompt_{k}")))?;
                            let r = evaluate_protection(&gens, &ds.test, &embedder, cfg.eval_threshold)?;
                            rows.push(MetricsRow::from_report(
                                &ds.identity,
                                split,
                                d,
                                &attack,
                                who,
                                prompt,
                                cfg.seed,
                                &r,
                            ));
                        }
                    }
                }
            }
            let path = root.join("reports").join("metrics.csv");
            write_metrics(&path, &rows)?;
            m.set("hash.metrics", file_hash(&path)?);
        }
        Stage::Report => {
            let summary = emit_report(root)?;
            m.set("report.files", summary.files.len());
        }
    }
    Ok(())
}

/// Runs every stage into `cfg.output_dir`. A failing stage leaves the
/// artifacts of the earlier stages in place and marks the manifest.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let root = cfg.output_dir.clone();
    prepare_root(&root, cfg.force)?;
    let mut m = Manifest::open(&root)?;
    write_header(cfg, &root, &mut m)?;
    m.set("status", "running");
    m.save()?;
    for stage in Stage::ALL {
        run_stage(stage, cfg, &root, false)?;
    }
    let mut m = Manifest::open(&root)?;
    m.set("status", "complete");
    m.save()?;
    Ok(root)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refuses_nonempty_without_force() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("keep.txt"), "x").unwrap();
        let err = prepare_root(dir.path(), false).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        // force still refuses a directory that is not an experiment
        assert!(prepare_root(dir.path(), true).is_err());
        assert!(dir.path().join("keep.txt").exists());
        fs::write(dir.path().join("manifest.kv"), "layout_version=1\n").unwrap();
        prepare_root(dir.path(), true).unwrap();
        assert!(!dir.path().join("keep.txt").exists());
    }

    #[test]
    fn failed_stage_is_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::smoke();
        let err = run_stage(Stage::LearnIdentity, &cfg, dir.path(), false).unwrap_err();
        assert!(err.to_string().contains("learn-identity"));
        let m = KvRecord::load(&dir.path().join("manifest.kv")).unwrap();
        assert_eq!(m.get("failed_stage"), Some("learn-identity"));
        assert_eq!(m.get("layout_version"), Some("1"));
    }
}
