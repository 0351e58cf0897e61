//! Experiment configuration: a flat key=value schema with dotted sections.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cloak::{BaselineConfig, CloakOptConfig};
use crate::diffusion::{Architecture, ScheduleKind};
use crate::error::{Error, Result};
use crate::identity::{AttackMethod, SigmaDivisor};
use crate::kv::KvRecord;
use crate::threat::{AttackConfig, Defense, EmbedderConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    // data
    pub image_size: usize,
    pub identity_seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub context_spread: f64,
    pub public_identities: usize,
    pub public_per_style: usize,
    pub import_manifest: Option<PathBuf>,
    // schedule and model
    pub schedule_kind: ScheduleKind,
    pub t_max: usize,
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub cond_dim: usize,
    // base model
    pub base_steps: usize,
    pub base_lr: f64,
    pub base_batch: usize,
    // identity learning (C steps) and context diversification (M steps)
    pub identity_steps: usize,
    pub identity_lr: f64,
    pub identity_batch: usize,
    pub anchor_steps: usize,
    pub anchor_lr: f64,
    pub anchor_batch: usize,
    pub sigma_divisor: SigmaDivisor,
    // cloak
    pub cloak: CloakOptConfig,
    pub baseline_steps: usize,
    pub baseline_alpha: f64,
    // attack and evaluation
    pub attack_method: AttackMethod,
    pub attack_steps: usize,
    pub attack_lr: f64,
    pub attack_batch: usize,
    pub attack_rank: usize,
    /// Attacker widths; empty means the defender's widths.
    pub attack_hidden: Vec<usize>,
    pub eval_n: usize,
    pub eval_sampler_steps: usize,
    pub eval_threshold: f64,
    pub eval_prompts: Vec<String>,
    pub embedder: EmbedderConfig,
    pub embedder_per_identity: usize,
    pub defenses: Vec<Defense>,
    // output
    pub output_dir: PathBuf,
    pub force: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 16,
            identity_seed: 1000,
            n_train: 4,
            n_test: 8,
            context_spread: 1.0,
            public_identities: 8,
            public_per_style: 8,
            import_manifest: None,
            schedule_kind: ScheduleKind::Linear,
            t_max: 1000,
            hidden: vec![256, 256],
            time_dim: 32,
            cond_dim: 32,
            base_steps: 3000,
            base_lr: 1e-3,
            base_batch: 32,
            identity_steps: 1000,
            identity_lr: 1e-4,
            identity_batch: 4,
            anchor_steps: 50,
            anchor_lr: 1e-3,
            anchor_batch: 1,
            sigma_divisor: SigmaDivisor::Unbiased,
            cloak: CloakOptConfig::default(),
            baseline_steps: 100,
            baseline_alpha: 0.005,
            attack_method: AttackMethod::FullFinetune,
            attack_steps: 1000,
            attack_lr: 1e-4,
            attack_batch: 4,
            attack_rank: 4,
            attack_hidden: Vec::new(),
            eval_n: 30,
            eval_sampler_steps: 50,
            eval_threshold: 0.5,
            eval_prompts: crate::identity::EVAL_PROMPTS.iter().map(|s| s.to_string()).collect(),
            embedder: EmbedderConfig::default(),
            embedder_per_identity: 60,
            defenses: Defense::ALL.to_vec(),
            output_dir: PathBuf::from("experiment"),
            force: false,
        }
    }
}

fn widths(v: &[usize]) -> String {
    v.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",")
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::config(format!("cannot parse `{v}` for key `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("`{key}` expects a boolean, got `{v}`"))),
    }
}

fn parse_widths(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    crate::diffusion::denoiser::parse_widths(v).map_err(|_| Error::config(format!("bad widths for `{key}`: `{v}`")))
}

impl ExperimentConfig {
    /// Every key with its current value, in schema order.
    pub fn to_kv(&self) -> KvRecord {
        let mut kv = KvRecord::new();
        kv.set("seed", self.seed);
        kv.set("data.image_size", self.image_size);
        kv.set("data.identity_seed", self.identity_seed);
        kv.set("data.n_train", self.n_train);
        kv.set("data.n_test", self.n_test);
        kv.set("data.context_spread", self.context_spread);
        kv.set("data.public_identities", self.public_identities);
        kv.set("data.public_per_style", self.public_per_style);
        kv.set(
            "data.import_manifest",
            self.import_manifest
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        kv.set("schedule.kind", self.schedule_kind);
        kv.set("schedule.steps", self.t_max);
        kv.set("model.hidden", widths(&self.hidden));
        kv.set("model.time_dim", self.time_dim);
        kv.set("model.cond_dim", self.cond_dim);
        kv.set("base.steps", self.base_steps);
        kv.set("base.lr", self.base_lr);
        kv.set("base.batch", self.base_batch);
        kv.set("identity.steps", self.identity_steps);
        kv.set("identity.lr", self.identity_lr);
        kv.set("identity.batch", self.identity_batch);
        kv.set("anchors.steps", self.anchor_steps);
        kv.set("anchors.lr", self.anchor_lr);
        kv.set("anchors.batch", self.anchor_batch);
        kv.set("subspace.divisor", self.sigma_divisor);
        kv.set("subspace.truncation", self.cloak.truncation);
        kv.set("cloak.n_outer", self.cloak.n_outer);
        kv.set("cloak.n_inner", self.cloak.n_inner);
        kv.set("cloak.alpha", self.cloak.alpha);
        kv.set("cloak.eta", self.cloak.eta);
        kv.set("cloak.sampler_steps", self.cloak.sampler_steps);
        kv.set("cloak.t_min", self.cloak.t_min);
        kv.set("cloak.t_max", self.cloak.t_max);
        kv.set("cloak.batch", self.cloak.batch);
        kv.set("cloak.pre_search", self.cloak.pre_search);
        kv.set("cloak.scale_by_signal", self.cloak.scale_by_signal);
        kv.set("cloak.init", self.cloak.init);
        kv.set("baseline.steps", self.baseline_steps);
        kv.set("baseline.alpha", self.baseline_alpha);
        kv.set("attack.method", self.attack_method);
        kv.set("attack.steps", self.attack_steps);
        kv.set("attack.lr", self.attack_lr);
        kv.set("attack.batch", self.attack_batch);
        kv.set("attack.rank", self.attack_rank);
        kv.set("attack.hidden", widths(&self.attack_hidden));
        kv.set("eval.n", self.eval_n);
        kv.set("eval.sampler_steps", self.eval_sampler_steps);
        kv.set("eval.threshold", self.eval_threshold);
        kv.set("eval.prompts", self.eval_prompts.join("|"));
        kv.set("embedder.hidden", self.embedder.hidden);
        kv.set("embedder.dim", self.embedder.dim);
        kv.set("embedder.steps", self.embedder.steps);
        kv.set("embedder.lr", self.embedder.lr);
        kv.set("embedder.batch", self.embedder.batch);
        kv.set("embedder.scale", self.embedder.scale);
        kv.set("embedder.margin", self.embedder.margin);
        kv.set("embedder.per_identity", self.embedder_per_identity);
        kv.set(
            "experiment.defenses",
            self.defenses.iter().map(|d| d.name()).collect::<Vec<_>>().join(","),
        );
        kv.set("output.dir", self.output_dir.display());
        kv.set("output.force", self.force);
        kv
    }

    /// Sets one key; unknown keys and unparsable values are config errors.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data.image_size" => self.image_size = parse(key, v)?,
            "data.identity_seed" => self.identity_seed = parse(key, v)?,
            "data.n_train" => self.n_train = parse(key, v)?,
            "data.n_test" => self.n_test = parse(key, v)?,
            "data.context_spread" => self.context_spread = parse(key, v)?,
            "data.public_identities" => self.public_identities = parse(key, v)?,
            "data.public_per_style" => self.public_per_style = parse(key, v)?,
            "data.import_manifest" => self.import_manifest = (!v.trim().is_empty()).then(|| PathBuf::from(v.trim())),
            "schedule.kind" => {
                self.schedule_kind = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::config(format!("unknown schedule `{v}`")))?
            }
            "schedule.steps" => self.t_max = parse(key, v)?,
            "model.hidden" => self.hidden = parse_widths(key, v)?,
            "model.time_dim" => self.time_dim = parse(key, v)?,
            "model.cond_dim" => self.cond_dim = parse(key, v)?,
            "base.steps" => self.base_steps = parse(key, v)?,
            "base.lr" => self.base_lr = parse(key, v)?,
            "base.batch" => self.base_batch = parse(key, v)?,
            "identity.steps" => self.identity_steps = parse(key, v)?,
            "identity.lr" => self.identity_lr = parse(key, v)?,
            "identity.batch" => self.identity_batch = parse(key, v)?,
            "anchors.steps" => self.anchor_steps = parse(key, v)?,
            "anchors.lr" => self.anchor_lr = parse(key, v)?,
            "anchors.batch" => self.anchor_batch = parse(key, v)?,
            "subspace.divisor" => {
                self.sigma_divisor = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::config(format!("unknown divisor `{v}`")))?
            }
            "subspace.truncation" => self.cloak.truncation = parse(key, v)?,
            "cloak.n_outer" => self.cloak.n_outer = parse(key, v)?,
            "cloak.n_inner" => self.cloak.n_inner = parse(key, v)?,
            "cloak.alpha" => self.cloak.alpha = parse(key, v)?,
            "cloak.eta" => self.cloak.eta = parse(key, v)?,
            "cloak.sampler_steps" => self.cloak.sampler_steps = parse(key, v)?,
            "cloak.t_min" => self.cloak.t_min = parse(key, v)?,
            "cloak.t_max" => self.cloak.t_max = parse(key, v)?,
            "cloak.batch" => self.cloak.batch = parse(key, v)?,
            "cloak.pre_search" => self.cloak.pre_search = parse_bool(key, v)?,
            "cloak.scale_by_signal" => self.cloak.scale_by_signal = parse_bool(key, v)?,
            "cloak.init" => self.cloak.init = parse(key, v)?,
            "baseline.steps" => self.baseline_steps = parse(key, v)?,
            "baseline.alpha" => self.baseline_alpha = parse(key, v)?,
            "attack.method" => self.attack_method = v.trim().parse()?,
            "attack.steps" => self.attack_steps = parse(key, v)?,
            "attack.lr" => self.attack_lr = parse(key, v)?,
            "attack.batch" => self.attack_batch = parse(key, v)?,
            "attack.rank" => self.attack_rank = parse(key, v)?,
            "attack.hidden" => self.attack_hidden = parse_widths(key, v)?,
            "eval.n" => self.eval_n = parse(key, v)?,
            "eval.sampler_steps" => self.eval_sampler_steps = parse(key, v)?,
            "eval.threshold" => self.eval_threshold = parse(key, v)?,
            "eval.prompts" => self.eval_prompts = v.split('|').map(|s| s.trim().to_string()).collect(),
            "embedder.hidden" => self.embedder.hidden = parse(key, v)?,
            "embedder.dim" => self.embedder.dim = parse(key, v)?,
            "embedder.steps" => self.embedder.steps = parse(key, v)?,
            "embedder.lr" => self.embedder.lr = parse(key, v)?,
            "embedder.batch" => self.embedder.batch = parse(key, v)?,
            "embedder.scale" => self.embedder.scale = parse(key, v)?,
            "embedder.margin" => self.embedder.margin = parse(key, v)?,
            "embedder.per_identity" => self.embedder_per_identity = parse(key, v)?,
            "experiment.defenses" => {
                self.defenses = v
                    .split(',')
                    .map(|s| s.trim())
                    .filter(|s| !s.is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            "output.dir" => self.output_dir = PathBuf::from(v.trim()),
            "output.force" => self.force = parse_bool(key, v)?,
            other => return Err(Error::config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Defaults overlaid with every entry of `kv`, then validated.
    pub fn from_kv(kv: &KvRecord) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(kv)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, kv: &KvRecord) -> Result<()> {
        for (k, v) in kv.iter() {
            self.set(k, v)?;
        }
        self.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let kv = KvRecord::load(path).map_err(|e| match e {
            Error::Io(io) => Error::config(format!("cannot read config {}: {io}", path.display())),
            other => other,
        })?;
        Self::from_kv(&kv)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if self.n_train == 0 || self.n_test == 0 {
            return bad("data.n_train and data.n_test must be >= 1");
        }
        if self.image_size < 4 {
            return bad("data.image_size must be >= 4");
        }
        if self.t_max == 0 {
            return bad("schedule.steps must be >= 1");
        }
        if self.hidden.is_empty() || self.time_dim == 0 || self.cond_dim == 0 {
            return bad("model widths must be nonempty and positive");
        }
        if self.public_identities < 1 {
            return bad("data.public_identities must be >= 1");
        }
        if !(self.cloak.eta > 0.0 && self.cloak.alpha > 0.0 && self.baseline_alpha > 0.0) {
            return bad("cloak.eta, cloak.alpha and baseline.alpha must be positive");
        }
        for (k, s) in [
            ("cloak.sampler_steps", self.cloak.sampler_steps),
            ("eval.sampler_steps", self.eval_sampler_steps),
        ] {
            if s == 0 || s > self.t_max {
                return Err(Error::config(format!("{k} must be in 1..=schedule.steps")));
            }
        }
        if self.cloak.t_min == 0 || self.cloak.t_min > self.t_max || self.cloak.t_max > self.t_max {
            return bad("cloak timestep range outside the schedule");
        }
        if self.defenses.is_empty() {
            return bad("experiment.defenses must name at least one defense");
        }
        if self.eval_n == 0 || self.eval_prompts.is_empty() {
            return bad("eval.n and eval.prompts must be nonempty");
        }
        if !(0.0..=1.0).contains(&self.eval_threshold) {
            return bad("eval.threshold must lie in [0, 1]");
        }
        if self.attack_method == AttackMethod::LowRank && self.attack_rank == 0 {
            return bad("attack.rank must be >= 1 for low_rank");
        }
        for lr in [
            self.base_lr,
            self.identity_lr,
            self.anchor_lr,
            self.attack_lr,
            self.embedder.lr,
        ] {
            if !(lr.is_finite() && lr > 0.0) {
                return bad("learning rates must be positive and finite");
            }
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            data_dim: self.image_size * self.image_size,
            hidden: self.hidden.clone(),
            time_dim: self.time_dim,
            cond_dim: self.cond_dim,
            t_max: self.t_max,
        }
    }

    pub fn attacker_architecture(&self) -> Architecture {
        let mut a = self.architecture();
        if !self.attack_hidden.is_empty() {
            a.hidden = self.attack_hidden.clone();
        }
        a
    }

    pub fn image_shape(&self) -> Vec<usize> {
        vec![1, self.image_size, self.image_size]
    }

    pub fn cloak_config(&self) -> CloakOptConfig {
        let mut c = self.cloak.clone();
        c.seed = self.seed ^ 0xc10a;
        c
    }

    pub fn baseline_config(&self) -> BaselineConfig {
        BaselineConfig {
            steps: self.baseline_steps,
            alpha: self.baseline_alpha,
            eta: self.cloak.eta,
            record_iterates: false,
        }
    }

    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            method: self.attack_method,
            steps: self.attack_steps,
            lr: self.attack_lr,
            batch: self.attack_batch,
            rank: self.attack_rank,
            seed: self.seed ^ 0xa77a,
            prompt: 0,
        }
    }

    /// A small configuration for quick end-to-end runs.
    pub fn smoke() -> Self {
        let mut c = Self::default();
        c.image_size = 8;
        c.t_max = 50;
        c.hidden = vec![128, 128];
        c.time_dim = 16;
        c.cond_dim = 16;
        c.public_identities = 6;
        c.public_per_style = 6;
        c.base_steps = 1500;
        c.identity_steps = 300;
        c.anchor_steps = 50;
        c.cloak.n_outer = 20;
        c.cloak.sampler_steps = 10;
        c.attack_steps = 300;
        c.eval_sampler_steps = 10;
        c.embedder.steps = 800;
        c.embedder.hidden = 64;
        c.embedder.dim = 16;
        c.embedder_per_identity = 30;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_roundtrip() {
        let mut c = ExperimentConfig::default();
        c.attack_hidden = vec![128, 64];
        c.import_manifest = Some("m.txt".into());
        let back = ExperimentConfig::from_kv(&c.to_kv()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_key_is_config_error() {
        let kv = KvRecord::parse("cloak.etta = 0.1").unwrap();
        let err = ExperimentConfig::from_kv(&kv).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn smoke_is_valid_and_matches_shipped_file() {
        ExperimentConfig::smoke().validate().unwrap();
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.kv");
        assert_eq!(ExperimentConfig::load(&path).unwrap(), ExperimentConfig::smoke());
    }
}
