use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use idcloak::kv::KvRecord;
use idcloak::workbench::pipeline::{run_pipeline, run_stage, Stage};
use idcloak::workbench::report::emit_report;
use idcloak::workbench::ExperimentConfig;
use idcloak::{Error, Result};

/// Identity-specific universal cloaks on toy diffusion models.
///
/// Every stage reads from and writes to one experiment directory
/// (`--dir`, default `experiment`). Any config key can be overridden as
/// `--key value`, e.g. `--cloak.n_outer 50`.
#[derive(Parser)]
#[command(name = "idcloak", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic identity dataset into DIR/data
    SynthData(Common),
    /// Validate and copy an image manifest into DIR/data
    ImportData {
        /// Manifest with `identity=`, `train=` and `test=` lines
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain the base denoiser, text encoder and identity embedder
    TrainBase(Common),
    /// Implant the identity into the pseudo-token by fine-tuning
    LearnIdentity(Common),
    /// Prompt-tune anchors and fit the identity subspace
    LearnSubspace(Common),
    /// Craft the cloaks of every configured defense
    CraftCloak(Common),
    /// Apply crafted cloaks to both splits
    ApplyCloak(Common),
    /// Personalize the attacker on published images and generate
    Attack(Common),
    /// Score generations into DIR/reports/metrics.csv
    Evaluate(Common),
    /// Write comparison and ablation tables plus SVG plots
    Report {
        #[arg(long, default_value = "experiment")]
        dir: PathBuf,
    },
    /// Run every stage end to end
    Pipeline(Common),
}

#[derive(Args)]
struct Common {
    /// key=value config file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Experiment directory (config key output.dir)
    #[arg(long)]
    dir: Option<PathBuf>,
    /// Overwrite existing outputs
    #[arg(long)]
    force: bool,
    /// Further config overrides as `--key value` or `--key=value`
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

fn parse_overrides(args: &[String]) -> Result<KvRecord> {
    let mut kv = KvRecord::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let key = a
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("expected `--key value`, got `{a}`")))?;
        match key.split_once('=') {
            Some((k, v)) => kv.set(k, v),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("flag `--{key}` needs a value")))?;
                kv.set(key, v);
            }
        }
    }
    Ok(kv)
}

/// Config file (or the one stored in the experiment directory), then flags.
fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let overrides = parse_overrides(&common.overrides)?;
    let finish = |mut cfg: ExperimentConfig| -> Result<ExperimentConfig> {
        for (k, v) in overrides.iter() {
            cfg.set(k, v)?;
        }
        if let Some(d) = &common.dir {
            cfg.output_dir = d.clone();
        }
        cfg.force |= common.force;
        cfg.validate()?;
        Ok(cfg)
    };
    let base = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let cfg = finish(base)?;
    let stored = cfg.output_dir.join("config.kv");
    if common.config.is_none() && stored.exists() {
        return finish(ExperimentConfig::load(&stored)?);
    }
    Ok(cfg)
}

fn stage(common: &Common, stage: Stage) -> Result<()> {
    let cfg = resolve(common)?;
    run_stage(stage, &cfg, &cfg.output_dir, cfg.force)?;
    println!("{} done: {}", stage.name(), cfg.output_dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData(c) => stage(&c, Stage::Data),
        Command::ImportData { manifest, mut common } => {
            common
                .overrides
                .push(format!("--data.import_manifest={}", manifest.display()));
            stage(&common, Stage::Data)
        }
        Command::TrainBase(c) => stage(&c, Stage::TrainBase),
        Command::LearnIdentity(c) => stage(&c, Stage::LearnIdentity),
        Command::LearnSubspace(c) => stage(&c, Stage::LearnSubspace),
        Command::CraftCloak(c) => stage(&c, Stage::CraftCloak),
        Command::ApplyCloak(c) => stage(&c, Stage::ApplyCloak),
        Command::Attack(c) => stage(&c, Stage::Attack),
        Command::Evaluate(c) => stage(&c, Stage::Evaluate),
        Command::Report { dir } => {
            let s = emit_report(&dir)?;
            println!(
                "{:<26} {:>9} {:>9} {:>9} {:>9}",
                "defense", "attacker", "ism_test", "fdfr_test", "qual_test"
            );
            for r in &s.comparison {
                println!(
                    "{:<26} {:>9} {:>9.4} {:>9.4} {:>9.4}",
                    r.defense, r.attacker, r.test.ism, r.test.fdfr, r.test.quality
                );
            }
            for f in &s.files {
                println!("wrote {}", f.display());
            }
            Ok(())
        }
        Command::Pipeline(c) => {
            let cfg = resolve(&c)?;
            let root = run_pipeline(&cfg)?;
            println!("pipeline complete: {}", root.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
