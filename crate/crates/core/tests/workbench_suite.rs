use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use idcloak::kv::KvRecord;
use idcloak::threat::{train_identity_embedder, EmbedderConfig};
use idcloak::tns::write_tensor;
use idcloak::workbench::dataset::{render_identity, Style};
use idcloak::workbench::store;
use idcloak::workbench::{import_dataset, synth_dataset, ExperimentConfig};
use idcloak::{Error, RngState, Tensor};

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

#[test]
fn defaults_follow_the_published_protocol() {
    let c = ExperimentConfig::default();
    assert_eq!(c.cloak.eta, 16.0 / 255.0);
    assert_eq!(c.cloak.alpha, 0.05);
    assert_eq!(c.cloak.n_outer, 200);
    assert_eq!(c.cloak.n_inner, 10);
    assert_eq!(c.cloak.sampler_steps, 50);
    assert_eq!((c.n_train, c.n_test), (4, 8));
    assert_eq!(c.attack_steps, 1000);
    assert_eq!(c.eval_n, 30);
    assert_eq!(c.eval_prompts.len(), 3);
    assert_eq!(c.eval_threshold, 0.5);
    assert_eq!(c.t_max, 1000);
    assert_eq!(c.anchor_steps, 50);
    assert_eq!(c.anchor_lr, 1e-3);
    c.validate().unwrap();
}

#[test]
fn config_file_then_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.kv");
    fs::write(&p, "# comment\ncloak.n_outer = 7\nseed=3\n").unwrap();
    let mut c = ExperimentConfig::load(&p).unwrap();
    assert_eq!((c.cloak.n_outer, c.seed), (7, 3));
    c.apply(&KvRecord::parse("cloak.n_outer=9").unwrap()).unwrap();
    assert_eq!(c.cloak.n_outer, 9);
    for bad in [
        "cloak.eta=-1",
        "cloak.sampler_steps=5000",
        "eval.threshold=2",
        "attack.method=dreams",
    ] {
        let err = ExperimentConfig::from_kv(&KvRecord::parse(bad).unwrap()).unwrap_err();
        assert_eq!(err.exit_code(), 2, "{bad}");
    }
    assert_eq!(
        ExperimentConfig::load(&dir.path().join("absent.kv"))
            .unwrap_err()
            .exit_code(),
        2
    );
}

fn write_images(dir: &Path, prefix: &str, images: &[Tensor]) -> Vec<String> {
    images
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let name = format!("{prefix}_{i}.tns");
            write_tensor(&dir.join(&name), x).unwrap();
            name
        })
        .collect()
}

fn manifest(dir: &Path, train: &[String], test: &[String]) -> PathBuf {
    let mut text = String::from("identity=alice\n");
    train.iter().for_each(|n| text.push_str(&format!("train={n}\n")));
    test.iter().for_each(|n| text.push_str(&format!("test={n}\n")));
    let p = dir.join("manifest.txt");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn import_round_trips_and_reports_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let images = render_identity(5, 8, 6, 1.0, Style::Photo, 0);
    let train = write_images(dir.path(), "tr", &images[..2]);
    let test = write_images(dir.path(), "te", &images[2..]);
    let ds = import_dataset(&manifest(dir.path(), &train, &test)).unwrap();
    assert_eq!(ds.identity, "alice");
    assert_eq!(ds.train, images[..2].to_vec());
    assert_eq!(ds.test, images[2..].to_vec());

    let missing = manifest(dir.path(), &train, &["nope.tns".to_string()]);
    assert!(matches!(import_dataset(&missing), Err(Error::Data(_))));

    let overlap = manifest(dir.path(), &train, &train[..1]);
    assert!(matches!(import_dataset(&overlap), Err(Error::Data(_))));

    write_tensor(&dir.path().join("small.tns"), &Tensor::zeros(vec![1, 4, 4])).unwrap();
    let mixed = manifest(dir.path(), &train, &["small.tns".to_string()]);
    assert!(matches!(import_dataset(&mixed), Err(Error::Data(_))));

    fs::write(dir.path().join("junk.tns"), b"not a tensor").unwrap();
    let corrupt = manifest(dir.path(), &train, &["junk.tns".to_string()]);
    match import_dataset(&corrupt) {
        Err(e @ Error::Format { .. }) => {
            assert!(e.to_string().contains("junk.tns"));
            assert_eq!(e.exit_code(), 3);
        }
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn stored_artifacts_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth_dataset(7, 8, 2, 3, 1.0).unwrap();
    store::save_dataset(dir.path(), &ds).unwrap();
    let back = store::load_dataset(dir.path()).unwrap();
    assert_eq!(back.train, ds.train);
    assert_eq!(back.test, ds.test);
    assert_eq!(back.identity, ds.identity);

    let samples: Vec<(Tensor, usize)> = [1u64, 2, 3]
        .iter()
        .enumerate()
        .flat_map(|(k, &s)| {
            render_identity(s, 8, 6, 1.0, Style::Photo, 0)
                .into_iter()
                .map(move |x| (x, k))
        })
        .collect();
    let cfg = EmbedderConfig {
        steps: 30,
        hidden: 16,
        dim: 8,
        ..EmbedderConfig::default()
    };
    let e = train_identity_embedder(&samples, Some(2), &cfg, &mut RngState::new(1)).unwrap();
    store::save_embedder(dir.path(), "emb", &e).unwrap();
    let loaded = store::load_embedder(dir.path(), "emb").unwrap();
    assert_eq!(loaded.hash(), e.hash());
    for (x, _) in &samples {
        assert_eq!(loaded.embed(x).unwrap(), e.embed(x).unwrap());
        assert_eq!(loaded.confidence(x).unwrap(), e.confidence(x).unwrap());
    }
}

fn idcloak(args: &[&str], cwd: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_idcloak"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();

    let out = idcloak(&["synth-data", "--dir", d, "--cloak.etta", "0.1"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = idcloak(&["report", "--dir", empty.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    let smoke = workspace_root().join("configs/smoke.kv");
    let run = dir.path().join("diverge");
    let out = idcloak(
        &[
            "pipeline",
            "--config",
            smoke.to_str().unwrap(),
            "--dir",
            run.to_str().unwrap(),
            "--base.lr",
            "1e300",
            "--model.hidden",
            "8",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    let m = KvRecord::load(&run.join("manifest.kv")).unwrap();
    assert_eq!(m.get("failed_stage"), Some("train-base"));
}

#[test]
fn synth_stage_refuses_to_overwrite_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("exp");
    let r = run.to_str().unwrap();
    let small = ["--data.image_size", "8"];
    let first = idcloak(&[&["synth-data", "--dir", r][..], &small[..]].concat(), dir.path());
    assert_eq!(
        first.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&first.stderr)
    );
    let ds = store::load_dataset(&run.join("data")).unwrap();
    assert_eq!((ds.train.len(), ds.test.len()), (4, 8));

    let again = idcloak(&[&["synth-data", "--dir", r][..], &small[..]].concat(), dir.path());
    assert_eq!(again.status.code(), Some(2));
    let forced = idcloak(
        &[&["synth-data", "--dir", r, "--force"][..], &small[..]].concat(),
        dir.path(),
    );
    assert_eq!(
        forced.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&forced.stderr)
    );
}
