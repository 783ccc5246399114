use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use jointdiff::checkpoint::{probe_outputs, AnyModel, Checkpoint};
use jointdiff::config::{Stage, TrainConfig};
use jointdiff::data;
use jointdiff::unet::BackboneConfig;
use jointdiff::Tensor;
use jointdiff_cli::{manifest_path, summarize_depth};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_jointdiff"));
    c.env_remove("JOINTDIFF_SEED");
    c
}

fn ok(cmd: &mut Command) {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn tiny_config(dir: &Path, stage: Stage, steps: u64) -> PathBuf {
    let mut c = TrainConfig::desk(stage);
    c.model = BackboneConfig {
        base_width: 8,
        channel_mults: vec![1, 2],
        attention: false,
        groups: 4,
        embed_dim: 16,
        ..BackboneConfig::default()
    };
    c.batch_size = 2;
    c.steps = steps;
    c.warmup_steps = 0;
    c.snapshot_every = 2;
    c.dataset = "data.jdset".into();
    c.out = format!("{stage:?}").to_lowercase().into();
    c.validation.held_out = 2;
    c.validation.samples = 2;
    c.validation.sample_steps = 2;
    if stage != Stage::Base {
        c.init = Some("base/model.ckpt".into());
    }
    let path = dir.join(format!("{stage:?}.toml").to_lowercase());
    fs::write(&path, c.to_toml()).unwrap();
    path
}

/// Dataset plus a two-step base model in `dir`.
fn setup(dir: &Path) {
    ok(bin()
        .args([
            "synth-data",
            "--n",
            "6",
            "--size",
            "32",
            "--seed",
            "3",
            "--out",
        ])
        .arg(dir.join("data.jdset")));
    ok(bin()
        .arg("train")
        .arg("--config")
        .arg(tiny_config(dir, Stage::Base, 2)));
}

#[test]
fn stage_one_with_zero_steps_preserves_the_base_outputs() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let cfg = tiny_config(dir.path(), Stage::Stage1, 0);
    ok(bin()
        .arg("train")
        .arg("--config")
        .arg(&cfg)
        .arg("--direct-extend")
        .arg("copy"));

    let base = Checkpoint::load(&dir.path().join("base/model.ckpt"), None).unwrap();
    let joint = Checkpoint::load(&dir.path().join("stage1/model.ckpt"), None).unwrap();
    assert!(matches!(joint.model, AnyModel::Joint(_)));
    assert_eq!(joint.step, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::randn([3, 3, 32, 32], &mut rng);
    let y = Tensor::randn([3, 1, 32, 32], &mut rng);
    let (t, class) = ([0, 400, 999], [0, 5, 8]);
    let (want, _) = probe_outputs(&base.model, &x, &y, &t, &class).unwrap();
    let (got, _) = probe_outputs(&joint.model, &x, &y, &t, &class).unwrap();
    assert!(got.bit_eq(&want));

    let out = dir.path().join("stage1");
    assert!(out.join("direct_extend.ckpt").exists());
    assert!(out.join("snapshots/step_000000_joint.png").exists());
    assert!(out.join("snapshots/step_000000_direct_extend.png").exists());
    let m: serde_json::Value =
        serde_json::from_slice(&fs::read(manifest_path(&out, true)).unwrap()).unwrap();
    for key in [
        "command",
        "seed",
        "config",
        "git_describe",
        "wall_time_s",
        "outputs",
    ] {
        assert!(m.get(key).is_some(), "manifest lacks {key}");
    }
    assert_eq!(m["command"], "train");
}

#[test]
fn base_training_logs_every_step_and_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let out = dir.path().join("base");
    let log = fs::read_to_string(out.join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["train"]["total"].as_f64().unwrap().is_finite());
    }
    // step 0 and step 2
    let val = fs::read_to_string(out.join("validation.jsonl")).unwrap();
    assert_eq!(val.lines().count(), 2);
    let snaps: Vec<_> = fs::read_dir(out.join("snapshots")).unwrap().collect();
    assert!(snaps.is_empty(), "base runs only log losses");
}

#[test]
fn sampling_is_byte_identical_and_seed_env_overrides() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    ok(bin()
        .arg("train")
        .arg("--config")
        .arg(tiny_config(dir.path(), Stage::Stage1, 1)));
    let ckpt = dir.path().join("stage1/model.ckpt");
    let sample = |name: &str, seed: &str, env: Option<&str>| {
        let out = dir.path().join(name);
        let mut c = bin();
        c.args([
            "sample", "--n", "2", "--steps", "3", "--class", "boxes", "--seed", seed,
        ]);
        c.arg("--ckpt").arg(&ckpt).arg("--out").arg(&out);
        if let Some(e) = env {
            c.env("JOINTDIFF_SEED", e);
        }
        ok(&mut c);
        [
            "rgb_000.png",
            "rgb_001.png",
            "depth_000.png",
            "depth_001.png",
        ]
        .map(|f| fs::read(out.join(f)).unwrap())
    };
    let a = sample("a", "4", None);
    assert_eq!(a, sample("b", "4", None));
    assert_ne!(a, sample("c", "5", None));
    assert_eq!(a, sample("d", "5", Some("4")));
}

#[test]
fn errors_are_one_line_json_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| {
        let out = bin().args(args).output().unwrap();
        assert!(!out.status.success());
        let err = String::from_utf8(out.stderr).unwrap();
        assert_eq!(err.trim_end().lines().count(), 1, "{err}");
        let v: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
        v["error"].as_str().unwrap().to_string()
    };
    let missing = dir.path().join("nope.ckpt");
    let out = dir.path().join("o");
    assert_eq!(
        run(&[
            "sample",
            "--ckpt",
            missing.to_str().unwrap(),
            "--out",
            out.to_str().unwrap()
        ]),
        "io"
    );
    assert_eq!(run(&["sample", "--bogus"]), "usage");

    // a base checkpoint cannot seed stage 2
    setup(dir.path());
    let cfg = tiny_config(dir.path(), Stage::Stage2, 1);
    assert_eq!(
        run(&["train", "--config", cfg.to_str().unwrap()]),
        "digest_mismatch"
    );
    let garbage = dir.path().join("garbage.ckpt");
    fs::write(&garbage, b"JNCKPT not really").unwrap();
    let kind = run(&[
        "sample",
        "--ckpt",
        garbage.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(kind == "checksum" || kind == "corrupt", "{kind}");
}

#[test]
fn copying_ground_truth_scores_zero() {
    let scenes = data::generate(5, 32, 40).unwrap();
    let preds: Vec<_> = scenes.iter().map(|s| s.disparity.clone()).collect();
    let s = summarize_depth(&preds, &scenes, 0).unwrap();
    assert_eq!(s.n, 5);
    // f32 predictions: zero up to single-precision rounding
    assert!(s.abs_rel_mean.abs() < 1e-6, "{}", s.abs_rel_mean);
    assert!(s.rmse_mean.abs() < 1e-6, "{}", s.rmse_mean);
}
