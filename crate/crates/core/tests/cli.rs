use std::path::Path;
use std::process::{Command, Output};

use ctxsep::signal::Manifest;
use ctxsep::teacher::read_ctxf;

fn ctxsep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctxsep"))
        .args(args)
        .env_remove("CTXSEP_SEED")
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn simulate(out: &Path, num: usize, seed: u64) -> Output {
    ctxsep(&[
        "simulate",
        "--num",
        &num.to_string(),
        "--dur",
        "0.25",
        "--seed",
        &seed.to_string(),
        "--out",
        p(out),
    ])
}

fn tiny_config(
    dir: &Path,
    manifest: &Path,
    extra_train: serde_json::Value,
    mock: bool,
) -> std::path::PathBuf {
    let mut train = serde_json::json!({ "batch_size": 2, "max_epochs": 1, "seed": 3 });
    train
        .as_object_mut()
        .unwrap()
        .extend(extra_train.as_object().unwrap().clone());
    let cfg = serde_json::json!({
        "model": { "num_blocks": 2, "embed_dim": 16, "bottleneck_dim": 8,
                   "predictor_out_dims": { "mel": 80, "phoneme": 8, "word": 8 } },
        "train": train,
        "data": { "manifest": manifest, "out_dir": dir.join("run"), "mock_teachers": mock },
    });
    let path = dir.join(format!(
        "config_{}.json",
        std::fs::read_dir(dir).unwrap().count()
    ));
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(simulate(&a, 3, 9).status.success());
    assert!(simulate(&b, 3, 9).status.success());
    let ma = Manifest::read(a.join("manifest.jsonl")).unwrap();
    let mb = Manifest::read(b.join("manifest.jsonl")).unwrap();
    assert_eq!(ma.entries, mb.entries);
    for e in &ma.entries {
        assert_eq!(
            std::fs::read(ma.resolve(&e.mix)).unwrap(),
            std::fs::read(mb.resolve(&e.mix)).unwrap()
        );
    }
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(simulate(&dir.path().join("x"), 0, 0).status.code(), Some(2));
    assert_eq!(ctxsep(&["simulate"]).status.code(), Some(2));
    assert_eq!(ctxsep(&["no-such-command"]).status.code(), Some(2));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"train": {"lr": 0.01}}"#).unwrap();
    let out = ctxsep(&["train", "--config", p(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lr"));

    let weights = dir.path().join("weights.json");
    std::fs::write(
        &weights,
        r#"{"loss": {"targets": ["signal"], "weights": {"word": 1.0}}}"#,
    )
    .unwrap();
    assert_eq!(
        ctxsep(&["train", "--config", p(&weights)]).status.code(),
        Some(2)
    );

    let two_stage = dir.path().join("two.json");
    std::fs::write(
        &two_stage,
        r#"{"train": {"stage": "segregate", "two_stage": true}}"#,
    )
    .unwrap();
    assert_eq!(
        ctxsep(&["train", "--config", p(&two_stage)]).status.code(),
        Some(2)
    );
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(simulate(&data, 1, 0).status.success());
    let manifest = data.join("manifest.jsonl");
    let out = ctxsep(&[
        "evaluate",
        "--manifest",
        p(&manifest),
        "--ckpt",
        p(&dir.path().join("missing.caws")),
        "--out",
        p(&dir.path().join("eval")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.caws"));

    let out = ctxsep(&[
        "prepare-teachers",
        "--manifest",
        p(&manifest),
        "--kinds",
        "phoneme",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("phoneme_1"));
}

#[test]
fn corrupted_gradient_fails_selfcheck() {
    let out = ctxsep(&["selfcheck", "--corrupt-gradient"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn group_then_segregate_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(simulate(&data, 4, 1).status.success());
    let manifest = data.join("manifest.jsonl");
    let out = ctxsep(&[
        "prepare-teachers",
        "--manifest",
        p(&manifest),
        "--mock",
        "--dim",
        "8",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let m = Manifest::read(&manifest).unwrap();
    for e in &m.entries {
        for key in [
            "mel_1",
            "mel_2",
            "phoneme_1",
            "phoneme_2",
            "word_1",
            "word_2",
        ] {
            let tf = read_ctxf(m.resolve(&e.teachers[key])).unwrap();
            assert_eq!(tf.utterance_id, e.id);
        }
    }

    let group = tiny_config(
        dir.path(),
        &manifest,
        serde_json::json!({ "stage": "group" }),
        false,
    );
    let out = ctxsep(&["--sequential", "train", "--config", p(&group)]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let run = dir.path().join("run");
    for f in [
        "group.caws",
        "group.json",
        "group_config.json",
        "group_log.jsonl",
        "resolved_config.json",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }

    let seg = tiny_config(
        dir.path(),
        &manifest,
        serde_json::json!({ "stage": "segregate", "two_stage": true, "group_ckpt": run.join("group.caws") }),
        false,
    );
    let out = ctxsep(&["train", "--config", p(&seg), "--transfer", "context"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let eval_dir = dir.path().join("eval");
    let out = ctxsep(&[
        "evaluate",
        "--manifest",
        p(&manifest),
        "--ckpt",
        p(&run.join("segregate.caws")),
        "--out",
        p(&eval_dir),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let rows = std::fs::read_to_string(eval_dir.join("rows.jsonl")).unwrap();
    assert_eq!(rows.lines().count(), 4);
    let agg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("aggregate.json")).unwrap())
            .unwrap();
    assert_eq!(agg["n"], 4);
}

#[test]
fn seed_override_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(simulate(&data, 2, 1).status.success());
    let manifest = data.join("manifest.jsonl");
    let cfg = tiny_config(
        dir.path(),
        &manifest,
        serde_json::json!({ "stage": "segregate", "max_steps": 1 }),
        true,
    );
    let out = Command::new(env!("CARGO_BIN_EXE_ctxsep"))
        .args(["train", "--config", p(&cfg)])
        .env("CTXSEP_SEED", "77")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let resolved: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("run/resolved_config.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(resolved["train"]["seed"], 77);

    let out = Command::new(env!("CARGO_BIN_EXE_ctxsep"))
        .args(["train", "--config", p(&cfg)])
        .env("CTXSEP_SEED", "abc")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
