use std::fs;
use std::path::Path;

use pixpoint::cli::{checkpoint_path, run, EVAL_FILE, MANIFEST_FILE, METRICS_FILE};
use pixpoint::config::RunManifest;
use pixpoint::trainer::Stage;

/// Tiny dataset and a few steps per stage.
const TINY: &[&str] = &[
    "dataset.train_per_category=1",
    "dataset.test_per_category=1",
    "dataset.render_points=4096",
    "train.stages.0.batch_size=3",
    "train.stages.0.epochs=1",
    "train.stages.0.passes_per_epoch=1",
    "train.stages.1.batch_size=4",
    "train.stages.1.epochs=1",
    "train.stages.1.passes_per_epoch=1",
    "train.stages.2.batch_size=4",
    "train.stages.2.epochs=1",
    "train.stages.2.passes_per_epoch=1",
    "eval.pixels_per_view=2",
    "eval.protocols=[\"s4-random\"]",
];

fn pix(out: &Path, args: &[&str]) -> i32 {
    let mut argv = vec!["pixpoint".to_string(), "--out".into(), out.display().to_string()];
    for s in TINY {
        argv.push("--set".into());
        argv.push(s.to_string());
    }
    argv.extend(args.iter().map(|s| s.to_string()));
    run(argv)
}

fn manifests(out: &Path) -> Vec<RunManifest> {
    RunManifest::read_all(&out.join(MANIFEST_FILE)).unwrap()
}

#[test]
fn later_stage_without_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(pix(dir.path(), &["train", "--stage", "2"]), 3);
    assert_eq!(pix(dir.path(), &["gen-data"]), 0);
    assert_eq!(pix(dir.path(), &["train", "--stage", "3"]), 3);
    assert_eq!(pix(dir.path(), &["eval-local"]), 3);
    let m = manifests(dir.path());
    assert_eq!(m.iter().map(|r| r.exit_code).collect::<Vec<_>>(), vec![3, 0, 3, 3]);
    assert_eq!(m[1].command, "gen-data");
}

#[test]
fn config_and_dataset_errors_have_their_own_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(pix(dir.path(), &["--set", "train.bogus=1", "gen-data"]), 2);
    assert_eq!(pix(dir.path(), &["--set", "train.stages.0.epochs=0", "gen-data"]), 2);
    assert_eq!(pix(dir.path(), &["train", "--stage", "4"]), 2);
    assert_eq!(run(["pixpoint", "--out", dir.path().to_str().unwrap(), "nonsense"]), 2);
    assert_eq!(pix(dir.path(), &["train", "--stage", "1"]), 4);
    assert_eq!(pix(dir.path(), &["gen-data"]), 0);
    assert_eq!(pix(dir.path(), &["--set", "dataset.seed=77", "train", "--stage", "1"]), 4);
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nlr = 3\n").unwrap();
    assert_eq!(pix(dir.path(), &["--config", bad.to_str().unwrap(), "gen-data"]), 2);
}

#[test]
fn stages_run_in_order_and_leave_records() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_eq!(pix(out, &["gen-data"]), 0);
    for s in ["1", "2", "3"] {
        assert_eq!(pix(out, &["train", "--stage", s]), 0, "stage {s}");
    }
    for s in Stage::ALL {
        assert!(checkpoint_path(out, s).exists());
    }
    let m = manifests(out);
    let last = m.last().unwrap();
    assert_eq!(last.command, "train");
    assert_eq!(last.config_hash.len(), 64);
    let eval = last.snapshots["eval"].as_object().unwrap();
    assert!(eval.contains_key("local/s4-random"));
    assert!(eval.contains_key("retrieval/s4-random"));
    let first_train = &m[1].snapshots["eval"];
    assert!(first_train.get("retrieval/s4-random").is_none(), "stage 1 has no trained global branch");

    assert_eq!(pix(out, &["eval-local", "--protocol", "s4-random"]), 0);
    assert_eq!(pix(out, &["eval-retrieval", "--protocol", "s1-random"]), 0);
    let ck1 = checkpoint_path(out, Stage::I);
    assert_eq!(pix(out, &["eval-local", "--checkpoint", ck1.to_str().unwrap()]), 0);
    assert_eq!(pix(out, &["query", "--direction", "3d-to-3d", "--object", "0", "--token", "2", "--other", "1"]), 0);
    assert_eq!(pix(out, &["query", "--direction", "3d-to-2d", "--object", "0", "--token", "2", "--views", "6,7"]), 0);
    assert_eq!(pix(out, &["query", "--direction", "2d-to-3d", "--object", "0", "--view", "6", "--pixel", "0,0"]), 1);
    assert_eq!(pix(out, &["query", "--direction", "3d-to-3d", "--object", "0", "--token", "2"]), 1);
    assert_eq!(pix(out, &["part-transfer", "--object", "0", "--view", "6", "--click", "0,0"]), 1);
    let local = &manifests(out)[4];
    assert_eq!(local.command, "eval-local");
    let scores = local.snapshots["local/s4-random"]["model"].as_array().unwrap();
    assert_eq!(scores.len(), 5);
    assert!(fs::read_to_string(out.join(EVAL_FILE)).unwrap().lines().count() >= 5);
    // A finished stage is left alone.
    assert_eq!(pix(out, &["train", "--stage", "2"]), 0);
}

#[test]
fn identical_runs_and_resumed_runs_match_bit_for_bit() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    for d in [&a, &b, &c] {
        assert_eq!(pix(d.path(), &["gen-data"]), 0);
    }
    for d in [&a, &b] {
        assert_eq!(pix(d.path(), &["train", "--stage", "1", "--no-eval"]), 0);
        assert_eq!(pix(d.path(), &["train", "--stage", "2", "--no-eval"]), 0);
    }
    assert_eq!(pix(c.path(), &["train", "--stage", "1", "--no-eval", "--stop-at", "1"]), 0);
    assert_eq!(pix(c.path(), &["train", "--stage", "1", "--no-eval"]), 0);
    assert_eq!(pix(c.path(), &["train", "--stage", "2", "--no-eval", "--stop-at", "1"]), 0);
    assert_eq!(pix(c.path(), &["train", "--stage", "2", "--no-eval"]), 0);

    let read = |d: &Path, f: &str| fs::read(d.join(f)).unwrap();
    let metrics = read(a.path(), METRICS_FILE);
    assert!(String::from_utf8_lossy(&metrics).lines().count() >= 4);
    assert_eq!(metrics, read(b.path(), METRICS_FILE));
    assert_eq!(metrics, read(c.path(), METRICS_FILE));
    for s in [Stage::I, Stage::II] {
        let ck = fs::read(checkpoint_path(a.path(), s)).unwrap();
        assert_eq!(ck, fs::read(checkpoint_path(b.path(), s)).unwrap());
        assert_eq!(ck, fs::read(checkpoint_path(c.path(), s)).unwrap());
    }
    // Resuming under a different config is refused.
    assert_eq!(pix(c.path(), &["--set", "train.seed=5", "train", "--stage", "2"]), 2);
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(pix(dir.path(), &["selftest"]), 0);
    let m = manifests(dir.path());
    assert!(m[0].snapshots.values().all(|v| v["passed"] == true));
}
