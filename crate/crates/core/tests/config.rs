use pixpoint::config::{Config, RunManifest};
use pixpoint::eval::Protocol;
use pixpoint::Error;

#[test]
fn defaults_round_trip_through_toml() {
    let c = Config::default();
    c.validate().unwrap();
    let back = Config::from_toml(&c.to_toml()).unwrap();
    assert_eq!(back, c);
    assert_eq!(Config::from_toml("").unwrap(), c);
}

#[test]
fn partial_files_fill_in_defaults() {
    let c = Config::from_toml("[dataset]\nseed = 9\n\n[eval]\nprotocols = [\"s4-ortho\"]\n").unwrap();
    assert_eq!(c.dataset.seed, 9);
    assert_eq!(c.eval.protocols, vec![Protocol::S4Ortho]);
    assert_eq!(c.model, Config::default().model);
}

#[test]
fn unknown_keys_are_config_errors() {
    for text in ["bogus = 1", "[dataset]\nseeds = 1", "[eval]\nprotocols = [\"s9\"]"] {
        let e = Config::from_toml(text).unwrap_err();
        assert!(matches!(e, Error::Config(_)), "{text}: {e}");
        assert_eq!(e.exit_code(), 2);
    }
}

#[test]
fn overrides_apply_in_order_with_coercion() {
    let c = Config::default()
        .with_overrides(&[
            "dataset.seed=5".into(),
            "train.stages.1.batch_size=4".into(),
            "transfer.eps=1".into(),
            "eval.protocols=[\"s1-random\"]".into(),
            "dataset.seed=6".into(),
        ])
        .unwrap();
    assert_eq!(c.dataset.seed, 6);
    assert_eq!(c.train.stages[1].batch_size, 4);
    assert_eq!(c.transfer.eps, 1.0);
    assert_eq!(c.eval.protocols, vec![Protocol::S1Random]);
}

#[test]
fn bad_overrides_are_rejected() {
    for o in ["dataset.sed=1", "train.stages.7.batch_size=1", "dataset", "dataset.seed.x=1", "transfer.eps=0"] {
        let e = Config::default().with_overrides(&[o.to_string()]).unwrap_err();
        assert!(matches!(e, Error::Config(_)), "{o}: {e}");
    }
}

#[test]
fn resolve_reads_a_file_then_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "[dataset]\nseed = 12\n").unwrap();
    let c = Config::resolve(Some(&path), &["train.seed=4".into()]).unwrap();
    assert_eq!((c.dataset.seed, c.train.seed), (12, 4));
    assert!(Config::resolve(Some(&dir.path().join("missing.toml")), &[]).is_err());
}

#[test]
fn hash_is_stable_and_content_sensitive() {
    let a = Config::default();
    assert_eq!(a.hash(), Config::default().hash());
    assert_eq!(a.hash().len(), 64);
    let b = a.with_overrides(&["train.seed=99".into()]).unwrap();
    assert_ne!(a.hash(), b.hash());
    let c = Config::from_toml(&b.to_toml()).unwrap();
    assert_eq!(b.hash(), c.hash());
}

#[test]
fn invalid_model_shapes_are_rejected() {
    assert!(Config::default().with_overrides(&["model.heads=7".into()]).is_err());
    assert!(Config::default().with_overrides(&["model.tokenizer.num_tokens=100000".into()]).is_err());
    assert!(Config::default().with_overrides(&["train.stages.0.resolution=66".into()]).is_err());
}

#[test]
fn manifest_lines_append_and_read_back() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out/manifest.jsonl");
    let c = Config::default();
    let mut m = RunManifest {
        command: "eval-local".into(),
        args: vec!["--protocol".into(), "s4-random".into()],
        config_hash: c.hash(),
        seeds: c.seeds(),
        dataset: Some("data".into()),
        checkpoint: None,
        metrics: None,
        exit_code: 0,
        snapshots: Default::default(),
    };
    m.append(&path).unwrap();
    m.exit_code = 3;
    m.snapshots.insert("loc_acc@1".into(), serde_json::json!(91.5));
    m.append(&path).unwrap();
    let all = RunManifest::read_all(&path).unwrap();
    assert_eq!(all.len(), 2);
    assert_eq!(all[0].exit_code, 0);
    assert_eq!(all[1], m);
    std::fs::write(&path, "{not json}\n").unwrap();
    assert_eq!(RunManifest::read_all(&path).unwrap_err().exit_code(), 4);
}
