use std::sync::OnceLock;

use pixpoint::dataset::templates::builtin_templates;
use pixpoint::dataset::{generate_dataset, Dataset, DatasetConfig, Split};
use pixpoint::grad::{Graph, Group};
use pixpoint::model::{InputCache, Model, ModelConfig};
use pixpoint::trainer::checkpoint::{Checkpoint, Seeds};
use pixpoint::trainer::*;
use pixpoint::Error;

fn dataset() -> &'static Dataset {
    static DS: OnceLock<Dataset> = OnceLock::new();
    DS.get_or_init(|| {
        let cfg = DatasetConfig { train_per_category: 2, test_per_category: 1, render_points: 8192, ..Default::default() };
        generate_dataset(&cfg, &builtin_templates()).unwrap()
    })
}

fn model() -> Model {
    Model::new(ModelConfig::default(), dataset().num_categories()).unwrap()
}

/// Default schedule shrunk to `steps` steps per stage.
fn short_train(batch: usize) -> TrainConfig {
    let mut t = TrainConfig::default();
    for s in &mut t.stages {
        s.batch_size = batch;
        s.epochs = 1;
        s.passes_per_epoch = 1;
    }
    t
}

fn seeds() -> Seeds {
    Seeds { train: 3, init: 11, backbone: 0, dataset: 1 }
}

fn params_bits(m: &Model) -> Vec<(String, Vec<u64>)> {
    m.store.iter().map(|(_, p)| (p.name.clone(), p.value.data().iter().map(|x| x.to_bits()).collect())).collect()
}

#[test]
fn default_schedule_values() {
    let [one, two, three] = default_stage_configs();
    let row = |s: &StageConfig| {
        (
            [s.lambda_local, s.lambda_global, s.lambda_sub, s.lambda_sd],
            [s.lr_shared, s.lr_local, s.lr_global, s.lr_vae3d],
            (s.hard_k, s.hard_weight, s.delta, s.tau_d, s.base_lr),
            (s.batch_size, s.epochs, s.resolution, s.enable_global, s.enable_fusion),
        )
    };
    assert_eq!(row(&one), ([1.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0, 1.0], (0, 0.0, 0.020, 0.07, 1e-4), (30, 5, 64, false, false)));
    assert_eq!(row(&two), ([0.25, 1.0, 0.05, 0.10], [0.10, 0.30, 1.0, 1.0], (64, 0.25, 0.020, 0.07, 6e-5), (25, 3, 64, true, true)));
    assert_eq!(row(&three), ([0.50, 0.80, 0.05, 0.20], [0.05, 0.50, 1.0, 1.0], (96, 0.50, 0.015, 0.05, 3e-5), (7, 3, 128, true, true)));
    TrainConfig::default().validate().unwrap();
}

#[test]
fn invalid_stage_configs_are_rejected() {
    let mut t = TrainConfig::default();
    t.stages[0].lambda_global = 0.5;
    assert!(matches!(t.validate(), Err(Error::Config(_))));
    let mut t = TrainConfig::default();
    t.stages[1].batch_size = 0;
    assert!(matches!(t.validate(), Err(Error::Config(_))));
    let mut t = TrainConfig::default();
    t.stages.swap(1, 2);
    assert!(matches!(t.validate(), Err(Error::Config(_))));
}

#[test]
fn step_plan_is_a_permutation_per_pass() {
    let t = short_train(5);
    let cfg = t.stage(Stage::I);
    let ids = dataset().indices(Split::Train);
    let spp = steps_per_pass(ids.len(), cfg);
    let mut seen: Vec<usize> = (0..spp).flat_map(|s| plan_step(&t, cfg, &ids, 16, s)).map(|i| i.object).collect();
    seen.sort_unstable();
    assert_eq!(seen, ids);
    for s in 0..spp {
        for item in plan_step(&t, cfg, &ids, 16, s) {
            assert!((1..=4).contains(&item.views.len()));
            assert!(item.views.windows(2).all(|w| w[0] < w[1]) && item.views.iter().all(|&v| v < 16));
        }
        assert_eq!(plan_step(&t, cfg, &ids, 16, s), plan_step(&t, cfg, &ids, 16, s));
    }
}

#[test]
fn stage_one_leaves_global_parameters_untouched() {
    let ds = dataset();
    let m = model();
    let cache = InputCache::new(ds, m.config.tokenizer.clone());
    let before: Vec<_> = m.store.ids_in(Group::Global).iter().map(|&id| m.store.value(id).clone()).collect();
    let others: Vec<_> = m.store.ids_in(Group::Shared).iter().map(|&id| m.store.value(id).clone()).collect();
    let mut state = TrainState::fresh(m);
    let mut opts = RunOptions { stop_at: Some(2), ..Default::default() };
    let summary = run_stage(&mut state, &cache, &short_train(4), Stage::I, &mut opts).unwrap();
    let last = summary.last.unwrap();
    assert!(last.global.is_none() && last.sub.is_none() && last.sd.is_none());
    let store = &state.model.store;
    for (id, v) in store.ids_in(Group::Global).into_iter().zip(&before) {
        assert_eq!(store.value(id), v, "{} moved in stage 1", store.get(id).name);
    }
    let moved = store.ids_in(Group::Shared).into_iter().zip(&others).any(|(id, v)| store.value(id) != v);
    assert!(moved);
}

#[test]
fn total_loss_is_the_weighted_sum_of_its_terms() {
    let ds = dataset();
    let m = model();
    let cache = InputCache::new(ds, m.config.tokenizer.clone());
    let train = short_train(6);
    let ids = ds.indices(Split::Train);
    for stage in [Stage::II, Stage::III] {
        let cfg = train.stage(stage).clone();
        let items = plan_step(&train, &cfg, &ids, 16, 1);
        let eval = |cfg: &StageConfig| {
            let mut g = Graph::new(&m.store);
            let l = build_step_loss(&mut g, &m, &cache, &train, cfg, &items).unwrap();
            let v = |x: Option<pixpoint::grad::Var>| g.value(x.unwrap()).item();
            (g.value(l.total).item(), [v(l.local), v(l.global), v(l.sub), v(l.sd)])
        };
        let (total, terms) = eval(&cfg);
        let lambdas = [cfg.lambda_local, cfg.lambda_global, cfg.lambda_sub, cfg.lambda_sd];
        let sum: f64 = terms.iter().zip(lambdas).map(|(t, l)| t * l).sum();
        assert!((total - sum).abs() <= 1e-9, "{total} vs {sum}");

        // Linear in each weight: raising lambda_global by 1 adds the global term.
        let bumped = StageConfig { lambda_global: cfg.lambda_global + 1.0, ..cfg.clone() };
        let (t2, terms2) = eval(&bumped);
        assert_eq!(terms, terms2);
        assert!((t2 - total - terms[1]).abs() <= 1e-9);
        let zeroed = StageConfig { lambda_sd: 0.0, ..cfg.clone() };
        assert!((eval(&zeroed).0 - (total - cfg.lambda_sd * terms[3])).abs() <= 1e-9);
    }
}

#[test]
fn stage_one_loss_decreases() {
    let ds = dataset();
    let m = model();
    let cache = InputCache::new(ds, m.config.tokenizer.clone());
    let mut train = short_train(16);
    train.stages[0].passes_per_epoch = 24;
    train.stages[0].base_lr = 1e-3;
    let mut losses = Vec::new();
    let mut f = |r: &StepRecord| losses.push(r.total);
    let mut state = TrainState::fresh(m);
    run_stage(&mut state, &cache, &train, Stage::I, &mut RunOptions { on_step: Some(&mut f), ..Default::default() })
        .unwrap();
    assert_eq!(losses.len(), 24);
    let head: f64 = losses[..4].iter().sum::<f64>() / 4.0;
    let tail: f64 = losses[20..].iter().sum::<f64>() / 4.0;
    assert!(tail < head - 0.1, "loss went {head} -> {tail}");
}

#[test]
fn checkpoint_bytes_round_trip() {
    let ds = dataset();
    let cache = InputCache::new(ds, ModelConfig::default().tokenizer);
    let mut state = TrainState::fresh(model());
    run_stage(&mut state, &cache, &short_train(8), Stage::I, &mut RunOptions { stop_at: Some(1), ..Default::default() })
        .unwrap();
    let ckpt = state.checkpoint(seeds(), "abc123");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sub/ck.bin");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes(), ckpt.to_bytes());
    assert!(back.moments.iter().any(Option::is_some));
    assert_eq!((back.stage, back.complete, back.step), (Stage::I, false, 1));

    let mut bytes = ckpt.to_bytes();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    assert!(matches!(Checkpoint::from_bytes(&bytes, &path), Err(Error::Checksum { .. })));
    let short = &ckpt.to_bytes()[..100];
    assert!(Checkpoint::from_bytes(short, &path).is_err());
    assert!(matches!(Checkpoint::load(&dir.path().join("none.bin")), Err(Error::MissingCheckpoint(_))));
}

#[test]
fn resume_is_bit_exact() {
    let ds = dataset();
    let cache = InputCache::new(ds, ModelConfig::default().tokenizer);
    let train = short_train(6);
    let mut straight = TrainState::fresh(model());
    run_stage(&mut straight, &cache, &train, Stage::I, &mut RunOptions::default()).unwrap();
    run_stage(&mut straight, &cache, &train, Stage::II, &mut RunOptions { stop_at: Some(3), ..Default::default() })
        .unwrap();

    let mut split = TrainState::fresh(model());
    run_stage(&mut split, &cache, &train, Stage::I, &mut RunOptions::default()).unwrap();
    run_stage(&mut split, &cache, &train, Stage::II, &mut RunOptions { stop_at: Some(1), ..Default::default() }).unwrap();
    let bytes = split.checkpoint(seeds(), "h").to_bytes();
    let ckpt = Checkpoint::from_bytes(&bytes, std::path::Path::new("mem")).unwrap();
    let mut resumed = TrainState::from_checkpoint(model(), &ckpt, &train).unwrap();
    assert_eq!((resumed.stage, resumed.step), (Some(Stage::II), 1));
    run_stage(&mut resumed, &cache, &train, Stage::II, &mut RunOptions { stop_at: Some(3), ..Default::default() })
        .unwrap();
    assert_eq!(params_bits(&resumed.model), params_bits(&straight.model));
    assert_eq!(resumed.optimizer.state, straight.optimizer.state);
}

#[test]
fn stages_must_run_in_order() {
    let ds = dataset();
    let cache = InputCache::new(ds, ModelConfig::default().tokenizer);
    let train = short_train(8);
    let mut state = TrainState::fresh(model());
    let err = run_stage(&mut state, &cache, &train, Stage::II, &mut RunOptions::default()).unwrap_err();
    assert!(matches!(err, Error::StageOrder { requested: 2, required: 1, have: 0 }));
    assert_eq!(err.exit_code(), 3);
    run_stage(&mut state, &cache, &train, Stage::I, &mut RunOptions { stop_at: Some(1), ..Default::default() }).unwrap();
    let err = run_stage(&mut state, &cache, &train, Stage::II, &mut RunOptions::default()).unwrap_err();
    assert!(matches!(err, Error::StageOrder { requested: 2, required: 1, have: 1 }));
    run_stage(&mut state, &cache, &train, Stage::I, &mut RunOptions::default()).unwrap();
    let err = run_stage(&mut state, &cache, &train, Stage::III, &mut RunOptions::default()).unwrap_err();
    assert!(matches!(err, Error::StageOrder { requested: 3, required: 2, have: 1 }));
    let err = run_stage(&mut state, &cache, &train, Stage::I, &mut RunOptions::default()).unwrap_err();
    assert!(matches!(err, Error::StageOrder { requested: 1, .. }));
}

#[test]
fn stage_one_checkpoint_reinitializes_global_branch_for_later_stages() {
    let fresh = model();
    let mut m = model();
    for id in m.store.ids_in(Group::Global) {
        m.store.value_mut(id).data_mut().iter_mut().for_each(|x| *x += 0.5);
    }
    let state = TrainState { stage: Some(Stage::I), complete: true, ..TrainState::fresh(m.clone()) };
    let ckpt = state.checkpoint(seeds(), "h");
    let [_, _, three] = default_stage_configs();
    let loaded = model_for_stage(model(), &ckpt, &three).unwrap();
    for (id, p) in loaded.store.iter() {
        let expect = if p.group == Group::Global { fresh.store.value(id) } else { m.store.value(id) };
        assert_eq!(&p.value, expect, "{}", p.name);
    }
    let [one, ..] = default_stage_configs();
    let kept = model_for_stage(model(), &ckpt, &one).unwrap();
    assert_eq!(params_bits(&kept), params_bits(&m));
}

#[test]
fn mismatched_checkpoint_is_rejected() {
    let ckpt = TrainState::fresh(model()).checkpoint(seeds(), "h");
    let small = ModelConfig { local_dim: 32, ..ModelConfig::default() };
    let mut other = Model::new(small, dataset().num_categories()).unwrap();
    assert!(matches!(ckpt.restore_params(&mut other.store), Err(Error::DatasetMismatch(_))));
}

#[test]
fn per_group_learning_rate_is_base_times_scale() {
    let ds = dataset();
    let cache = InputCache::new(ds, ModelConfig::default().tokenizer);
    let train = short_train(6);
    let mut state = TrainState::fresh(model());
    run_stage(&mut state, &cache, &train, Stage::I, &mut RunOptions::default()).unwrap();
    let before = state.model.store.clone();
    run_stage(&mut state, &cache, &train, Stage::II, &mut RunOptions { stop_at: Some(1), ..Default::default() }).unwrap();
    let cfg = train.stage(Stage::II);
    for (group, scale) in cfg.lr_scales() {
        let lr = cfg.base_lr * scale;
        assert_eq!(state.optimizer.group_lr(group), lr);
        // A first Adam step moves each entry by lr * g / (|g| + eps) after
        // decoupled decay, so the largest move is lr.
        let mut largest: f64 = 0.0;
        for id in state.model.store.ids_in(group) {
            let p = before.get(id);
            let shrink = if p.decay { 1.0 - lr * train.weight_decay } else { 1.0 };
            let after = state.model.store.value(id).data();
            for (a, b) in after.iter().zip(p.value.data()) {
                largest = largest.max((a - b * shrink).abs());
            }
        }
        assert!((largest - lr).abs() <= lr * 1e-3, "{group:?}: {largest} vs {lr}");
    }
}
