//! Three-stage progressive training: stage schedules, per-step loss assembly,
//! clipped AdamW updates and resumable checkpoints.

pub mod checkpoint;

use std::path::PathBuf;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{assign, local_loss, LocalLossConfig};
use crate::dataset::Split;
use crate::error::{Error, Result};
use crate::geom::rng_from;
use crate::globalbranch::{distill_loss, global_loss, subset_loss};
use crate::grad::{clip_global_norm, AdamW, AdamWConfig, Gradients, Graph, Group, Tensor, Var};
use crate::model::{instance_teacher, queries_for, InputCache, Model};
use checkpoint::{Checkpoint, Seeds};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    I,
    II,
    III,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::I, Stage::II, Stage::III];

    pub fn number(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_number(n: u8) -> Option<Stage> {
        Stage::ALL.get((n as usize).checked_sub(1)?).copied()
    }

    pub fn previous(self) -> Option<Stage> {
        Stage::from_number(self.number() - 1)
    }
}

impl TryFrom<u8> for Stage {
    type Error = String;
    fn try_from(n: u8) -> std::result::Result<Self, String> {
        Stage::from_number(n).ok_or_else(|| format!("stage must be 1, 2 or 3, got {n}"))
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        s.number()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub enable_global: bool,
    pub enable_fusion: bool,
    pub lambda_local: f64,
    pub lambda_global: f64,
    pub lambda_sub: f64,
    pub lambda_sd: f64,
    pub hard_k: usize,
    pub hard_weight: f64,
    pub delta: f64,
    pub tau_d: f64,
    pub base_lr: f64,
    pub lr_shared: f64,
    pub lr_local: f64,
    pub lr_global: f64,
    pub lr_vae3d: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Passes over the training split per epoch, each with fresh view draws.
    pub passes_per_epoch: usize,
    pub resolution: u32,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("stage {}: {m}", self.stage.number())));
        let lambdas = [self.lambda_local, self.lambda_global, self.lambda_sub, self.lambda_sd];
        if lambdas.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return bad("loss weights must be finite and non-negative".into());
        }
        if self.stage == Stage::I
            && (self.enable_global || self.lambda_global != 0.0 || self.lambda_sub != 0.0 || self.lambda_sd != 0.0)
        {
            return bad("the global branch must be off in stage 1".into());
        }
        if self.enable_global && !(self.tau_d > 0.0) {
            return bad("tau_d must be positive".into());
        }
        if !(self.delta >= 0.0) || !(self.base_lr > 0.0) || !(self.hard_weight >= 0.0) {
            return bad("delta, base_lr and hard_weight must be non-negative (lr positive)".into());
        }
        let scales = [self.lr_shared, self.lr_local, self.lr_global, self.lr_vae3d];
        if scales.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
            return bad("learning-rate scales must be finite and non-negative".into());
        }
        if self.batch_size == 0 || self.epochs == 0 || self.passes_per_epoch == 0 || self.resolution == 0 {
            return bad("batch_size, epochs, passes_per_epoch and resolution must be positive".into());
        }
        Ok(())
    }

    pub fn lr_scales(&self) -> [(Group, f64); 4] {
        [
            (Group::Shared, self.lr_shared),
            (Group::Local, self.lr_local),
            (Group::Global, self.lr_global),
            (Group::Vae3d, self.lr_vae3d),
        ]
    }
}

/// Optimizer passes over the 200-object training split per epoch. The
/// reference schedule's epochs cover a corpus three orders of magnitude
/// larger; this keeps the optimizer step count meaningful at desk scale.
pub const DEFAULT_PASSES_PER_EPOCH: usize = 10;

/// The reference three-stage schedule.
pub fn default_stage_configs() -> [StageConfig; 3] {
    let base = StageConfig {
        stage: Stage::I,
        enable_global: false,
        enable_fusion: false,
        lambda_local: 1.0,
        lambda_global: 0.0,
        lambda_sub: 0.0,
        lambda_sd: 0.0,
        hard_k: 0,
        hard_weight: 0.0,
        delta: 0.020,
        tau_d: 0.07,
        base_lr: 1e-4,
        lr_shared: 1.0,
        lr_local: 1.0,
        lr_global: 1.0,
        lr_vae3d: 1.0,
        batch_size: 30,
        epochs: 5,
        passes_per_epoch: DEFAULT_PASSES_PER_EPOCH,
        resolution: 64,
    };
    let two = StageConfig {
        stage: Stage::II,
        enable_global: true,
        enable_fusion: true,
        lambda_local: 0.25,
        lambda_global: 1.0,
        lambda_sub: 0.05,
        lambda_sd: 0.10,
        hard_k: 64,
        hard_weight: 0.25,
        delta: 0.020,
        tau_d: 0.07,
        base_lr: 6e-5,
        lr_shared: 0.10,
        lr_local: 0.30,
        lr_global: 1.0,
        batch_size: 25,
        epochs: 3,
        ..base.clone()
    };
    let three = StageConfig {
        stage: Stage::III,
        lambda_local: 0.50,
        lambda_global: 0.80,
        lambda_sub: 0.05,
        lambda_sd: 0.20,
        hard_k: 96,
        hard_weight: 0.50,
        delta: 0.015,
        tau_d: 0.05,
        base_lr: 3e-5,
        lr_shared: 0.05,
        lr_local: 0.50,
        batch_size: 7,
        resolution: 128,
        ..two.clone()
    };
    [base, two, three]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Gaussian confidence bandwidth of the local loss.
    pub sigma: f64,
    pub local_temperature: f64,
    pub clip_norm: f64,
    pub weight_decay: f64,
    /// Views per instance are drawn uniformly from 1..=max_views.
    pub max_views: usize,
    pub stages: Vec<StageConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 3,
            sigma: 0.05,
            local_temperature: 0.07,
            clip_norm: 1.0,
            weight_decay: 0.01,
            max_views: 4,
            stages: default_stage_configs().to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != 3 {
            return Err(Error::Config(format!("expected 3 stage configs, got {}", self.stages.len())));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.stage.number() as usize != i + 1 {
                return Err(Error::Config(format!("stages[{i}] is labelled stage {}", s.stage.number())));
            }
            s.validate()?;
        }
        if !(self.sigma > 0.0 && self.local_temperature > 0.0 && self.clip_norm > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("sigma, local_temperature and clip_norm must be positive".into()));
        }
        if self.max_views == 0 {
            return Err(Error::Config("max_views must be positive".into()));
        }
        Ok(())
    }

    pub fn stage(&self, s: Stage) -> &StageConfig {
        &self.stages[s.number() as usize - 1]
    }

    pub fn local_config(&self, s: &StageConfig) -> LocalLossConfig {
        LocalLossConfig {
            sigma: self.sigma,
            temperature: self.local_temperature,
            delta: s.delta,
            hard_k: s.hard_k,
            hard_weight: s.hard_weight,
        }
    }
}

/// Model plus optimizer and schedule position.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: AdamW,
    /// Stage last worked on; `None` before any training.
    pub stage: Option<Stage>,
    pub complete: bool,
    /// Steps taken in `stage`.
    pub step: u64,
}

impl TrainState {
    pub fn fresh(model: Model) -> Self {
        let n = model.store.len();
        TrainState { model, optimizer: AdamW::new(AdamWConfig::default(), n), stage: None, complete: false, step: 0 }
    }

    /// Rebuilds the training state saved in `ckpt` under `train`'s settings.
    pub fn from_checkpoint(mut model: Model, ckpt: &Checkpoint, train: &TrainConfig) -> Result<Self> {
        ckpt.restore_params(&mut model.store)?;
        let cfg = train.stage(ckpt.stage);
        let mut optimizer = optimizer_for(&model, cfg, train);
        optimizer.state = ckpt.moments.clone();
        Ok(TrainState { model, optimizer, stage: Some(ckpt.stage), complete: ckpt.complete, step: ckpt.step })
    }

    pub fn checkpoint(&self, seeds: Seeds, config_hash: &str) -> Checkpoint {
        Checkpoint::capture(
            self.stage.unwrap_or(Stage::I),
            self.complete,
            self.step,
            seeds,
            config_hash,
            &self.model.store,
            &self.optimizer,
        )
    }
}

fn optimizer_for(model: &Model, cfg: &StageConfig, train: &TrainConfig) -> AdamW {
    let c = AdamWConfig { lr: cfg.base_lr, weight_decay: train.weight_decay, ..AdamWConfig::default() };
    AdamW::new(c, model.store.len()).with_scales(&cfg.lr_scales())
}

/// Loads a checkpoint for inference under `target`'s configuration. A
/// stage-1 checkpoint never trained the global branch, so when the target
/// stage uses it those parameters are re-initialized from the config seed.
pub fn model_for_stage(mut model: Model, ckpt: &Checkpoint, target: &StageConfig) -> Result<Model> {
    ckpt.restore_params(&mut model.store)?;
    if ckpt.stage == Stage::I && target.enable_global {
        model.reinit_global()?;
    }
    Ok(model)
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: u8,
    pub step: u64,
    pub epoch: usize,
    pub total: f64,
    pub local: Option<f64>,
    pub global: Option<f64>,
    pub sub: Option<f64>,
    pub sd: Option<f64>,
    /// lambda-weighted contributions in the order local, global, sub, sd.
    pub weighted: [f64; 4],
    pub grad_norm: f64,
    pub tau_g: f64,
}

/// Instances and views drawn for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepItem {
    pub object: usize,
    pub views: Vec<usize>,
    /// Seed for the per-item subset draw.
    pub seed: u64,
}

pub fn steps_per_pass(num_train: usize, cfg: &StageConfig) -> u64 {
    num_train.div_ceil(cfg.batch_size) as u64
}

pub fn total_steps(num_train: usize, cfg: &StageConfig) -> u64 {
    steps_per_pass(num_train, cfg) * (cfg.epochs * cfg.passes_per_epoch) as u64
}

/// The batch at `step`: a seeded shuffle per pass, then per-instance view
/// counts drawn uniformly from 1..=max_views.
pub fn plan_step(
    train: &TrainConfig,
    cfg: &StageConfig,
    train_ids: &[usize],
    views_per_object: usize,
    step: u64,
) -> Vec<StepItem> {
    let spp = steps_per_pass(train_ids.len(), cfg);
    let pass = step / spp;
    let b = (step % spp) as usize;
    let stage = cfg.stage.number() as u64;
    let mut order = train_ids.to_vec();
    shuffle(&mut order, &mut rng_from(train.seed, &[0x5E, stage, pass]));
    let lo = b * cfg.batch_size;
    let hi = (lo + cfg.batch_size).min(order.len());
    order[lo..hi]
        .iter()
        .map(|&object| {
            let mut r = rng_from(train.seed, &[0x71, stage, step, object as u64]);
            let s = r.gen_range(1..=train.max_views.min(views_per_object));
            let mut views = sample_indices(&mut r, views_per_object, s).into_vec();
            views.sort_unstable();
            StepItem { object, views, seed: r.gen() }
        })
        .collect()
}

fn shuffle<T>(v: &mut [T], rng: &mut impl Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
}

/// Loss nodes of one step.
#[derive(Clone, Copy, Debug)]
pub struct StepLosses {
    pub total: Var,
    pub local: Option<Var>,
    pub global: Option<Var>,
    pub sub: Option<Var>,
    pub sd: Option<Var>,
}

/// Builds the weighted training objective for `items` on `g`.
pub fn build_step_loss(
    g: &mut Graph,
    model: &Model,
    cache: &InputCache,
    train: &TrainConfig,
    cfg: &StageConfig,
    items: &[StepItem],
) -> Result<StepLosses> {
    let local_cfg = train.local_config(cfg);
    let mut locals = Vec::new();
    let (mut g2s, mut g3s, mut subs, mut teachers) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for item in items {
        let views = cache.prepare_views(&model.backbone, item.object, &item.views, cfg.resolution)?;
        let field = cache.field(item.object)?;
        let vt = model.encode_views(g, &views);
        let h3 = model.encode_tokens(g, field);

        let queries = queries_for(&views, model.config.max_queries);
        if !queries.is_empty() && cfg.lambda_local > 0.0 {
            let rows: Vec<usize> =
                queries.entries.iter().map(|q| vt.cell_row[q.view][q.cell].expect("query on a valid cell")).collect();
            let d2 = model.local_2d(g, &vt, &rows);
            let d3 = model.local_3d(g, h3);
            let a = assign(&queries.coords(), &field.centers, &local_cfg);
            if let Some(t) = local_loss(g, d2, d3, &a, &local_cfg) {
                locals.push(t.total);
            }
        }

        if !cfg.enable_global {
            continue;
        }
        let valid: Vec<usize> = (0..views.len()).filter(|&v| !vt.rows_per_view[v].is_empty()).collect();
        if valid.is_empty() {
            continue;
        }
        let all = vec![true; views.len()];
        let g2 = model.global_2d(g, &vt, &views, cfg.enable_fusion, &all)?;
        g2s.push(g2);
        g3s.push(model.global_3d(g, h3));
        let valid_views: Vec<_> = valid.iter().map(|&v| views[v].clone()).collect();
        teachers.push(instance_teacher(&valid_views, model.config.backbone.teacher_dim));
        if valid.len() >= 2 {
            // Uniform over nonempty strict subsets of the valid views.
            let full = (1u32 << valid.len()) - 1;
            let code = rng_from(item.seed, &[0x5B]).gen_range(1..full);
            let mut use_view = vec![false; views.len()];
            for (bit, &v) in valid.iter().enumerate() {
                use_view[v] = code >> bit & 1 == 1;
            }
            let g_sub = model.global_2d(g, &vt, &views, cfg.enable_fusion, &use_view)?;
            let target = g.value(g2).clone();
            subs.push(subset_loss(g, g_sub, &target));
        }
    }

    let local = mean_of(g, &locals);
    let (mut global, mut sub, mut sd) = (None, None, None);
    if cfg.enable_global && !g2s.is_empty() {
        let g2 = g.concat_rows(&g2s);
        let g3 = g.concat_rows(&g3s);
        let tau = g.param(model.global.tau);
        global = Some(global_loss(g, g2, g3, tau));
        sub = mean_of(g, &subs);
        let b = teachers.len();
        let td = model.config.backbone.teacher_dim;
        let t = Tensor::from_vec(b, td, teachers.concat())?;
        sd = Some(distill_loss(g, &t, g2, g3, cfg.tau_d));
    }

    let weighted = [
        (local, cfg.lambda_local),
        (global, cfg.lambda_global),
        (sub, cfg.lambda_sub),
        (sd, cfg.lambda_sd),
    ];
    let mut total: Option<Var> = None;
    for (term, lambda) in weighted {
        let Some(t) = term else { continue };
        let w = g.scale(t, lambda);
        total = Some(match total {
            Some(acc) => g.add(acc, w),
            None => w,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(0.0)),
    };
    Ok(StepLosses { total, local, global, sub, sd })
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Option<Var> {
    if terms.is_empty() {
        return None;
    }
    let col = g.concat_rows(terms);
    Some(g.weighted_sum(col, vec![1.0 / terms.len() as f64; terms.len()]))
}

/// Hooks and limits for [`run_stage`].
#[derive(Default)]
pub struct RunOptions<'a> {
    /// Stop once this many steps of the stage have been taken.
    pub stop_at: Option<u64>,
    pub on_step: Option<&'a mut dyn FnMut(&StepRecord)>,
    /// Where to write the pre-step state when a step goes non-finite.
    pub abort_snapshot: Option<PathBuf>,
    pub seeds: Option<Seeds>,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageSummary {
    pub stage: Stage,
    pub steps: u64,
    pub complete: bool,
    pub first: Option<StepRecord>,
    pub last: Option<StepRecord>,
}

/// Runs (or resumes) one stage to completion or to `opts.stop_at`.
pub fn run_stage(
    state: &mut TrainState,
    cache: &InputCache,
    train: &TrainConfig,
    stage: Stage,
    opts: &mut RunOptions,
) -> Result<StageSummary> {
    let cfg = train.stage(stage);
    cfg.validate()?;
    let resuming = state.stage == Some(stage) && !state.complete;
    if !resuming {
        let ready = match stage.previous() {
            None => state.stage.is_none(),
            Some(prev) => state.stage == Some(prev) && state.complete,
        };
        if !ready {
            return Err(Error::StageOrder {
                requested: stage.number(),
                required: stage.previous().map_or(0, Stage::number),
                have: state.stage.map_or(0, Stage::number),
            });
        }
        state.optimizer = optimizer_for(&state.model, cfg, train);
        state.stage = Some(stage);
        state.complete = false;
        state.step = 0;
    } else {
        state.optimizer.config.lr = cfg.base_lr;
        state.optimizer.config.weight_decay = train.weight_decay;
        state.optimizer.lr_scale = cfg.lr_scales().into_iter().collect();
    }

    let ds = cache.dataset;
    let train_ids = ds.indices(Split::Train);
    if train_ids.is_empty() {
        return Err(Error::DatasetMismatch("dataset has no training objects".into()));
    }
    let n_views = ds.views[train_ids[0]].len();
    let total = total_steps(train_ids.len(), cfg);
    let spp = steps_per_pass(train_ids.len(), cfg);
    let mut summary = StageSummary { stage, steps: total, complete: false, first: None, last: None };

    while state.step < total {
        if opts.stop_at.is_some_and(|s| state.step >= s) {
            return Ok(summary);
        }
        let step = state.step;
        let items = plan_step(train, cfg, &train_ids, n_views, step);
        let (record, grads) = {
            let mut g = Graph::new(&state.model.store);
            let losses = build_step_loss(&mut g, &state.model, cache, train, cfg, &items)?;
            let value = |v: Option<Var>| v.map(|v| g.value(v).item());
            let (local, global, sub, sd) =
                (value(losses.local), value(losses.global), value(losses.sub), value(losses.sd));
            let total_v = g.value(losses.total).item();
            let weighted = [
                local.unwrap_or(0.0) * cfg.lambda_local,
                global.unwrap_or(0.0) * cfg.lambda_global,
                sub.unwrap_or(0.0) * cfg.lambda_sub,
                sd.unwrap_or(0.0) * cfg.lambda_sd,
            ];
            let grads = if total_v.is_finite() {
                g.backward(losses.total)
            } else {
                Err(Error::NumericalAbort {
                    stage: stage.number(),
                    step: step as usize,
                    detail: format!("total loss is {total_v}"),
                })
            };
            let record = StepRecord {
                stage: stage.number(),
                step,
                epoch: (step / spp) as usize / cfg.passes_per_epoch,
                total: total_v,
                local,
                global,
                sub,
                sd,
                weighted,
                grad_norm: 0.0,
                tau_g: state.model.store.value(state.model.global.tau).item(),
            };
            (record, grads)
        };
        let mut grads: Gradients = match grads {
            Ok(gr) => gr,
            Err(e @ (Error::NonFinite { .. } | Error::NumericalAbort { .. })) => {
                if let Some(path) = &opts.abort_snapshot {
                    let seeds = opts.seeds.unwrap_or(Seeds { train: train.seed, init: 0, backbone: 0, dataset: 0 });
                    state.checkpoint(seeds, &opts.config_hash).save(path)?;
                }
                return Err(match e {
                    Error::NumericalAbort { .. } => e,
                    other => Error::NumericalAbort {
                        stage: stage.number(),
                        step: step as usize,
                        detail: other.to_string(),
                    },
                });
            }
            Err(e) => return Err(e),
        };
        let norm = clip_global_norm(&mut grads, train.clip_norm);
        state.optimizer.step(&mut state.model.store, &grads);
        state.model.global.clamp_tau(&mut state.model.store);
        state.step += 1;

        let record = StepRecord { grad_norm: norm, ..record };
        if let Some(f) = opts.on_step.as_mut() {
            f(&record);
        }
        if summary.first.is_none() {
            summary.first = Some(record.clone());
        }
        summary.last = Some(record);
    }
    state.complete = true;
    summary.complete = true;
    Ok(summary)
}
