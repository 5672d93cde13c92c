//! Command-line front end. Everything lives under one output directory:
//!
//! ```text
//! out/data/            dataset (gen-data)
//! out/stage{1,2,3}.ckpt
//! out/metrics.jsonl    one training step record per line
//! out/eval.jsonl       evaluation records
//! out/manifest.jsonl   one record per invocation
//! ```

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::config::{Config, RunManifest};
use crate::dataset::io::{read_dataset, read_manifest, write_dataset, MANIFEST_NAME};
use crate::dataset::templates::builtin_templates;
use crate::dataset::{generate_dataset, Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{
    encode_object, evaluate_local, evaluate_retrieval, query_2d_to_3d, query_3d_to_2d, query_3d_to_3d, Protocol,
};
use crate::model::{InputCache, Model};
use crate::parttransfer::{face_iou, transfer, PartMask};
use crate::selftest::{self, CheckResult};
use crate::trainer::checkpoint::Checkpoint;
use crate::trainer::{model_for_stage, run_stage, RunOptions, Stage, StepRecord, TrainState};

pub const DATA_DIR: &str = "data";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";
pub const MANIFEST_FILE: &str = "manifest.jsonl";

pub fn checkpoint_path(out: &Path, stage: Stage) -> PathBuf {
    out.join(format!("stage{}.ckpt", stage.number()))
}

#[derive(Parser, Debug)]
#[command(name = "pixpoint", version, about = "Pixel-to-point correspondence and image-to-shape retrieval")]
pub struct Cli {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.stages.0.epochs=1`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Run directory.
    #[arg(long, default_value = "run", global = true)]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic dataset into OUT/data.
    GenData,
    /// Train (or resume) one stage.
    Train {
        #[arg(long)]
        stage: u8,
        /// Stop after this many steps of the stage (the checkpoint stays resumable).
        #[arg(long)]
        stop_at: Option<u64>,
        /// Skip the evaluation snapshot at the end of the stage.
        #[arg(long)]
        no_eval: bool,
    },
    /// Localization accuracy of pixel queries against 3D tokens.
    EvalLocal {
        #[arg(long)]
        protocol: Option<Protocol>,
        #[command(flatten)]
        sel: Selection,
        /// Write every per-query record to this JSONL file.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Image-to-shape retrieval over the chosen split.
    EvalRetrieval {
        #[arg(long)]
        protocol: Option<Protocol>,
        #[command(flatten)]
        sel: Selection,
    },
    /// Ranked matches in one of the query directions.
    Query {
        #[arg(long, value_enum)]
        direction: Direction,
        #[arg(long)]
        object: usize,
        /// View index for 2d-to-3d.
        #[arg(long)]
        view: Option<usize>,
        /// `row,col` for 2d-to-3d.
        #[arg(long, value_parser = parse_pair)]
        pixel: Option<(usize, usize)>,
        /// Token index for 3d-to-2d and 3d-to-3d.
        #[arg(long)]
        token: Option<usize>,
        /// Comma-separated view indices for 3d-to-2d (default: the s4-random views).
        #[arg(long, value_delimiter = ',')]
        views: Vec<usize>,
        /// Target object for 3d-to-3d.
        #[arg(long)]
        other: Option<usize>,
        #[arg(long, default_value_t = 10)]
        top: usize,
        #[command(flatten)]
        sel: Selection,
    },
    /// Transfer a clicked 2D part onto the object's mesh.
    PartTransfer {
        #[arg(long)]
        object: usize,
        #[arg(long)]
        view: usize,
        /// `row,col` of the click.
        #[arg(long, value_parser = parse_pair)]
        click: (usize, usize),
        /// JSON part mask replacing the rendered ground-truth masks.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[command(flatten)]
        sel: Selection,
    },
    /// Finite-difference gradient checks.
    GradCheck,
    /// Gradient checks, loss closed forms and metric oracles.
    Selftest,
}

#[derive(clap::Args, Debug, Clone)]
pub struct Selection {
    /// Checkpoint to load (default: the latest complete stage in OUT).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Render resolution (default: the checkpoint stage's resolution).
    #[arg(long)]
    pub resolution: Option<u32>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Direction {
    #[value(name = "2d-to-3d")]
    TwoToThree,
    #[value(name = "3d-to-2d")]
    ThreeToTwo,
    #[value(name = "3d-to-3d")]
    ThreeToThree,
}

fn parse_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected row,col, got {s:?}"))?;
    let p = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}"));
    Ok((p(a)?, p(b)?))
}

/// What a finished command leaves behind for the manifest.
#[derive(Default)]
struct Outcome {
    exit_code: i32,
    dataset: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    metrics: Option<PathBuf>,
    snapshots: Map<String, Value>,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Every parsed invocation appends a manifest record.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let argv: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    let config = Config::resolve(cli.config.as_deref(), &cli.overrides);
    let result = config.as_ref().map_err(clone_config_error).and_then(|c| dispatch(&cli, c));
    let outcome = match result {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            Outcome { exit_code: e.exit_code(), ..Outcome::default() }
        }
    };
    let (hash, seeds) = match &config {
        Ok(c) => (c.hash(), c.seeds()),
        Err(_) => (String::new(), Config::default().seeds()),
    };
    let record = RunManifest {
        command: command_name(&cli.command).into(),
        args: argv,
        config_hash: hash,
        seeds,
        dataset: outcome.dataset,
        checkpoint: outcome.checkpoint,
        metrics: outcome.metrics,
        exit_code: outcome.exit_code,
        snapshots: outcome.snapshots,
    };
    if let Err(e) = record.append(&cli.out.join(MANIFEST_FILE)) {
        eprintln!("error: {e}");
        return if outcome.exit_code == 0 { e.exit_code() } else { outcome.exit_code };
    }
    outcome.exit_code
}

fn clone_config_error(e: &Error) -> Error {
    Error::Config(match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    })
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenData => "gen-data",
        Command::Train { .. } => "train",
        Command::EvalLocal { .. } => "eval-local",
        Command::EvalRetrieval { .. } => "eval-retrieval",
        Command::Query { .. } => "query",
        Command::PartTransfer { .. } => "part-transfer",
        Command::GradCheck => "grad-check",
        Command::Selftest => "selftest",
    }
}

fn dispatch(cli: &Cli, cfg: &Config) -> Result<Outcome> {
    let out = cli.out.as_path();
    match &cli.command {
        Command::GenData => gen_data(out, cfg),
        Command::Train { stage, stop_at, no_eval } => {
            let stage = Stage::from_number(*stage)
                .ok_or_else(|| Error::Config(format!("stage must be 1, 2 or 3, got {stage}")))?;
            train(out, cfg, stage, *stop_at, !no_eval)
        }
        Command::EvalLocal { protocol, sel, dump } => eval_local_cmd(out, cfg, *protocol, sel, dump.as_deref()),
        Command::EvalRetrieval { protocol, sel } => eval_retrieval_cmd(out, cfg, *protocol, sel),
        Command::Query { direction, object, view, pixel, token, views, other, top, sel } => {
            let q = QueryArgs { direction: *direction, object: *object, view: *view, pixel: *pixel, token: *token, other: *other, top: *top };
            query_cmd(out, cfg, &q, views, sel)
        }
        Command::PartTransfer { object, view, click, mask, sel } => {
            part_transfer_cmd(out, cfg, *object, *view, *click, mask.as_deref(), sel)
        }
        Command::GradCheck => Ok(checks_outcome(selftest::gradient_checks())),
        Command::Selftest => Ok(checks_outcome(selftest::run_all())),
    }
}

fn emit<T: Serialize>(record: &T) {
    println!("{}", serde_json::to_string(record).expect("record serializes"));
}

fn append_line<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(record).expect("record serializes");
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

fn checks_outcome(results: Vec<CheckResult>) -> Outcome {
    let mut snapshots = Map::new();
    for r in &results {
        emit(r);
        snapshots.insert(r.name.clone(), json!({ "passed": r.passed, "worst": r.worst }));
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    eprintln!("{} checks, {failed} failed", results.len());
    Outcome { exit_code: i32::from(failed > 0), snapshots, ..Outcome::default() }
}

fn gen_data(out: &Path, cfg: &Config) -> Result<Outcome> {
    let ds = generate_dataset(&cfg.dataset, &builtin_templates())?;
    let dir = out.join(DATA_DIR);
    let manifest = write_dataset(&ds, &dir)?;
    let mut snapshots = Map::new();
    snapshots.insert("objects".into(), json!(manifest.num_objects));
    snapshots.insert("train".into(), json!(ds.indices(Split::Train).len()));
    snapshots.insert("test".into(), json!(ds.indices(Split::Test).len()));
    eprintln!("wrote {} objects to {}", manifest.num_objects, dir.display());
    Ok(Outcome { dataset: Some(dir), snapshots, ..Outcome::default() })
}

/// Reads OUT/data and checks it was generated with this config.
pub fn load_dataset(out: &Path, cfg: &Config) -> Result<Dataset> {
    let dir = out.join(DATA_DIR);
    if !dir.join(MANIFEST_NAME).exists() {
        return Err(Error::DatasetMismatch(format!("no dataset at {} (run gen-data first)", dir.display())));
    }
    let manifest = read_manifest(&dir)?;
    if manifest.config != cfg.dataset {
        return Err(Error::DatasetMismatch(format!(
            "dataset at {} was generated with a different dataset config",
            dir.display()
        )));
    }
    read_dataset(&dir)
}

fn train(out: &Path, cfg: &Config, stage: Stage, stop_at: Option<u64>, eval: bool) -> Result<Outcome> {
    let path = checkpoint_path(out, stage);
    if let Some(prev) = stage.previous() {
        if !path.exists() && !checkpoint_path(out, prev).exists() {
            return Err(Error::MissingCheckpoint(checkpoint_path(out, prev)));
        }
    }
    let ds = load_dataset(out, cfg)?;
    let cache = InputCache::new(&ds, cfg.model.tokenizer.clone());
    let fresh = || Model::new(cfg.model.clone(), ds.num_categories());
    let hash = cfg.hash();
    let mut state = if path.exists() {
        let ck = Checkpoint::load(&path)?;
        if ck.config_hash != hash {
            return Err(Error::ConfigHashMismatch { checkpoint: ck.config_hash, config: hash });
        }
        TrainState::from_checkpoint(fresh()?, &ck, &cfg.train)?
    } else if let Some(prev) = stage.previous() {
        let prev_path = checkpoint_path(out, prev);
        let ck = Checkpoint::load(&prev_path)?;
        if ck.stage != prev || !ck.complete {
            return Err(Error::StageOrder {
                requested: stage.number(),
                required: prev.number(),
                have: if ck.complete { ck.stage.number() } else { ck.stage.number().saturating_sub(1) },
            });
        }
        let model = model_for_stage(fresh()?, &ck, cfg.train.stage(stage))?;
        TrainState { stage: Some(prev), complete: true, ..TrainState::fresh(model) }
    } else {
        TrainState::fresh(fresh()?)
    };

    let mut outcome = Outcome { dataset: Some(out.join(DATA_DIR)), checkpoint: Some(path.clone()), ..Outcome::default() };
    if state.stage == Some(stage) && state.complete {
        eprintln!("stage {} is already complete at {}", stage.number(), path.display());
        return Ok(outcome);
    }

    let metrics = out.join(METRICS_FILE);
    let mut log_err: Option<Error> = None;
    let mut on_step = |r: &StepRecord| {
        if log_err.is_none() {
            log_err = append_line(&metrics, r).err();
        }
        if r.step % 50 == 0 {
            eprintln!("stage {} step {} loss {:.5} |g| {:.4}", r.stage, r.step, r.total, r.grad_norm);
        }
    };
    let mut opts = RunOptions {
        stop_at,
        on_step: Some(&mut on_step),
        abort_snapshot: Some(out.join(format!("stage{}-abort.ckpt", stage.number()))),
        seeds: Some(cfg.seeds()),
        config_hash: hash.clone(),
    };
    let summary = run_stage(&mut state, &cache, &cfg.train, stage, &mut opts);
    drop(opts);
    let summary = summary?;
    if let Some(e) = log_err {
        return Err(e);
    }
    state.checkpoint(cfg.seeds(), &hash).save(&path)?;
    outcome.metrics = Some(metrics);
    outcome.snapshots.insert("steps_taken".into(), json!(state.step));
    outcome.snapshots.insert("steps_total".into(), json!(summary.steps));
    outcome.snapshots.insert("complete".into(), json!(summary.complete));
    if let Some(last) = &summary.last {
        outcome.snapshots.insert("last_step".into(), serde_json::to_value(last).expect("record serializes"));
    }
    if summary.complete && eval {
        let snap = stage_snapshot(&state.model, &cache, cfg, stage)?;
        append_line(&out.join(EVAL_FILE), &json!({ "source": "train", "stage": stage.number(), "metrics": snap }))?;
        outcome.snapshots.insert("eval".into(), snap);
    }
    Ok(outcome)
}

/// Held-out metrics at the end of a stage: localization for every configured
/// protocol and, once the global branch is trained, retrieval.
pub fn stage_snapshot(model: &Model, cache: &InputCache, cfg: &Config, stage: Stage) -> Result<Value> {
    let sc = cfg.train.stage(stage);
    let objects = cache.dataset.indices(Split::Test);
    let mut snap = Map::new();
    for &p in &cfg.eval.protocols {
        let l = evaluate_local(model, cache, &objects, p, sc.resolution, &cfg.eval)?;
        snap.insert(format!("local/{p}"), local_summary(&l));
        if sc.enable_global {
            let r = evaluate_retrieval(model, cache, &objects, p, sc.resolution, sc.enable_fusion, &cfg.eval)?;
            snap.insert(format!("retrieval/{p}"), serde_json::to_value(&r).expect("report serializes"));
        }
    }
    Ok(Value::Object(snap))
}

fn local_summary(l: &crate::eval::LocalReport) -> Value {
    json!({
        "protocol": l.protocol,
        "num_objects": l.num_objects,
        "num_queries": l.num_queries,
        "k": l.model.k_list,
        "model": l.model.scores,
        "random_baseline": l.random_baseline.scores,
        "oracle": l.oracle.scores,
    })
}

/// A trained model plus the stage settings it is evaluated under.
struct Loaded {
    model: Model,
    stage: Stage,
    checkpoint: PathBuf,
    resolution: u32,
    fusion: bool,
}

fn load_model(out: &Path, cfg: &Config, ds: &Dataset, sel: &Selection) -> Result<Loaded> {
    let path = match &sel.checkpoint {
        Some(p) => p.clone(),
        None => {
            let mut found = None;
            for s in Stage::ALL.into_iter().rev() {
                let p = checkpoint_path(out, s);
                if p.exists() && Checkpoint::load(&p)?.complete {
                    found = Some(p);
                    break;
                }
            }
            found.ok_or_else(|| Error::MissingCheckpoint(out.join("stage*.ckpt")))?
        }
    };
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path));
    }
    let ck = Checkpoint::load(&path)?;
    let sc = cfg.train.stage(ck.stage);
    let model = model_for_stage(Model::new(cfg.model.clone(), ds.num_categories())?, &ck, sc)?;
    Ok(Loaded {
        model,
        stage: ck.stage,
        checkpoint: path,
        resolution: sel.resolution.unwrap_or(sc.resolution),
        fusion: sc.enable_fusion,
    })
}

fn protocols(cfg: &Config, p: Option<Protocol>) -> Vec<Protocol> {
    p.map_or_else(|| cfg.eval.protocols.clone(), |p| vec![p])
}

fn eval_local_cmd(out: &Path, cfg: &Config, p: Option<Protocol>, sel: &Selection, dump: Option<&Path>) -> Result<Outcome> {
    let ds = load_dataset(out, cfg)?;
    let cache = InputCache::new(&ds, cfg.model.tokenizer.clone());
    let m = load_model(out, cfg, &ds, sel)?;
    let objects = ds.indices(sel.split.into());
    let mut outcome = Outcome { dataset: Some(out.join(DATA_DIR)), checkpoint: Some(m.checkpoint.clone()), ..Outcome::default() };
    if let Some(d) = dump {
        // Start a fresh dump for this invocation.
        if d.exists() {
            fs::remove_file(d).map_err(|e| Error::io(d, e))?;
        }
    }
    for p in protocols(cfg, p) {
        let l = evaluate_local(&m.model, &cache, &objects, p, m.resolution, &cfg.eval)?;
        let record = json!({ "kind": "loc-acc", "stage": m.stage.number(), "resolution": m.resolution, "summary": local_summary(&l) });
        emit(&record);
        append_line(&out.join(EVAL_FILE), &record)?;
        if let Some(d) = dump {
            for q in &l.model.queries {
                append_line(d, &json!({ "protocol": p, "query": q }))?;
            }
        }
        outcome.snapshots.insert(format!("local/{p}"), local_summary(&l));
    }
    Ok(outcome)
}

fn eval_retrieval_cmd(out: &Path, cfg: &Config, p: Option<Protocol>, sel: &Selection) -> Result<Outcome> {
    let ds = load_dataset(out, cfg)?;
    let cache = InputCache::new(&ds, cfg.model.tokenizer.clone());
    let m = load_model(out, cfg, &ds, sel)?;
    let objects = ds.indices(sel.split.into());
    let mut outcome = Outcome { dataset: Some(out.join(DATA_DIR)), checkpoint: Some(m.checkpoint.clone()), ..Outcome::default() };
    for p in protocols(cfg, p) {
        let r = evaluate_retrieval(&m.model, &cache, &objects, p, m.resolution, m.fusion, &cfg.eval)?;
        let v = serde_json::to_value(&r).expect("report serializes");
        let record = json!({ "kind": "retrieval", "stage": m.stage.number(), "resolution": m.resolution, "report": v });
        emit(&record);
        append_line(&out.join(EVAL_FILE), &record)?;
        outcome.snapshots.insert(format!("retrieval/{p}"), v);
    }
    Ok(outcome)
}

struct QueryArgs {
    direction: Direction,
    object: usize,
    view: Option<usize>,
    pixel: Option<(usize, usize)>,
    token: Option<usize>,
    other: Option<usize>,
    top: usize,
}

fn check_object(ds: &Dataset, o: usize) -> Result<()> {
    if o >= ds.len() {
        return Err(Error::InvalidArgument(format!("object {o} out of range (dataset has {})", ds.len())));
    }
    Ok(())
}

fn query_cmd(out: &Path, cfg: &Config, q: &QueryArgs, views: &[usize], sel: &Selection) -> Result<Outcome> {
    let ds = load_dataset(out, cfg)?;
    let cache = InputCache::new(&ds, cfg.model.tokenizer.clone());
    let m = load_model(out, cfg, &ds, sel)?;
    check_object(&ds, q.object)?;
    let need = |what: &str| Error::InvalidArgument(format!("--{what} is required for this direction"));
    let default_views = || Protocol::S4Random.views(&cache, q.object, cfg.eval.seed);
    let results: Vec<Value> = match q.direction {
        Direction::TwoToThree => {
            let view = q.view.ok_or_else(|| need("view"))?;
            let (row, col) = q.pixel.ok_or_else(|| need("pixel"))?;
            let enc = encode_object(&m.model, &cache, q.object, &[view], m.resolution, false)?;
            query_2d_to_3d(&enc, 0, row, col)?
                .into_iter()
                .take(q.top)
                .map(|(t, s)| json!({ "token": t, "center": enc.centers[t], "similarity": s }))
                .collect()
        }
        Direction::ThreeToTwo => {
            let token = q.token.ok_or_else(|| need("token"))?;
            let vs = if views.is_empty() { default_views()? } else { views.to_vec() };
            let enc = encode_object(&m.model, &cache, q.object, &vs, m.resolution, false)?;
            query_3d_to_2d(&enc, token)?
                .into_iter()
                .take(q.top)
                .map(|h| json!({ "view": vs[h.view], "row": h.row, "col": h.col, "similarity": h.similarity }))
                .collect()
        }
        Direction::ThreeToThree => {
            let token = q.token.ok_or_else(|| need("token"))?;
            let other = q.other.ok_or_else(|| need("other"))?;
            check_object(&ds, other)?;
            let a = encode_object(&m.model, &cache, q.object, &default_views()?, m.resolution, false)?;
            let b = encode_object(&m.model, &cache, other, &Protocol::S4Random.views(&cache, other, cfg.eval.seed)?, m.resolution, false)?;
            query_3d_to_3d(&a, token, &b)?
                .into_iter()
                .take(q.top)
                .map(|(t, s)| json!({ "token": t, "center": b.centers[t], "similarity": s }))
                .collect()
        }
    };
    for r in &results {
        emit(r);
    }
    let mut outcome = Outcome { dataset: Some(out.join(DATA_DIR)), checkpoint: Some(m.checkpoint), ..Outcome::default() };
    outcome.snapshots.insert("results".into(), json!(results.len()));
    Ok(outcome)
}

fn part_transfer_cmd(
    out: &Path,
    cfg: &Config,
    object: usize,
    view: usize,
    click: (usize, usize),
    mask: Option<&Path>,
    sel: &Selection,
) -> Result<Outcome> {
    let ds = load_dataset(out, cfg)?;
    let cache = InputCache::new(&ds, cfg.model.tokenizer.clone());
    let m = load_model(out, cfg, &ds, sel)?;
    check_object(&ds, object)?;
    let mask: Option<PartMask> = match mask {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Some(serde_json::from_str(&text).map_err(|e| Error::Malformed { path: p.to_path_buf(), detail: e.to_string() })?)
        }
        None => None,
    };
    let report = transfer(&m.model, &cache, object, view, click, m.resolution, &cfg.transfer, mask.as_ref())?;
    let iou = match (&report.region, report.part_label) {
        (Some(r), Some(label)) => Some(face_iou(&r.faces, &ds.objects[object].faces_of_part(label))),
        (None, Some(_)) => Some(0.0),
        _ => None,
    };
    emit(&json!({ "report": report, "iou": iou }));
    let mut outcome = Outcome { dataset: Some(out.join(DATA_DIR)), checkpoint: Some(m.checkpoint), ..Outcome::default() };
    outcome.snapshots.insert("region_faces".into(), json!(report.region.as_ref().map_or(0, |r| r.faces.len())));
    outcome.snapshots.insert("stopped".into(), json!(report.stopped));
    outcome.snapshots.insert("iou".into(), json!(iou));
    Ok(outcome)
}
