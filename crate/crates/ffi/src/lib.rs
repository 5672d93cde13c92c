//! C ABI over the pixpoint library.
//!
//! Every fallible function returns a [`PxStatus`]; on failure the message is
//! available from [`px_last_error`] on the same thread. Handles are opaque
//! and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use pixpoint::config::Config;
use pixpoint::dataset::io::{read_dataset, write_dataset};
use pixpoint::dataset::templates::builtin_templates;
use pixpoint::dataset::{generate_dataset, Dataset, Split};
use pixpoint::eval::{encode_object, evaluate_local, evaluate_retrieval, query_2d_to_3d, Protocol};
use pixpoint::model::{InputCache, Model};
use pixpoint::parttransfer::{face_iou, transfer};
use pixpoint::trainer::checkpoint::Checkpoint;
use pixpoint::trainer::{model_for_stage, Stage};
use pixpoint::Error;

/// Result of every fallible call. Codes 2 to 5 match the command-line exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PxStatus {
    Ok = 0,
    Failed = 1,
    Config = 2,
    MissingCheckpoint = 3,
    Dataset = 4,
    Numerical = 5,
    InvalidArgument = 10,
    BackgroundPixel = 11,
    BufferTooSmall = 12,
    Io = 13,
    Panic = 14,
}

impl From<&Error> for PxStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::Shape(_) => PxStatus::InvalidArgument,
            Error::BackgroundPixel { .. } => PxStatus::BackgroundPixel,
            Error::Io { .. } => PxStatus::Io,
            other => match other.exit_code() {
                2 => PxStatus::Config,
                3 => PxStatus::MissingCheckpoint,
                4 => PxStatus::Dataset,
                5 => PxStatus::Numerical,
                _ => PxStatus::Failed,
            },
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(status: PxStatus, msg: impl Into<String>) -> PxStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, mapping library errors and panics to status codes.
fn guard(f: impl FnOnce() -> Result<(), PxStatus>) -> PxStatus {
    set_error(String::new());
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PxStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(PxStatus::Panic, format!("internal panic: {msg}"))
        }
    }
}

trait OrStatus<T> {
    fn st(self) -> Result<T, PxStatus>;
}

impl<T> OrStatus<T> for pixpoint::Result<T> {
    fn st(self) -> Result<T, PxStatus> {
        self.map_err(|e| fail(PxStatus::from(&e), e.to_string()))
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, PxStatus> {
    if p.is_null() {
        return Err(fail(PxStatus::InvalidArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(PxStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, PxStatus> {
    p.as_ref().ok_or_else(|| fail(PxStatus::InvalidArgument, format!("{what} handle is null")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, PxStatus> {
    p.as_mut().ok_or_else(|| fail(PxStatus::InvalidArgument, format!("{what} output pointer is null")))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, need: usize, what: &str) -> Result<&'a mut [T], PxStatus> {
    if len < need {
        return Err(fail(PxStatus::BufferTooSmall, format!("{what} needs {need} entries, got {len}")));
    }
    if p.is_null() {
        return Err(fail(PxStatus::InvalidArgument, format!("{what} buffer is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Opaque run configuration.
pub struct PxConfig(Config);

/// Opaque dataset.
pub struct PxDataset(Dataset);

/// Opaque model with the stage settings it is evaluated under.
pub struct PxModel {
    model: Model,
    resolution: u32,
    fusion: bool,
}

/// Message of the last failure on this thread; empty after a success. The
/// pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn px_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn px_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Runs the command-line front end with `argc` arguments (program name
/// first) and returns its exit code.
///
/// # Safety
/// `argv` must point to `argc` valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn px_run_cli(argc: c_int, argv: *const *const c_char) -> c_int {
    if argv.is_null() || argc < 1 {
        set_error("argv is empty".into());
        return 2;
    }
    let mut args = Vec::with_capacity(argc as usize);
    for i in 0..argc as usize {
        match str_arg(*argv.add(i), "argument") {
            Ok(s) => args.push(s.to_string()),
            Err(_) => return 2,
        }
    }
    catch_unwind(|| pixpoint::cli::run(args)).unwrap_or(1)
}

/// Parses TOML (or takes the defaults when `toml` is null).
///
/// # Safety
/// `toml` must be null or NUL-terminated; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn px_config_new(toml: *const c_char, out: *mut *mut PxConfig) -> PxStatus {
    guard(|| {
        let out = out_ptr(out, "config")?;
        let cfg = if toml.is_null() { Config::default() } else { Config::from_toml(str_arg(toml, "toml")?).st()? };
        *out = Box::into_raw(Box::new(PxConfig(cfg)));
        Ok(())
    })
}

/// Applies one `key=value` override.
///
/// # Safety
/// `cfg` must come from [`px_config_new`]; `assignment` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn px_config_set(cfg: *mut PxConfig, assignment: *const c_char) -> PxStatus {
    guard(|| {
        let cfg = out_ptr(cfg, "config")?;
        let a = str_arg(assignment, "assignment")?;
        cfg.0 = cfg.0.with_overrides(&[a.to_string()]).st()?;
        Ok(())
    })
}

/// Writes the 64-character hex hash plus a NUL into `buf` (at least 65 bytes).
///
/// # Safety
/// `buf` must be writable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn px_config_hash(cfg: *const PxConfig, buf: *mut c_char, len: usize) -> PxStatus {
    guard(|| {
        let h = handle(cfg, "config")?.0.hash();
        let dst = out_slice(buf, len, h.len() + 1, "hash")?;
        for (d, b) in dst.iter_mut().zip(h.bytes()) {
            *d = b as c_char;
        }
        dst[h.len()] = 0;
        Ok(())
    })
}

/// Number of k values in the configured evaluation k list.
///
/// # Safety
/// `cfg` must be a live config handle or null.
#[no_mangle]
pub unsafe extern "C" fn px_config_k_count(cfg: *const PxConfig) -> usize {
    cfg.as_ref().map_or(0, |c| c.0.eval.k_list.len())
}

/// # Safety
/// `cfg` must come from [`px_config_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn px_config_free(cfg: *mut PxConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Generates the dataset described by `cfg` in memory.
///
/// # Safety
/// Handles must be live; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn px_dataset_generate(cfg: *const PxConfig, out: *mut *mut PxDataset) -> PxStatus {
    guard(|| {
        let cfg = handle(cfg, "config")?;
        let out = out_ptr(out, "dataset")?;
        let ds = generate_dataset(&cfg.0.dataset, &builtin_templates()).st()?;
        *out = Box::into_raw(Box::new(PxDataset(ds)));
        Ok(())
    })
}

/// # Safety
/// `dir` must be NUL-terminated; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn px_dataset_load(dir: *const c_char, out: *mut *mut PxDataset) -> PxStatus {
    guard(|| {
        let dir = str_arg(dir, "dir")?;
        let out = out_ptr(out, "dataset")?;
        let ds = read_dataset(Path::new(dir)).st()?;
        *out = Box::into_raw(Box::new(PxDataset(ds)));
        Ok(())
    })
}

/// # Safety
/// `ds` must be live; `dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn px_dataset_write(ds: *const PxDataset, dir: *const c_char) -> PxStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        write_dataset(&ds.0, Path::new(str_arg(dir, "dir")?)).st()?;
        Ok(())
    })
}

/// Number of objects, or 0 for a null handle.
///
/// # Safety
/// `ds` must be a live dataset handle or null.
#[no_mangle]
pub unsafe extern "C" fn px_dataset_len(ds: *const PxDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.len())
}

/// Category id and split (0 train, 1 test) of one object.
///
/// # Safety
/// `ds` must be live; `category` and `split` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn px_dataset_object_info(
    ds: *const PxDataset,
    object: usize,
    category: *mut u32,
    split: *mut u32,
) -> PxStatus {
    guard(|| {
        let ds = &handle(ds, "dataset")?.0;
        if object >= ds.len() {
            return Err(fail(PxStatus::InvalidArgument, format!("object {object} out of range")));
        }
        *out_ptr(category, "category")? = ds.objects[object].category_id;
        *out_ptr(split, "split")? = u32::from(ds.splits[object] == Split::Test);
        Ok(())
    })
}

/// # Safety
/// `ds` must come from a dataset constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn px_dataset_free(ds: *mut PxDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// A freshly initialized model (evaluated under stage 1 settings).
///
/// # Safety
/// Handles must be live; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn px_model_new(cfg: *const PxConfig, ds: *const PxDataset, out: *mut *mut PxModel) -> PxStatus {
    guard(|| {
        let cfg = &handle(cfg, "config")?.0;
        let ds = &handle(ds, "dataset")?.0;
        let out = out_ptr(out, "model")?;
        let model = Model::new(cfg.model.clone(), ds.num_categories()).st()?;
        let sc = cfg.train.stage(Stage::I);
        *out = Box::into_raw(Box::new(PxModel { model, resolution: sc.resolution, fusion: sc.enable_fusion }));
        Ok(())
    })
}

/// Loads a training checkpoint; the model is evaluated under the settings
/// of the stage that wrote it.
///
/// # Safety
/// Handles must be live; `path` must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn px_model_load(
    cfg: *const PxConfig,
    ds: *const PxDataset,
    path: *const c_char,
    out: *mut *mut PxModel,
) -> PxStatus {
    guard(|| {
        let cfg = &handle(cfg, "config")?.0;
        let ds = &handle(ds, "dataset")?.0;
        let path = Path::new(str_arg(path, "path")?);
        let out = out_ptr(out, "model")?;
        if !path.exists() {
            return Err(fail(PxStatus::MissingCheckpoint, format!("checkpoint not found: {}", path.display())));
        }
        let ck = Checkpoint::load(path).st()?;
        let sc = cfg.train.stage(ck.stage);
        let model = model_for_stage(Model::new(cfg.model.clone(), ds.num_categories()).st()?, &ck, sc).st()?;
        *out = Box::into_raw(Box::new(PxModel { model, resolution: sc.resolution, fusion: sc.enable_fusion }));
        Ok(())
    })
}

/// Render resolution the model is evaluated at.
///
/// # Safety
/// `model` must be a live model handle or null.
#[no_mangle]
pub unsafe extern "C" fn px_model_resolution(model: *const PxModel) -> u32 {
    model.as_ref().map_or(0, |m| m.resolution)
}

/// # Safety
/// `model` must come from a model constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn px_model_free(model: *mut PxModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

unsafe fn protocol(p: *const c_char) -> Result<Protocol, PxStatus> {
    str_arg(p, "protocol")?.parse::<Protocol>().st()
}

/// Held-out LocAcc@k for one protocol. Each output buffer needs
/// [`px_config_k_count`] entries.
///
/// # Safety
/// Handles must be live; buffers must be writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn px_eval_local(
    model: *const PxModel,
    ds: *const PxDataset,
    cfg: *const PxConfig,
    protocol_name: *const c_char,
    model_scores: *mut f64,
    baseline_scores: *mut f64,
    oracle_scores: *mut f64,
    len: usize,
) -> PxStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let ds = &handle(ds, "dataset")?.0;
        let cfg = &handle(cfg, "config")?.0;
        let p = protocol(protocol_name)?;
        let k = cfg.eval.k_list.len();
        let outs = [
            out_slice(model_scores, len, k, "model scores")?,
            out_slice(baseline_scores, len, k, "baseline scores")?,
            out_slice(oracle_scores, len, k, "oracle scores")?,
        ];
        let cache = InputCache::new(ds, cfg.model.tokenizer.clone());
        let r = evaluate_local(&m.model, &cache, &ds.indices(Split::Test), p, m.resolution, &cfg.eval).st()?;
        for (dst, src) in outs.into_iter().zip([&r.model, &r.random_baseline, &r.oracle]) {
            dst[..k].copy_from_slice(&src.scores);
        }
        Ok(())
    })
}

/// Held-out image-to-shape retrieval. `recall` needs [`px_config_k_count`]
/// entries; `mrr` and `chance_r1` receive single values.
///
/// # Safety
/// Handles must be live; pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn px_eval_retrieval(
    model: *const PxModel,
    ds: *const PxDataset,
    cfg: *const PxConfig,
    protocol_name: *const c_char,
    recall: *mut f64,
    len: usize,
    mrr: *mut f64,
    chance_r1: *mut f64,
) -> PxStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let ds = &handle(ds, "dataset")?.0;
        let cfg = &handle(cfg, "config")?.0;
        let p = protocol(protocol_name)?;
        let k = cfg.eval.k_list.len();
        let recall = out_slice(recall, len, k, "recall")?;
        let (mrr, chance) = (out_ptr(mrr, "mrr")?, out_ptr(chance_r1, "chance_r1")?);
        let cache = InputCache::new(ds, cfg.model.tokenizer.clone());
        let r = evaluate_retrieval(&m.model, &cache, &ds.indices(Split::Test), p, m.resolution, m.fusion, &cfg.eval)
            .st()?;
        recall[..k].copy_from_slice(&r.result.recall);
        *mrr = r.result.mrr;
        *chance = r.chance_r1;
        Ok(())
    })
}

/// Top tokens for a pixel of one view. Writes up to `cap` results and the
/// count into `written`.
///
/// # Safety
/// Handles must be live; `tokens` and `similarities` must be writable for
/// `cap` entries.
#[no_mangle]
pub unsafe extern "C" fn px_query_2d_to_3d(
    model: *const PxModel,
    ds: *const PxDataset,
    cfg: *const PxConfig,
    object: usize,
    view: usize,
    row: usize,
    col: usize,
    tokens: *mut u32,
    similarities: *mut f64,
    cap: usize,
    written: *mut usize,
) -> PxStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let ds = &handle(ds, "dataset")?.0;
        let cfg = &handle(cfg, "config")?.0;
        let written = out_ptr(written, "written")?;
        if object >= ds.len() {
            return Err(fail(PxStatus::InvalidArgument, format!("object {object} out of range")));
        }
        let cache = InputCache::new(ds, cfg.model.tokenizer.clone());
        let enc = encode_object(&m.model, &cache, object, &[view], m.resolution, false).st()?;
        let ranked = query_2d_to_3d(&enc, 0, row, col).st()?;
        let n = cap.min(ranked.len());
        let (t, s) = (out_slice(tokens, cap, n, "tokens")?, out_slice(similarities, cap, n, "similarities")?);
        for (i, (tok, sim)) in ranked.into_iter().take(n).enumerate() {
            t[i] = tok as u32;
            s[i] = sim;
        }
        *written = n;
        Ok(())
    })
}

/// Transfers the clicked part to the mesh. On success `n_faces` holds the
/// region size (0 when the pipeline found no region) and `iou` the face IoU
/// against the clicked part. When `cap` is too small the call returns
/// `BufferTooSmall` with the required size in `n_faces`.
///
/// # Safety
/// Handles must be live; `faces` must be writable for `cap` entries.
#[no_mangle]
pub unsafe extern "C" fn px_part_transfer(
    model: *const PxModel,
    ds: *const PxDataset,
    cfg: *const PxConfig,
    object: usize,
    view: usize,
    row: usize,
    col: usize,
    faces: *mut u32,
    cap: usize,
    n_faces: *mut usize,
    iou: *mut f64,
) -> PxStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let ds = &handle(ds, "dataset")?.0;
        let cfg = &handle(cfg, "config")?.0;
        let (n_out, iou_out) = (out_ptr(n_faces, "n_faces")?, out_ptr(iou, "iou")?);
        if object >= ds.len() {
            return Err(fail(PxStatus::InvalidArgument, format!("object {object} out of range")));
        }
        let cache = InputCache::new(ds, cfg.model.tokenizer.clone());
        let rep = transfer(&m.model, &cache, object, view, (row, col), m.resolution, &cfg.transfer, None).st()?;
        let region: &[u32] = rep.region.as_ref().map_or(&[], |r| &r.faces);
        *n_out = region.len();
        *iou_out = match rep.part_label {
            Some(l) if rep.region.is_some() => face_iou(region, &ds.objects[object].faces_of_part(l)),
            _ => 0.0,
        };
        if region.is_empty() {
            return Ok(());
        }
        let dst = out_slice(faces, cap, region.len(), "faces")?;
        dst[..region.len()].copy_from_slice(region);
        Ok(())
    })
}

/// Runs every self-check; `failed` receives the number of failing checks.
///
/// # Safety
/// `failed` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn px_selftest(failed: *mut usize) -> PxStatus {
    guard(|| {
        let failed = out_ptr(failed, "failed")?;
        *failed = pixpoint::selftest::run_all().iter().filter(|r| !r.passed).count();
        Ok(())
    })
}

/// Null-safe helper for bindings that want to reset the error slot.
#[no_mangle]
pub extern "C" fn px_clear_error() {
    set_error(String::new());
}

