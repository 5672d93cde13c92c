//! The single run configuration: TOML on disk, `key=value` overrides, a
//! content hash, and the append-only run manifest.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::DatasetConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::ModelConfig;
use crate::parttransfer::TransferConfig;
use crate::trainer::checkpoint::Seeds;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub transfer: TransferConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::from_toml(&text)
    }

    /// Loads `path` (or the defaults) and applies `key=value` overrides in order.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let base = match path {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        base.with_overrides(overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Applies dotted-path overrides such as `train.stages.1.batch_size=4`.
    /// Values parse as TOML literals and fall back to bare strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (key, raw) =
                o.split_once('=').ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let value = parse_literal(raw.trim());
            set_path(&mut root, key.trim(), value)?;
        }
        let c: Config = root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.eval.validate()?;
        self.transfer.validate()?;
        let d = &self.dataset;
        if d.resolution == 0 || d.n_points == 0 || d.render_points == 0 {
            return Err(Error::Config("dataset resolution and point counts must be positive".into()));
        }
        let m = &self.model;
        if m.heads == 0 || m.shared_dim % m.heads != 0 {
            return Err(Error::Config(format!("shared_dim {} is not divisible by heads {}", m.shared_dim, m.heads)));
        }
        if m.tokenizer.num_tokens == 0 || m.tokenizer.neighbors == 0 || m.max_queries == 0 {
            return Err(Error::Config("token, neighbor and query counts must be positive".into()));
        }
        if m.tokenizer.num_tokens > d.n_points {
            return Err(Error::Config(format!("{} tokens exceed {} points", m.tokenizer.num_tokens, d.n_points)));
        }
        for s in &self.train.stages {
            if m.backbone.patch == 0 || s.resolution as usize % m.backbone.patch != 0 {
                return Err(Error::Config(format!(
                    "stage {} resolution {} is not a multiple of the patch size {}",
                    s.stage.number(),
                    s.resolution,
                    m.backbone.patch
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes to JSON");
        hex(&Sha256::digest(json.as_bytes()))
    }

    pub fn seeds(&self) -> Seeds {
        Seeds {
            train: self.train.seed,
            init: self.model.init_seed,
            backbone: self.model.backbone.seed,
            dataset: self.dataset.seed,
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn parse_literal(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let unknown = || Error::Config(format!("unknown config key {key:?}"));
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            toml::Value::Table(t) => {
                let slot = t.get_mut(*part).ok_or_else(unknown)?;
                if last {
                    *slot = coerce(slot, value)?;
                    return Ok(());
                }
                slot
            }
            toml::Value::Array(a) => {
                let idx: usize = part.parse().map_err(|_| unknown())?;
                let slot = a.get_mut(idx).ok_or_else(unknown)?;
                if last {
                    *slot = coerce(slot, value)?;
                    return Ok(());
                }
                slot
            }
            _ => return Err(unknown()),
        };
    }
    Err(unknown())
}

/// Integer literals assigned to float keys become floats.
fn coerce(old: &toml::Value, new: toml::Value) -> Result<toml::Value> {
    Ok(match (old, new) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    })
}

/// One invocation's record in the run manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_hash: String,
    pub seeds: Seeds,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub exit_code: i32,
    /// Stage-boundary metrics and other summaries, keyed by name.
    pub snapshots: serde_json::Map<String, serde_json::Value>,
}

impl RunManifest {
    /// Appends this record as one JSON line.
    pub fn append(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        let line = serde_json::to_string(self).expect("manifest serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))
    }

    pub fn read_all(path: &Path) -> Result<Vec<RunManifest>> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l)
                    .map_err(|e| Error::Malformed { path: path.to_path_buf(), detail: e.to_string() })
            })
            .collect()
    }
}
