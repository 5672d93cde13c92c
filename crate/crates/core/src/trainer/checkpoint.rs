//! Versioned binary checkpoints: header, named parameter blobs and optimizer
//! moments, each section length-prefixed and checksummed.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Stage;
use crate::dataset::io::{Decoder, Encoder};
use crate::error::{Error, Result};
use crate::grad::optim::Moments;
use crate::grad::{AdamW, Group, ParamStore, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"PXCK";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub train: u64,
    pub init: u64,
    pub backbone: u64,
    pub dataset: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SavedParam {
    pub name: String,
    pub group: Group,
    pub decay: bool,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    /// True once the stage ran to its last step.
    pub complete: bool,
    /// Steps already taken in `stage`.
    pub step: u64,
    pub seeds: Seeds,
    pub config_hash: String,
    pub params: Vec<SavedParam>,
    pub moments: Vec<Option<Moments>>,
}

impl Checkpoint {
    pub fn capture(
        stage: Stage,
        complete: bool,
        step: u64,
        seeds: Seeds,
        config_hash: &str,
        store: &ParamStore,
        optimizer: &AdamW,
    ) -> Self {
        let params = store
            .iter()
            .map(|(_, p)| SavedParam { name: p.name.clone(), group: p.group, decay: p.decay, value: p.value.clone() })
            .collect();
        let mut moments = optimizer.state.clone();
        moments.resize(store.len(), None);
        Checkpoint { stage, complete, step, seeds, config_hash: config_hash.to_string(), params, moments }
    }

    /// Copies parameter values into `store`, which must hold the same names
    /// and shapes in the same order.
    pub fn restore_params(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::DatasetMismatch(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (id, saved) in ids.into_iter().zip(&self.params) {
            let p = store.get(id);
            if p.name != saved.name || p.value.shape() != saved.value.shape() {
                return Err(Error::DatasetMismatch(format!(
                    "parameter {} {:?} does not match checkpoint {} {:?}",
                    p.name,
                    p.value.shape(),
                    saved.name,
                    saved.value.shape()
                )));
            }
            *store.value_mut(id) = saved.value.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::default();
        e.header(MAGIC, CHECKPOINT_VERSION);
        e.u8(self.stage.number());
        e.u8(self.complete as u8);
        e.u64(self.step);
        for s in [self.seeds.train, self.seeds.init, self.seeds.backbone, self.seeds.dataset] {
            e.u64(s);
        }
        e.str(&self.config_hash);
        e.close_section(b"META");

        e.u32(self.params.len() as u32);
        for p in &self.params {
            e.str(&p.name);
            e.u8(p.group.code());
            e.u8(p.decay as u8);
            e.u32(p.value.rows() as u32);
            e.u32(p.value.cols() as u32);
            e.f64s(p.value.data());
        }
        e.close_section(b"PARM");

        e.u32(self.moments.len() as u32);
        for m in &self.moments {
            match m {
                None => e.u8(0),
                Some(m) => {
                    e.u8(1);
                    e.u64(m.step);
                    e.u32(m.m.rows() as u32);
                    e.u32(m.m.cols() as u32);
                    e.f64s(m.m.data());
                    e.f64s(m.v.data());
                }
            }
        }
        e.close_section(b"OPTM");
        e.finish()
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let mut d = Decoder::new(buf, path);
        d.header(MAGIC, CHECKPOINT_VERSION)?;

        let mut s = d.section(b"META")?;
        let stage = Stage::from_number(s.u8()?).ok_or_else(|| s.malformed("stage id"))?;
        let complete = s.u8()? != 0;
        let step = s.u64()?;
        let seeds = Seeds { train: s.u64()?, init: s.u64()?, backbone: s.u64()?, dataset: s.u64()? };
        let config_hash = s.str()?;
        s.end()?;

        let mut s = d.section(b"PARM")?;
        let n = s.u32()? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name = s.str()?;
            let group = Group::from_code(s.u8()?).ok_or_else(|| s.malformed("parameter group"))?;
            let decay = s.u8()? != 0;
            let (r, c) = (s.u32()? as usize, s.u32()? as usize);
            let value = Tensor::from_vec(r, c, s.f64s(r * c)?).map_err(|_| s.malformed("parameter shape"))?;
            params.push(SavedParam { name, group, decay, value });
        }
        s.end()?;

        let mut s = d.section(b"OPTM")?;
        let n = s.u32()? as usize;
        let mut moments = Vec::with_capacity(n);
        for _ in 0..n {
            if s.u8()? == 0 {
                moments.push(None);
                continue;
            }
            let step = s.u64()?;
            let (r, c) = (s.u32()? as usize, s.u32()? as usize);
            let m = Tensor::from_vec(r, c, s.f64s(r * c)?).map_err(|_| s.malformed("moment shape"))?;
            let v = Tensor::from_vec(r, c, s.f64s(r * c)?).map_err(|_| s.malformed("moment shape"))?;
            moments.push(Some(Moments { step, m, v }));
        }
        s.end()?;
        d.finish()?;
        Ok(Checkpoint { stage, complete, step, seeds, config_hash, params, moments })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&buf, path)
    }
}
