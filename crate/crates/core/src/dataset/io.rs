//! Dataset persistence: a JSON manifest plus one checksummed little-endian
//! binary blob per object.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::render::{CameraView, PositionMap, ViewKind};
use super::{Dataset, DatasetConfig, ObjectInstance, SphereSurface, Split, SurfaceSample};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const OBJECT_MAGIC: &[u8; 4] = b"PXOB";
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub object_id: u32,
    pub category_id: u32,
    pub split: Split,
    pub seed: u64,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config: DatasetConfig,
    pub num_objects: usize,
    pub objects: Vec<ObjectEntry>,
}

/// Little-endian byte sink with tagged, checksummed sections.
#[derive(Default)]
pub(crate) struct Encoder {
    pub buf: Vec<u8>,
    section: Vec<u8>,
}

impl Encoder {
    pub fn u8(&mut self, v: u8) {
        self.section.push(v);
    }
    pub fn u32(&mut self, v: u32) {
        self.section.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.section.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f32s(&mut self, vs: &[f32]) {
        vs.iter().for_each(|v| self.section.extend_from_slice(&v.to_le_bytes()));
    }
    pub fn f64s(&mut self, vs: &[f64]) {
        vs.iter().for_each(|v| self.section.extend_from_slice(&v.to_le_bytes()));
    }
    pub fn u32s(&mut self, vs: &[u32]) {
        vs.iter().for_each(|v| self.section.extend_from_slice(&v.to_le_bytes()));
    }
    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.section.extend_from_slice(s.as_bytes());
    }

    /// Emits `tag`, payload length, payload, then the payload's CRC32.
    pub fn close_section(&mut self, tag: &[u8; 4]) {
        let payload = std::mem::take(&mut self.section);
        self.buf.extend_from_slice(tag);
        self.buf.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        self.buf.extend_from_slice(&payload);
        self.buf.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    }

    pub fn header(&mut self, magic: &[u8; 4], version: u32) {
        self.buf.extend_from_slice(magic);
        self.buf.extend_from_slice(&version.to_le_bytes());
    }

    /// Appends the CRC32 of everything written so far.
    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }
}

pub(crate) struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

/// Cursor over one section's payload.
pub(crate) struct Section<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
    tag: [u8; 4],
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Decoder { buf, pos: 0, path }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated { path: self.path.to_path_buf() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn header(&mut self, magic: &[u8; 4], version: u32) -> Result<()> {
        let m = self.take(4)?;
        if m != magic {
            return Err(Error::Malformed { path: self.path.to_path_buf(), detail: "bad magic".into() });
        }
        let found = u32::from_le_bytes(self.take(4)?.try_into().unwrap());
        if found != version {
            return Err(Error::VersionMismatch { path: self.path.to_path_buf(), found, expected: version });
        }
        Ok(())
    }

    pub fn section(&mut self, tag: &[u8; 4]) -> Result<Section<'a>> {
        let t = self.take(4)?;
        if t != tag {
            return Err(Error::Malformed {
                path: self.path.to_path_buf(),
                detail: format!("expected section {}, found {}", String::from_utf8_lossy(tag), String::from_utf8_lossy(t)),
            });
        }
        let len = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        let len = usize::try_from(len).map_err(|_| Error::Truncated { path: self.path.to_path_buf() })?;
        let data = self.take(len)?;
        let crc = u32::from_le_bytes(self.take(4)?.try_into().unwrap());
        if crc != crc32fast::hash(data) {
            return Err(Error::Checksum {
                path: self.path.to_path_buf(),
                section: String::from_utf8_lossy(tag).into_owned(),
            });
        }
        Ok(Section { data, pos: 0, path: self.path, tag: *tag })
    }

    pub fn finish(mut self) -> Result<()> {
        let body_end = self.pos;
        let crc = u32::from_le_bytes(self.take(4)?.try_into().unwrap());
        if crc != crc32fast::hash(&self.buf[..body_end]) {
            return Err(Error::Checksum { path: self.path.to_path_buf(), section: "file".into() });
        }
        if self.pos != self.buf.len() {
            return Err(Error::Malformed { path: self.path.to_path_buf(), detail: "trailing bytes".into() });
        }
        Ok(())
    }
}

impl<'a> Section<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(Error::Malformed {
                path: self.path.to_path_buf(),
                detail: format!("section {} too short", String::from_utf8_lossy(&self.tag)),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let b = self.take(n.checked_mul(4).ok_or_else(|| self.malformed("length overflow"))?)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(n.checked_mul(8).ok_or_else(|| self.malformed("length overflow"))?)?;
        Ok(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    pub fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let b = self.take(n.checked_mul(4).ok_or_else(|| self.malformed("length overflow"))?)?;
        Ok(b.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    }
    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.malformed("invalid utf-8"))
    }
    pub fn malformed(&self, detail: &str) -> Error {
        Error::Malformed {
            path: self.path.to_path_buf(),
            detail: format!("section {}: {detail}", String::from_utf8_lossy(&self.tag)),
        }
    }
    pub fn end(self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(self.malformed("unconsumed bytes"));
        }
        Ok(())
    }
}

fn flat3<T: Copy>(v: &[[T; 3]]) -> Vec<T> {
    v.iter().flatten().copied().collect()
}

fn encode_object(obj: &ObjectInstance, split: Split, views: &[CameraView], maps: &[PositionMap]) -> Vec<u8> {
    let mut e = Encoder::default();
    e.header(OBJECT_MAGIC, FORMAT_VERSION);

    let (h, w) = maps.first().map_or((0, 0), |m| (m.height, m.width));
    e.u32(obj.object_id);
    e.u32(obj.category_id);
    e.u64(obj.seed);
    e.u8(matches!(split, Split::Test) as u8);
    e.u32(views.len() as u32);
    e.u32(maps.len() as u32);
    e.u32(h as u32);
    e.u32(w as u32);
    e.close_section(b"META");

    e.u32(obj.vertices.len() as u32);
    e.f32s(&flat3(&obj.vertices));
    e.close_section(b"VERT");

    e.u32(obj.faces.len() as u32);
    e.u32s(&flat3(&obj.faces));
    e.u32s(&obj.face_part);
    e.close_section(b"FACE");

    e.u32(obj.part_classes.len() as u32);
    obj.part_classes.iter().for_each(|c| e.str(c));
    e.u32(obj.spheres.len() as u32);
    for s in &obj.spheres {
        e.u32(s.part_label);
        e.f32s(&[s.center[0], s.center[1], s.center[2], s.radius]);
    }
    e.close_section(b"PART");

    for nbrs in &obj.face_adjacency {
        e.u32(nbrs.len() as u32);
        e.u32s(nbrs);
    }
    e.close_section(b"ADJC");

    e.u32(obj.surface.points.len() as u32);
    let pts: Vec<f32> = obj.surface.points.iter().flatten().copied().collect();
    e.f32s(&pts);
    e.u32s(&obj.surface.faces);
    e.close_section(b"PNTS");

    for v in views {
        e.u32(v.index);
        e.u8(matches!(v.kind, ViewKind::Random) as u8);
        e.f64s(&flat3(&v.rotation));
        e.f64s(&v.translation);
        e.f64s(&[v.scale]);
        e.u32(v.height);
        e.u32(v.width);
    }
    e.close_section(b"VIEW");

    for m in maps {
        e.f32s(&m.data);
    }
    e.close_section(b"MAPS");
    e.finish()
}

struct DecodedObject {
    object: ObjectInstance,
    split: Split,
    views: Vec<CameraView>,
    maps: Vec<PositionMap>,
}

fn decode_object(buf: &[u8], path: &Path) -> Result<DecodedObject> {
    let mut d = Decoder::new(buf, path);
    d.header(OBJECT_MAGIC, FORMAT_VERSION)?;

    let mut s = d.section(b"META")?;
    let object_id = s.u32()?;
    let category_id = s.u32()?;
    let seed = s.u64()?;
    let split = if s.u8()? == 1 { Split::Test } else { Split::Train };
    let n_views = s.u32()? as usize;
    let n_maps = s.u32()? as usize;
    let (h, w) = (s.u32()? as usize, s.u32()? as usize);
    s.end()?;

    let mut s = d.section(b"VERT")?;
    let nv = s.u32()? as usize;
    let vertices = s.f32s(nv * 3)?.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    s.end()?;

    let mut s = d.section(b"FACE")?;
    let nf = s.u32()? as usize;
    let faces: Vec<[u32; 3]> = s.u32s(nf * 3)?.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let face_part = s.u32s(nf)?;
    s.end()?;
    if faces.iter().flatten().any(|&i| i as usize >= nv) {
        return Err(Error::Malformed { path: path.into(), detail: "face index out of range".into() });
    }

    let mut s = d.section(b"PART")?;
    let nc = s.u32()? as usize;
    let part_classes = (0..nc).map(|_| s.str()).collect::<Result<Vec<_>>>()?;
    let ns = s.u32()? as usize;
    let mut spheres = Vec::with_capacity(ns);
    for _ in 0..ns {
        let part_label = s.u32()?;
        let v = s.f32s(4)?;
        spheres.push(SphereSurface { part_label, center: [v[0], v[1], v[2]], radius: v[3] });
    }
    s.end()?;

    let mut s = d.section(b"ADJC")?;
    let mut face_adjacency = Vec::with_capacity(nf);
    for _ in 0..nf {
        let k = s.u32()? as usize;
        face_adjacency.push(s.u32s(k)?);
    }
    s.end()?;

    let mut s = d.section(b"PNTS")?;
    let np = s.u32()? as usize;
    let points = s
        .f32s(np * 6)?
        .chunks_exact(6)
        .map(|c| [c[0], c[1], c[2], c[3], c[4], c[5]])
        .collect();
    let point_faces = s.u32s(np)?;
    s.end()?;

    let mut s = d.section(b"VIEW")?;
    let mut views = Vec::with_capacity(n_views);
    for _ in 0..n_views {
        let index = s.u32()?;
        let kind = if s.u8()? == 1 { ViewKind::Random } else { ViewKind::Ortho };
        let r = s.f64s(9)?;
        let t = s.f64s(3)?;
        let scale = s.f64s(1)?[0];
        let (height, width) = (s.u32()?, s.u32()?);
        views.push(CameraView {
            index,
            kind,
            rotation: [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]],
            translation: [t[0], t[1], t[2]],
            scale,
            height,
            width,
        });
    }
    s.end()?;

    let mut s = d.section(b"MAPS")?;
    let mut maps = Vec::with_capacity(n_maps);
    for _ in 0..n_maps {
        maps.push(PositionMap { height: h, width: w, data: s.f32s(h * w * 4)? });
    }
    s.end()?;
    d.finish()?;

    Ok(DecodedObject {
        object: ObjectInstance {
            object_id,
            category_id,
            seed,
            vertices,
            faces,
            face_part,
            part_classes,
            spheres,
            face_adjacency,
            surface: SurfaceSample { points, faces: point_faces },
        },
        split,
        views,
        maps,
    })
}

fn object_file(id: u32) -> String {
    format!("obj_{id:05}.bin")
}

/// Writes the manifest and one blob per object under `dir`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(ds.objects.len());
    for (i, obj) in ds.objects.iter().enumerate() {
        let file = object_file(obj.object_id);
        let bytes = encode_object(obj, ds.splits[i], &ds.views[i], &ds.maps[i]);
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(ObjectEntry {
            object_id: obj.object_id,
            category_id: obj.category_id,
            split: ds.splits[i],
            seed: obj.seed,
            file,
        });
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        config: ds.config.clone(),
        num_objects: entries.len(),
        objects: entries,
    };
    let path = dir.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Malformed { path: path.clone(), detail: e.to_string() })?;
    let found = value.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != FORMAT_VERSION {
        return Err(Error::VersionMismatch { path, found, expected: FORMAT_VERSION });
    }
    serde_json::from_value(value).map_err(|e| Error::Malformed { path, detail: e.to_string() })
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    if manifest.num_objects != manifest.objects.len() {
        return Err(Error::Malformed {
            path: dir.join(MANIFEST_NAME),
            detail: format!("num_objects {} but {} entries", manifest.num_objects, manifest.objects.len()),
        });
    }
    let mut ds = Dataset {
        config: manifest.config.clone(),
        objects: Vec::with_capacity(manifest.objects.len()),
        splits: Vec::new(),
        views: Vec::new(),
        maps: Vec::new(),
    };
    for entry in &manifest.objects {
        let path: PathBuf = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let dec = decode_object(&bytes, &path)?;
        if dec.object.object_id != entry.object_id || dec.object.seed != entry.seed || dec.split != entry.split {
            return Err(Error::DatasetMismatch(format!("{} disagrees with the manifest", path.display())));
        }
        ds.objects.push(dec.object);
        ds.splits.push(dec.split);
        ds.views.push(dec.views);
        ds.maps.push(dec.maps);
    }
    Ok(ds)
}
