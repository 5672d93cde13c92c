//! Transfers a clicked 2D part mask onto the mesh: patch activation, top-1
//! token matching with dedup, similarity filtering, DBSCAN, seed faces and a
//! bounded flood fill over face adjacency.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::dataset::render::NO_LABEL;
use crate::dataset::{ObjectInstance, Rendered};
use crate::error::{Error, Result};
use crate::eval::{encode_object, rank_by_similarity};
use crate::geom::{dist, point_triangle_distance, Vec3};
use crate::grad::Tensor;
use crate::model::{InputCache, Model};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferConfig {
    pub coverage_frac: f64,
    pub sim_min: f64,
    pub eps: f64,
    pub min_pts: usize,
    pub seed_radius: f64,
    pub flood_radius: f64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig { coverage_frac: 0.3, sim_min: 0.5, eps: 0.3, min_pts: 3, seed_radius: 0.02, flood_radius: 0.3 }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.coverage_frac > 0.0 && self.coverage_frac <= 1.0) {
            return Err(Error::Config(format!("coverage_frac must lie in (0, 1], got {}", self.coverage_frac)));
        }
        if !(self.eps > 0.0) || self.min_pts == 0 {
            return Err(Error::Config("eps must be positive and min_pts at least 1".into()));
        }
        if !(self.seed_radius >= 0.0 && self.flood_radius >= self.seed_radius) {
            return Err(Error::Config("need 0 <= seed_radius <= flood_radius".into()));
        }
        Ok(())
    }
}

/// A boolean pixel mask over one view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartMask {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<bool>,
    /// Part label the mask was rendered from, if any.
    pub part_label: Option<u32>,
}

impl PartMask {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row < self.height && col < self.width && self.pixels[row * self.width + col]
    }

    pub fn area(&self) -> usize {
        self.pixels.iter().filter(|&&p| p).count()
    }
}

/// One mask per part label visible in `rendered`, ordered by label.
pub fn part_masks(rendered: &Rendered, instance: &ObjectInstance) -> Vec<PartMask> {
    let (h, w) = (rendered.map.height, rendered.map.width);
    let mut by_label: BTreeMap<u32, Vec<bool>> = BTreeMap::new();
    for (i, &face) in rendered.labels.iter().enumerate() {
        if face == NO_LABEL {
            continue;
        }
        let label = instance.face_part[face as usize];
        by_label.entry(label).or_insert_with(|| vec![false; h * w])[i] = true;
    }
    by_label
        .into_iter()
        .map(|(label, pixels)| PartMask { height: h, width: w, pixels, part_label: Some(label) })
        .collect()
}

/// The smallest mask containing the click; ties keep the earlier mask.
pub fn select_mask(masks: &[PartMask], row: usize, col: usize) -> Result<&PartMask> {
    masks
        .iter()
        .filter(|m| m.contains(row, col))
        .min_by_key(|m| m.area())
        .ok_or(Error::BackgroundPixel { row, col })
}

/// Cells of a `patch`-sized grid whose mask coverage reaches `coverage_frac`.
pub fn activate_patches(mask: &PartMask, patch: usize, coverage_frac: f64) -> Vec<usize> {
    let (rows, cols) = (mask.height / patch, mask.width / patch);
    let mut active = Vec::new();
    for u in 0..rows {
        for v in 0..cols {
            let mut covered = 0;
            for r in u * patch..(u + 1) * patch {
                for c in v * patch..(v + 1) * patch {
                    covered += mask.contains(r, c) as usize;
                }
            }
            if covered as f64 >= coverage_frac * (patch * patch) as f64 {
                active.push(u * cols + v);
            }
        }
    }
    active
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub patch: usize,
    pub token: usize,
    pub similarity: f64,
}

/// Top-1 token per patch, then one entry per token (the most similar patch,
/// earlier patch on ties), ordered by token.
pub fn match_patches(patches: &[usize], patch_desc: &Tensor, token_desc: &Tensor) -> Vec<Match> {
    let mut best: BTreeMap<usize, Match> = BTreeMap::new();
    for (i, &patch) in patches.iter().enumerate() {
        let q = patch_desc.row(i);
        let Some(&token) = rank_by_similarity(q, token_desc).first() else { continue };
        let similarity = q.iter().zip(token_desc.row(token)).map(|(a, b)| a * b).sum();
        let m = Match { patch, token, similarity };
        best.entry(token).and_modify(|b| if similarity > b.similarity { *b = m }).or_insert(m);
    }
    best.into_values().collect()
}

/// Matches at or above `sim_min`.
pub fn filter_matches(matches: &[Match], sim_min: f64) -> Vec<Match> {
    matches.iter().copied().filter(|m| m.similarity >= sim_min).collect()
}

pub const NOISE: i32 = -1;

/// DBSCAN over `points` in index order. A point is core when at least
/// `min_pts` points (itself included) lie within `eps`; border points join
/// the first cluster that reaches them.
pub fn dbscan(points: &[Vec3], eps: f64, min_pts: usize) -> Vec<i32> {
    let n = points.len();
    let neighbors: Vec<Vec<usize>> =
        (0..n).map(|i| (0..n).filter(|&j| dist(points[i], points[j]) <= eps).collect()).collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_pts).collect();
    let mut labels = vec![NOISE; n];
    let mut next = 0;
    for start in 0..n {
        if !core[start] || labels[start] != NOISE {
            continue;
        }
        labels[start] = next;
        let mut queue = VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            for &q in &neighbors[p] {
                if labels[q] == NOISE {
                    labels[q] = next;
                    if core[q] {
                        queue.push_back(q);
                    }
                }
            }
        }
        next += 1;
    }
    labels
}

/// Largest cluster label; ties go to the lowest label.
pub fn dominant_cluster(labels: &[i32]) -> Option<i32> {
    let mut counts: BTreeMap<i32, usize> = BTreeMap::new();
    for &l in labels.iter().filter(|&&l| l != NOISE) {
        *counts.entry(l).or_default() += 1;
    }
    counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).map(|(l, _)| l)
}

/// Faces within `radius` of any of `centers`.
pub fn faces_near(instance: &ObjectInstance, centers: &[Vec3], radius: f64) -> Vec<bool> {
    (0..instance.faces.len())
        .map(|f| {
            let [a, b, c] = instance.face_vertices(f);
            centers.iter().any(|&p| point_triangle_distance(p, a, b, c) <= radius)
        })
        .collect()
}

/// A connected set of mesh faces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region3D {
    /// Sorted face indices.
    pub faces: Vec<u32>,
    pub seeds: Vec<u32>,
    pub cluster: i32,
}

/// Breadth-first expansion from each seed over faces flagged in `allowed`,
/// keeping the largest connected component (ties: the one reached from the
/// earliest seed). Seeds are always allowed.
pub fn flood_fill(seeds: &[u32], adjacency: &[Vec<u32>], allowed: &[bool]) -> Vec<u32> {
    let mut comp = vec![usize::MAX; adjacency.len()];
    let mut best: Vec<u32> = Vec::new();
    for (k, &s) in seeds.iter().enumerate() {
        if comp[s as usize] != usize::MAX {
            continue;
        }
        comp[s as usize] = k;
        let mut members = vec![s];
        let mut queue = VecDeque::from([s]);
        while let Some(f) = queue.pop_front() {
            for &g in &adjacency[f as usize] {
                let gi = g as usize;
                if comp[gi] == usize::MAX && (allowed[gi] || seeds.contains(&g)) {
                    comp[gi] = k;
                    members.push(g);
                    queue.push_back(g);
                }
            }
        }
        if members.len() > best.len() {
            best = members;
        }
    }
    best.sort_unstable();
    best
}

/// Region grown from the given 3D points: DBSCAN, seed faces near the
/// dominant cluster, bounded flood fill.
pub fn region_from_points(
    instance: &ObjectInstance,
    points: &[Vec3],
    cfg: &TransferConfig,
) -> (Vec<i32>, Option<Region3D>) {
    let labels = dbscan(points, cfg.eps, cfg.min_pts);
    let Some(cluster) = dominant_cluster(&labels) else { return (labels, None) };
    let dominant: Vec<Vec3> = points.iter().zip(&labels).filter(|(_, &l)| l == cluster).map(|(&p, _)| p).collect();
    let seeds: Vec<u32> =
        faces_near(instance, &dominant, cfg.seed_radius).iter().enumerate().filter(|(_, &b)| b).map(|(f, _)| f as u32).collect();
    if seeds.is_empty() {
        return (labels, None);
    }
    let allowed = faces_near(instance, &dominant, cfg.flood_radius);
    let faces = flood_fill(&seeds, &instance.face_adjacency, &allowed);
    (labels, Some(Region3D { faces, seeds, cluster }))
}

/// Where the pipeline stopped without a region.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoRegion {
    NoActivePatch,
    NoConfidentMatch,
    NoCluster,
    NoSeedFace,
}

/// Every intermediate set of one transfer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub object: usize,
    pub view: usize,
    pub click: (usize, usize),
    pub part_label: Option<u32>,
    pub mask_area: usize,
    pub active: Vec<usize>,
    /// Active patches without a descriptor (no visible center pixel).
    pub skipped: Vec<usize>,
    pub matches: Vec<Match>,
    pub kept: Vec<Match>,
    pub cluster_labels: Vec<i32>,
    pub region: Option<Region3D>,
    pub stopped: Option<NoRegion>,
}

/// Runs the full pipeline on one clicked view. `mask` replaces the rendered
/// part masks when given.
pub fn transfer(
    model: &Model,
    cache: &InputCache,
    object: usize,
    view: usize,
    click: (usize, usize),
    resolution: u32,
    cfg: &TransferConfig,
    mask: Option<&PartMask>,
) -> Result<TransferReport> {
    cfg.validate()?;
    let instance = &cache.dataset.objects[object];
    let rendered = cache.render(object, view, resolution)?;
    let (row, col) = click;
    if row >= rendered.map.height || col >= rendered.map.width || !rendered.map.alpha(row, col) {
        return Err(Error::BackgroundPixel { row, col });
    }
    let masks = match mask {
        Some(m) => {
            if (m.height, m.width) != (rendered.map.height, rendered.map.width) {
                return Err(Error::InvalidArgument(format!(
                    "mask is {}x{}, view is {}x{}",
                    m.height, m.width, rendered.map.height, rendered.map.width
                )));
            }
            vec![m.clone()]
        }
        None => part_masks(&rendered, instance),
    };
    let selected = select_mask(&masks, row, col)?;

    let enc = encode_object(model, cache, object, &[view], resolution, false)?;
    let grid = &enc.views[0].grid;
    let active = activate_patches(selected, grid.patch, cfg.coverage_frac);
    let (with_desc, skipped): (Vec<usize>, Vec<usize>) = active.iter().partition(|&&c| enc.cell_row[0][c].is_some());
    let rows: Vec<usize> = with_desc.iter().map(|&c| enc.cell_row[0][c].expect("partitioned")).collect();
    let d = enc.cell_desc.cols();
    let patch_desc =
        Tensor::from_vec(rows.len(), d, rows.iter().flat_map(|&r| enc.cell_desc.row(r).iter().copied()).collect())?;
    let matches = match_patches(&with_desc, &patch_desc, &enc.token_desc);
    let kept = filter_matches(&matches, cfg.sim_min);

    let mut report = TransferReport {
        object,
        view,
        click,
        part_label: selected.part_label,
        mask_area: selected.area(),
        active,
        skipped,
        matches,
        kept,
        cluster_labels: Vec::new(),
        region: None,
        stopped: None,
    };
    if report.active.len() == report.skipped.len() {
        report.stopped = Some(NoRegion::NoActivePatch);
        return Ok(report);
    }
    if report.kept.is_empty() {
        report.stopped = Some(NoRegion::NoConfidentMatch);
        return Ok(report);
    }
    let points: Vec<Vec3> = report.kept.iter().map(|m| enc.centers[m.token]).collect();
    let (labels, region) = region_from_points(instance, &points, cfg);
    report.stopped = match &region {
        Some(_) => None,
        None if dominant_cluster(&labels).is_none() => Some(NoRegion::NoCluster),
        None => Some(NoRegion::NoSeedFace),
    };
    report.cluster_labels = labels;
    report.region = region;
    Ok(report)
}

/// Intersection over union of two face sets.
pub fn face_iou(a: &[u32], b: &[u32]) -> f64 {
    let sa: std::collections::BTreeSet<u32> = a.iter().copied().collect();
    let sb: std::collections::BTreeSet<u32> = b.iter().copied().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 1.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}
