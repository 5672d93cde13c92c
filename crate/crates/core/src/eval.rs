//! Localization accuracy, retrieval metrics, evaluation protocols and the
//! cross-modal query directions.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::dataset::render::HORIZONTAL_ORTHO;
use crate::dataset::{ObjectInstance, ViewKind};
use crate::error::{Error, Result};
use crate::geom::{dist, rng_from, to_f64, Vec3};
use crate::grad::{Graph, Tensor};
use crate::model::{InputCache, Model, PreparedView};
use crate::tokenize3d::TokenField;

pub const K_LIST: [usize; 5] = [1, 2, 3, 5, 10];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seed: u64,
    pub protocols: Vec<Protocol>,
    pub k_list: Vec<usize>,
    /// Foreground pixels sampled per view for localization queries.
    pub pixels_per_view: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { seed: 7, protocols: Protocol::ALL.to_vec(), k_list: K_LIST.to_vec(), pixels_per_view: 20 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_list.is_empty() || self.k_list.contains(&0) {
            return Err(Error::Config("k_list must be nonempty with positive entries".into()));
        }
        if self.pixels_per_view == 0 {
            return Err(Error::Config("pixels_per_view must be positive".into()));
        }
        Ok(())
    }
}

/// `(1 - d / (sqrt(3) L)) * 100`, clamped to `[0, 100]`.
pub fn loc_score(d_star: f64, edge: f64) -> f64 {
    let d_norm = 3f64.sqrt() * edge;
    ((1.0 - d_star / d_norm) * 100.0).clamp(0.0, 100.0)
}

/// Indices of `gallery` rows by descending dot product with `q`; equal
/// similarities keep index order.
pub fn rank_by_similarity(q: &[f64], gallery: &Tensor) -> Vec<usize> {
    let sims: Vec<f64> = (0..gallery.rows()).map(|r| dot(q, gallery.row(r))).collect();
    let mut idx: Vec<usize> = (0..sims.len()).collect();
    idx.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    idx
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocAccQuery {
    pub object: Option<usize>,
    /// Query pixel, with `view` the dataset view index.
    pub pixel: Option<Pixel>,
    pub gt: Vec3,
    /// Retrieved token indices, best first, up to the largest k.
    pub top: Vec<usize>,
    /// Minimum center distance among the top k, per k.
    pub d_star: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pixel {
    pub view: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocAccResult {
    pub k_list: Vec<usize>,
    pub scores: Vec<f64>,
    pub queries: Vec<LocAccQuery>,
}

impl LocAccResult {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.k_list.iter().position(|&x| x == k).map(|i| self.scores[i])
    }
}

/// Scores ranked token lists against ground-truth coordinates.
pub fn loc_acc_from_rankings(
    rankings: &[Vec<usize>],
    gt: &[Vec3],
    centers: &[&[Vec3]],
    k_list: &[usize],
    edge: f64,
) -> Result<LocAccResult> {
    if rankings.is_empty() {
        return Err(Error::InvalidArgument("localization accuracy needs at least one query".into()));
    }
    if !(edge > 0.0) {
        return Err(Error::InvalidArgument(format!("bounding-box edge must be positive, got {edge}")));
    }
    let kmax = k_list.iter().copied().max().unwrap_or(0);
    let mut sums = vec![0.0; k_list.len()];
    let mut queries = Vec::with_capacity(rankings.len());
    for (i, ranking) in rankings.iter().enumerate() {
        let top: Vec<usize> = ranking.iter().copied().take(kmax).collect();
        let mut d_star = Vec::with_capacity(k_list.len());
        for (j, &k) in k_list.iter().enumerate() {
            let d = top.iter().take(k).map(|&n| dist(gt[i], centers[i][n])).fold(f64::INFINITY, f64::min);
            sums[j] += loc_score(d, edge);
            d_star.push(d);
        }
        queries.push(LocAccQuery { object: None, pixel: None, gt: gt[i], top, d_star });
    }
    let scores = sums.iter().map(|s| s / rankings.len() as f64).collect();
    Ok(LocAccResult { k_list: k_list.to_vec(), scores, queries })
}

/// LocAcc of 2D query descriptors against one token set.
pub fn loc_acc(
    query_desc: &Tensor,
    gt: &[Vec3],
    token_desc: &Tensor,
    centers: &[Vec3],
    k_list: &[usize],
    edge: f64,
) -> Result<LocAccResult> {
    let rankings: Vec<Vec<usize>> = (0..query_desc.rows()).map(|q| rank_by_similarity(query_desc.row(q), token_desc)).collect();
    let c: Vec<&[Vec3]> = vec![centers; rankings.len()];
    loc_acc_from_rankings(&rankings, gt, &c, k_list, edge)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub k_list: Vec<usize>,
    pub recall: Vec<f64>,
    pub mrr: f64,
    /// 1-based rank of the first same-category gallery item per query.
    pub first_correct: Vec<Option<usize>>,
}

impl RetrievalResult {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.k_list.iter().position(|&x| x == k).map(|i| self.recall[i])
    }
}

pub fn retrieval_eval(
    queries: &Tensor,
    query_labels: &[u32],
    gallery: &Tensor,
    gallery_labels: &[u32],
    k_list: &[usize],
) -> Result<RetrievalResult> {
    if gallery.rows() == 0 {
        return Err(Error::InvalidArgument("retrieval gallery is empty".into()));
    }
    if queries.rows() == 0 {
        return Err(Error::InvalidArgument("retrieval needs at least one query".into()));
    }
    let mut first_correct = Vec::with_capacity(queries.rows());
    for q in 0..queries.rows() {
        let ranking = rank_by_similarity(queries.row(q), gallery);
        let hit = ranking.iter().position(|&g| gallery_labels[g] == query_labels[q]).map(|p| p + 1);
        first_correct.push(hit);
    }
    Ok(summarize_ranks(first_correct, k_list))
}

/// Recall@k and MRR (both as percentages) from first-correct ranks.
pub fn summarize_ranks(first_correct: Vec<Option<usize>>, k_list: &[usize]) -> RetrievalResult {
    let n = first_correct.len().max(1) as f64;
    let recall =
        k_list.iter().map(|&k| first_correct.iter().filter(|r| r.is_some_and(|r| r <= k)).count() as f64 / n * 100.0).collect();
    let mrr = first_correct.iter().map(|r| r.map_or(0.0, |r| 1.0 / r as f64)).sum::<f64>() / n * 100.0;
    RetrievalResult { k_list: k_list.to_vec(), recall, mrr, first_correct }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "s1-random")]
    S1Random,
    #[serde(rename = "s4-random")]
    S4Random,
    #[serde(rename = "s4-ortho")]
    S4Ortho,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::S1Random, Protocol::S4Random, Protocol::S4Ortho];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::S1Random => "s1-random",
            Protocol::S4Random => "s4-random",
            Protocol::S4Ortho => "s4-ortho",
        }
    }

    /// View indices of `object` used under this protocol.
    pub fn views(self, cache: &InputCache, object: usize, seed: u64) -> Result<Vec<usize>> {
        let views = &cache.dataset.views[object];
        if self == Protocol::S4Ortho {
            let idx: Vec<usize> = HORIZONTAL_ORTHO.iter().map(|&v| v as usize).collect();
            if idx.iter().any(|&v| v >= views.len() || views[v].kind != ViewKind::Ortho) {
                return Err(Error::DatasetMismatch(format!("object {object} lacks the horizontal axis views")));
            }
            return Ok(idx);
        }
        let random: Vec<usize> = (0..views.len()).filter(|&v| views[v].kind == ViewKind::Random).collect();
        let s = if self == Protocol::S1Random { 1 } else { 4 };
        if random.len() < s {
            return Err(Error::DatasetMismatch(format!("object {object} has {} random views, need {s}", random.len())));
        }
        let mut rng = rng_from(seed, &[0xE7A1, object as u64]);
        let mut pick: Vec<usize> = sample_indices(&mut rng, random.len(), s).into_iter().map(|i| random[i]).collect();
        pick.sort_unstable();
        Ok(pick)
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown protocol {s:?} (expected s1-random, s4-random or s4-ortho)")))
    }
}

/// Descriptors of one object under a set of views.
#[derive(Clone, Debug)]
pub struct EncodedObject {
    pub object: usize,
    pub views: Vec<PreparedView>,
    /// Unit local descriptors of every valid cell, view-major.
    pub cell_desc: Tensor,
    /// Row of `cell_desc` for each (view position, cell).
    pub cell_row: Vec<Vec<Option<usize>>>,
    pub token_desc: Tensor,
    pub centers: Vec<Vec3>,
    pub global_2d: Option<Vec<f64>>,
    pub global_3d: Vec<f64>,
}

impl EncodedObject {
    /// Local descriptor row for a pixel of the view at position `view`.
    pub fn pixel_row(&self, view: usize, row: usize, col: usize) -> Result<usize> {
        let v = self
            .views
            .get(view)
            .ok_or_else(|| Error::InvalidArgument(format!("view position {view} out of range")))?;
        if row >= v.map.height || col >= v.map.width || !v.map.alpha(row, col) {
            return Err(Error::BackgroundPixel { row, col });
        }
        let cell = v.grid.cell_of_pixel(row, col);
        self.cell_row[view][cell].ok_or(Error::BackgroundPixel { row, col })
    }
}

pub fn encode_object(
    model: &Model,
    cache: &InputCache,
    object: usize,
    views: &[usize],
    resolution: u32,
    fusion: bool,
) -> Result<EncodedObject> {
    let prepared = cache.prepare_views(&model.backbone, object, views, resolution)?;
    let field = cache.field(object)?;
    let mut g = Graph::new(&model.store);
    let vt = model.encode_views(&mut g, &prepared);
    let all: Vec<usize> = (0..g.value(vt.tokens).rows()).collect();
    let d2 = model.local_2d(&mut g, &vt, &all);
    let h3 = model.encode_tokens(&mut g, field);
    let d3 = model.local_3d(&mut g, h3);
    let any_valid = vt.rows_per_view.iter().any(|r| !r.is_empty());
    let global_2d = if any_valid {
        let g2 = model.global_2d(&mut g, &vt, &prepared, fusion, &vec![true; prepared.len()])?;
        Some(g.value(g2).data().to_vec())
    } else {
        None
    };
    let g3 = model.global_3d(&mut g, h3);
    Ok(EncodedObject {
        object,
        cell_desc: g.value(d2).clone(),
        cell_row: vt.cell_row.clone(),
        token_desc: g.value(d3).clone(),
        centers: field.centers.clone(),
        global_2d,
        global_3d: g.value(g3).data().to_vec(),
        views: prepared,
    })
}

/// Foreground pixels on valid cells, up to `per_view` per view, drawn
/// without replacement.
pub fn sample_pixels(enc: &EncodedObject, per_view: usize, seed: u64) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for (vi, v) in enc.views.iter().enumerate() {
        let mut pool = Vec::new();
        for r in 0..v.map.height {
            for c in 0..v.map.width {
                if v.map.alpha(r, c) && enc.cell_row[vi][v.grid.cell_of_pixel(r, c)].is_some() {
                    pool.push((vi, r, c));
                }
            }
        }
        let mut rng = rng_from(seed, &[0x9E1, enc.object as u64, v.camera_index as u64]);
        let n = per_view.min(pool.len());
        let mut pick: Vec<usize> = sample_indices(&mut rng, pool.len(), n).into_vec();
        pick.sort_unstable();
        out.extend(pick.into_iter().map(|i| pool[i]));
    }
    out
}

/// Model, random-token baseline and nearest-token ceiling on the same queries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalReport {
    pub protocol: Protocol,
    pub num_objects: usize,
    pub num_queries: usize,
    pub model: LocAccResult,
    pub random_baseline: LocAccResult,
    pub oracle: LocAccResult,
}

pub fn evaluate_local(
    model: &Model,
    cache: &InputCache,
    objects: &[usize],
    protocol: Protocol,
    resolution: u32,
    cfg: &EvalConfig,
) -> Result<LocalReport> {
    let seed = cfg.seed;
    let mut model_rank = Vec::new();
    let mut random_rank = Vec::new();
    let mut oracle_rank = Vec::new();
    let mut gts = Vec::new();
    let mut encs = Vec::new();
    let mut owner = Vec::new();
    let mut pixels = Vec::new();
    for &o in objects {
        let views = protocol.views(cache, o, seed)?;
        let enc = encode_object(model, cache, o, &views, resolution, false)?;
        for (qi, (v, r, c)) in sample_pixels(&enc, cfg.pixels_per_view, seed).into_iter().enumerate() {
            let gt = to_f64(enc.views[v].map.xyz(r, c));
            let row = enc.cell_row[v][enc.views[v].grid.cell_of_pixel(r, c)].expect("sampled on a valid cell");
            model_rank.push(rank_by_similarity(enc.cell_desc.row(row), &enc.token_desc));
            let n = enc.centers.len();
            let mut rng = rng_from(seed, &[0xBA5E, o as u64, qi as u64]);
            random_rank.push(sample_indices(&mut rng, n, n).into_vec());
            let mut by_dist: Vec<usize> = (0..n).collect();
            by_dist.sort_by(|&a, &b| dist(gt, enc.centers[a]).total_cmp(&dist(gt, enc.centers[b])).then(a.cmp(&b)));
            oracle_rank.push(by_dist);
            gts.push(gt);
            owner.push(encs.len());
            pixels.push(Pixel { view: enc.views[v].camera_index as usize, row: r, col: c });
        }
        encs.push(enc);
    }
    let centers: Vec<&[Vec3]> = owner.iter().map(|&i| encs[i].centers.as_slice()).collect();
    let edge = crate::dataset::ObjectInstance::BBOX_EDGE;
    let score = |ranks: &[Vec<usize>]| -> Result<LocAccResult> {
        let mut r = loc_acc_from_rankings(ranks, &gts, &centers, &cfg.k_list, edge)?;
        for (q, (p, &o)) in r.queries.iter_mut().zip(pixels.iter().zip(&owner)) {
            q.pixel = Some(*p);
            q.object = Some(objects[o]);
        }
        Ok(r)
    };
    Ok(LocalReport {
        protocol,
        num_objects: objects.len(),
        num_queries: gts.len(),
        model: score(&model_rank)?,
        random_baseline: score(&random_rank)?,
        oracle: score(&oracle_rank)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub protocol: Protocol,
    pub result: RetrievalResult,
    /// Expected R@1 of a uniformly random ranking, as a percentage.
    pub chance_r1: f64,
    /// Expected MRR of a uniformly random ranking, as a percentage.
    pub chance_mrr: f64,
}

/// Image-to-shape retrieval: each object's 2D global descriptor against the
/// 3D global descriptors of all `objects`.
pub fn evaluate_retrieval(
    model: &Model,
    cache: &InputCache,
    objects: &[usize],
    protocol: Protocol,
    resolution: u32,
    fusion: bool,
    cfg: &EvalConfig,
) -> Result<RetrievalReport> {
    let seed = cfg.seed;
    let mut queries = Vec::with_capacity(objects.len());
    let mut gal = Vec::new();
    let mut labels = Vec::new();
    let dim = model.config.global_dim;
    for &o in objects {
        let views = protocol.views(cache, o, seed)?;
        let enc = encode_object(model, cache, o, &views, resolution, fusion)?;
        queries.push(enc.global_2d);
        gal.extend(enc.global_3d);
        labels.push(cache.dataset.objects[o].category_id);
    }
    let gallery = Tensor::from_vec(objects.len(), dim, gal)?;
    // An object whose protocol views show no valid cell has no 2D descriptor
    // and counts as a miss.
    let first_correct = queries
        .iter()
        .zip(&labels)
        .map(|(q, &l)| {
            let q = q.as_ref()?;
            rank_by_similarity(q, &gallery).iter().position(|&g| labels[g] == l).map(|p| p + 1)
        })
        .collect();
    let result = summarize_ranks(first_correct, &cfg.k_list);
    let (chance_r1, chance_mrr) = chance_levels(&labels);
    Ok(RetrievalReport { protocol, result, chance_r1, chance_mrr })
}

/// Expected R@1 and MRR (percent) of a uniformly random gallery ordering when
/// queries and gallery share `labels`.
pub fn chance_levels(labels: &[u32]) -> (f64, f64) {
    let n = labels.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let (mut r1, mut mrr) = (0.0, 0.0);
    for &l in labels {
        let m = labels.iter().filter(|&&x| x == l).count();
        r1 += m as f64 / n as f64;
        // First-hit rank r has probability C(n-r, m-1) / C(n, m).
        let mut p_none_before = 1.0;
        for r in 1..=n - m + 1 {
            let p_hit = p_none_before * m as f64 / (n - r + 1) as f64;
            mrr += p_hit / r as f64;
            p_none_before *= 1.0 - m as f64 / (n - r + 1) as f64;
        }
    }
    (r1 / n as f64 * 100.0, mrr / n as f64 * 100.0)
}

/// Tokens of the encoded object ranked for a 2D pixel query.
pub fn query_2d_to_3d(enc: &EncodedObject, view: usize, row: usize, col: usize) -> Result<Vec<(usize, f64)>> {
    let r = enc.pixel_row(view, row, col)?;
    let q = enc.cell_desc.row(r);
    Ok(rank_by_similarity(q, &enc.token_desc).into_iter().map(|n| (n, dot(q, enc.token_desc.row(n)))).collect())
}

/// A ranked pixel: view position, pixel and similarity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelHit {
    pub view: usize,
    pub row: usize,
    pub col: usize,
    pub similarity: f64,
}

/// Valid cells of the encoded views ranked for a 3D token query, each
/// reported at its center pixel.
pub fn query_3d_to_2d(enc: &EncodedObject, token: usize) -> Result<Vec<PixelHit>> {
    if token >= enc.token_desc.rows() {
        return Err(Error::InvalidArgument(format!("token {token} out of range")));
    }
    let q = enc.token_desc.row(token);
    let mut cells = Vec::new();
    for (vi, rows) in enc.cell_row.iter().enumerate() {
        for (cell, r) in rows.iter().enumerate() {
            if let Some(r) = r {
                cells.push((vi, cell, *r));
            }
        }
    }
    let rows: Vec<usize> = cells.iter().map(|c| c.2).collect();
    let sub = enc.cell_desc_rows(&rows);
    Ok(rank_by_similarity(q, &sub)
        .into_iter()
        .map(|i| {
            let (vi, cell, r) = cells[i];
            let (row, col) = enc.views[vi].grid.center_pixel(cell);
            PixelHit { view: vi, row, col, similarity: dot(q, enc.cell_desc.row(r)) }
        })
        .collect())
}

impl EncodedObject {
    fn cell_desc_rows(&self, rows: &[usize]) -> Tensor {
        let d = self.cell_desc.cols();
        let data: Vec<f64> = rows.iter().flat_map(|&r| self.cell_desc.row(r).iter().copied()).collect();
        Tensor::from_vec(rows.len(), d, data).expect("row gather")
    }
}

/// Tokens of `other` ranked for token `token` of `source`.
pub fn query_3d_to_3d(source: &EncodedObject, token: usize, other: &EncodedObject) -> Result<Vec<(usize, f64)>> {
    if token >= source.token_desc.rows() {
        return Err(Error::InvalidArgument(format!("token {token} out of range")));
    }
    let q = source.token_desc.row(token);
    Ok(rank_by_similarity(q, &other.token_desc).into_iter().map(|n| (n, dot(q, other.token_desc.row(n)))).collect())
}

/// Unit local descriptors of every token of one object.
pub fn token_descriptors(model: &Model, cache: &InputCache, object: usize) -> Result<Tensor> {
    let field = cache.field(object)?;
    let mut g = Graph::new(&model.store);
    let h3 = model.encode_tokens(&mut g, field);
    let d3 = model.local_3d(&mut g, h3);
    Ok(g.value(d3).clone())
}

/// Majority part label over each token's neighborhood (ties: lowest label).
pub fn token_parts(instance: &ObjectInstance, field: &TokenField) -> Vec<u32> {
    field
        .neighbor_index
        .iter()
        .map(|nb| {
            let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
            for &i in nb {
                *counts.entry(instance.point_part(i)).or_default() += 1;
            }
            counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).map_or(0, |(l, _)| l)
        })
        .collect()
}

/// Fraction (percent) of tokens whose top-1 match on the paired instance has
/// the same dominant part label.
pub fn part_consistency(model: &Model, cache: &InputCache, pairs: &[(usize, usize)]) -> Result<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for &(a, b) in pairs {
        let (da, db) = (token_descriptors(model, cache, a)?, token_descriptors(model, cache, b)?);
        let pa = token_parts(&cache.dataset.objects[a], cache.field(a)?);
        let pb = token_parts(&cache.dataset.objects[b], cache.field(b)?);
        for n in 0..da.rows() {
            let top = rank_by_similarity(da.row(n), &db)[0];
            hits += (pa[n] == pb[top]) as usize;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::InvalidArgument("part consistency needs at least one pair".into()));
    }
    Ok(hits as f64 / total as f64 * 100.0)
}

/// A pixel sent to its best token and back to the best cell of the same view.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTrip {
    pub token: usize,
    pub back: PixelHit,
    pub gt: Vec3,
    /// Surface point of the foreground pixel nearest the returned cell's center.
    pub back_gt: Vec3,
    pub distance: f64,
    /// World-space edge length of one grid cell in this view.
    pub cell_extent: f64,
}

pub fn round_trip(enc: &EncodedObject, cache: &InputCache, view: usize, row: usize, col: usize) -> Result<RoundTrip> {
    let token = query_2d_to_3d(enc, view, row, col)?[0].0;
    let back = query_3d_to_2d(enc, token)?
        .into_iter()
        .find(|h| h.view == view)
        .ok_or_else(|| Error::InvalidArgument(format!("view position {view} has no valid cell")))?;
    let v = &enc.views[view];
    let p = v.grid.patch;
    let cell = v.grid.cell_of_pixel(back.row, back.col);
    let (r0, c0) = ((cell / v.grid.cols) * p, (cell % v.grid.cols) * p);
    let mut best: Option<((usize, usize), usize)> = None;
    for r in r0..(r0 + p).min(v.map.height) {
        for c in c0..(c0 + p).min(v.map.width) {
            if v.map.alpha(r, c) {
                let d2 = r.abs_diff(back.row).pow(2) + c.abs_diff(back.col).pow(2);
                if best.is_none_or(|(_, b)| d2 < b) {
                    best = Some(((r, c), d2));
                }
            }
        }
    }
    let ((br, bc), _) = best.expect("valid cells contain foreground pixels");
    let gt = to_f64(v.map.xyz(row, col));
    let back_gt = to_f64(v.map.xyz(br, bc));
    let camera = cache.dataset.views[enc.object][v.camera_index as usize].with_resolution(v.map.width as u32);
    Ok(RoundTrip { token, back, gt, back_gt, distance: dist(gt, back_gt), cell_extent: camera.pixel_size() * p as f64 })
}
