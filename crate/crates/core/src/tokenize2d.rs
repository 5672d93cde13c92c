//! Frozen 2D stand-in backbone: per-cell geometric statistics pushed through a
//! fixed random perceptron, per-view context vectors, teacher class tokens and
//! farthest-point query selection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{CameraView, ObjectInstance, PositionMap};
use crate::error::{Error, Result};
use crate::geom::{self, cross, normalize, sub, to_f64, Vec3};
use crate::grad::{gaussian_tensor, matmul, Tensor};
use crate::pointset::{farthest_point_sample, fourier_features, FOURIER_DIM};

/// Per-cell statistics: Fourier features of the mean position, a normal proxy,
/// depth mean and spread, and alpha coverage.
pub const STAT_DIM: usize = FOURIER_DIM + 3 + 2 + 1;
const HIST_BINS: usize = 8;
const HIST_MAX: f64 = 1.5;
const TEACHER_HIDDEN: usize = 64;
const TEACHER_JITTER: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Backbone2dConfig {
    pub seed: u64,
    pub patch: usize,
    pub feature_dim: usize,
    pub hidden: usize,
    pub context_dim: usize,
    pub teacher_dim: usize,
    /// Fraction of a cell's pixels that must be foreground for it to count.
    pub min_coverage: f64,
}

impl Default for Backbone2dConfig {
    fn default() -> Self {
        Backbone2dConfig {
            seed: 7,
            patch: 8,
            feature_dim: 96,
            hidden: 128,
            context_dim: 16,
            teacher_dim: 32,
            min_coverage: 0.5,
        }
    }
}

/// Feature grid of one view. Row `u * cols + v` of `features` belongs to cell
/// `(u, v)`; invalid cells hold zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub view_index: u32,
    pub rows: usize,
    pub cols: usize,
    pub patch: usize,
    pub features: Tensor,
    pub valid: Vec<bool>,
}

impl PatchGrid {
    pub fn num_cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Pixel (row, col) sampled as the cell's query location.
    pub fn center_pixel(&self, cell: usize) -> (usize, usize) {
        let (u, v) = (cell / self.cols, cell % self.cols);
        (u * self.patch + self.patch / 2, v * self.patch + self.patch / 2)
    }

    pub fn cell_of_pixel(&self, row: usize, col: usize) -> usize {
        (row / self.patch) * self.cols + col / self.patch
    }

    pub fn valid_cells(&self) -> Vec<usize> {
        (0..self.num_cells()).filter(|&c| self.valid[c]).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Backbone2d {
    pub config: Backbone2dConfig,
    pub num_categories: usize,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    context: Tensor,
    t_w1: Tensor,
    t_b1: Tensor,
    t_w2: Tensor,
}

impl Backbone2d {
    pub fn new(config: Backbone2dConfig, num_categories: usize) -> Self {
        let mut rng = geom::rng_from(config.seed, &[0xBAC]);
        let (h, f) = (config.hidden, config.feature_dim);
        let w1 = gaussian_tensor(STAT_DIM, h, 1.0 / (STAT_DIM as f64).sqrt(), &mut rng);
        let b1 = gaussian_tensor(1, h, 0.1, &mut rng);
        let w2 = gaussian_tensor(h, f, 1.0 / (h as f64).sqrt(), &mut rng);
        let b2 = gaussian_tensor(1, f, 0.1, &mut rng);
        let context = gaussian_tensor(f, config.context_dim, 1.0 / (f as f64).sqrt(), &mut rng);
        let t_in = num_categories + 3 + HIST_BINS;
        let t_w1 = gaussian_tensor(t_in, TEACHER_HIDDEN, 1.0 / (t_in as f64).sqrt(), &mut rng);
        let t_b1 = gaussian_tensor(1, TEACHER_HIDDEN, 0.1, &mut rng);
        let t_w2 = gaussian_tensor(TEACHER_HIDDEN, config.teacher_dim, 1.0 / (TEACHER_HIDDEN as f64).sqrt(), &mut rng);
        Backbone2d { config, num_categories, w1, b1, w2, b2, context, t_w1, t_b1, t_w2 }
    }

    /// Validity mask and raw statistics for every cell of `map`.
    pub fn cell_statistics(&self, map: &PositionMap, camera: &CameraView) -> Result<(Vec<bool>, Tensor)> {
        let p = self.config.patch;
        if p == 0 || map.height % p != 0 || map.width % p != 0 {
            return Err(Error::PatchGeometry { height: map.height, width: map.width, patch: p });
        }
        let (rows, cols) = (map.height / p, map.width / p);
        let mut valid = vec![false; rows * cols];
        let mut stats = Tensor::zeros(rows * cols, STAT_DIM);
        for u in 0..rows {
            for v in 0..cols {
                let cell = u * cols + v;
                let (r0, c0) = (u * p, v * p);
                let mut covered = 0usize;
                let mut mean = [0.0; 3];
                let (mut dsum, mut dsq) = (0.0, 0.0);
                for r in r0..r0 + p {
                    for c in c0..c0 + p {
                        if map.alpha(r, c) {
                            let x = to_f64(map.xyz(r, c));
                            let d = camera.to_camera(x)[2];
                            covered += 1;
                            mean = geom::add(mean, x);
                            dsum += d;
                            dsq += d * d;
                        }
                    }
                }
                let coverage = covered as f64 / (p * p) as f64;
                if coverage < self.config.min_coverage || !map.alpha(r0 + p / 2, c0 + p / 2) {
                    continue;
                }
                valid[cell] = true;
                let n = covered as f64;
                mean = mean.map(|m| m / n);
                let dmean = dsum / n;
                let dstd = (dsq / n - dmean * dmean).max(0.0).sqrt();
                let normal = normal_proxy(map, r0, c0, p);
                let row = stats.row_mut(cell);
                row[..FOURIER_DIM].copy_from_slice(&fourier_features(mean));
                row[FOURIER_DIM..FOURIER_DIM + 3].copy_from_slice(&normal);
                row[FOURIER_DIM + 3] = dmean;
                row[FOURIER_DIM + 4] = dstd;
                row[FOURIER_DIM + 5] = coverage;
            }
        }
        Ok((valid, stats))
    }

    pub fn extract_patch_features(&self, map: &PositionMap, camera: &CameraView) -> Result<PatchGrid> {
        let (valid, stats) = self.cell_statistics(map, camera)?;
        let mut h = matmul(&stats, &self.w1);
        for r in 0..h.rows() {
            for (x, b) in h.row_mut(r).iter_mut().zip(self.b1.data()) {
                *x = (*x + b).tanh();
            }
        }
        let mut features = matmul(&h, &self.w2);
        for (r, &ok) in valid.iter().enumerate() {
            let row = features.row_mut(r);
            if ok {
                row.iter_mut().zip(self.b2.data()).for_each(|(x, b)| *x += b);
            } else {
                row.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let p = self.config.patch;
        Ok(PatchGrid {
            view_index: camera.index,
            rows: map.height / p,
            cols: map.width / p,
            patch: p,
            features,
            valid,
        })
    }

    /// Frozen linear map of the mean valid-cell feature; zero when no cell is valid.
    pub fn view_context(&self, grid: &PatchGrid) -> Vec<f64> {
        let valid = grid.valid_cells();
        if valid.is_empty() {
            return vec![0.0; self.config.context_dim];
        }
        let mut mean = Tensor::zeros(1, grid.features.cols());
        for &c in &valid {
            for (m, x) in mean.data_mut().iter_mut().zip(grid.features.row(c)) {
                *m += x;
            }
        }
        mean.scale_assign(1.0 / valid.len() as f64);
        matmul(&mean, &self.context).into_data()
    }

    /// Shape descriptor fed to the teacher: category one-hot, bounding-box
    /// extents and a point-weighted histogram of part sizes.
    pub fn teacher_input(&self, inst: &ObjectInstance) -> Vec<f64> {
        let mut x = vec![0.0; self.num_categories + 3 + HIST_BINS];
        if (inst.category_id as usize) < self.num_categories {
            x[inst.category_id as usize] = 1.0;
        }
        let o = self.num_categories;
        let (lo, hi) = bounds(inst.vertices.iter().map(|&v| to_f64(v)));
        for k in 0..3 {
            x[o + k] = hi[k] - lo[k];
        }
        let labels = inst.num_part_labels();
        let mut counts = vec![0usize; labels];
        for i in 0..inst.surface.points.len() {
            counts[inst.point_part(i) as usize] += 1;
        }
        let total = inst.surface.points.len().max(1) as f64;
        for (label, &count) in counts.iter().enumerate() {
            let verts = inst
                .faces
                .iter()
                .zip(&inst.face_part)
                .filter(|(_, &l)| l as usize == label)
                .flat_map(|(f, _)| f.iter().map(|&i| to_f64(inst.vertices[i as usize])));
            let (plo, phi) = bounds(verts);
            let diag = geom::norm(sub(phi, plo));
            let bin = ((diag / HIST_MAX * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
            x[o + 3 + bin] += count as f64 / total;
        }
        x
    }

    /// Unit teacher token for one view: the shape descriptor through a frozen
    /// perceptron, plus a small deterministic view-dependent perturbation.
    pub fn teacher_token(&self, inst: &ObjectInstance, view_index: u32) -> Vec<f64> {
        let x = Tensor::row_vector(self.teacher_input(inst));
        let mut h = matmul(&x, &self.t_w1);
        h.data_mut().iter_mut().zip(self.t_b1.data()).for_each(|(a, b)| *a = (*a + b).tanh());
        let mut d = matmul(&h, &self.t_w2).into_data();
        let n = d.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let mut rng = geom::rng_from(self.config.seed, &[0x7EAC, inst.seed, view_index as u64]);
        for v in &mut d {
            *v = *v / n + TEACHER_JITTER * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        let n = d.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        d.iter_mut().for_each(|v| *v /= n);
        d
    }

    /// Mean of the per-view teacher tokens.
    pub fn instance_teacher(&self, inst: &ObjectInstance, views: &[u32]) -> Vec<f64> {
        let mut t = vec![0.0; self.config.teacher_dim];
        for &v in views {
            for (a, b) in t.iter_mut().zip(self.teacher_token(inst, v)) {
                *a += b;
            }
        }
        t.iter_mut().for_each(|a| *a /= views.len().max(1) as f64);
        t
    }
}

fn bounds(points: impl Iterator<Item = Vec3>) -> (Vec3, Vec3) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    let mut any = false;
    for p in points {
        any = true;
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    if any {
        (lo, hi)
    } else {
        ([0.0; 3], [0.0; 3])
    }
}

/// Surface normal estimate from in-cell finite differences of the stored
/// positions, oriented toward the camera (negative depth axis).
fn normal_proxy(map: &PositionMap, r0: usize, c0: usize, p: usize) -> Vec3 {
    let mut dx = [0.0; 3];
    let mut dy = [0.0; 3];
    for r in r0..r0 + p {
        for c in c0..c0 + p {
            if !map.alpha(r, c) {
                continue;
            }
            let x = to_f64(map.xyz(r, c));
            if c + 1 < c0 + p && map.alpha(r, c + 1) {
                dx = geom::add(dx, sub(to_f64(map.xyz(r, c + 1)), x));
            }
            if r + 1 < r0 + p && map.alpha(r + 1, c) {
                dy = geom::add(dy, sub(to_f64(map.xyz(r + 1, c)), x));
            }
        }
    }
    // right x down = forward, so the camera-facing normal is its negation.
    normalize(cross(dx, dy)).map(|v| -v)
}

/// One geometric query: the position stored at a valid cell's center pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Query {
    pub q: [f32; 3],
    /// Position of the source view in the list passed to [`sample_queries`].
    pub view: usize,
    pub cell: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct QuerySet {
    pub entries: Vec<Query>,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn coords(&self) -> Vec<Vec3> {
        self.entries.iter().map(|e| to_f64(e.q)).collect()
    }
}

/// Candidate pool = every valid cell center across views (view-major, cells
/// row-major); farthest-point sampling trims it to `m_max`.
pub fn sample_queries(grids: &[&PatchGrid], maps: &[&PositionMap], m_max: usize) -> QuerySet {
    let mut pool = Vec::new();
    for (view, (grid, map)) in grids.iter().zip(maps).enumerate() {
        for cell in grid.valid_cells() {
            let (r, c) = grid.center_pixel(cell);
            pool.push(Query { q: map.xyz(r, c), view, cell });
        }
    }
    let coords: Vec<Vec3> = pool.iter().map(|e| to_f64(e.q)).collect();
    let keep = farthest_point_sample(&coords, m_max);
    QuerySet { entries: keep.into_iter().map(|i| pool[i]).collect() }
}
