//! Farthest-point sampling, k-nearest neighbors and positional features.

use std::f64::consts::PI;

use crate::geom::{dist2, Vec3};

/// Farthest-point sampling of up to `k` indices.
///
/// The first pick is the point nearest the centroid; each later pick
/// maximizes the distance to the already-selected set. Ties go to the lowest
/// index. When `k >= points.len()` every index is returned in input order.
pub fn farthest_point_sample(points: &[Vec3], k: usize) -> Vec<usize> {
    let n = points.len();
    if k >= n {
        return (0..n).collect();
    }
    if k == 0 {
        return Vec::new();
    }
    let mut centroid = [0.0; 3];
    for p in points {
        for a in 0..3 {
            centroid[a] += p[a];
        }
    }
    centroid = centroid.map(|c| c / n as f64);

    let first = argmin_by(n, |i| dist2(points[i], centroid));
    let mut picked = Vec::with_capacity(k);
    picked.push(first);
    let mut min_d: Vec<f64> = points.iter().map(|&p| dist2(p, points[first])).collect();
    while picked.len() < k {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in min_d.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        picked.push(best);
        for (i, d) in min_d.iter_mut().enumerate() {
            *d = d.min(dist2(points[i], points[best]));
        }
    }
    picked
}

fn argmin_by(n: usize, f: impl Fn(usize) -> f64) -> usize {
    let mut best = 0;
    let mut best_v = f64::INFINITY;
    for i in 0..n {
        let v = f(i);
        if v < best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Indices of the `k` points nearest `query`, nearest first; equal distances
/// order by index.
pub fn k_nearest(points: &[Vec3], query: Vec3, k: usize) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, &p)| (dist2(p, query), i)).collect();
    let k = k.min(keyed.len());
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < keyed.len() && k > 0 {
        keyed.select_nth_unstable_by(k - 1, cmp);
    }
    keyed.truncate(k);
    keyed.sort_by(cmp);
    keyed.into_iter().map(|(_, i)| i).collect()
}

/// Index of the nearest point; ties go to the lowest index.
pub fn nearest(points: &[Vec3], query: Vec3) -> usize {
    argmin_by(points.len(), |i| dist2(points[i], query))
}

pub const FOURIER_FREQS: usize = 4;
pub const FOURIER_DIM: usize = 3 + 3 * 2 * FOURIER_FREQS;

/// `[2p - 1, sin(2^k pi p), cos(2^k pi p)]` for k = 0..FOURIER_FREQS, per axis.
pub fn fourier_features(p: Vec3) -> [f64; FOURIER_DIM] {
    let mut out = [0.0; FOURIER_DIM];
    for a in 0..3 {
        out[a] = 2.0 * p[a] - 1.0;
    }
    let mut o = 3;
    for k in 0..FOURIER_FREQS {
        let f = (1u32 << k) as f64 * PI;
        for a in 0..3 {
            out[o] = (f * p[a]).sin();
            out[o + 1] = (f * p[a]).cos();
            o += 2;
        }
    }
    out
}
