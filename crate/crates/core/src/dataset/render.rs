use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geom::{cross, dot, mat_vec, normalize, Mat3, Vec3};

/// Default world-space extent covered by the image width.
pub const CAMERA_SCALE: f64 = 1.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewKind {
    Ortho,
    Random,
}

/// Orthographic camera. Rows of `rotation` are the camera's right, down and
/// forward axes in world coordinates; `x_cam = rotation * x + translation`.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraView {
    pub index: u32,
    pub kind: ViewKind,
    pub rotation: Mat3,
    pub translation: Vec3,
    /// World units spanned by the image width.
    pub scale: f64,
    pub height: u32,
    pub width: u32,
}

impl CameraView {
    /// Camera placed along `direction` from `target`, looking back at it.
    pub fn looking_at(index: u32, kind: ViewKind, direction: Vec3, target: Vec3, scale: f64, size: u32) -> Self {
        let forward = normalize(direction.map(|d| -d));
        let up = if forward[1].abs() > 0.99 { [0.0, 0.0, -forward[1].signum()] } else { [0.0, 1.0, 0.0] };
        let right = normalize(cross(forward, up));
        let down = cross(forward, right);
        let rotation = [right, down, forward];
        let t = mat_vec(&rotation, target);
        CameraView { index, kind, rotation, translation: t.map(|x| -x), scale, height: size, width: size }
    }

    pub fn with_resolution(&self, size: u32) -> Self {
        CameraView { height: size, width: size, ..self.clone() }
    }

    pub fn pixel_size(&self) -> f64 {
        self.scale / self.width as f64
    }

    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        let r = mat_vec(&self.rotation, p);
        [r[0] + self.translation[0], r[1] + self.translation[1], r[2] + self.translation[2]]
    }

    /// Continuous image coordinates (column, row) and depth.
    pub fn project(&self, p: Vec3) -> (f64, f64, f64) {
        let c = self.to_camera(p);
        let px = self.pixel_size();
        (c[0] / px + self.width as f64 / 2.0, c[1] / px + self.height as f64 / 2.0, c[2])
    }

    pub fn forward(&self) -> Vec3 {
        self.rotation[2]
    }

    /// Max deviation of `R R^T` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot(self.rotation[i], self.rotation[j]) - e).abs());
            }
        }
        worst
    }
}

/// Six axis-aligned views (+x, -x, +y, -y, +z, -z) followed by `n_random`
/// uniformly distributed directions, all aimed at the unit-cube center.
pub fn standard_views(n_random: usize, size: u32, rng: &mut impl Rng) -> Vec<CameraView> {
    let center = [0.5; 3];
    let axes: [Vec3; 6] =
        [[1., 0., 0.], [-1., 0., 0.], [0., 1., 0.], [0., -1., 0.], [0., 0., 1.], [0., 0., -1.]];
    let mut views: Vec<CameraView> = axes
        .iter()
        .enumerate()
        .map(|(i, &d)| CameraView::looking_at(i as u32, ViewKind::Ortho, d, center, CAMERA_SCALE, size))
        .collect();
    while views.len() < 6 + n_random {
        let d: Vec3 = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let n = dot(d, d);
        if !(1e-4..=1.0).contains(&n) {
            continue;
        }
        let d = normalize(d);
        let idx = views.len() as u32;
        views.push(CameraView::looking_at(idx, ViewKind::Random, d, center, CAMERA_SCALE, size));
    }
    views
}

/// Horizontal axis views (+x, -x, +z, -z).
pub const HORIZONTAL_ORTHO: [u32; 4] = [0, 1, 4, 5];

/// H x W x 4 map of (x, y, z, alpha); background pixels are all zero.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl PositionMap {
    pub fn empty(height: usize, width: usize) -> Self {
        PositionMap { height, width, data: vec![0.0; height * width * 4] }
    }

    #[inline]
    pub fn alpha(&self, row: usize, col: usize) -> bool {
        self.data[(row * self.width + col) * 4 + 3] > 0.5
    }

    #[inline]
    pub fn xyz(&self, row: usize, col: usize) -> [f32; 3] {
        let o = (row * self.width + col) * 4;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn foreground_count(&self) -> usize {
        self.data.chunks_exact(4).filter(|p| p[3] > 0.5).count()
    }
}

/// Position map plus, per pixel, the label of the winning point (`u32::MAX`
/// for background).
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub map: PositionMap,
    pub labels: Vec<u32>,
}

pub const NO_LABEL: u32 = u32::MAX;

/// Z-buffered disc splatting. Each point covers the pixels within
/// `splat_radius` of its own pixel; the nearest depth wins and exact ties keep
/// the earlier point.
pub fn splat(points: &[[f32; 3]], labels: &[u32], camera: &CameraView, splat_radius: usize) -> Rendered {
    let (h, w) = (camera.height as usize, camera.width as usize);
    let mut map = PositionMap::empty(h, w);
    let mut out_labels = vec![NO_LABEL; h * w];
    let mut depth = vec![f64::INFINITY; h * w];
    let r = splat_radius as i64;
    for (i, p) in points.iter().enumerate() {
        let (x, y, z) = camera.project([p[0] as f64, p[1] as f64, p[2] as f64]);
        let (col, row) = (x.floor() as i64, y.floor() as i64);
        for dr in -r..=r {
            for dc in -r..=r {
                if dr * dr + dc * dc > r * r {
                    continue;
                }
                let (pr, pc) = (row + dr, col + dc);
                if pr < 0 || pc < 0 || pr >= h as i64 || pc >= w as i64 {
                    continue;
                }
                let k = pr as usize * w + pc as usize;
                if z < depth[k] {
                    depth[k] = z;
                    map.data[k * 4..k * 4 + 4].copy_from_slice(&[p[0], p[1], p[2], 1.0]);
                    out_labels[k] = labels.get(i).copied().unwrap_or(NO_LABEL);
                }
            }
        }
    }
    Rendered { map, labels: out_labels }
}

/// Splat radius used at a given image size: one pixel at 64, scaled linearly.
pub fn splat_radius_for(size: u32) -> usize {
    (size as usize / 64).max(1)
}
