//! 3D tokens: farthest-point centers over the surface samples, k-nearest
//! neighborhoods and a trainable permutation-invariant set encoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::ObjectInstance;
use crate::error::{Error, Result};
use crate::geom::{sub, Vec3};
use crate::grad::nn::Linear;
use crate::grad::{Graph, Group, ParamStore, Tensor, Var};
use crate::pointset::{farthest_point_sample, fourier_features, k_nearest, FOURIER_DIM};

/// Relative neighbor offsets are a few hundredths of a unit; this brings them
/// to the same order as the unit normals.
const OFFSET_SCALE: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tokenizer3dConfig {
    pub num_tokens: usize,
    pub neighbors: usize,
    pub point_dim: usize,
    pub latent_dim: usize,
}

impl Default for Tokenizer3dConfig {
    fn default() -> Self {
        Tokenizer3dConfig { num_tokens: 128, neighbors: 16, point_dim: 32, latent_dim: 64 }
    }
}

/// Token centers and their neighborhoods for one object.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenField {
    /// Index of each center in the surface sample.
    pub center_index: Vec<usize>,
    pub centers: Vec<Vec3>,
    /// Row `n * k + j`: (neighbor - center) * OFFSET_SCALE, then the neighbor normal.
    pub neighborhoods: Tensor,
    /// Surface-sample indices of each neighborhood, nearest first.
    pub neighbor_index: Vec<Vec<usize>>,
    /// Fourier features of each center.
    pub center_features: Tensor,
    pub k: usize,
}

impl TokenField {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

/// Farthest-point centers (nearest-to-centroid first, lowest-index ties).
pub fn select_centers(points: &[Vec3], num_tokens: usize) -> Result<Vec<usize>> {
    if points.len() < num_tokens || num_tokens == 0 {
        return Err(Error::TooFewPoints { have: points.len(), need: num_tokens.max(1) });
    }
    Ok(farthest_point_sample(points, num_tokens))
}

pub fn build_field(points: &[[f32; 6]], num_tokens: usize, k: usize) -> Result<TokenField> {
    let coords: Vec<Vec3> = points.iter().map(|p| [p[0] as f64, p[1] as f64, p[2] as f64]).collect();
    let center_index = select_centers(&coords, num_tokens)?;
    let k = k.min(coords.len());
    let centers: Vec<Vec3> = center_index.iter().map(|&i| coords[i]).collect();
    let mut neighborhoods = Tensor::zeros(centers.len() * k, 6);
    let mut center_features = Tensor::zeros(centers.len(), FOURIER_DIM);
    let mut neighbor_index = Vec::with_capacity(centers.len());
    for (n, &c) in centers.iter().enumerate() {
        let nbrs = k_nearest(&coords, c, k);
        for (j, &i) in nbrs.iter().enumerate() {
            let row = neighborhoods.row_mut(n * k + j);
            let d = sub(coords[i], c);
            for a in 0..3 {
                row[a] = d[a] * OFFSET_SCALE;
                row[3 + a] = points[i][3 + a] as f64;
            }
        }
        center_features.row_mut(n).copy_from_slice(&fourier_features(c));
        neighbor_index.push(nbrs);
    }
    Ok(TokenField { center_index, centers, neighborhoods, neighbor_index, center_features, k })
}

pub fn tokenize_instance(inst: &ObjectInstance, cfg: &Tokenizer3dConfig) -> Result<TokenField> {
    build_field(&inst.surface.points, cfg.num_tokens, cfg.neighbors)
}

/// Per-point perceptron, max and mean pooling per neighborhood, the center's
/// Fourier features, then a two-layer perceptron to the latent width.
#[derive(Clone, Debug)]
pub struct SetEncoder {
    pub point: Linear,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl SetEncoder {
    pub fn new(store: &mut ParamStore, cfg: &Tokenizer3dConfig, rng: &mut impl Rng) -> Self {
        let g = Group::Vae3d;
        SetEncoder {
            point: Linear::new(store, "vae3d.point", g, 6, cfg.point_dim, rng),
            fc1: Linear::new(store, "vae3d.fc1", g, 2 * cfg.point_dim + FOURIER_DIM, cfg.latent_dim, rng),
            fc2: Linear::new(store, "vae3d.fc2", g, cfg.latent_dim, cfg.latent_dim, rng),
        }
    }

    /// Latents `z_n`, one row per token.
    pub fn forward(&self, g: &mut Graph, field: &TokenField) -> Var {
        let k = field.k;
        let groups: Vec<Vec<usize>> = (0..field.len()).map(|n| (n * k..(n + 1) * k).collect()).collect();
        let x = g.constant(field.neighborhoods.clone());
        let h = self.point.forward(g, x);
        let h = g.gelu(h);
        let mx = g.segment_max(h, &groups);
        let mean = g.segment_mean(h, &groups);
        let pe = g.constant(field.center_features.clone());
        let cat = g.concat_cols(&[mx, mean, pe]);
        let z = self.fc1.forward(g, cat);
        let z = g.gelu(z);
        self.fc2.forward(g, z)
    }
}
