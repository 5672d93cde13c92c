//! The full trainable model plus the frozen 2D backbone, and the per-object
//! inputs it consumes.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::alignment::{project_local, LocalHeads, SharedEncoders};
use crate::dataset::render::splat_radius_for;
use crate::dataset::{render_view, Dataset, PositionMap, Rendered, SurfaceSample};
use crate::error::{Error, Result};
use crate::geom;
use crate::globalbranch::{pool_views, GlobalBranch, GlobalDims};
use crate::grad::{Graph, Group, ParamStore, Tensor, Var};
use crate::tokenize2d::{sample_queries, Backbone2d, Backbone2dConfig, PatchGrid, QuerySet};
use crate::tokenize3d::{tokenize_instance, SetEncoder, TokenField, Tokenizer3dConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub init_seed: u64,
    pub backbone: Backbone2dConfig,
    pub tokenizer: Tokenizer3dConfig,
    pub shared_dim: usize,
    pub local_dim: usize,
    pub global_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub max_queries: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            init_seed: 11,
            backbone: Backbone2dConfig::default(),
            tokenizer: Tokenizer3dConfig::default(),
            shared_dim: 64,
            local_dim: 48,
            global_dim: 64,
            hidden: 128,
            heads: 4,
            max_queries: 128,
        }
    }
}

const INIT_VAE: u64 = 0x3D;
const INIT_SHARED: u64 = 0x5A;
const INIT_LOCAL: u64 = 0x10C;
const INIT_GLOBAL: u64 = 0x610;

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub num_categories: usize,
    pub store: ParamStore,
    pub backbone: Backbone2d,
    pub set_encoder: SetEncoder,
    pub shared: SharedEncoders,
    pub heads: LocalHeads,
    pub global: GlobalBranch,
}

impl Model {
    pub fn new(config: ModelConfig, num_categories: usize) -> Result<Self> {
        let c = &config;
        let b = &c.backbone;
        let mut store = ParamStore::new();
        let seed = c.init_seed;
        let set_encoder = SetEncoder::new(&mut store, &c.tokenizer, &mut geom::rng_from(seed, &[INIT_VAE]));
        let shared = SharedEncoders::new(
            &mut store,
            b.feature_dim,
            b.context_dim,
            c.tokenizer.latent_dim,
            c.hidden,
            c.shared_dim,
            &mut geom::rng_from(seed, &[INIT_SHARED]),
        );
        let heads = LocalHeads::new(&mut store, c.shared_dim, c.local_dim, &mut geom::rng_from(seed, &[INIT_LOCAL]));
        let global = GlobalBranch::new(&mut store, global_dims(c), &mut geom::rng_from(seed, &[INIT_GLOBAL]))?;
        let backbone = Backbone2d::new(b.clone(), num_categories);
        Ok(Model { config, num_categories, store, backbone, set_encoder, shared, heads, global })
    }

    /// Resets every global-branch parameter to its initial value for this
    /// config's seed.
    pub fn reinit_global(&mut self) -> Result<()> {
        let fresh = Model::new(self.config.clone(), self.num_categories)?;
        for id in self.store.ids_in(Group::Global) {
            *self.store.value_mut(id) = fresh.store.value(id).clone();
        }
        Ok(())
    }

    /// Shared 2D tokens for every valid cell of every view, rows in view-major,
    /// cell-major order.
    pub fn encode_views(&self, g: &mut Graph, views: &[PreparedView]) -> ViewTokens {
        let fd = self.config.backbone.feature_dim;
        let cd = self.config.backbone.context_dim;
        let mut rows_per_view = Vec::with_capacity(views.len());
        let mut cell_row = Vec::with_capacity(views.len());
        let mut feats = Vec::new();
        let mut ctx = Vec::new();
        let mut next = 0;
        for v in views {
            let mut rows = Vec::new();
            let mut map = vec![None; v.grid.num_cells()];
            for cell in v.grid.valid_cells() {
                feats.extend_from_slice(v.grid.features.row(cell));
                ctx.extend_from_slice(&v.context);
                map[cell] = Some(next);
                rows.push(next);
                next += 1;
            }
            rows_per_view.push(rows);
            cell_row.push(map);
        }
        let x = g.constant(Tensor::from_vec(next, fd, feats).expect("feature rows"));
        let c = g.constant(Tensor::from_vec(next, cd, ctx).expect("context rows"));
        let tokens = self.shared.encode_2d(g, x, c);
        ViewTokens { tokens, rows_per_view, cell_row }
    }

    /// Unit 2D local descriptors for the given token rows.
    pub fn local_2d(&self, g: &mut Graph, vt: &ViewTokens, rows: &[usize]) -> Var {
        let h = g.gather_rows(vt.tokens, rows);
        project_local(g, &self.heads.head2d, h)
    }

    /// Shared 3D tokens of one object.
    pub fn encode_tokens(&self, g: &mut Graph, field: &TokenField) -> Var {
        let z = self.set_encoder.forward(g, field);
        self.shared.encode_3d(g, z)
    }

    pub fn local_3d(&self, g: &mut Graph, h3: Var) -> Var {
        project_local(g, &self.heads.head3d, h3)
    }

    /// 2D global descriptor from the views flagged in `use_view`.
    pub fn global_2d(
        &self,
        g: &mut Graph,
        vt: &ViewTokens,
        views: &[PreparedView],
        fusion: bool,
        use_view: &[bool],
    ) -> Result<Var> {
        let (pooled, valid) = pool_views(g, vt.tokens, &vt.rows_per_view);
        let cd = self.config.backbone.context_dim;
        let td = self.config.backbone.teacher_dim;
        let ctx: Vec<f64> = views.iter().flat_map(|v| v.context.iter().copied()).collect();
        let c = g.constant(Tensor::from_vec(views.len(), cd, ctx)?);
        let teacher = if fusion {
            let t: Vec<f64> = views.iter().flat_map(|v| v.teacher.iter().copied()).collect();
            Some(g.constant(Tensor::from_vec(views.len(), td, t)?))
        } else {
            None
        };
        let fused = self.global.fuse_views(g, pooled, c, teacher);
        let mask: Vec<bool> = valid.iter().zip(use_view).map(|(&a, &b)| a && b).collect();
        self.global.encode_2d(g, fused, &mask)
    }

    pub fn global_3d(&self, g: &mut Graph, h3: Var) -> Var {
        self.global.encode_3d(g, h3)
    }
}

fn global_dims(c: &ModelConfig) -> GlobalDims {
    GlobalDims {
        shared: c.shared_dim,
        context: c.backbone.context_dim,
        teacher: c.backbone.teacher_dim,
        global: c.global_dim,
        hidden: c.hidden,
        heads: c.heads,
    }
}

/// Shared 2D tokens of a set of views.
#[derive(Clone, Debug)]
pub struct ViewTokens {
    pub tokens: Var,
    pub rows_per_view: Vec<Vec<usize>>,
    /// Token row of each (view, cell); `None` for invalid cells.
    pub cell_row: Vec<Vec<Option<usize>>>,
}

/// Everything the model reads from one rendered view.
#[derive(Clone, Debug)]
pub struct PreparedView {
    pub camera_index: u32,
    pub grid: PatchGrid,
    pub map: PositionMap,
    pub context: Vec<f64>,
    pub teacher: Vec<f64>,
}

/// Frozen inputs for objects of a dataset: token fields and dense render
/// samples are computed once on first use.
#[derive(Debug)]
pub struct InputCache<'d> {
    pub dataset: &'d Dataset,
    pub tokenizer: Tokenizer3dConfig,
    fields: Vec<OnceLock<TokenField>>,
    samples: Vec<OnceLock<SurfaceSample>>,
}

impl<'d> InputCache<'d> {
    pub fn new(dataset: &'d Dataset, tokenizer: Tokenizer3dConfig) -> Self {
        let n = dataset.len();
        InputCache {
            dataset,
            tokenizer,
            fields: (0..n).map(|_| OnceLock::new()).collect(),
            samples: (0..n).map(|_| OnceLock::new()).collect(),
        }
    }

    pub fn field(&self, object: usize) -> Result<&TokenField> {
        if let Some(f) = self.fields[object].get() {
            return Ok(f);
        }
        let f = tokenize_instance(&self.dataset.objects[object], &self.tokenizer)?;
        Ok(self.fields[object].get_or_init(|| f))
    }

    fn render_sample(&self, object: usize) -> Result<&SurfaceSample> {
        if let Some(s) = self.samples[object].get() {
            return Ok(s);
        }
        let s = self.dataset.objects[object].render_sample(self.dataset.config.render_points)?;
        Ok(self.samples[object].get_or_init(|| s))
    }

    /// Position map and face-id labels of one view at `resolution`.
    pub fn render(&self, object: usize, view: usize, resolution: u32) -> Result<Rendered> {
        let camera = self.camera(object, view)?.with_resolution(resolution);
        let sample = self.render_sample(object)?;
        Ok(render_view(sample, &camera, splat_radius_for(resolution)))
    }

    fn camera(&self, object: usize, view: usize) -> Result<&crate::dataset::CameraView> {
        self.dataset.views[object]
            .get(view)
            .ok_or_else(|| Error::InvalidArgument(format!("object {object} has no view {view}")))
    }

    /// Position map at `resolution`, reusing the stored tier when it matches.
    pub fn map(&self, object: usize, view: usize, resolution: u32) -> Result<PositionMap> {
        if resolution == self.dataset.config.resolution {
            self.camera(object, view)?;
            return Ok(self.dataset.maps[object][view].clone());
        }
        Ok(self.render(object, view, resolution)?.map)
    }

    pub fn prepare_view(&self, backbone: &Backbone2d, object: usize, view: usize, resolution: u32) -> Result<PreparedView> {
        let map = self.map(object, view, resolution)?;
        let camera = self.camera(object, view)?.with_resolution(resolution);
        let grid = backbone.extract_patch_features(&map, &camera)?;
        let context = backbone.view_context(&grid);
        let teacher = backbone.teacher_token(&self.dataset.objects[object], camera.index);
        Ok(PreparedView { camera_index: camera.index, grid, map, context, teacher })
    }

    pub fn prepare_views(
        &self,
        backbone: &Backbone2d,
        object: usize,
        views: &[usize],
        resolution: u32,
    ) -> Result<Vec<PreparedView>> {
        views.iter().map(|&v| self.prepare_view(backbone, object, v, resolution)).collect()
    }
}

/// Geometric queries over prepared views.
pub fn queries_for(views: &[PreparedView], max_queries: usize) -> QuerySet {
    let grids: Vec<&PatchGrid> = views.iter().map(|v| &v.grid).collect();
    let maps: Vec<&PositionMap> = views.iter().map(|v| &v.map).collect();
    sample_queries(&grids, &maps, max_queries)
}

/// Mean of the views' teacher tokens.
pub fn instance_teacher(views: &[PreparedView], dim: usize) -> Vec<f64> {
    let mut t = vec![0.0; dim];
    for v in views {
        t.iter_mut().zip(&v.teacher).for_each(|(a, b)| *a += b);
    }
    t.iter_mut().for_each(|a| *a /= views.len().max(1) as f64);
    t
}
