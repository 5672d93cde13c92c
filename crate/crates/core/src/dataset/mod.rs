//! Procedural multi-part shapes, surface sampling, splat rendering and
//! on-disk persistence.

pub mod io;
pub mod mesh;
pub mod render;
pub mod sample;
pub mod templates;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, add, mat_vec, rotation, to_f32, Vec3, IDENTITY};
pub use mesh::{face_adjacency, tessellate, Primitive, TriMesh};
pub use render::{splat, splat_radius_for, standard_views, CameraView, PositionMap, Rendered, ViewKind};
pub use sample::sample_surface;
pub use templates::{builtin_templates, PartTemplate, ShapeTemplate};

const MAX_DRAW_ATTEMPTS: usize = 16;
const MIN_EXTENT: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SphereSurface {
    pub part_label: u32,
    pub center: [f32; 3],
    pub radius: f32,
}

/// Oriented surface samples and the face each was drawn from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SurfaceSample {
    /// x, y, z, nx, ny, nz
    pub points: Vec<[f32; 6]>,
    pub faces: Vec<u32>,
}

impl SurfaceSample {
    pub fn coords(&self) -> Vec<[f32; 3]> {
        self.points.iter().map(|p| [p[0], p[1], p[2]]).collect()
    }
}

/// A generated object, normalized so its bounding box fits the unit cube
/// with the longest edge spanning `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectInstance {
    pub object_id: u32,
    pub category_id: u32,
    pub seed: u64,
    pub vertices: Vec<[f32; 3]>,
    pub faces: Vec<[u32; 3]>,
    pub face_part: Vec<u32>,
    /// Semantic class name per part label.
    pub part_classes: Vec<String>,
    pub spheres: Vec<SphereSurface>,
    pub face_adjacency: Vec<Vec<u32>>,
    pub surface: SurfaceSample,
}

impl ObjectInstance {
    /// Longest bounding-box edge after normalization.
    pub const BBOX_EDGE: f64 = 1.0;

    pub fn num_part_labels(&self) -> usize {
        self.part_classes.len()
    }

    pub fn point(&self, i: usize) -> Vec3 {
        let p = &self.surface.points[i];
        [p[0] as f64, p[1] as f64, p[2] as f64]
    }

    pub fn point_part(&self, i: usize) -> u32 {
        self.face_part[self.surface.faces[i] as usize]
    }

    pub fn face_vertices(&self, f: usize) -> [Vec3; 3] {
        self.faces[f].map(|i| geom::to_f64(self.vertices[i as usize]))
    }

    pub fn faces_of_part(&self, label: u32) -> Vec<u32> {
        (0..self.faces.len() as u32).filter(|&f| self.face_part[f as usize] == label).collect()
    }

    /// Dense surface sample used for rendering; a pure function of the
    /// stored mesh and seed.
    pub fn render_sample(&self, n: usize) -> Result<SurfaceSample> {
        sample_surface(self, n, geom::derive_seed(self.seed, &[0xDE45E]))
    }
}

/// Draws part sizes, assembles and normalizes the mesh, then samples
/// `n_points` oriented surface points. Deterministic in `(template, seed)`.
pub fn instantiate(template: &ShapeTemplate, seed: u64, n_points: usize) -> Result<ObjectInstance> {
    template.validate()?;
    let mut rng = geom::rng_from(seed, &[0x1457]);

    let mut parts = None;
    for _ in 0..MAX_DRAW_ATTEMPTS {
        let stretch: Vec3 = template.stretch_range.map(|[lo, hi]| draw(&mut rng, lo, hi));
        let sizes: Vec<Vec3> = template
            .parts
            .iter()
            .map(|p| {
                let s = p.size_range.map(|[lo, hi]| draw(&mut rng, lo, hi));
                [s[0] * stretch[0], s[1] * stretch[1], s[2] * stretch[2]]
            })
            .collect();
        let degenerate = template.parts.iter().zip(&sizes).any(|(p, s)| match p.primitive {
            Primitive::Sphere => s[0] < MIN_EXTENT,
            _ => s.iter().any(|&x| x < MIN_EXTENT),
        });
        if !degenerate {
            parts = Some((stretch, sizes));
            break;
        }
    }
    let Some((stretch, sizes)) = parts else {
        return Err(Error::DegenerateShape { template: template.name.clone(), attempts: MAX_DRAW_ATTEMPTS });
    };

    let mut verts: Vec<Vec3> = Vec::new();
    let mut faces = Vec::new();
    let mut face_part = Vec::new();
    let mut spheres = Vec::new();
    for (p, size) in template.parts.iter().zip(&sizes) {
        let mesh = tessellate(p.primitive, *size);
        let rot = p.rotation.map_or(IDENTITY, |(axis, angle)| rotation(axis, angle));
        let center = [p.anchor[0] * stretch[0], p.anchor[1] * stretch[1], p.anchor[2] * stretch[2]];
        let base = verts.len() as u32;
        verts.extend(mesh.vertices.iter().map(|&v| add(mat_vec(&rot, v), center)));
        faces.extend(mesh.faces.iter().map(|f| f.map(|i| i + base)));
        face_part.extend(std::iter::repeat(p.part_label).take(mesh.faces.len()));
        if p.primitive == Primitive::Sphere {
            spheres.push((p.part_label, center, size[0] / 2.0));
        }
    }

    // Bounds include the analytic spheres, which bulge past their tessellation.
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    let mut grow = |p: Vec3, r: f64| {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k] - r);
            hi[k] = hi[k].max(p[k] + r);
        }
    };
    verts.iter().for_each(|&v| grow(v, 0.0));
    spheres.iter().for_each(|&(_, c, r)| grow(c, r));
    let extent = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
    if extent <= 0.0 {
        return Err(Error::ZeroArea);
    }
    let s = ObjectInstance::BBOX_EDGE / extent;
    let mid = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, (lo[2] + hi[2]) / 2.0];
    let normalize = |p: Vec3| -> [f32; 3] {
        let q = [0.5 + (p[0] - mid[0]) * s, 0.5 + (p[1] - mid[1]) * s, 0.5 + (p[2] - mid[2]) * s];
        to_f32(q).map(|x| x.clamp(0.0, 1.0))
    };

    let mut part_classes = vec![String::new(); template.num_part_labels()];
    for p in &template.parts {
        part_classes[p.part_label as usize] = p.part_class.clone();
    }

    let mut inst = ObjectInstance {
        object_id: 0,
        category_id: template.category_id,
        seed,
        vertices: verts.iter().map(|&v| normalize(v)).collect(),
        face_adjacency: face_adjacency(&faces),
        faces,
        face_part,
        part_classes,
        spheres: spheres
            .iter()
            .map(|&(label, c, r)| SphereSurface { part_label: label, center: normalize(c), radius: (r * s) as f32 })
            .collect(),
        surface: SurfaceSample::default(),
    };
    inst.surface = sample_surface(&inst, n_points, geom::derive_seed(seed, &[0x9017]))?;
    Ok(inst)
}

fn draw(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub train_per_category: usize,
    pub test_per_category: usize,
    pub n_points: usize,
    pub render_points: usize,
    pub resolution: u32,
    pub random_views: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 1,
            train_per_category: 25,
            test_per_category: 5,
            n_points: 2048,
            render_points: 16384,
            resolution: 64,
            random_views: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub objects: Vec<ObjectInstance>,
    pub splits: Vec<Split>,
    pub views: Vec<Vec<CameraView>>,
    /// Position maps at `config.resolution`, per object and view.
    pub maps: Vec<Vec<PositionMap>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.objects.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn num_categories(&self) -> usize {
        self.objects.iter().map(|o| o.category_id as usize + 1).max().unwrap_or(0)
    }
}

/// Renders one view of `instance` from its dense render sample, carrying face
/// ids in the label channel.
pub fn render_view(sample: &SurfaceSample, camera: &CameraView, splat_radius: usize) -> Rendered {
    splat(&sample.coords(), &sample.faces, camera, splat_radius)
}

/// Generates objects category by category: the first `train_per_category`
/// instances of each template are training objects, the rest held out.
pub fn generate_dataset(config: &DatasetConfig, templates: &[ShapeTemplate]) -> Result<Dataset> {
    templates::validate_registry(templates)?;
    let per_cat = config.train_per_category + config.test_per_category;
    let mut ds = Dataset {
        config: config.clone(),
        objects: Vec::with_capacity(per_cat * templates.len()),
        splits: Vec::new(),
        views: Vec::new(),
        maps: Vec::new(),
    };
    let radius = splat_radius_for(config.resolution);
    for t in templates {
        for j in 0..per_cat {
            let id = ds.objects.len() as u32;
            let seed = geom::derive_seed(config.seed, &[0x0B1, id as u64]);
            let mut inst = instantiate(t, seed, config.n_points)?;
            inst.object_id = id;
            let mut view_rng = geom::rng_from(seed, &[0x71E5]);
            let views = standard_views(config.random_views, config.resolution, &mut view_rng);
            let dense = inst.render_sample(config.render_points)?;
            let maps = views.iter().map(|v| render_view(&dense, v, radius).map).collect();
            ds.objects.push(inst);
            ds.splits.push(if j < config.train_per_category { Split::Train } else { Split::Test });
            ds.views.push(views);
            ds.maps.push(maps);
        }
    }
    Ok(ds)
}
