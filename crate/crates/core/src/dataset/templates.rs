use std::collections::HashSet;
use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use super::mesh::Primitive;
use crate::error::{Error, Result};
use crate::geom::Vec3;

/// One primitive of a template. Position is `anchor` scaled by the instance
/// stretch; extents are drawn from `size_range` and scaled the same way.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartTemplate {
    pub primitive: Primitive,
    pub part_label: u32,
    /// Semantic class shared by interchangeable parts (e.g. all chair legs).
    pub part_class: String,
    pub anchor: Vec3,
    /// Axis-angle rotation applied to the primitive before placement.
    pub rotation: Option<(Vec3, f64)>,
    pub size_range: [[f64; 2]; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeTemplate {
    pub name: String,
    pub category_id: u32,
    pub stretch_range: [[f64; 2]; 3],
    pub parts: Vec<PartTemplate>,
}

impl ShapeTemplate {
    pub fn validate(&self) -> Result<()> {
        if self.parts.is_empty() {
            return Err(Error::InvalidArgument(format!("template {} has no parts", self.name)));
        }
        let ranges = self.parts.iter().map(|p| &p.size_range).chain([&self.stretch_range]);
        for r in ranges {
            if r.iter().any(|[lo, hi]| lo > hi || *lo < 0.0) {
                return Err(Error::InvalidArgument(format!("template {} has a bad range {r:?}", self.name)));
            }
        }
        Ok(())
    }

    pub fn num_part_labels(&self) -> usize {
        self.parts.iter().map(|p| p.part_label as usize + 1).max().unwrap_or(0)
    }
}

pub fn validate_registry(templates: &[ShapeTemplate]) -> Result<()> {
    let mut seen = HashSet::new();
    for t in templates {
        t.validate()?;
        if !seen.insert(t.category_id) {
            return Err(Error::InvalidArgument(format!("duplicate category id {}", t.category_id)));
        }
    }
    Ok(())
}

fn jitter(base: Vec3, frac: f64) -> [[f64; 2]; 3] {
    base.map(|b| [b * (1.0 - frac), b * (1.0 + frac)])
}

struct Builder {
    parts: Vec<PartTemplate>,
}

impl Builder {
    fn new() -> Self {
        Builder { parts: Vec::new() }
    }

    fn part(mut self, primitive: Primitive, class: &str, anchor: Vec3, size: Vec3) -> Self {
        self.parts.push(PartTemplate {
            primitive,
            part_label: self.parts.len() as u32,
            part_class: class.to_string(),
            anchor,
            rotation: None,
            size_range: jitter(size, 0.2),
        });
        self
    }

    fn rotated(mut self, axis: Vec3, angle: f64) -> Self {
        if let Some(p) = self.parts.last_mut() {
            p.rotation = Some((axis, angle));
        }
        self
    }

    fn finish(self, name: &str, category_id: u32) -> ShapeTemplate {
        ShapeTemplate {
            name: name.to_string(),
            category_id,
            stretch_range: [[0.85, 1.15]; 3],
            parts: self.parts,
        }
    }
}

/// The eight built-in categories, y-up.
pub fn builtin_templates() -> Vec<ShapeTemplate> {
    use Primitive::*;
    let mut out = Vec::new();

    let mut chair = Builder::new().part(Box, "seat", [0.0, 0.45, 0.0], [1.0, 0.1, 1.0]);
    for (x, z) in [(-0.4, -0.4), (0.4, -0.4), (-0.4, 0.4), (0.4, 0.4)] {
        chair = chair.part(Cylinder, "leg", [x, 0.2, z], [0.09, 0.4, 0.09]);
    }
    out.push(chair.part(Box, "back", [0.0, 0.85, -0.45], [1.0, 0.7, 0.1]).finish("chair", 0));

    let mut table = Builder::new().part(Box, "top", [0.0, 0.7, 0.0], [1.6, 0.08, 1.0]);
    for (x, z) in [(-0.7, -0.4), (0.7, -0.4), (-0.7, 0.4), (0.7, 0.4)] {
        table = table.part(Box, "leg", [x, 0.33, z], [0.1, 0.66, 0.1]);
    }
    out.push(table.finish("table", 1));

    out.push(
        Builder::new()
            .part(Cylinder, "base", [0.0, 0.03, 0.0], [0.6, 0.06, 0.6])
            .part(Cylinder, "pole", [0.0, 0.5, 0.0], [0.06, 0.9, 0.06])
            .part(Cone, "shade", [0.0, 1.05, 0.0], [0.55, 0.4, 0.55])
            .finish("lamp", 2),
    );

    out.push(
        Builder::new()
            .part(Cylinder, "body", [0.0, 0.35, 0.0], [0.4, 0.7, 0.4])
            .part(Sphere, "shoulder", [0.0, 0.7, 0.0], [0.4, 0.4, 0.4])
            .part(Cylinder, "neck", [0.0, 0.92, 0.0], [0.14, 0.3, 0.14])
            .finish("bottle", 3),
    );

    out.push(
        Builder::new()
            .part(Cylinder, "fuselage", [0.0, 0.5, 0.0], [0.25, 2.0, 0.25])
            .rotated([0.0, 0.0, 1.0], FRAC_PI_2)
            .part(Box, "wing", [0.1, 0.5, 0.0], [0.45, 0.04, 1.8])
            .part(Box, "fin", [-0.9, 0.72, 0.0], [0.3, 0.35, 0.04])
            .part(Box, "stabilizer", [-0.9, 0.52, 0.0], [0.22, 0.03, 0.6])
            .finish("airplane", 4),
    );

    out.push(
        Builder::new()
            .part(Cylinder, "body", [0.0, 0.45, 0.0], [0.7, 0.9, 0.7])
            .part(Box, "handle", [0.45, 0.72, 0.0], [0.25, 0.08, 0.1])
            .part(Box, "handle", [0.56, 0.45, 0.0], [0.08, 0.5, 0.1])
            .part(Box, "handle", [0.45, 0.18, 0.0], [0.25, 0.08, 0.1])
            .finish("mug", 5),
    );

    let mut stool = Builder::new().part(Cylinder, "seat", [0.0, 0.6, 0.0], [0.7, 0.08, 0.7]);
    for k in 0..3 {
        let a = 2.0 * std::f64::consts::PI * k as f64 / 3.0;
        stool = stool.part(Cylinder, "leg", [0.25 * a.cos(), 0.28, 0.25 * a.sin()], [0.07, 0.56, 0.07]);
    }
    out.push(stool.finish("stool", 6));

    out.push(
        Builder::new()
            .part(Cylinder, "trunk", [0.0, 0.2, 0.0], [0.15, 0.4, 0.15])
            .part(Cone, "crown", [0.0, 0.65, 0.0], [0.9, 0.6, 0.9])
            .part(Cone, "crown", [0.0, 1.05, 0.0], [0.6, 0.5, 0.6])
            .finish("tree", 7),
    );

    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_registry_is_valid() {
        let t = builtin_templates();
        assert_eq!(t.len(), 8);
        validate_registry(&t).unwrap();
    }

    #[test]
    fn duplicate_category_rejected() {
        let mut t = builtin_templates();
        t[1].category_id = 0;
        assert!(validate_registry(&t).is_err());
    }
}
