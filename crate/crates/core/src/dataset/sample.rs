use rand::Rng;

use super::mesh::face_area;
use super::{ObjectInstance, SurfaceSample};
use crate::error::{Error, Result};
use crate::geom::{self, add, cross, normalize, scale, sub, to_f64, Vec3};

/// Area-proportional surface samples with unit normals. Sphere parts are
/// sampled on the analytic sphere; everything else uses face normals.
pub fn sample_surface(instance: &ObjectInstance, n_points: usize, seed: u64) -> Result<SurfaceSample> {
    if n_points == 0 {
        return Err(Error::InvalidArgument("n_points must be at least 1".into()));
    }
    let verts: Vec<Vec3> = instance.vertices.iter().map(|&v| to_f64(v)).collect();
    let mut cumulative = Vec::with_capacity(instance.faces.len());
    let mut total = 0.0;
    for &f in &instance.faces {
        total += face_area(&verts, f);
        cumulative.push(total);
    }
    if instance.faces.is_empty() || total <= 0.0 {
        return Err(Error::ZeroArea);
    }

    let mut sphere_of_label = vec![None; instance.num_part_labels()];
    for s in &instance.spheres {
        sphere_of_label[s.part_label as usize] = Some((to_f64(s.center), s.radius as f64));
    }

    let mut rng = geom::rng_from(seed, &[0x5A3F]);
    let mut out = SurfaceSample { points: Vec::with_capacity(n_points), faces: Vec::with_capacity(n_points) };
    for _ in 0..n_points {
        let u = rng.gen::<f64>() * total;
        let fi = cumulative.partition_point(|&c| c <= u).min(cumulative.len() - 1);
        let f = instance.faces[fi];
        let [a, b, c] = f.map(|i| verts[i as usize]);
        let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
        let s1 = r1.sqrt();
        let p = add(scale(a, 1.0 - s1), add(scale(b, s1 * (1.0 - r2)), scale(c, s1 * r2)));
        let (p, n) = match sphere_of_label[instance.face_part[fi] as usize] {
            Some((center, radius)) => {
                let n = normalize(sub(p, center));
                (add(center, scale(n, radius)), n)
            }
            None => (p, normalize(cross(sub(b, a), sub(c, a)))),
        };
        let p = p.map(|x| (x as f32).clamp(0.0, 1.0));
        let n = n.map(|x| x as f32);
        out.points.push([p[0], p[1], p[2], n[0], n[1], n[2]]);
        out.faces.push(fi as u32);
    }
    Ok(out)
}
