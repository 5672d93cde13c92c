use std::collections::HashMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::geom::{cross, dot, norm, sub, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Primitive {
    Box,
    Sphere,
    Cylinder,
    Cone,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
}

const BOX_DIVISIONS: usize = 4;
const SPHERE_RINGS: usize = 10;
const ROUND_SEGMENTS: usize = 16;
const SIDE_ROWS: usize = 3;

/// Closed, outward-wound mesh of a primitive centered at the origin with full
/// extents `size`. Spheres use `size[0]` as the diameter; cylinders and cones
/// run along y.
pub fn tessellate(prim: Primitive, size: Vec3) -> TriMesh {
    let h = [size[0] / 2.0, size[1] / 2.0, size[2] / 2.0];
    let mut raw = TriMesh::default();
    match prim {
        Primitive::Box => {
            let n = BOX_DIVISIONS;
            for axis in 0..3 {
                let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                for sign in [-1.0, 1.0] {
                    let base = raw.vertices.len() as u32;
                    for i in 0..=n {
                        for j in 0..=n {
                            let mut p = [0.0; 3];
                            p[axis] = sign * h[axis];
                            p[u] = -h[u] + size[u] * i as f64 / n as f64;
                            p[v] = -h[v] + size[v] * j as f64 / n as f64;
                            raw.vertices.push(p);
                        }
                    }
                    grid_faces(&mut raw.faces, base, n, n);
                }
            }
        }
        Primitive::Sphere => {
            let r = h[0];
            for i in 0..=SPHERE_RINGS {
                let theta = PI * i as f64 / SPHERE_RINGS as f64;
                for j in 0..=ROUND_SEGMENTS {
                    let phi = 2.0 * PI * j as f64 / ROUND_SEGMENTS as f64;
                    raw.vertices.push([
                        r * theta.sin() * phi.cos(),
                        r * theta.cos(),
                        r * theta.sin() * phi.sin(),
                    ]);
                }
            }
            grid_faces(&mut raw.faces, 0, SPHERE_RINGS, ROUND_SEGMENTS);
        }
        Primitive::Cylinder | Primitive::Cone => {
            let taper = prim == Primitive::Cone;
            for i in 0..=SIDE_ROWS {
                let t = i as f64 / SIDE_ROWS as f64;
                let shrink = if taper { 1.0 - t } else { 1.0 };
                let y = -h[1] + size[1] * t;
                for j in 0..=ROUND_SEGMENTS {
                    let phi = 2.0 * PI * j as f64 / ROUND_SEGMENTS as f64;
                    raw.vertices.push([h[0] * shrink * phi.cos(), y, h[2] * shrink * phi.sin()]);
                }
            }
            grid_faces(&mut raw.faces, 0, SIDE_ROWS, ROUND_SEGMENTS);
            let mut caps = vec![-h[1]];
            if !taper {
                caps.push(h[1]);
            }
            for y in caps {
                let center = raw.vertices.len() as u32;
                raw.vertices.push([0.0, y, 0.0]);
                for j in 0..=ROUND_SEGMENTS {
                    let phi = 2.0 * PI * j as f64 / ROUND_SEGMENTS as f64;
                    raw.vertices.push([h[0] * phi.cos(), y, h[2] * phi.sin()]);
                }
                for j in 0..ROUND_SEGMENTS as u32 {
                    raw.faces.push([center, center + 1 + j, center + 2 + j]);
                }
            }
        }
    }
    let mut mesh = weld(&raw);
    orient_outward(&mut mesh, [0.0; 3]);
    mesh
}

fn grid_faces(faces: &mut Vec<[u32; 3]>, base: u32, rows: usize, cols: usize) {
    let stride = cols as u32 + 1;
    for i in 0..rows as u32 {
        for j in 0..cols as u32 {
            let a = base + i * stride + j;
            let b = a + 1;
            let c = a + stride;
            let d = c + 1;
            faces.push([a, c, b]);
            faces.push([b, c, d]);
        }
    }
}

/// Merges coincident vertices and drops faces that collapse.
fn weld(mesh: &TriMesh) -> TriMesh {
    let key = |p: Vec3| p.map(|c| (c * 1e9).round() as i64);
    let mut index: HashMap<[i64; 3], u32> = HashMap::new();
    let mut out = TriMesh::default();
    let remap: Vec<u32> = mesh
        .vertices
        .iter()
        .map(|&p| {
            *index.entry(key(p)).or_insert_with(|| {
                out.vertices.push(p);
                out.vertices.len() as u32 - 1
            })
        })
        .collect();
    for f in &mesh.faces {
        let g = f.map(|i| remap[i as usize]);
        if g[0] != g[1] && g[1] != g[2] && g[0] != g[2] {
            out.faces.push(g);
        }
    }
    out
}

/// Flips faces whose normal points toward `center`; valid for convex parts.
pub fn orient_outward(mesh: &mut TriMesh, center: Vec3) {
    for f in &mut mesh.faces {
        let [a, b, c] = f.map(|i| mesh.vertices[i as usize]);
        let n = cross(sub(b, a), sub(c, a));
        let centroid = [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0, (a[2] + b[2] + c[2]) / 3.0];
        if dot(n, sub(centroid, center)) < 0.0 {
            f.swap(1, 2);
        }
    }
}

pub fn face_area(v: &[Vec3], f: [u32; 3]) -> f64 {
    let [a, b, c] = f.map(|i| v[i as usize]);
    0.5 * norm(cross(sub(b, a), sub(c, a)))
}

/// Faces are neighbors iff they share an edge. Lists are sorted and unique.
pub fn face_adjacency(faces: &[[u32; 3]]) -> Vec<Vec<u32>> {
    let mut by_edge: HashMap<(u32, u32), Vec<u32>> = HashMap::new();
    for (fi, f) in faces.iter().enumerate() {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            by_edge.entry((a.min(b), a.max(b))).or_default().push(fi as u32);
        }
    }
    let mut adj = vec![Vec::new(); faces.len()];
    for shared in by_edge.values() {
        for &x in shared {
            for &y in shared {
                if x != y {
                    adj[x as usize].push(y);
                }
            }
        }
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    adj
}

#[cfg(test)]
mod tests {
    use super::*;

    fn closed(mesh: &TriMesh) -> bool {
        // Every edge of a closed 2-manifold appears in exactly two faces.
        let mut count: HashMap<(u32, u32), usize> = HashMap::new();
        for f in &mesh.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        count.values().all(|&c| c == 2)
    }

    #[test]
    fn primitives_are_closed_and_outward() {
        for prim in [Primitive::Box, Primitive::Sphere, Primitive::Cylinder, Primitive::Cone] {
            let m = tessellate(prim, [1.0, 2.0, 1.0]);
            assert!(closed(&m), "{prim:?} not closed");
            // Divergence theorem: outward winding gives positive volume.
            let vol: f64 = m
                .faces
                .iter()
                .map(|f| {
                    let [a, b, c] = f.map(|i| m.vertices[i as usize]);
                    dot(a, cross(b, c)) / 6.0
                })
                .sum();
            assert!(vol > 0.0, "{prim:?} volume {vol}");
        }
    }

    #[test]
    fn box_volume_is_exact() {
        let m = tessellate(Primitive::Box, [1.0, 2.0, 3.0]);
        let vol: f64 = m
            .faces
            .iter()
            .map(|f| {
                let [a, b, c] = f.map(|i| m.vertices[i as usize]);
                dot(a, cross(b, c)) / 6.0
            })
            .sum();
        assert!((vol - 6.0).abs() < 1e-9);
    }

    #[test]
    fn adjacency_of_a_quad() {
        let faces = [[0, 1, 2], [2, 1, 3], [4, 5, 6]];
        let adj = face_adjacency(&faces);
        assert_eq!(adj, vec![vec![1], vec![0], vec![]]);
    }
}
