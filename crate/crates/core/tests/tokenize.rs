use pixpoint::dataset::render::{splat_radius_for, CameraView, PositionMap, ViewKind, CAMERA_SCALE};
use pixpoint::dataset::templates::builtin_templates;
use pixpoint::dataset::{instantiate, render_view};
use pixpoint::geom::{dist2, Vec3};
use pixpoint::grad::check::{check_gradients, DEFAULT_STEP, DEFAULT_TOLERANCE};
use pixpoint::grad::{Graph, ParamStore};
use pixpoint::pointset::{farthest_point_sample, k_nearest};
use pixpoint::tokenize2d::{sample_queries, Backbone2d, Backbone2dConfig, PatchGrid};
use pixpoint::tokenize3d::{build_field, select_centers, SetEncoder, Tokenizer3dConfig};
use pixpoint::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_points(n: usize, seed: u64) -> Vec<Vec3> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| [r.gen(), r.gen(), r.gen()]).collect()
}

// Recomputes every candidate's distance to the whole selected set from scratch.
fn fps_oracle(points: &[Vec3], k: usize) -> Vec<usize> {
    if k >= points.len() {
        return (0..points.len()).collect();
    }
    let n = points.len() as f64;
    let c = [0, 1, 2].map(|a| points.iter().map(|p| p[a]).sum::<f64>() / n);
    let mut first = 0;
    for i in 0..points.len() {
        if dist2(points[i], c) < dist2(points[first], c) {
            first = i;
        }
    }
    let mut sel = vec![first];
    while sel.len() < k {
        let score = |i: usize| sel.iter().map(|&s| dist2(points[i], points[s])).fold(f64::INFINITY, f64::min);
        let mut best = 0;
        for i in 1..points.len() {
            if score(i) > score(best) {
                best = i;
            }
        }
        sel.push(best);
    }
    sel
}

fn knn_oracle(points: &[Vec3], q: Vec3, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&a, &b| dist2(points[a], q).partial_cmp(&dist2(points[b], q)).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[test]
fn fps_matches_oracle_on_random_clouds() {
    for seed in 0..100 {
        let pts = random_points(50 + (seed as usize * 7) % 450, seed);
        let k = 1 + (seed as usize * 13) % 40;
        assert_eq!(farthest_point_sample(&pts, k), fps_oracle(&pts, k), "seed {seed}");
    }
}

#[test]
fn knn_matches_sort_oracle() {
    for seed in 0..100 {
        let pts = random_points(20 + (seed as usize * 11) % 480, 1000 + seed);
        let q = random_points(1, 5000 + seed)[0];
        let k = 1 + seed as usize % 16;
        assert_eq!(k_nearest(&pts, q, k), knn_oracle(&pts, q, k));
    }
}

#[test]
fn center_selection_examples() {
    let corners: Vec<Vec3> =
        (0..8).map(|i| [(i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64]).collect();
    let mut all = select_centers(&corners, 8).unwrap();
    all.sort();
    assert_eq!(all, (0..8).collect::<Vec<_>>());

    let pts = random_points(200, 3);
    let one = select_centers(&pts, 1).unwrap();
    assert_eq!(one, fps_oracle(&pts, 1));
    assert_eq!(select_centers(&pts, 32).unwrap(), fps_oracle(&pts, 32));
    assert!(matches!(select_centers(&pts[..10], 32), Err(Error::TooFewPoints { have: 10, need: 32 })));
}

fn cloud6(n: usize, seed: u64) -> Vec<[f32; 6]> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut p = [0f32; 6];
            for v in p.iter_mut().take(3) {
                *v = r.gen();
            }
            p[3 + r.gen_range(0..3)] = 1.0;
            p
        })
        .collect()
}

#[test]
fn neighborhoods_are_exact_knn_and_centers_are_members() {
    let pts = cloud6(600, 9);
    let field = build_field(&pts, 24, 16).unwrap();
    let coords: Vec<Vec3> = pts.iter().map(|p| [p[0] as f64, p[1] as f64, p[2] as f64]).collect();
    for (n, &ci) in field.center_index.iter().enumerate() {
        assert_eq!(field.centers[n], coords[ci]);
        assert_eq!(field.neighbor_index[n], knn_oracle(&coords, coords[ci], 16));
    }
}

#[test]
fn set_encoder_is_permutation_invariant() {
    let cfg = Tokenizer3dConfig { num_tokens: 6, neighbors: 8, point_dim: 8, latent_dim: 12 };
    let mut store = ParamStore::new();
    let enc = SetEncoder::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
    let field = build_field(&cloud6(100, 2), cfg.num_tokens, cfg.neighbors).unwrap();
    let mut shuffled = field.clone();
    let mut r = ChaCha8Rng::seed_from_u64(3);
    for n in 0..field.len() {
        for j in (1..field.k).rev() {
            let s = r.gen_range(0..=j);
            for c in 0..6 {
                let a = shuffled.neighborhoods.get(n * field.k + j, c);
                let b = shuffled.neighborhoods.get(n * field.k + s, c);
                shuffled.neighborhoods.set(n * field.k + j, c, b);
                shuffled.neighborhoods.set(n * field.k + s, c, a);
            }
        }
    }
    let mut g = Graph::new(&store);
    let z1 = enc.forward(&mut g, &field);
    let z2 = enc.forward(&mut g, &shuffled);
    for (a, b) in g.value(z1).data().iter().zip(g.value(z2).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn zero_weight_encoder_outputs_bias() {
    let cfg = Tokenizer3dConfig { num_tokens: 5, neighbors: 4, point_dim: 6, latent_dim: 7 };
    let mut store = ParamStore::new();
    let enc = SetEncoder::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
    for l in [&enc.point, &enc.fc1, &enc.fc2] {
        store.value_mut(l.weight).data_mut().fill(0.0);
    }
    let b = enc.fc2.bias.unwrap();
    store.value_mut(b).data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 * 0.1);
    let field = build_field(&cloud6(50, 4), cfg.num_tokens, cfg.neighbors).unwrap();
    let mut g = Graph::new(&store);
    let z = enc.forward(&mut g, &field);
    let z = g.value(z);
    for r in 0..z.rows() {
        assert_eq!(z.row(r), store.value(b).data());
    }
}

#[test]
fn set_encoder_gradients_match_finite_differences() {
    let cfg = Tokenizer3dConfig { num_tokens: 4, neighbors: 5, point_dim: 6, latent_dim: 5 };
    for seed in 0..3 {
        let mut store = ParamStore::new();
        let enc = SetEncoder::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        let field = build_field(&cloud6(40, 10 + seed), cfg.num_tokens, cfg.neighbors).unwrap();
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        let report = check_gradients(
            &mut store,
            &ids,
            |g| {
                let z = enc.forward(g, &field);
                let n = g.value(z).len();
                Ok(g.weighted_sum(z, (0..n).map(|i| (i % 5) as f64 - 2.0).collect()))
            },
            DEFAULT_STEP,
            32,
        )
        .unwrap();
        assert!(report.passes(DEFAULT_TOLERANCE), "max rel err {}", report.max_rel_err());
    }
}

fn camera(size: u32) -> CameraView {
    CameraView::looking_at(0, ViewKind::Ortho, [0.0, 0.0, 1.0], [0.5; 3], CAMERA_SCALE, size)
}

fn flat_map(size: usize) -> PositionMap {
    let mut m = PositionMap::empty(size, size);
    for r in 8..size - 8 {
        for c in 8..size - 8 {
            let o = (r * size + c) * 4;
            m.data[o] = c as f32 / size as f32;
            m.data[o + 1] = 1.0 - r as f32 / size as f32;
            m.data[o + 2] = 0.5;
            m.data[o + 3] = 1.0;
        }
    }
    m
}

#[test]
fn background_map_gives_no_valid_cells() {
    let bb = Backbone2d::new(Backbone2dConfig::default(), 8);
    let grid = bb.extract_patch_features(&PositionMap::empty(64, 64), &camera(64)).unwrap();
    assert!(grid.valid.iter().all(|v| !v));
    assert!(grid.features.data().iter().all(|&x| x == 0.0));
    assert!(bb.view_context(&grid).iter().all(|&x| x == 0.0));
    assert!(matches!(
        bb.extract_patch_features(&PositionMap::empty(60, 64), &camera(64)),
        Err(Error::PatchGeometry { .. })
    ));
}

#[test]
fn patch_features_are_local() {
    let bb = Backbone2d::new(Backbone2dConfig::default(), 8);
    let base = flat_map(64);
    let mut bumped = base.clone();
    // Push one cell (rows 24..32, cols 32..40) toward the camera.
    for r in 24..32 {
        for c in 32..40 {
            bumped.data[(r * 64 + c) * 4 + 2] += 0.05 + 0.01 * (r % 3) as f32;
        }
    }
    let cam = camera(64);
    let a = bb.extract_patch_features(&base, &cam).unwrap();
    let b = bb.extract_patch_features(&bumped, &cam).unwrap();
    assert_eq!(a, bb.extract_patch_features(&base, &cam).unwrap());
    let changed: Vec<usize> = (0..a.num_cells()).filter(|&c| a.features.row(c) != b.features.row(c)).collect();
    assert_eq!(changed, vec![3 * 8 + 4]);
}

#[test]
fn view_context_of_single_cell_and_permutation() {
    let bb = Backbone2d::new(Backbone2dConfig::default(), 8);
    let cam = camera(64);
    let grid = bb.extract_patch_features(&flat_map(64), &cam).unwrap();
    let keep = grid.valid_cells()[5];
    let mut single = grid.clone();
    for c in 0..single.num_cells() {
        single.valid[c] = c == keep;
    }
    let mut only = single.clone();
    only.valid = vec![true];
    only.features = pixpoint::grad::Tensor::row_vector(grid.features.row(keep).to_vec());
    only.rows = 1;
    only.cols = 1;
    let a = bb.view_context(&single);
    let b = bb.view_context(&only);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }

    // Reversing cell order leaves the mean unchanged.
    let n = grid.num_cells();
    let mut rev = grid.clone();
    for c in 0..n {
        rev.valid[c] = grid.valid[n - 1 - c];
        rev.features.row_mut(c).copy_from_slice(grid.features.row(n - 1 - c));
    }
    for (x, y) in bb.view_context(&grid).iter().zip(bb.view_context(&rev)) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn teacher_tokens_cluster_by_category() {
    let templates = builtin_templates();
    let bb = Backbone2d::new(Backbone2dConfig::default(), templates.len());
    let mut tokens = Vec::new();
    for t in &templates {
        for s in 0..4u64 {
            let inst = instantiate(t, 100 + s * 31 + t.category_id as u64, 256).unwrap();
            assert_eq!(bb.teacher_token(&inst, 3), bb.teacher_token(&inst, 3));
            let single = bb.instance_teacher(&inst, &[2]);
            assert_eq!(single, bb.teacher_token(&inst, 2));
            tokens.push((t.category_id, bb.instance_teacher(&inst, &[0, 1, 2, 3])));
        }
    }
    let cos = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    let (mut within, mut nw, mut cross, mut nc) = (0.0, 0, 0.0, 0);
    for i in 0..tokens.len() {
        for j in i + 1..tokens.len() {
            let c = cos(&tokens[i].1, &tokens[j].1);
            if tokens[i].0 == tokens[j].0 {
                within += c;
                nw += 1;
            } else {
                cross += c;
                nc += 1;
            }
        }
    }
    assert!(within / nw as f64 > cross / nc as f64 + 0.1);
}

fn rendered_grids(seed: u64) -> (Vec<PatchGrid>, Vec<PositionMap>) {
    let t = &builtin_templates()[0];
    let inst = instantiate(t, seed, 512).unwrap();
    let sample = inst.render_sample(8192).unwrap();
    let bb = Backbone2d::new(Backbone2dConfig::default(), 8);
    let mut grids = Vec::new();
    let mut maps = Vec::new();
    for (i, d) in [[1.0, 0.3, 0.2], [-0.4, 0.5, 1.0]].iter().enumerate() {
        let cam = CameraView::looking_at(i as u32, ViewKind::Random, *d, [0.5; 3], CAMERA_SCALE, 64);
        let r = render_view(&sample, &cam, splat_radius_for(64));
        grids.push(bb.extract_patch_features(&r.map, &cam).unwrap());
        maps.push(r.map);
    }
    (grids, maps)
}

#[test]
fn queries_are_read_from_cell_centers() {
    let (grids, maps) = rendered_grids(5);
    let refs: Vec<&PositionMap> = maps.iter().collect();
    let grid_refs: Vec<&PatchGrid> = grids.iter().collect();
    let pool: usize = grids.iter().map(|g| g.valid_cells().len()).sum();
    assert!(pool > 20);
    let all = sample_queries(&grid_refs, &refs, 10_000);
    assert_eq!(all.len(), pool);
    let some = sample_queries(&grid_refs, &refs, 20);
    assert_eq!(some.len(), 20);
    for e in all.entries.iter().chain(&some.entries) {
        let (r, c) = grids[e.view].center_pixel(e.cell);
        assert!(maps[e.view].alpha(r, c));
        assert_eq!(e.q, maps[e.view].xyz(r, c));
        assert!(grids[e.view].valid[e.cell]);
    }
    let coords = all.coords();
    let expect: Vec<_> = fps_oracle(&coords, 20).into_iter().map(|i| all.entries[i]).collect();
    assert_eq!(some.entries, expect);
    assert!(sample_queries(&[], &[], 5).is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn fps_selection_is_distinct_and_maximin(seed in 0u64..10_000, n in 2usize..120, k in 1usize..40) {
        let pts = random_points(n, seed);
        let sel = farthest_point_sample(&pts, k);
        prop_assert_eq!(sel.len(), k.min(n));
        let mut uniq = sel.clone();
        uniq.sort();
        uniq.dedup();
        prop_assert_eq!(uniq.len(), sel.len());
        prop_assert_eq!(sel, fps_oracle(&pts, k));
    }
}
