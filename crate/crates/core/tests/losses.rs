use pixpoint::alignment::{
    assign, confidence_weight, local_loss, project_local, top_k, LocalHeads, LocalLossConfig, SharedEncoders,
};
use pixpoint::geom::Vec3;
use pixpoint::globalbranch::{
    distill_loss, global_loss, pool_views, subset_loss, teacher_distribution, GlobalBranch, GlobalDims,
};
use pixpoint::grad::check::{check_gradients, DEFAULT_STEP, DEFAULT_TOLERANCE};
use pixpoint::grad::{gaussian_tensor, Graph, Group, ParamId, ParamStore, Tensor, Var};
use pixpoint::{Error, Result};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LOG_1P_EXP_NEG1: f64 = 0.313_261_687_518_222_8;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn unit_rows(rows: &[&[f64]]) -> Tensor {
    let mut t = Tensor::from_rows(rows).unwrap();
    for r in 0..t.rows() {
        let n = t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
        t.row_mut(r).iter_mut().for_each(|x| *x /= n);
    }
    t
}

fn eval(f: impl FnOnce(&mut Graph) -> Var) -> f64 {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let v = f(&mut g);
    g.value(v).item()
}

fn cfg(tau: f64, delta: f64) -> LocalLossConfig {
    LocalLossConfig { temperature: tau, delta, ..LocalLossConfig::default() }
}

#[test]
fn assignment_examples() {
    let c = cfg(0.07, 0.02);
    let a = assign(&[[0.3, 0.3, 0.3]], &[[0.0; 3], [0.3, 0.3, 0.3]], &c);
    assert_eq!((a.positive[0], a.weight[0]), (1, 1.0));

    let a = assign(&[[0.05, 0.0, 0.0]], &[[0.0; 3], [1.0, 0.0, 0.0]], &c);
    assert!((a.weight[0] - (-0.5f64).exp()).abs() < 1e-15);
    assert!((a.weight[0] - 0.606531).abs() < 1e-6);

    let a = assign(&[[0.2, 0.0, 0.0]], &[[0.0; 3], [1.0, 0.0, 0.0]], &cfg(0.07, 0.9));
    assert_eq!(a.positive[0], 0);
    assert!(a.is_excluded(0, 1) && !a.is_excluded(0, 0));

    // Equidistant tokens resolve to the lowest index.
    let a = assign(&[[0.5, 0.0, 0.0]], &[[0.0; 3], [1.0, 0.0, 0.0]], &c);
    assert_eq!(a.positive[0], 0);

    let ws: Vec<f64> = (0..20).map(|i| confidence_weight(i as f64 * 0.01, 0.05)).collect();
    assert!(ws.windows(2).all(|w| w[1] < w[0]));
}

fn local_value(d2: &Tensor, d3: &Tensor, queries: &[Vec3], centers: &[Vec3], c: &LocalLossConfig) -> f64 {
    let a = assign(queries, centers, c);
    eval(|g| {
        let (x, y) = (g.constant(d2.clone()), g.constant(d3.clone()));
        local_loss(g, x, y, &a, c).unwrap().total
    })
}

#[test]
fn local_loss_closed_forms() {
    let e = unit_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let pts = [[0.0; 3], [1.0, 0.0, 0.0]];
    let v = local_value(&e, &e, &pts, &pts, &cfg(1.0, 0.02));
    assert!((v - LOG_1P_EXP_NEG1).abs() < 1e-9, "{v}");

    let a = assign(&pts, &pts, &cfg(1.0, 0.02));
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let (x, y) = (g.constant(e.clone()), g.constant(e.clone()));
    let terms = local_loss(&mut g, x, y, &a, &cfg(1.0, 0.02)).unwrap();
    assert!((g.value(terms.forward).item() - LOG_1P_EXP_NEG1).abs() < 1e-9);
    assert!((g.value(terms.reverse).item() - LOG_1P_EXP_NEG1).abs() < 1e-9);

    let one = unit_rows(&[&[0.3, 0.7]]);
    assert_eq!(local_value(&one, &one, &[[0.1; 3]], &[[0.0; 3]], &cfg(0.07, 0.02)), 0.0);

    // Everything inside the exclusion radius: no negatives in either direction.
    let d3 = unit_rows(&[&[1.0, 0.0], &[0.2, 1.0]]);
    let d2 = unit_rows(&[&[0.4, 0.5]]);
    let v = local_value(&d2, &d3, &[[0.2, 0.0, 0.0]], &[[0.0; 3], [1.0, 0.0, 0.0]], &cfg(0.07, 0.9));
    assert!(v.abs() < 1e-12);

    let empty = assign(&[], &pts, &cfg(1.0, 0.02));
    let mut g = Graph::new(&store);
    let (x, y) = (g.constant(Tensor::zeros(0, 2)), g.constant(e));
    assert!(local_loss(&mut g, x, y, &empty, &cfg(1.0, 0.02)).is_none());
}

// Queries sit on their tokens; every query descriptor equals its token's,
// and cross-pair similarities are strictly smaller.
#[test]
fn aligned_instance_loss_falls_with_temperature() {
    let d = unit_rows(&[&[1.0, 0.1, 0.0], &[0.0, 1.0, 0.2], &[0.3, 0.0, 1.0]]);
    let pts = [[0.0; 3], [0.5, 0.0, 0.0], [0.0, 0.5, 0.0]];
    let mut last = f64::INFINITY;
    for tau in [1.0, 0.5, 0.2, 0.1, 0.05, 0.02] {
        let v = local_value(&d, &d, &pts, &pts, &cfg(tau, 0.02));
        assert!(v < last && v >= 0.0);
        last = v;
    }
}

#[test]
fn top_k_matches_sorted_oracle() {
    let mut r = rng(4);
    for _ in 0..100 {
        let n = r.gen_range(1..60);
        // Coarse values so ties occur.
        let scores: Vec<f64> = (0..n).map(|_| (r.gen_range(0..8) as f64) / 4.0).collect();
        let cands: Vec<usize> = (0..n).filter(|_| r.gen_bool(0.7)).collect();
        let k = r.gen_range(0..12);
        let mut oracle = cands.clone();
        // Insertion sort, stable on index order.
        for i in 1..oracle.len() {
            let mut j = i;
            while j > 0 && scores[oracle[j - 1]] < scores[oracle[j]] {
                oracle.swap(j - 1, j);
                j -= 1;
            }
        }
        oracle.truncate(k);
        assert_eq!(top_k(&scores, &cands, k), oracle);
    }
}

struct LocalCase {
    store: ParamStore,
    p2: ParamId,
    p3: ParamId,
    queries: Vec<Vec3>,
    centers: Vec<Vec3>,
}

fn local_case(seed: u64, m: usize, n: usize, dim: usize) -> LocalCase {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let p2 = store.add("d2", Group::Local, gaussian_tensor(m, dim, 1.0, &mut r));
    let p3 = store.add("d3", Group::Local, gaussian_tensor(n, dim, 1.0, &mut r));
    let queries = (0..m).map(|_| [r.gen(), r.gen(), r.gen()]).collect();
    let centers = (0..n).map(|_| [r.gen(), r.gen(), r.gen()]).collect();
    LocalCase { store, p2, p3, queries, centers }
}

#[test]
fn local_loss_gradients_with_hard_negatives() {
    for seed in 0..20 {
        let mut case = local_case(seed, 7, 9, 5);
        let c = LocalLossConfig { sigma: 0.3, temperature: 0.2, delta: 0.25, hard_k: 3, hard_weight: 0.5 };
        let a = assign(&case.queries, &case.centers, &c);
        let (p2, p3) = (case.p2, case.p3);
        let report = check_gradients(
            &mut case.store,
            &[p2, p3],
            |g| {
                let x = g.param(p2);
                let x = g.l2_normalize_rows(x);
                let y = g.param(p3);
                let y = g.l2_normalize_rows(y);
                Ok(local_loss(g, x, y, &a, &c).unwrap().total)
            },
            DEFAULT_STEP,
            64,
        )
        .unwrap();
        assert!(report.passes(DEFAULT_TOLERANCE), "seed {seed}: {}", report.max_rel_err());
    }
}

#[test]
fn excluded_tokens_never_reach_a_denominator() {
    // Token 2 lies within delta of every query and owns no query.
    let queries = [[0.0, 0.0, 0.0], [0.1, 0.0, 0.0]];
    let centers = [[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [0.05, 0.01, 0.0]];
    let c = LocalLossConfig { temperature: 0.1, delta: 0.2, hard_k: 2, hard_weight: 0.5, ..Default::default() };
    let d2 = unit_rows(&[&[1.0, 0.2, 0.0], &[0.1, 1.0, 0.3]]);
    let base = unit_rows(&[&[1.0, 0.0, 0.1], &[0.0, 1.0, 0.0], &[0.5, 0.5, 0.5]]);
    let mut other = base.clone();
    other.row_mut(2).copy_from_slice(&[-1.0, 0.0, 0.0]);
    let a = local_value(&d2, &base, &queries, &centers, &c);
    let b = local_value(&d2, &other, &queries, &centers, &c);
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn local_loss_is_nonnegative(seed in 0u64..100_000, m in 1usize..12, n in 1usize..12, hard in 0usize..4) {
        let case = local_case(seed, m, n, 4);
        let c = LocalLossConfig { sigma: 0.2, temperature: 0.1, delta: 0.2, hard_k: hard, hard_weight: 0.5 };
        let a = assign(&case.queries, &case.centers, &c);
        let g0 = Graph::new(&case.store);
        drop(g0);
        let mut g = Graph::new(&case.store);
        let x = g.param(case.p2);
        let x = g.l2_normalize_rows(x);
        let y = g.param(case.p3);
        let y = g.l2_normalize_rows(y);
        let t = local_loss(&mut g, x, y, &a, &c).unwrap();
        for v in [Some(t.total), Some(t.forward), Some(t.reverse), t.forward_hard, t.reverse_hard].into_iter().flatten() {
            prop_assert!(g.value(v).item() >= -1e-12);
        }
    }
}

#[test]
fn shared_encoders_and_heads() {
    let mut store = ParamStore::new();
    let enc = SharedEncoders::new(&mut store, 6, 3, 5, 8, 4, &mut rng(1));
    let heads = LocalHeads::new(&mut store, 4, 3, &mut rng(2));
    let mut r = rng(3);
    let x = gaussian_tensor(5, 6, 1.0, &mut r);
    let c = gaussian_tensor(5, 3, 1.0, &mut r);
    let z = gaussian_tensor(4, 5, 1.0, &mut r);

    let mut g = Graph::new(&store);
    let (xv, cv) = (g.constant(x.clone()), g.constant(c.clone()));
    let h = enc.encode_2d(&mut g, xv, cv);
    let d = project_local(&mut g, &heads.head2d, h);
    for row in 0..5 {
        let n: f64 = g.value(d).row(row).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }
    let h2 = g.scale(h, 2.0);
    let d2 = project_local(&mut g, &heads.head2d, h2);
    for (a, b) in g.value(d).data().iter().zip(g.value(d2).data()) {
        assert!((a - b).abs() < 1e-12);
    }

    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    let report = check_gradients(
        &mut store,
        &ids,
        |g| {
            let (xv, cv, zv) = (g.constant(x.clone()), g.constant(c.clone()), g.constant(z.clone()));
            let h2 = enc.encode_2d(g, xv, cv);
            let h3 = enc.encode_3d(g, zv);
            let a = project_local(g, &heads.head2d, h2);
            let b = project_local(g, &heads.head3d, h3);
            let s = g.matmul_nt(a, b);
            let n = g.value(s).len();
            Ok(g.weighted_sum(s, (0..n).map(|i| (i % 7) as f64 - 3.0).collect()))
        },
        DEFAULT_STEP,
        32,
    )
    .unwrap();
    assert!(report.passes(DEFAULT_TOLERANCE), "{}", report.max_rel_err());

    // Zero weights: the output is the final bias whatever the input.
    for (id, p) in store.iter().map(|(id, p)| (id, p.name.clone())).collect::<Vec<_>>() {
        if p.starts_with("shared.f3d") && !p.ends_with(".bias") {
            store.value_mut(id).data_mut().fill(0.0);
        }
    }
    let mut g = Graph::new(&store);
    let zv = g.constant(z);
    let h = enc.encode_3d(&mut g, zv);
    let h = g.value(h);
    for r in 1..h.rows() {
        assert_eq!(h.row(r), h.row(0));
    }
}

fn dims() -> GlobalDims {
    GlobalDims { shared: 8, context: 3, teacher: 4, global: 5, hidden: 12, heads: 2 }
}

#[test]
fn global_loss_closed_forms() {
    let one = unit_rows(&[&[0.2, 0.9, 0.1]]);
    let other = unit_rows(&[&[0.7, 0.0, 0.1]]);
    let v = eval(|g| {
        let (a, b, t) = (g.constant(one.clone()), g.constant(other.clone()), g.constant(Tensor::scalar(0.07)));
        global_loss(g, a, b, t)
    });
    assert_eq!(v, 0.0);

    let e = unit_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let v = eval(|g| {
        let (a, b, t) = (g.constant(e.clone()), g.constant(e.clone()), g.constant(Tensor::scalar(1.0)));
        global_loss(g, a, b, t)
    });
    assert!((v - LOG_1P_EXP_NEG1).abs() < 1e-9);
}

#[test]
fn global_loss_gradients_include_temperature() {
    for seed in 0..20 {
        let mut r = rng(100 + seed);
        let mut store = ParamStore::new();
        let a = store.add("a", Group::Global, gaussian_tensor(4, 5, 1.0, &mut r));
        let b = store.add("b", Group::Global, gaussian_tensor(4, 5, 1.0, &mut r));
        let t = store.add("t", Group::Global, Tensor::scalar(r.gen_range(0.05..0.5)));
        let report = check_gradients(
            &mut store,
            &[a, b, t],
            |g| {
                let x = g.param(a);
                let x = g.l2_normalize_rows(x);
                let y = g.param(b);
                let y = g.l2_normalize_rows(y);
                let tau = g.param(t);
                Ok(global_loss(g, x, y, tau))
            },
            DEFAULT_STEP,
            32,
        )
        .unwrap();
        assert!(report.passes(DEFAULT_TOLERANCE), "{}", report.max_rel_err());
    }
}

#[test]
fn global_loss_is_row_permutation_invariant() {
    let mut r = rng(8);
    let a = gaussian_tensor(5, 4, 1.0, &mut r);
    let b = gaussian_tensor(5, 4, 1.0, &mut r);
    let perm = [3, 0, 4, 1, 2];
    let permute = |t: &Tensor| Tensor::from_rows(&perm.map(|i| t.row(i).to_vec())).unwrap();
    let run = |a: &Tensor, b: &Tensor| {
        eval(|g| {
            let (x, y, t) = (g.constant(a.clone()), g.constant(b.clone()), g.constant(Tensor::scalar(0.2)));
            let (x, y) = (g.l2_normalize_rows(x), g.l2_normalize_rows(y));
            global_loss(g, x, y, t)
        })
    };
    assert!((run(&a, &b) - run(&permute(&a), &permute(&b))).abs() < 1e-12);
}

#[test]
fn subset_loss_examples() {
    let t = unit_rows(&[&[0.3, -0.4, 0.5]]);
    let neg = Tensor::from_rows(&[t.row(0).iter().map(|x| -x).collect::<Vec<_>>()]).unwrap();
    assert!(eval(|g| {
        let s = g.constant(t.clone());
        subset_loss(g, s, &t)
    })
    .abs()
        < 1e-12);
    assert!(
        (eval(|g| {
            let s = g.constant(neg.clone());
            subset_loss(g, s, &t)
        }) - 2.0)
            .abs()
            < 1e-12
    );
}

fn kl_oracle(t: &Tensor, a: &Tensor, b: &Tensor, tau: f64) -> f64 {
    let n = t.rows();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    let mut total = 0.0;
    for i in 0..n {
        let p: Vec<f64> = (0..n).map(|j| (dot(t.row(i), t.row(j)) / tau).exp()).collect();
        let q: Vec<f64> = (0..n).map(|j| (dot(a.row(i), b.row(j)) / tau).exp()).collect();
        let (zp, zq) = (p.iter().sum::<f64>(), q.iter().sum::<f64>());
        for j in 0..n {
            let (pj, qj) = (p[j] / zp, q[j] / zq);
            total += pj * (pj / qj).ln();
        }
    }
    total / n as f64
}

fn distill(t: &Tensor, a: &Tensor, b: &Tensor, tau: f64) -> f64 {
    eval(|g| {
        let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
        distill_loss(g, t, x, y, tau)
    })
}

#[test]
fn distill_loss_examples() {
    let t = unit_rows(&[&[1.0, 0.2], &[0.1, 1.0]]);
    assert!(distill(&t, &t, &t, 0.07).abs() < 1e-12);

    let single = unit_rows(&[&[0.6, 0.8]]);
    let g = unit_rows(&[&[1.0, 0.0]]);
    assert!(distill(&single, &g, &g, 0.05).abs() < 1e-12);

    let a = unit_rows(&[&[1.0, 0.0, 0.0], &[0.6, 0.8, 0.0]]);
    let b = unit_rows(&[&[0.0, 1.0, 0.0], &[0.5, 0.5, 0.7]]);
    let v = distill(&t, &a, &b, 0.5);
    assert!((v - kl_oracle(&t, &a, &b, 0.5)).abs() < 1e-10);
    assert!(v > 0.0);

    // Rotating every teacher token leaves T T^T and hence the loss unchanged.
    let (c, s) = (0.3f64.cos(), 0.3f64.sin());
    let rot = Tensor::from_rows(&[[c, -s], [s, c]]).unwrap();
    let rotated = pixpoint::grad::matmul(&t, &rot);
    assert!((distill(&rotated, &a, &b, 0.5) - v).abs() < 1e-12);
    let p = teacher_distribution(&t, 0.5);
    for r in 0..2 {
        assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn distill_loss_is_never_negative() {
    let mut r = rng(77);
    for _ in 0..10_000 {
        let n = r.gen_range(1..5);
        let t = gaussian_tensor(n, 3, 1.0, &mut r);
        let a = gaussian_tensor(n, 3, 1.0, &mut r);
        let b = gaussian_tensor(n, 3, 1.0, &mut r);
        let v = distill(&t, &a, &b, r.gen_range(0.05..1.0));
        assert!(v >= -1e-12, "{v}");
    }
}

#[test]
fn distill_and_subset_gradients() {
    for seed in 0..20 {
        let mut r = rng(300 + seed);
        let teacher = gaussian_tensor(3, 4, 1.0, &mut r);
        let target = unit_rows(&[&[0.1, 0.2, 0.3, 0.4, 0.5]]);
        let mut store = ParamStore::new();
        let a = store.add("a", Group::Global, gaussian_tensor(3, 5, 1.0, &mut r));
        let b = store.add("b", Group::Global, gaussian_tensor(3, 5, 1.0, &mut r));
        let report = check_gradients(
            &mut store,
            &[a, b],
            |g| {
                let x = g.param(a);
                let x = g.l2_normalize_rows(x);
                let y = g.param(b);
                let y = g.l2_normalize_rows(y);
                let kl = distill_loss(g, &teacher, x, y, 0.3);
                let first = g.gather_rows(x, &[0]);
                let sub = subset_loss(g, first, &target);
                Ok(g.add(kl, sub))
            },
            DEFAULT_STEP,
            32,
        )
        .unwrap();
        assert!(report.passes(DEFAULT_TOLERANCE), "{}", report.max_rel_err());
    }
}

#[test]
fn fusion_with_neutral_gate() {
    let mut store = ParamStore::new();
    let gb = GlobalBranch::new(&mut store, dims(), &mut rng(5)).unwrap();
    for (id, name) in store.iter().map(|(id, p)| (id, p.name.clone())).collect::<Vec<_>>() {
        if name.starts_with("global.gate") {
            store.value_mut(id).data_mut().fill(0.0);
        }
    }
    let mut r = rng(6);
    let pooled = gaussian_tensor(3, 8, 1.0, &mut r);
    let ctx = gaussian_tensor(3, 3, 1.0, &mut r);
    let teach = gaussian_tensor(3, 4, 1.0, &mut r);
    let u = store.value(gb.context_map.weight).clone();
    let w = store.value(gb.teacher_map.weight).clone();
    let mut g = Graph::new(&store);
    let (p, c, t) = (g.constant(pooled.clone()), g.constant(ctx.clone()), g.constant(teach.clone()));
    let out = gb.fuse_views(&mut g, p, c, Some(t));
    let uc = pixpoint::grad::matmul(&ctx, &u);
    let wd = pixpoint::grad::matmul(&teach, &w);
    for i in 0..pooled.len() {
        let expect = pooled.data()[i] + 0.5 * uc.data()[i] + 0.5 * wd.data()[i];
        assert!((g.value(out).data()[i] - expect).abs() < 1e-12);
    }

    // Zero teacher tokens with bias-free maps drop the teacher term entirely.
    let zero = g.constant(Tensor::zeros(3, 4));
    let out = gb.fuse_views(&mut g, p, c, Some(zero));
    for i in 0..pooled.len() {
        let expect = pooled.data()[i] + 0.5 * uc.data()[i];
        assert!((g.value(out).data()[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn pooling_and_encoders() {
    let mut store = ParamStore::new();
    let gb = GlobalBranch::new(&mut store, dims(), &mut rng(9)).unwrap();
    let mut r = rng(10);
    let tokens = gaussian_tensor(6, 8, 1.0, &mut r);
    let mut g = Graph::new(&store);
    let tv = g.constant(tokens.clone());
    let (pooled, valid) = pool_views(&mut g, tv, &[vec![2], vec![], vec![0, 1, 3], vec![5, 4]]);
    assert_eq!(valid, vec![true, false, true, true]);
    assert_eq!(g.value(pooled).row(0), tokens.row(2));
    assert!(g.value(pooled).row(1).iter().all(|&x| x == 0.0));
    assert!(matches!(gb.encode_2d(&mut g, pooled, &[false; 4]), Err(Error::NoValidViews)));

    // View order and an invalid view do not matter.
    let views = gaussian_tensor(3, 8, 1.0, &mut r);
    let perm = Tensor::from_rows(&[views.row(2), views.row(0), &[9.0; 8][..], views.row(1)]).unwrap();
    let v1 = g.constant(views.clone());
    let v2 = g.constant(perm);
    let a = gb.encode_2d(&mut g, v1, &[true; 3]).unwrap();
    let b = gb.encode_2d(&mut g, v2, &[true, true, false, true]).unwrap();
    for (x, y) in g.value(a).data().iter().zip(g.value(b).data()) {
        assert!((x - y).abs() < 1e-12);
    }
    let n: f64 = g.value(a).data().iter().map(|x| x * x).sum();
    assert!((n - 1.0).abs() < 1e-9);

    let shuffled = Tensor::from_rows(&[5, 3, 0, 1, 4, 2].map(|i| tokens.row(i).to_vec())).unwrap();
    let (t1, t2) = (g.constant(tokens.clone()), g.constant(shuffled));
    let a = gb.encode_3d(&mut g, t1);
    let b = gb.encode_3d(&mut g, t2);
    for (x, y) in g.value(a).data().iter().zip(g.value(b).data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn global_branch_gradients() {
    for seed in 0..20 {
        let mut store = ParamStore::new();
        let gb = GlobalBranch::new(&mut store, dims(), &mut rng(seed)).unwrap();
        let mut r = rng(1000 + seed);
        let tokens2 = gaussian_tensor(7, 8, 1.0, &mut r);
        let ctx = gaussian_tensor(2, 3, 1.0, &mut r);
        let teach = gaussian_tensor(2, 4, 1.0, &mut r);
        let tokens3 = gaussian_tensor(5, 8, 1.0, &mut r);
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        let f = |g: &mut Graph| -> Result<Var> {
            let (t2, c, d, t3) = (
                g.constant(tokens2.clone()),
                g.constant(ctx.clone()),
                g.constant(teach.clone()),
                g.constant(tokens3.clone()),
            );
            let (pooled, valid) = pool_views(g, t2, &[vec![0, 1, 2], vec![3, 4, 5, 6]]);
            let fused = gb.fuse_views(g, pooled, c, Some(d));
            let g2 = gb.encode_2d(g, fused, &valid)?;
            let g3 = gb.encode_3d(g, t3);
            let s = g.matmul_nt(g2, g3);
            let tau = g.param(gb.tau);
            Ok(g.div_scalar(s, tau))
        };
        let report = check_gradients(&mut store, &ids, f, DEFAULT_STEP, 8).unwrap();
        let worst = report.entries.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err)).unwrap();
        assert!(report.passes(DEFAULT_TOLERANCE), "seed {seed}: {worst:?}");
    }
}
