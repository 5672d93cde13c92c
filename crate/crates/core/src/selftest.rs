//! Built-in verification suite: finite-difference gradient checks of every
//! differentiable component, loss closed forms, and brute-force oracles for
//! the metrics and geometric algorithms.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{assign, local_loss, project_local, LocalHeads, LocalLossConfig, SharedEncoders};
use crate::error::Result;
use crate::eval::{loc_acc, loc_score, retrieval_eval};
use crate::geom::{dist, dist2, Vec3};
use crate::globalbranch::{distill_loss, global_loss, pool_views, subset_loss, GlobalBranch, GlobalDims};
use crate::grad::check::{check_gradients, GradCheckReport, DEFAULT_STEP, DEFAULT_TOLERANCE};
use crate::grad::nn::AttentionBlock;
use crate::grad::{gaussian_tensor, Graph, Group, ParamId, ParamStore, Tensor, Var};
use crate::parttransfer::{dbscan, flood_fill, NOISE};
use crate::pointset::{farthest_point_sample, k_nearest};
use crate::tokenize3d::{build_field, SetEncoder, Tokenizer3dConfig};

pub const GRAD_INSTANCES: u64 = 20;
pub const ORACLE_INSTANCES: u64 = 100;
pub const KL_TRIALS: usize = 10_000;
const ORTHOGONAL_PAIR_LOSS: f64 = 0.313_261_687_518_222_8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub instances: usize,
    /// Worst relative error or absolute deviation seen.
    pub worst: f64,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, instances: usize, worst: f64, tol: f64, detail: String) -> Self {
        CheckResult { name: name.into(), passed: worst <= tol, instances, worst, detail }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn reduce(g: &mut Graph, v: Var) -> Var {
    let n = g.value(v).len();
    g.weighted_sum(v, (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect())
}

fn all_ids(store: &ParamStore) -> Vec<ParamId> {
    store.iter().map(|(id, _)| id).collect()
}

/// Runs `case` for each instance seed and keeps the worst relative error.
fn grad_suite(name: &str, mut case: impl FnMut(u64) -> Result<GradCheckReport>) -> CheckResult {
    let mut worst: f64 = 0.0;
    let mut detail = String::new();
    for seed in 0..GRAD_INSTANCES {
        match case(seed) {
            Ok(r) => {
                let e = r.max_rel_err();
                if e > worst || r.entries.is_empty() {
                    worst = if r.entries.is_empty() { f64::INFINITY } else { e };
                    detail = format!("worst at instance {seed}");
                }
            }
            Err(e) => {
                worst = f64::INFINITY;
                detail = format!("instance {seed}: {e}");
                break;
            }
        }
    }
    CheckResult::new(name, GRAD_INSTANCES as usize, worst, DEFAULT_TOLERANCE, detail)
}

fn unit(g: &mut Graph, id: ParamId) -> Var {
    let x = g.param(id);
    g.l2_normalize_rows(x)
}

pub fn gradient_checks() -> Vec<CheckResult> {
    let gdims = GlobalDims { shared: 8, context: 3, teacher: 4, global: 5, hidden: 12, heads: 2 };
    vec![
        grad_suite("grad/shared-encoders", |seed| {
            let mut store = ParamStore::new();
            let enc = SharedEncoders::new(&mut store, 6, 3, 5, 8, 4, &mut rng(seed));
            let mut r = rng(500 + seed);
            let (x, c, z) =
                (gaussian_tensor(4, 6, 1.0, &mut r), gaussian_tensor(4, 3, 1.0, &mut r), gaussian_tensor(3, 5, 1.0, &mut r));
            let ids = all_ids(&store);
            check_gradients(
                &mut store,
                &ids,
                |g| {
                    let (x, c, z) = (g.constant(x.clone()), g.constant(c.clone()), g.constant(z.clone()));
                    let h2 = enc.encode_2d(g, x, c);
                    let h3 = enc.encode_3d(g, z);
                    let s = g.matmul_nt(h2, h3);
                    Ok(reduce(g, s))
                },
                DEFAULT_STEP,
                16,
            )
        }),
        grad_suite("grad/local-heads", |seed| {
            let mut store = ParamStore::new();
            let heads = LocalHeads::new(&mut store, 6, 4, &mut rng(seed));
            let mut r = rng(600 + seed);
            let (a, b) = (gaussian_tensor(5, 6, 1.0, &mut r), gaussian_tensor(4, 6, 1.0, &mut r));
            let ids = all_ids(&store);
            check_gradients(
                &mut store,
                &ids,
                |g| {
                    let (a, b) = (g.constant(a.clone()), g.constant(b.clone()));
                    let d2 = project_local(g, &heads.head2d, a);
                    let d3 = project_local(g, &heads.head3d, b);
                    let s = g.matmul_nt(d2, d3);
                    Ok(reduce(g, s))
                },
                DEFAULT_STEP,
                32,
            )
        }),
        grad_suite("grad/local-loss-hard-negatives", |seed| {
            let mut r = rng(700 + seed);
            let mut store = ParamStore::new();
            let p2 = store.add("d2", Group::Local, gaussian_tensor(7, 5, 1.0, &mut r));
            let p3 = store.add("d3", Group::Local, gaussian_tensor(9, 5, 1.0, &mut r));
            let q: Vec<Vec3> = (0..7).map(|_| [r.gen(), r.gen(), r.gen()]).collect();
            let c: Vec<Vec3> = (0..9).map(|_| [r.gen(), r.gen(), r.gen()]).collect();
            let cfg = LocalLossConfig { sigma: 0.3, temperature: 0.2, delta: 0.25, hard_k: 3, hard_weight: 0.5 };
            let a = assign(&q, &c, &cfg);
            check_gradients(
                &mut store,
                &[p2, p3],
                |g| {
                    let (x, y) = (unit(g, p2), unit(g, p3));
                    Ok(local_loss(g, x, y, &a, &cfg).map(|t| t.total).unwrap_or_else(|| g.constant(Tensor::scalar(0.0))))
                },
                DEFAULT_STEP,
                64,
            )
        }),
        grad_suite("grad/fusion", |seed| {
            let mut store = ParamStore::new();
            let gb = GlobalBranch::new(&mut store, gdims, &mut rng(seed))?;
            let mut r = rng(800 + seed);
            let (p, c, d) =
                (gaussian_tensor(3, 8, 1.0, &mut r), gaussian_tensor(3, 3, 1.0, &mut r), gaussian_tensor(3, 4, 1.0, &mut r));
            let ids: Vec<ParamId> = store
                .iter()
                .filter(|(_, p)| ["global.u", "global.wd", "global.gate"].iter().any(|n| p.name.starts_with(n)))
                .map(|(id, _)| id)
                .collect();
            check_gradients(
                &mut store,
                &ids,
                |g| {
                    let (p, c, d) = (g.constant(p.clone()), g.constant(c.clone()), g.constant(d.clone()));
                    let f = gb.fuse_views(g, p, c, Some(d));
                    Ok(reduce(g, f))
                },
                DEFAULT_STEP,
                16,
            )
        }),
        grad_suite("grad/attention-block", |seed| {
            let mut store = ParamStore::new();
            let mut r = rng(900 + seed);
            let att = AttentionBlock::new(&mut store, "att", Group::Global, 8, 2, 12, &mut r)?;
            let x = gaussian_tensor(5, 8, 1.0, &mut r);
            let ids = all_ids(&store);
            check_gradients(
                &mut store,
                &ids,
                |g| {
                    let h = g.constant(x.clone());
                    let h = att.forward(g, h);
                    Ok(reduce(g, h))
                },
                DEFAULT_STEP,
                12,
            )
        }),
        grad_suite("grad/global-loss-with-temperature", |seed| {
            let mut r = rng(1000 + seed);
            let mut store = ParamStore::new();
            let a = store.add("a", Group::Global, gaussian_tensor(4, 5, 1.0, &mut r));
            let b = store.add("b", Group::Global, gaussian_tensor(4, 5, 1.0, &mut r));
            let t = store.add("t", Group::Global, Tensor::scalar(r.gen_range(0.05..0.5)));
            check_gradients(
                &mut store,
                &[a, b, t],
                |g| {
                    let (x, y) = (unit(g, a), unit(g, b));
                    let tau = g.param(t);
                    Ok(global_loss(g, x, y, tau))
                },
                DEFAULT_STEP,
                32,
            )
        }),
        grad_suite("grad/subset-loss", |seed| {
            let mut r = rng(1100 + seed);
            let mut store = ParamStore::new();
            let a = store.add("a", Group::Global, gaussian_tensor(1, 5, 1.0, &mut r));
            let mut target = gaussian_tensor(1, 5, 1.0, &mut r);
            let n = target.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            target.data_mut().iter_mut().for_each(|x| *x /= n);
            check_gradients(
                &mut store,
                &[a],
                |g| {
                    let x = unit(g, a);
                    Ok(subset_loss(g, x, &target))
                },
                DEFAULT_STEP,
                8,
            )
        }),
        grad_suite("grad/distill-loss", |seed| {
            let mut r = rng(1200 + seed);
            let teacher = gaussian_tensor(3, 4, 1.0, &mut r);
            let mut store = ParamStore::new();
            let a = store.add("a", Group::Global, gaussian_tensor(3, 5, 1.0, &mut r));
            let b = store.add("b", Group::Global, gaussian_tensor(3, 5, 1.0, &mut r));
            let tau = r.gen_range(0.1..0.5);
            check_gradients(
                &mut store,
                &[a, b],
                |g| {
                    let (x, y) = (unit(g, a), unit(g, b));
                    Ok(distill_loss(g, &teacher, x, y, tau))
                },
                DEFAULT_STEP,
                32,
            )
        }),
        grad_suite("grad/global-branch", |seed| {
            let mut store = ParamStore::new();
            let gb = GlobalBranch::new(&mut store, gdims, &mut rng(seed))?;
            let mut r = rng(1300 + seed);
            let t2 = gaussian_tensor(7, 8, 1.0, &mut r);
            let ctx = gaussian_tensor(2, 3, 1.0, &mut r);
            let teach = gaussian_tensor(2, 4, 1.0, &mut r);
            let t3 = gaussian_tensor(5, 8, 1.0, &mut r);
            let ids = all_ids(&store);
            check_gradients(
                &mut store,
                &ids,
                |g| {
                    let (t2, c, d, t3) = (
                        g.constant(t2.clone()),
                        g.constant(ctx.clone()),
                        g.constant(teach.clone()),
                        g.constant(t3.clone()),
                    );
                    let (pooled, valid) = pool_views(g, t2, &[vec![0, 1, 2], vec![3, 4, 5, 6]]);
                    let fused = gb.fuse_views(g, pooled, c, Some(d));
                    let g2 = gb.encode_2d(g, fused, &valid)?;
                    let g3 = gb.encode_3d(g, t3);
                    let s = g.matmul_nt(g2, g3);
                    let tau = g.param(gb.tau);
                    let s = g.div_scalar(s, tau);
                    Ok(reduce(g, s))
                },
                DEFAULT_STEP,
                4,
            )
        }),
        grad_suite("grad/set-encoder", |seed| {
            let cfg = Tokenizer3dConfig { num_tokens: 4, neighbors: 5, point_dim: 6, latent_dim: 5 };
            let mut store = ParamStore::new();
            let enc = SetEncoder::new(&mut store, &cfg, &mut rng(seed));
            let mut r = rng(1400 + seed);
            let cloud: Vec<[f32; 6]> = (0..40)
                .map(|_| {
                    let mut p = [0f32; 6];
                    p[..3].iter_mut().for_each(|v| *v = r.gen());
                    p[3 + r.gen_range(0..3)] = 1.0;
                    p
                })
                .collect();
            let field = build_field(&cloud, cfg.num_tokens, cfg.neighbors)?;
            let ids = all_ids(&store);
            check_gradients(
                &mut store,
                &ids,
                |g| {
                    let z = enc.forward(g, &field);
                    Ok(reduce(g, z))
                },
                DEFAULT_STEP,
                12,
            )
        }),
    ]
}

fn const_eval(f: impl FnOnce(&mut Graph) -> Var) -> f64 {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let v = f(&mut g);
    g.value(v).item()
}

fn unit_tensor(rows: &[&[f64]]) -> Tensor {
    let mut t = Tensor::from_rows(rows).expect("rectangular rows");
    for r in 0..t.rows() {
        let n = t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
        t.row_mut(r).iter_mut().for_each(|x| *x /= n);
    }
    t
}

fn distill_value(t: &Tensor, a: &Tensor, b: &Tensor, tau: f64) -> f64 {
    const_eval(|g| {
        let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
        distill_loss(g, t, x, y, tau)
    })
}

pub fn closed_form_checks() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let (one, other) = (unit_tensor(&[&[0.2, 0.9, 0.1]]), unit_tensor(&[&[0.7, 0.0, 0.1]]));
    let v = const_eval(|g| {
        let (a, b, t) = (g.constant(one.clone()), g.constant(other.clone()), g.constant(Tensor::scalar(0.07)));
        global_loss(g, a, b, t)
    });
    out.push(CheckResult::new("closed-form/global-batch-of-one", 1, v.abs(), 0.0, format!("loss {v}")));

    // Every other token lies inside the exclusion radius.
    let c = LocalLossConfig { temperature: 0.07, delta: 10.0, ..LocalLossConfig::default() };
    let a = assign(&[[0.0; 3]], &[[0.0; 3], [0.5, 0.0, 0.0]], &c);
    let d = unit_tensor(&[&[1.0, 0.0]]);
    let d3 = unit_tensor(&[&[0.6, 0.8], &[0.0, 1.0]]);
    let v = const_eval(|g| {
        let (x, y) = (g.constant(d.clone()), g.constant(d3.clone()));
        local_loss(g, x, y, &a, &c).map(|t| t.total).unwrap_or_else(|| g.constant(Tensor::scalar(0.0)))
    });
    out.push(CheckResult::new("closed-form/local-empty-negatives", 1, v.abs(), 0.0, format!("loss {v}")));

    let e = unit_tensor(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let v = const_eval(|g| {
        let (a, b, t) = (g.constant(e.clone()), g.constant(e.clone()), g.constant(Tensor::scalar(1.0)));
        global_loss(g, a, b, t)
    });
    let dev = (v - ORTHOGONAL_PAIR_LOSS).abs();
    out.push(CheckResult::new("closed-form/global-orthogonal-pair", 1, dev, 1e-9, format!("loss {v:.12}")));

    let c = LocalLossConfig { temperature: 1.0, delta: 0.02, ..LocalLossConfig::default() };
    let pts = [[0.0; 3], [1.0, 0.0, 0.0]];
    let a = assign(&pts, &pts, &c);
    let v = const_eval(|g| {
        let (x, y) = (g.constant(e.clone()), g.constant(e.clone()));
        local_loss(g, x, y, &a, &c).expect("two queries").total
    });
    let dev = (v - ORTHOGONAL_PAIR_LOSS).abs();
    out.push(CheckResult::new("closed-form/local-orthogonal-pair", 1, dev, 1e-9, format!("loss {v:.12}")));

    let t = unit_tensor(&[&[1.0, 0.2], &[0.1, 1.0]]);
    let v = distill_value(&t, &t, &t, 0.07);
    out.push(CheckResult::new("closed-form/distill-matched", 1, v.abs(), 1e-12, format!("loss {v}")));

    let mut r = rng(77);
    let mut lowest = f64::INFINITY;
    for _ in 0..KL_TRIALS {
        let n = r.gen_range(1..5);
        let t = gaussian_tensor(n, 3, 1.0, &mut r);
        let a = gaussian_tensor(n, 3, 1.0, &mut r);
        let b = gaussian_tensor(n, 3, 1.0, &mut r);
        lowest = lowest.min(distill_value(&t, &a, &b, r.gen_range(0.05..1.0)));
    }
    let neg = (-lowest).max(0.0);
    out.push(CheckResult::new("closed-form/distill-non-negative", KL_TRIALS, neg, 1e-12, format!("minimum {lowest:e}")));
    out
}

fn random_points(r: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
    (0..n).map(|_| [r.gen(), r.gen(), r.gen()]).collect()
}

fn oracle_suite(name: &str, mut case: impl FnMut(u64) -> bool) -> CheckResult {
    let failed: Vec<u64> = (0..ORACLE_INSTANCES).filter(|&s| !case(s)).collect();
    let detail = match failed.first() {
        Some(s) => format!("{} mismatches, first at instance {s}", failed.len()),
        None => String::new(),
    };
    CheckResult::new(name, ORACLE_INSTANCES as usize, failed.len() as f64, 0.0, detail)
}

fn unit_gaussian(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = gaussian_tensor(rows, cols, 1.0, r);
    for i in 0..rows {
        let n = t.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        t.row_mut(i).iter_mut().for_each(|x| *x /= n);
    }
    t
}

// Selection sort by (similarity desc, index asc), recomputing each dot product.
fn ranking_oracle(q: &[f64], gallery: &Tensor) -> Vec<usize> {
    let sim = |i: usize| -> f64 { q.iter().zip(gallery.row(i)).map(|(a, b)| a * b).sum() };
    let mut left: Vec<usize> = (0..gallery.rows()).collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for j in 1..left.len() {
            if sim(left[j]) > sim(left[best]) {
                best = j;
            }
        }
        out.push(left.remove(best));
    }
    out
}

fn fps_oracle(points: &[Vec3], k: usize) -> Vec<usize> {
    if k >= points.len() {
        return (0..points.len()).collect();
    }
    let n = points.len() as f64;
    let c = [0, 1, 2].map(|a| points.iter().map(|p| p[a]).sum::<f64>() / n);
    let mut first = 0;
    for i in 1..points.len() {
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

/// Reference DBSCAN labels: core points grouped by union-find over
/// eps-adjacency, clusters numbered by their lowest core index, border points
/// joining the lowest-numbered adjacent cluster.
pub fn dbscan_oracle(points: &[Vec3], eps: f64, min_pts: usize) -> Vec<i32> {
    let n = points.len();
    let near = |i: usize, j: usize| dist(points[i], points[j]) <= eps;
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| near(i, j)).count() >= min_pts).collect();
    let mut uf = UnionFind::new(n);
    for i in 0..n {
        for j in i + 1..n {
            if core[i] && core[j] && near(i, j) {
                uf.union(i, j);
            }
        }
    }
    let mut root_label = vec![NOISE; n];
    let mut next = 0;
    let mut labels = vec![NOISE; n];
    for i in 0..n {
        if core[i] {
            let r = uf.find(i);
            if root_label[r] == NOISE {
                root_label[r] = next;
                next += 1;
            }
            labels[i] = root_label[r];
        }
    }
    for i in 0..n {
        if !core[i] {
            labels[i] = (0..n).filter(|&j| core[j] && near(i, j)).map(|j| labels[j]).min().unwrap_or(NOISE);
        }
    }
    labels
}

pub struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect() }
    }

    pub fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.parent[r] != r {
            r = self.parent[r];
        }
        let mut c = x;
        while self.parent[c] != r {
            let next = self.parent[c];
            self.parent[c] = r;
            c = next;
        }
        r
    }

    pub fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Reference flood fill: union-find components of the allowed subgraph, the
/// largest one touching a seed (ties to the earliest seed).
pub fn flood_fill_oracle(seeds: &[u32], adjacency: &[Vec<u32>], allowed: &[bool]) -> Vec<u32> {
    let n = adjacency.len();
    let ok: Vec<bool> = (0..n).map(|f| allowed[f] || seeds.contains(&(f as u32))).collect();
    let mut uf = UnionFind::new(n);
    for f in 0..n {
        for &g in &adjacency[f] {
            if ok[f] && ok[g as usize] {
                uf.union(f, g as usize);
            }
        }
    }
    let mut best: Vec<u32> = Vec::new();
    for &s in seeds {
        let root = uf.find(s as usize);
        let members: Vec<u32> = (0..n).filter(|&f| ok[f] && uf.find(f) == root).map(|f| f as u32).collect();
        if members.len() > best.len() {
            best = members;
        }
    }
    best
}

/// Random undirected graph with a few clumps, as adjacency lists.
fn random_graph(r: &mut ChaCha8Rng, n: usize) -> Vec<Vec<u32>> {
    let mut adj = vec![BTreeSet::new(); n];
    for _ in 0..n + n / 2 {
        let a = r.gen_range(0..n);
        let b = (a + r.gen_range(1..4)) % n;
        if a != b {
            adj[a].insert(b as u32);
            adj[b].insert(a as u32);
        }
    }
    adj.into_iter().map(|s| s.into_iter().collect()).collect()
}

pub fn oracle_checks() -> Vec<CheckResult> {
    vec![
        oracle_suite("oracle/loc-acc", |seed| {
            let mut r = rng(2000 + seed);
            let (m, n, k) = (r.gen_range(1..30), r.gen_range(1..200), [1, 2, 3, 5, 10]);
            let q = unit_gaussian(&mut r, m, 6);
            let t = unit_gaussian(&mut r, n, 6);
            let gt = random_points(&mut r, m);
            let centers = random_points(&mut r, n);
            let got = loc_acc(&q, &gt, &t, &centers, &k, 1.0).expect("nonempty");
            k.iter().enumerate().all(|(j, &kk)| {
                let mean = (0..m)
                    .map(|i| {
                        let rank = ranking_oracle(q.row(i), &t);
                        let d = rank.iter().take(kk).map(|&c| dist(gt[i], centers[c])).fold(f64::INFINITY, f64::min);
                        loc_score(d, 1.0)
                    })
                    .sum::<f64>()
                    / m as f64;
                (mean - got.scores[j]).abs() <= 1e-9
            })
        }),
        oracle_suite("oracle/recall-mrr", |seed| {
            let mut r = rng(3000 + seed);
            let (m, n) = (r.gen_range(1..40), r.gen_range(1..60));
            let q = unit_gaussian(&mut r, m, 4);
            let gal = unit_gaussian(&mut r, n, 4);
            let ql: Vec<u32> = (0..m).map(|_| r.gen_range(0..5)).collect();
            let gl: Vec<u32> = (0..n).map(|_| r.gen_range(0..5)).collect();
            let ks = [1, 2, 5, 10];
            let got = retrieval_eval(&q, &ql, &gal, &gl, &ks).expect("nonempty");
            let ranks: Vec<Option<usize>> = (0..m)
                .map(|i| ranking_oracle(q.row(i), &gal).iter().position(|&g| gl[g] == ql[i]).map(|p| p + 1))
                .collect();
            let recall_ok = ks.iter().enumerate().all(|(j, &k)| {
                let hits = ranks.iter().filter(|r| matches!(r, Some(x) if *x <= k)).count();
                (hits as f64 * 100.0 / m as f64 - got.recall[j]).abs() <= 1e-9
            });
            let mrr = ranks.iter().map(|r| r.map_or(0.0, |x| 100.0 / x as f64)).sum::<f64>() / m as f64;
            recall_ok && (mrr - got.mrr).abs() <= 1e-9
        }),
        oracle_suite("oracle/fps", |seed| {
            let mut r = rng(4000 + seed);
            let n = r.gen_range(1..500);
            let pts = random_points(&mut r, n);
            let k = r.gen_range(1..48);
            farthest_point_sample(&pts, k) == fps_oracle(&pts, k)
        }),
        oracle_suite("oracle/knn", |seed| {
            let mut r = rng(5000 + seed);
            let n = r.gen_range(1..500);
            let pts = random_points(&mut r, n);
            let q = random_points(&mut r, 1)[0];
            let k = r.gen_range(1..20);
            let mut all: Vec<usize> = (0..pts.len()).collect();
            all.sort_by(|&a, &b| dist2(pts[a], q).total_cmp(&dist2(pts[b], q)).then(a.cmp(&b)));
            all.truncate(k);
            k_nearest(&pts, q, k) == all
        }),
        oracle_suite("oracle/dbscan", |seed| {
            let mut r = rng(6000 + seed);
            let n = r.gen_range(1..300);
            let pts: Vec<Vec3> = (0..n).map(|_| [r.gen::<f64>() * 0.6, r.gen::<f64>() * 0.6, r.gen::<f64>() * 0.1]).collect();
            let eps = r.gen_range(0.02..0.12);
            let min_pts = r.gen_range(1..6);
            dbscan(&pts, eps, min_pts) == dbscan_oracle(&pts, eps, min_pts)
        }),
        oracle_suite("oracle/flood-fill", |seed| {
            let mut r = rng(7000 + seed);
            let n = r.gen_range(1..500);
            let adj = random_graph(&mut r, n);
            let allowed: Vec<bool> = (0..n).map(|_| r.gen_bool(0.7)).collect();
            let seeds: Vec<u32> = {
                let mut s: Vec<u32> = (0..r.gen_range(1..6)).map(|_| r.gen_range(0..n as u32)).collect();
                s.dedup();
                s
            };
            flood_fill(&seeds, &adj, &allowed) == flood_fill_oracle(&seeds, &adj, &allowed)
        }),
    ]
}

pub fn run_all() -> Vec<CheckResult> {
    let mut all = gradient_checks();
    all.extend(closed_form_checks());
    all.extend(oracle_checks());
    all
}
