//! Shared token encoders, local descriptor heads, geometric positive
//! assignment and the bidirectional local contrastive loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geom::{dist, Vec3};
use crate::grad::nn::{Linear, ResidualMlp};
use crate::grad::{Graph, Group, ParamStore, Var};

#[derive(Clone, Debug)]
pub struct SharedEncoders {
    pub f2d: ResidualMlp,
    pub f3d: ResidualMlp,
}

impl SharedEncoders {
    pub fn new(
        store: &mut ParamStore,
        feature_dim: usize,
        context_dim: usize,
        latent_dim: usize,
        hidden: usize,
        shared_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        SharedEncoders {
            f2d: ResidualMlp::new(store, "shared.f2d", Group::Shared, [feature_dim + context_dim, hidden, shared_dim], rng),
            f3d: ResidualMlp::new(store, "shared.f3d", Group::Shared, [latent_dim, hidden, shared_dim], rng),
        }
    }

    /// `f2d(x ++ c)` row by row.
    pub fn encode_2d(&self, g: &mut Graph, features: Var, context: Var) -> Var {
        let x = g.concat_cols(&[features, context]);
        self.f2d.forward(g, x)
    }

    pub fn encode_3d(&self, g: &mut Graph, latents: Var) -> Var {
        self.f3d.forward(g, latents)
    }
}

/// Bias-free linear heads followed by row-wise L2 normalization.
#[derive(Clone, Debug)]
pub struct LocalHeads {
    pub head2d: Linear,
    pub head3d: Linear,
}

impl LocalHeads {
    pub fn new(store: &mut ParamStore, shared_dim: usize, local_dim: usize, rng: &mut impl Rng) -> Self {
        LocalHeads {
            head2d: Linear::no_bias(store, "local.head2d", Group::Local, shared_dim, local_dim, rng),
            head3d: Linear::no_bias(store, "local.head3d", Group::Local, shared_dim, local_dim, rng),
        }
    }
}

pub fn project_local(g: &mut Graph, head: &Linear, h: Var) -> Var {
    let y = head.forward(g, h);
    g.l2_normalize_rows(y)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalLossConfig {
    /// Gaussian confidence bandwidth in world units.
    pub sigma: f64,
    pub temperature: f64,
    /// Tokens closer than this to a query are never its negatives.
    pub delta: f64,
    pub hard_k: usize,
    pub hard_weight: f64,
}

impl Default for LocalLossConfig {
    fn default() -> Self {
        LocalLossConfig { sigma: 0.05, temperature: 0.07, delta: 0.02, hard_k: 0, hard_weight: 0.0 }
    }
}

/// Geometric supervision for one object's queries against its tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub positive: Vec<usize>,
    pub weight: Vec<f64>,
    pub num_tokens: usize,
    /// Row-major `M x N`: true when token `n` is within `delta` of query `m`
    /// and is not its positive.
    pub excluded: Vec<bool>,
}

impl Assignment {
    pub fn len(&self) -> usize {
        self.positive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positive.is_empty()
    }

    #[inline]
    pub fn is_excluded(&self, m: usize, n: usize) -> bool {
        self.excluded[m * self.num_tokens + n]
    }

    /// Queries assigned to each token.
    pub fn assigned(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_tokens];
        for (m, &n) in self.positive.iter().enumerate() {
            out[n].push(m);
        }
        out
    }
}

pub fn confidence_weight(distance: f64, sigma: f64) -> f64 {
    (-distance * distance / (2.0 * sigma * sigma)).exp()
}

pub fn assign(queries: &[Vec3], centers: &[Vec3], cfg: &LocalLossConfig) -> Assignment {
    assert!(!centers.is_empty(), "assignment needs at least one token");
    let n_tok = centers.len();
    let mut positive = Vec::with_capacity(queries.len());
    let mut weight = Vec::with_capacity(queries.len());
    let mut excluded = vec![false; queries.len() * n_tok];
    for (m, &q) in queries.iter().enumerate() {
        let d: Vec<f64> = centers.iter().map(|&p| dist(q, p)).collect();
        let mut best = 0;
        for n in 1..n_tok {
            if d[n] < d[best] {
                best = n;
            }
        }
        positive.push(best);
        weight.push(confidence_weight(d[best], cfg.sigma));
        for n in 0..n_tok {
            excluded[m * n_tok + n] = n != best && d[n] < cfg.delta;
        }
    }
    Assignment { positive, weight, num_tokens: n_tok, excluded }
}

/// Indices of the `k` largest `scores` among `candidates`, highest first,
/// equal scores in index order.
pub fn top_k(scores: &[f64], candidates: &[usize], k: usize) -> Vec<usize> {
    let mut c = candidates.to_vec();
    c.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    c.truncate(k);
    c
}

/// Loss nodes of one object's local term.
#[derive(Clone, Copy, Debug)]
pub struct LocalTerms {
    pub total: Var,
    pub forward: Var,
    pub reverse: Var,
    pub forward_hard: Option<Var>,
    pub reverse_hard: Option<Var>,
}

/// Bidirectional weighted InfoNCE over unit descriptors `d2` (queries) and
/// `d3` (tokens). Returns `None` when there are no queries.
pub fn local_loss(g: &mut Graph, d2: Var, d3: Var, a: &Assignment, cfg: &LocalLossConfig) -> Option<LocalTerms> {
    let m_count = a.len();
    if m_count == 0 {
        return None;
    }
    let n_tok = a.num_tokens;
    let raw = g.matmul_nt(d2, d3);
    let s = g.scale(raw, 1.0 / cfg.temperature);
    let sim = g.value(s).clone();
    let hard = cfg.hard_k > 0 && cfg.hard_weight > 0.0;

    // Query -> token.
    let wsum: f64 = a.weight.iter().sum();
    let wq: Vec<f64> = a.weight.iter().map(|w| w / wsum).collect();
    let allowed_fwd: Vec<bool> = (0..m_count * n_tok).map(|i| !a.excluded[i]).collect();
    let pos_coords: Vec<(usize, usize)> = a.positive.iter().copied().enumerate().collect();
    let pos = g.pick(s, &pos_coords);
    let lse = g.masked_lse_rows(s, allowed_fwd);
    let per_q = g.sub(lse, pos);
    let forward = g.weighted_sum(per_q, wq.clone());

    let forward_hard = hard.then(|| {
        let mut mask = vec![false; m_count * n_tok];
        for m in 0..m_count {
            let p = a.positive[m];
            let negs: Vec<usize> = (0..n_tok).filter(|&n| n != p && !a.is_excluded(m, n)).collect();
            mask[m * n_tok + p] = true;
            for n in top_k(sim.row(m), &negs, cfg.hard_k) {
                mask[m * n_tok + n] = true;
            }
        }
        let lse = g.masked_lse_rows(s, mask);
        let per_q = g.sub(lse, pos);
        g.weighted_sum(per_q, wq.clone())
    });

    // Token -> query, multi-positive over each token's assigned queries.
    let assigned = a.assigned();
    let tokens: Vec<usize> = (0..n_tok).filter(|&n| !assigned[n].is_empty()).collect();
    let tw: Vec<f64> = tokens
        .iter()
        .map(|&n| assigned[n].iter().map(|&m| a.weight[m]).sum::<f64>() / assigned[n].len() as f64)
        .collect();
    let twsum: f64 = tw.iter().sum();
    let tw: Vec<f64> = tw.iter().map(|w| w / twsum).collect();
    let st_full = g.transpose(s);
    let st = g.gather_rows(st_full, &tokens);
    let sim_t = g.value(st).clone();
    let mut pos_mask = vec![false; tokens.len() * m_count];
    let mut all_mask = vec![false; tokens.len() * m_count];
    for (r, &n) in tokens.iter().enumerate() {
        for m in 0..m_count {
            let is_pos = a.positive[m] == n;
            pos_mask[r * m_count + m] = is_pos;
            all_mask[r * m_count + m] = is_pos || !a.is_excluded(m, n);
        }
    }
    let lse_pos = g.masked_lse_rows(st, pos_mask.clone());
    let lse_all = g.masked_lse_rows(st, all_mask.clone());
    let per_t = g.sub(lse_all, lse_pos);
    let reverse = g.weighted_sum(per_t, tw.clone());

    let reverse_hard = hard.then(|| {
        let mut mask = pos_mask.clone();
        for r in 0..tokens.len() {
            let negs: Vec<usize> =
                (0..m_count).filter(|&m| all_mask[r * m_count + m] && !pos_mask[r * m_count + m]).collect();
            for m in top_k(sim_t.row(r), &negs, cfg.hard_k) {
                mask[r * m_count + m] = true;
            }
        }
        let lse = g.masked_lse_rows(st, mask);
        let per_t = g.sub(lse, lse_pos);
        g.weighted_sum(per_t, tw.clone())
    });

    let mut sum = g.add(forward, reverse);
    for h in [forward_hard, reverse_hard].into_iter().flatten() {
        let scaled = g.scale(h, cfg.hard_weight);
        sum = g.add(sum, scaled);
    }
    let total = g.scale(sum, 0.5);
    Some(LocalTerms { total, forward, reverse, forward_hard, reverse_hard })
}
