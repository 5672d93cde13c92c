//! Instance-level descriptors and the global, subset-consistency and
//! relational distillation losses.

use rand::Rng;

use crate::error::{Error, Result};
use crate::grad::nn::{AttentionBlock, Linear, Mlp, ResidualMlp};
use crate::grad::{Graph, Group, ParamId, ParamStore, Tensor, Var};

pub const CONTEXT_WEIGHT: f64 = 0.5;
pub const TEACHER_WEIGHT: f64 = 1.0;
pub const TAU_INIT: f64 = 0.07;
pub const TAU_MIN: f64 = 0.005;
pub const TAU_MAX: f64 = 1.0;

#[derive(Clone, Debug)]
pub struct GlobalBranch {
    pub context_map: Linear,
    pub teacher_map: Linear,
    pub gate: Mlp,
    pub refine: ResidualMlp,
    pub proj2d: Linear,
    pub attention: AttentionBlock,
    pub proj3d: Linear,
    pub tau: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct GlobalDims {
    pub shared: usize,
    pub context: usize,
    pub teacher: usize,
    pub global: usize,
    pub hidden: usize,
    pub heads: usize,
}

impl GlobalBranch {
    pub fn new(store: &mut ParamStore, d: GlobalDims, rng: &mut impl Rng) -> Result<Self> {
        let g = Group::Global;
        Ok(GlobalBranch {
            context_map: Linear::no_bias(store, "global.u", g, d.context, d.shared, rng),
            teacher_map: Linear::no_bias(store, "global.wd", g, d.teacher, d.shared, rng),
            gate: Mlp::new(store, "global.gate", g, [2 * d.shared, d.shared, d.shared], rng),
            refine: ResidualMlp::new(store, "global.refine", g, [d.shared, d.hidden, d.shared], rng),
            proj2d: Linear::new(store, "global.proj2d", g, d.shared, d.global, rng),
            attention: AttentionBlock::new(store, "global.attn", g, d.shared, d.heads, d.hidden, rng)?,
            proj3d: Linear::new(store, "global.proj3d", g, d.shared, d.global, rng),
            tau: store.add_with_decay("global.tau", g, Tensor::scalar(TAU_INIT), false),
        })
    }

    /// Clamps the learnable temperature into its allowed range.
    pub fn clamp_tau(&self, store: &mut ParamStore) {
        let t = store.value_mut(self.tau);
        let v = t.item().clamp(TAU_MIN, TAU_MAX);
        t.set(0, 0, v);
    }

    /// `r = r~ + 0.5 U c + 1.0 * gate ⊙ W_d d`, one row per view. Without
    /// teacher tokens the teacher term is dropped.
    pub fn fuse_views(&self, g: &mut Graph, pooled: Var, context: Var, teacher: Option<Var>) -> Var {
        let uc = self.context_map.forward(g, context);
        let uc = g.scale(uc, CONTEXT_WEIGHT);
        let r = g.add(pooled, uc);
        let Some(teacher) = teacher else { return r };
        let wd = self.teacher_map.forward(g, teacher);
        let gin = g.concat_cols(&[pooled, wd]);
        let logits = self.gate.forward(g, gin);
        let gamma = g.sigmoid(logits);
        let gated = g.mul(gamma, wd);
        let gated = g.scale(gated, TEACHER_WEIGHT);
        g.add(r, gated)
    }

    /// Refine each view, average the valid ones, project and normalize.
    pub fn encode_2d(&self, g: &mut Graph, views: Var, valid: &[bool]) -> Result<Var> {
        let idx: Vec<usize> = (0..valid.len()).filter(|&i| valid[i]).collect();
        if idx.is_empty() {
            return Err(Error::NoValidViews);
        }
        let r = self.refine.forward(g, views);
        let pooled = g.segment_mean(r, &[idx]);
        let p = self.proj2d.forward(g, pooled);
        Ok(g.l2_normalize_rows(p))
    }

    pub fn encode_3d(&self, g: &mut Graph, tokens: Var) -> Var {
        let n = g.value(tokens).rows();
        let h = self.attention.forward(g, tokens);
        let pooled = g.segment_mean(h, &[(0..n).collect()]);
        let p = self.proj3d.forward(g, pooled);
        g.l2_normalize_rows(p)
    }
}

/// Mean of each view's token rows; views without tokens give a zero row and
/// are flagged invalid.
pub fn pool_views(g: &mut Graph, tokens: Var, per_view: &[Vec<usize>]) -> (Var, Vec<bool>) {
    let pooled = g.segment_mean(tokens, per_view);
    (pooled, per_view.iter().map(|v| !v.is_empty()).collect())
}

/// Symmetric InfoNCE between matched rows of `g2` and `g3` at temperature `tau`.
pub fn global_loss(g: &mut Graph, g2: Var, g3: Var, tau: Var) -> Var {
    let b = g.value(g2).rows();
    let sim = g.matmul_nt(g2, g3);
    let logits = g.div_scalar(sim, tau);
    let rows = g.log_softmax_rows(logits);
    let lt = g.transpose(logits);
    let cols = g.log_softmax_rows(lt);
    let diag: Vec<(usize, usize)> = (0..b).map(|i| (i, i)).collect();
    let a = g.pick(rows, &diag);
    let c = g.pick(cols, &diag);
    let both = g.concat_rows(&[a, c]);
    g.weighted_sum(both, vec![-1.0 / (2 * b) as f64; 2 * b])
}

/// `1 - cos(g_sub, target)` with the target held constant.
pub fn subset_loss(g: &mut Graph, g_sub: Var, target: &Tensor) -> Var {
    let t = g.constant(target.clone());
    let cos = g.matmul_nt(g_sub, t);
    let neg = g.scale(cos, -1.0);
    g.add_const(neg, 1.0)
}

/// Row-averaged `KL(softmax(T T^T / tau) || softmax(G2 G3^T / tau))` with the
/// teacher side constant.
pub fn distill_loss(g: &mut Graph, teacher: &Tensor, g2: Var, g3: Var, tau: f64) -> Var {
    let b = teacher.rows();
    let p = teacher_distribution(teacher, tau);
    let entropy_term: f64 =
        p.data().iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>() / b as f64;
    let sim = g.matmul_nt(g2, g3);
    let logits = g.scale(sim, 1.0 / tau);
    let logq = g.log_softmax_rows(logits);
    let w = p.data().iter().map(|&x| -x / b as f64).collect();
    let cross = g.weighted_sum(logq, w);
    g.add_const(cross, entropy_term)
}

/// Row softmax of `T T^T / tau`.
pub fn teacher_distribution(teacher: &Tensor, tau: f64) -> Tensor {
    let mut s = crate::grad::matmul(teacher, &teacher.transpose());
    for r in 0..s.rows() {
        let row = s.row_mut(r);
        row.iter_mut().for_each(|x| *x /= tau);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            z += *x;
        }
        row.iter_mut().for_each(|x| *x /= z);
    }
    s
}
