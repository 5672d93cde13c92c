//! Trainable building blocks recorded onto a [`Graph`].

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{Group, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_weight(format!("{name}.w"), group, fan_in, fan_out, rng);
        let bias = store.add(format!("{name}.b"), group, Tensor::zeros(1, fan_out));
        Linear { weight, bias: Some(bias) }
    }

    pub fn no_bias(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_weight(format!("{name}.w"), group, fan_in, fan_out, rng);
        Linear { weight, bias: None }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Row-wise layer norm with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: Group, dim: usize) -> Self {
        let gain = store.add(format!("{name}.g"), group, Tensor::filled(1, dim, 1.0));
        let shift = store.add(format!("{name}.s"), group, Tensor::zeros(1, dim));
        LayerNorm { gain, shift }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.layer_norm_rows(x);
        let gain = g.param(self.gain);
        let shift = g.param(self.shift);
        let y = g.mul_row(n, gain);
        g.add_row(y, shift)
    }
}

/// Two linear layers with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        dims: [usize; 3],
        rng: &mut impl Rng,
    ) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), group, dims[0], dims[1], rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), group, dims[1], dims[2], rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// `skip(x) + mlp(ln(x))`; the skip is the identity when input and output
/// widths agree and a linear projection otherwise.
#[derive(Clone, Debug)]
pub struct ResidualMlp {
    pub norm: LayerNorm,
    pub mlp: Mlp,
    pub skip: Option<Linear>,
}

impl ResidualMlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        dims: [usize; 3],
        rng: &mut impl Rng,
    ) -> Self {
        let norm = LayerNorm::new(store, &format!("{name}.ln"), group, dims[0]);
        let mlp = Mlp::new(store, name, group, dims, rng);
        let skip = (dims[0] != dims[2])
            .then(|| Linear::no_bias(store, &format!("{name}.skip"), group, dims[0], dims[2], rng));
        ResidualMlp { norm, mlp, skip }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = self.norm.forward(g, x);
        let h = self.mlp.forward(g, n);
        let s = match &self.skip {
            Some(p) => p.forward(g, x),
            None => x,
        };
        g.add(s, h)
    }
}

/// Pre-norm transformer block: multi-head self-attention then a GELU MLP,
/// each with a residual connection.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub heads: usize,
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub ln2: LayerNorm,
    pub ffn: Mlp,
}

impl AttentionBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        dim: usize,
        heads: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument(format!("attention width {dim} does not split across {heads} heads")));
        }
        Ok(AttentionBlock {
            heads,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), group, dim),
            q: Linear::new(store, &format!("{name}.q"), group, dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), group, dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), group, dim, dim, rng),
            out: Linear::new(store, &format!("{name}.o"), group, dim, dim, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), group, dim),
            ffn: Mlp::new(store, &format!("{name}.ffn"), group, [dim, hidden, dim], rng),
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let dim = g.value(x).cols();
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let n = self.ln1.forward(g, x);
        let q = self.q.forward(g, n);
        let k = self.k.forward(g, n);
        let v = self.v.forward(g, n);
        let mut per_head = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let s = g.matmul_nt(qh, kh);
            let s = g.scale(s, scale);
            let a = g.softmax_rows(s);
            per_head.push(g.matmul(a, vh));
        }
        let cat = g.concat_cols(&per_head);
        let att = self.out.forward(g, cat);
        let x1 = g.add(x, att);

        let n2 = self.ln2.forward(g, x1);
        let f = self.ffn.forward(g, n2);
        g.add(x1, f)
    }
}
