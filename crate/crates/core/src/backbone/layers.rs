//! Parameterized layers built on the autograd tape.

use rand::Rng;

use crate::nn::init::{he_uniform, trunc_normal};
use crate::nn::{ParamId, ParamStore, Tape, Tensor, Var};

const INIT_STD: f64 = 0.02;

/// Affine map `x · w + b` with `w: in × out`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let w = ps.add(format!("{name}.w"), trunc_normal(rng, &[fan_in, fan_out], INIT_STD), true);
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[fan_out]), false);
        Self { w, b }
    }

    /// He-uniform weights, for layers fed raw coordinates.
    pub fn new_he(ps: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let w = ps.add(format!("{name}.w"), he_uniform(rng, &[fan_in, fan_out], fan_in), true);
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[fan_out]), false);
        Self { w, b }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let (w, b) = (t.param(self.w), t.param(self.b));
        t.linear(x, w, Some(b))
    }

    pub fn out_dim(&self, ps: &ParamStore) -> usize {
        ps.get(self.w).cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = ps.add(format!("{name}.g"), Tensor::filled(&[dim], 1.0), false);
        let beta = ps.add(format!("{name}.b"), Tensor::zeros(&[dim]), false);
        Self { gamma, beta }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let (g, b) = (t.param(self.gamma), t.param(self.beta));
        t.layer_norm(x, g, b)
    }
}

/// Two linear layers with a GELU between them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(ps: &mut ParamStore, name: &str, dims: [usize; 3], rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), dims[0], dims[1], rng),
            fc2: Linear::new(ps, &format!("{name}.fc2"), dims[1], dims[2], rng),
        }
    }

    /// He-uniform first layer, for MLPs fed raw coordinates.
    pub fn new_coords(ps: &mut ParamStore, name: &str, dims: [usize; 3], rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new_he(ps, &format!("{name}.fc1"), dims[0], dims[1], rng),
            fc2: Linear::new(ps, &format!("{name}.fc2"), dims[1], dims[2], rng),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let h = self.fc1.forward(t, x);
        let h = t.gelu(h);
        self.fc2.forward(t, h)
    }
}

/// Per-branch keep decisions for stochastic depth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BranchDrop {
    /// `None` keeps the branch unscaled; `Some(s)` keeps it scaled by `s`;
    /// `Some(0.0)` drops it.
    pub attn: Option<f64>,
    pub ffn: Option<f64>,
}

impl BranchDrop {
    pub const KEEP: BranchDrop = BranchDrop { attn: None, ffn: None };

    /// Draws both branches with drop probability `rate`.
    pub fn sample(rate: f64, rng: &mut impl Rng) -> Self {
        let mut one = || {
            if rng.random::<f64>() < rate {
                Some(0.0)
            } else {
                Some(1.0 / (1.0 - rate))
            }
        };
        BranchDrop {
            attn: one(),
            ffn: one(),
        }
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + ffn(ln(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub ffn: Mlp,
    pub heads: usize,
}

impl Block {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_ratio: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim),
            qkv: Linear::new(ps, &format!("{name}.qkv"), dim, 3 * dim, rng),
            proj: Linear::new(ps, &format!("{name}.proj"), dim, dim, rng),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim),
            ffn: Mlp::new(ps, &format!("{name}.ffn"), [dim, dim * ffn_ratio, dim], rng),
            heads,
        }
    }

    fn residual(t: &mut Tape, x: Var, branch: Option<Var>, scale: Option<f64>) -> Var {
        match (branch, scale) {
            (None, _) => x,
            (Some(b), None) => t.add(x, b),
            (Some(b), Some(s)) => {
                let b = t.scale(b, s);
                t.add(x, b)
            }
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var, drop: BranchDrop) -> Var {
        let attn = if drop.attn == Some(0.0) {
            None
        } else {
            let h = self.ln1.forward(t, x);
            let qkv = self.qkv.forward(t, h);
            let a = t.attention(qkv, self.heads);
            Some(self.proj.forward(t, a))
        };
        let x = Self::residual(t, x, attn, drop.attn);
        let ffn = if drop.ffn == Some(0.0) {
            None
        } else {
            let h = self.ln2.forward(t, x);
            Some(self.ffn.forward(t, h))
        };
        Self::residual(t, x, ffn, drop.ffn)
    }
}
