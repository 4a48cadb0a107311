//! Layer building blocks expressed on the [`Graph`].

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{Graph, ParamId, ParamSet, Real, Var};

fn xavier<T: Real, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Array2<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_simple_fn((fan_in, fan_out), || {
        T::lit(rng.random_range(-bound..bound))
    })
}

pub fn normal_table<T: Real, R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<T> {
    let normal = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || T::lit(normal.sample(rng)))
}

/// `y = x · W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = params.add(format!("{name}.weight"), xavier(rng, fan_in, fan_out));
        let bias = params.add(format!("{name}.bias"), Array2::zeros((1, fan_out)));
        Self { weight, bias }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(params: &mut ParamSet<T>, name: &str, dim: usize) -> Self {
        let gamma = params.add(
            format!("{name}.gamma"),
            Array2::from_elem((1, dim), T::one()),
        );
        let beta = params.add(format!("{name}.beta"), Array2::zeros((1, dim)));
        Self { gamma, beta }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value inputs (self-attention passes the same var twice).
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(
            heads > 0 && dim.is_multiple_of(heads),
            "hidden dim {dim} not divisible by {heads} heads"
        );
        Self {
            q: Linear::new(params, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(params, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(params, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(params, &format!("{name}.out"), dim, dim, rng),
            heads,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, query: Var, context: Var) -> Var {
        let dim = g.shape(query).1;
        let head_dim = dim / self.heads;
        let q = self.q.forward(g, query);
        let k = self.k.forward(g, context);
        let v = self.v.forward(g, context);
        let scale = T::one() / T::from_usize(head_dim).unwrap().sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * head_dim, head_dim);
            let kh = g.slice_cols(k, h * head_dim, head_dim);
            let vh = g.slice_cols(v, h * head_dim, head_dim);
            let logits = g.matmul_t(qh, kh);
            let logits = g.scale(logits, scale);
            let probs = g.softmax_rows(logits);
            heads.push(g.matmul(probs, vh));
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)
        };
        self.out.forward(g, merged)
    }
}

/// Position-wise feed-forward layer: affine, GELU, affine.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        dim: usize,
        expansion: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(params, &format!("{name}.fc1"), dim, dim * expansion, rng),
            fc2: Linear::new(params, &format!("{name}.fc2"), dim * expansion, dim, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// `LN(sublayer + residual)`, the post-norm residual used throughout the trunk.
pub fn add_norm<T: Real>(
    g: &mut Graph<'_, T>,
    ln: &LayerNorm,
    sublayer: Var,
    residual: Var,
) -> Var {
    let s = g.add(sublayer, residual);
    ln.forward(g, s)
}
