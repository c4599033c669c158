//! Parameterized layers. Each layer owns only parameter names; values live in a
//! [`ParamStore`] and are bound into the graph through a [`Ctx`].

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::graph::Var;
use crate::params::{kaiming_uniform, Ctx, ParamStore};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
    ) -> Result<Self> {
        store.insert(format!("{name}.weight"), kaiming_uniform(&[dout, din], din, rng))?;
        if bias {
            store.insert(format!("{name}.bias"), Tensor::zeros(&[dout]))?;
        }
        Ok(Self { name: name.to_string(), din, dout, bias })
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(&self.weight_name())?;
        let b = if self.bias { Some(ctx.param(&format!("{}.bias", self.name))?) } else { None };
        ctx.graph.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: (usize, usize),
    ) -> Result<Self> {
        let fan_in = cin * kernel.0 * kernel.1;
        store.insert(format!("{name}.weight"), kaiming_uniform(&[cout, cin, kernel.0, kernel.1], fan_in, rng))?;
        store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]))?;
        Ok(Self { name: name.to_string(), cin, cout, kernel, stride, padding })
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(&self.weight_name())?;
        let b = ctx.param(&format!("{}.bias", self.name))?;
        ctx.graph.conv2d(x, w, Some(b), self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = cout * kernel * kernel;
        store.insert(format!("{name}.weight"), kaiming_uniform(&[cin, cout, kernel, kernel], fan_in, rng))?;
        store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]))?;
        Ok(Self { name: name.to_string(), cin, cout, kernel, stride, padding })
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(&format!("{}.weight", self.name))?;
        let b = ctx.param(&format!("{}.bias", self.name))?;
        ctx.graph.conv_transpose2d(x, w, Some(b), self.stride, (self.padding, self.padding))
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        store.insert(format!("{name}.gamma"), Tensor::ones(&[channels]))?;
        store.insert(format!("{name}.beta"), Tensor::zeros(&[channels]))?;
        store.insert_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]))?;
        store.insert_buffer(format!("{name}.running_var"), Tensor::ones(&[channels]))?;
        Ok(Self { name: name.to_string(), channels })
    }

    /// Batch statistics in training contexts, running statistics otherwise.
    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let g = ctx.param(&format!("{}.gamma", self.name))?;
        let b = ctx.param(&format!("{}.beta", self.name))?;
        if ctx.is_train() {
            let (y, stats) = ctx.graph.batchnorm2d_train(x, g, b, BN_EPS)?;
            ctx.record_bn(&self.name, stats);
            Ok(y)
        } else {
            let mean = ctx.buffer(&format!("{}.running_mean", self.name))?;
            let var = ctx.buffer(&format!("{}.running_var", self.name))?;
            ctx.graph.batchnorm2d_eval(x, g, b, mean.data(), var.data(), BN_EPS)
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        store.insert(format!("{name}.gamma"), Tensor::ones(&[dim]))?;
        store.insert(format!("{name}.beta"), Tensor::zeros(&[dim]))?;
        Ok(Self { name: name.to_string(), dim })
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let g = ctx.param(&format!("{}.gamma", self.name))?;
        let b = ctx.param(&format!("{}.beta", self.name))?;
        ctx.graph.layer_norm(x, g, b, LN_EPS)
    }
}

/// Multi-head scaled dot-product attention with learned input/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub name: String,
    pub dim: usize,
    pub heads: usize,
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
}

impl MultiHeadAttention {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(TensorError::invalid(
                "multi_head_attention",
                format!("model dim {dim} not divisible by {heads} heads"),
            ));
        }
        Ok(Self {
            name: name.to_string(),
            dim,
            heads,
            q_proj: Linear::new(store, rng, &format!("{name}.q"), dim, dim, true)?,
            k_proj: Linear::new(store, rng, &format!("{name}.k"), dim, dim, true)?,
            v_proj: Linear::new(store, rng, &format!("{name}.v"), dim, dim, true)?,
            out_proj: Linear::new(store, rng, &format!("{name}.out"), dim, dim, true)?,
        })
    }

    /// `query` is `[B, Lq, d]`, `kv` is `[B, Lk, d]`; returns `[B, Lq, d]`.
    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, query: Var, kv: Var) -> Result<Var> {
        let q = self.q_proj.forward(ctx, query)?;
        let k = self.k_proj.forward(ctx, kv)?;
        let v = self.v_proj.forward(ctx, kv)?;
        let o = attention(&mut ctx.graph, q, k, v, self.heads)?;
        self.out_proj.forward(ctx, o)
    }
}

/// Unprojected multi-head attention over already-projected `q`, `k`, `v`.
pub fn attention<T: Float>(g: &mut crate::graph::Graph<T>, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let sq = g.shape(q).to_vec();
    let sk = g.shape(k).to_vec();
    if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] || g.shape(v) != sk.as_slice() {
        return Err(TensorError::ShapeMismatch { op: "attention", expected: sq, got: sk });
    }
    let (b, lq, d) = (sq[0], sq[1], sq[2]);
    let lk = sk[1];
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::invalid("attention", format!("model dim {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let split = |g: &mut crate::graph::Graph<T>, x: Var, l: usize| -> Result<Var> {
        let x = g.reshape(x, &[b, l, heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[b * heads, l, dh])
    };
    let qh = split(g, q, lq)?;
    let kh = split(g, k, lk)?;
    let vh = split(g, v, lk)?;
    let scores = g.matmul(qh, kh, true)?;
    let scores = g.scale(scores, T::of(1.0 / (dh as f64).sqrt()))?;
    let p = g.softmax(scores)?;
    let o = g.matmul(p, vh, false)?;
    let o = g.reshape(o, &[b, heads, lq, dh])?;
    let o = g.permute(o, &[0, 2, 1, 3])?;
    g.reshape(o, &[b, lq, d])
}
