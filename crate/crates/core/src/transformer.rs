//! Pre-norm transformer block shared by the slice encoder and the
//! volume aggregator.

use crate::error::{Error, Result};
use crate::numerics::{scaled_uniform_init, Graph, RngStream, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};

pub const LN_EPS: f64 = 1e-5;

/// Per-forward state: train flag, dropout stream, optional attention capture.
pub struct Ctx<'a> {
    pub train: bool,
    pub rng: &'a mut RngStream,
    pub attention: Option<Vec<Var>>,
}

impl<'a> Ctx<'a> {
    pub fn eval(rng: &'a mut RngStream) -> Self {
        Self {
            train: false,
            rng,
            attention: None,
        }
    }

    pub fn train(rng: &'a mut RngStream) -> Self {
        Self {
            train: true,
            rng,
            attention: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut RngStream) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            scaled_uniform_init(&[d_in, d_out], d_in, rng),
            true,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), false);
        Self { weight, bias }
    }

    pub fn num_params(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.weight))?;
        g.add(y, p.var(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], 1.0), false),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d]), false),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gain), p.var(self.bias), LN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    heads: usize,
    dropout: f64,
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

pub fn mlp_hidden(d: usize, mlp_ratio: f64) -> usize {
    ((d as f64) * mlp_ratio).round().max(1.0) as usize
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        mlp_ratio: f64,
        dropout: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "embedding width {d} is not divisible by {heads} heads"
            )));
        }
        let hidden = mlp_hidden(d, mlp_ratio);
        Ok(Self {
            heads,
            dropout,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            qkv: Linear::new(store, &format!("{name}.attn.qkv"), d, 3 * d, rng),
            proj: Linear::new(store, &format!("{name}.attn.proj"), d, d, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), d, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), hidden, d, rng),
        })
    }

    /// Closed-form scalar count of one block.
    pub fn num_params(d: usize, mlp_ratio: f64) -> usize {
        let h = mlp_hidden(d, mlp_ratio);
        4 * d + Linear::num_params(d, 3 * d) + Linear::num_params(d, d) + Linear::num_params(d, h) + Linear::num_params(h, d)
    }

    /// `x` is (B, T, d).
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, ctx: &mut Ctx) -> Result<Var> {
        let h = self.ln1.forward(g, p, x)?;
        let a = self.attention(g, p, h, ctx)?;
        let a = g.dropout(a, self.dropout, ctx.train, ctx.rng);
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, p, x)?;
        let h = self.fc1.forward(g, p, h)?;
        let h = g.gelu(h);
        let h = g.dropout(h, self.dropout, ctx.train, ctx.rng);
        let h = self.fc2.forward(g, p, h)?;
        let h = g.dropout(h, self.dropout, ctx.train, ctx.rng);
        g.add(x, h)
    }

    fn attention(&self, g: &mut Graph, p: &Bound, x: Var, ctx: &mut Ctx) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let (nh, dh) = (self.heads, d / self.heads);
        let qkv = self.qkv.forward(g, p, x)?;
        let qkv = g.reshape(qkv, &[b, t, 3, nh, dh])?;
        // -> (3, B, heads, T, dh)
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut parts = Vec::with_capacity(3);
        for i in 0..3 {
            let part = g.narrow(qkv, 0, i, 1)?;
            parts.push(g.reshape(part, &[b * nh, t, dh])?);
        }
        let scores = g.bmm(parts[0], parts[1], true)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let weights = g.softmax(scores, 2)?;
        if let Some(rec) = ctx.attention.as_mut() {
            rec.push(weights);
        }
        let weights = g.dropout(weights, self.dropout, ctx.train, ctx.rng);
        let out = g.bmm(weights, parts[2], false)?;
        let out = g.reshape(out, &[b, nh, t, dh])?;
        let out = g.permute(out, &[0, 2, 1, 3])?;
        let out = g.reshape(out, &[b, t, d])?;
        self.proj.forward(g, p, out)
    }
}
