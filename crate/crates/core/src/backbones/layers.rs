//! Parameterized building blocks shared by the epoch encoders and the
//! sequence model.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::diffcore::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::error::Result;

pub const LN_EPS: f64 = 1e-5;

/// One row of the layer table dumped by `describe`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerInfo {
    pub name: String,
    pub kind: String,
    pub shapes: Vec<Vec<usize>>,
    pub params: usize,
}

pub(crate) fn uniform<F: Scalar, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<F> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| F::lit(rng.random_range(-bound..=bound))).collect();
    Tensor::new(shape, data).expect("shape matches")
}

pub(crate) fn normal<F: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<F> {
    let n = shape.iter().product();
    let d = Normal::new(0.0, std).expect("valid std");
    Tensor::new(shape, (0..n).map(|_| F::lit(d.sample(rng))).collect()).expect("shape matches")
}

/// `y = x·w + b` over the trailing axis; Xavier-uniform weights, zero bias.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng>(store: &mut ParamStore<F>, rng: &mut R, name: &str, din: usize, dout: usize) -> Result<Self> {
        let bound = (6.0 / (din + dout) as f64).sqrt();
        let w = store.add(&format!("{name}.w"), uniform(rng, &[din, dout], bound))?;
        let b = store.add(&format!("{name}.b"), Tensor::zeros(&[dout]))?;
        Ok(Linear { w, b, din, dout })
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.affine(x, w, b)
    }

    pub fn info(&self, name: &str) -> LayerInfo {
        LayerInfo {
            name: name.into(),
            kind: "linear".into(),
            shapes: vec![vec![self.din, self.dout], vec![self.dout]],
            params: self.din * self.dout + self.dout,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl Norm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(&format!("{name}.gamma"), Tensor::full(&[dim], F::one()))?;
        let beta = store.add(&format!("{name}.beta"), Tensor::zeros(&[dim]))?;
        Ok(Norm { gamma, beta, dim })
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, F::lit(LN_EPS))
    }

    pub fn info(&self, name: &str) -> LayerInfo {
        LayerInfo { name: name.into(), kind: "layer_norm".into(), shapes: vec![vec![self.dim]; 2], params: 2 * self.dim }
    }
}

/// Scaled dot-product multi-head attention with an output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d_k: usize,
}

/// Attention-weight nodes recorded during a forward pass, each `[B·H, Tq, Tk]`.
#[derive(Clone, Debug, Default)]
pub struct AttnTrace {
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new<F: Scalar, R: Rng>(store: &mut ParamStore<F>, rng: &mut R, name: &str, d_model: usize, heads: usize, d_k: usize) -> Result<Self> {
        let inner = heads * d_k;
        Ok(MultiHeadAttention {
            q: Linear::new(store, rng, &format!("{name}.q"), d_model, inner)?,
            k: Linear::new(store, rng, &format!("{name}.k"), d_model, inner)?,
            v: Linear::new(store, rng, &format!("{name}.v"), d_model, inner)?,
            o: Linear::new(store, rng, &format!("{name}.o"), inner, d_model)?,
            heads,
            d_k,
        })
    }

    fn split_heads<F: Scalar>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, t) = (s[0], s[1]);
        let x = g.reshape(x, &[b, t, self.heads, self.d_k])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[b * self.heads, t, self.d_k])
    }

    /// `query[B,Tq,D]` attends over `context[B,Tk,D]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        query: Var,
        context: Var,
        dropout: f64,
        trace: &mut AttnTrace,
    ) -> Result<Var> {
        let qs = g.shape(query).to_vec();
        let (b, tq) = (qs[0], qs[1]);
        let q = self.q.forward(g, store, query)?;
        let k = self.k.forward(g, store, context)?;
        let v = self.v.forward(g, store, context)?;
        let q = self.split_heads(g, q)?;
        let k = self.split_heads(g, k)?;
        let v = self.split_heads(g, v)?;
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, F::lit(1.0 / (self.d_k as f64).sqrt()))?;
        let attn = g.softmax(scores, 2)?;
        trace.weights.push(attn);
        let attn = g.dropout(attn, dropout)?;
        let ctx = g.bmm(attn, v, false)?;
        let ctx = g.reshape(ctx, &[b, self.heads, tq, self.d_k])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, tq, self.heads * self.d_k])?;
        self.o.forward(g, store, ctx)
    }

    pub fn infos(&self, name: &str) -> Vec<LayerInfo> {
        vec![
            self.q.info(&format!("{name}.q")),
            self.k.info(&format!("{name}.k")),
            self.v.info(&format!("{name}.v")),
            self.o.info(&format!("{name}.o")),
        ]
    }
}

/// `max(0, x·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new<F: Scalar, R: Rng>(store: &mut ParamStore<F>, rng: &mut R, name: &str, d_model: usize, d_ff: usize) -> Result<Self> {
        Ok(FeedForward {
            l1: Linear::new(store, rng, &format!("{name}.l1"), d_model, d_ff)?,
            l2: Linear::new(store, rng, &format!("{name}.l2"), d_ff, d_model)?,
        })
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let h = self.l1.forward(g, store, x)?;
        let h = g.relu(h)?;
        self.l2.forward(g, store, h)
    }
}

/// Post-norm Transformer encoder layer:
/// `y = LN(x + SA(x))`, `out = LN(y + FF(y))`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub ln1: Norm,
    pub ff: FeedForward,
    pub ln2: Norm,
}

impl EncoderLayer {
    pub fn new<F: Scalar, R: Rng>(store: &mut ParamStore<F>, rng: &mut R, name: &str, d_model: usize, heads: usize, d_k: usize, d_ff: usize) -> Result<Self> {
        Ok(EncoderLayer {
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), d_model, heads, d_k)?,
            ln1: Norm::new(store, &format!("{name}.ln1"), d_model)?,
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), d_model, d_ff)?,
            ln2: Norm::new(store, &format!("{name}.ln2"), d_model)?,
        })
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var, dropout: f64, trace: &mut AttnTrace) -> Result<Var> {
        let a = self.attn.forward(g, store, x, x, dropout, trace)?;
        let y = g.add(x, a)?;
        let y = self.ln1.forward(g, store, y)?;
        let f = self.ff.forward(g, store, y)?;
        let f = g.dropout(f, dropout)?;
        let z = g.add(y, f)?;
        self.ln2.forward(g, store, z)
    }

    pub fn infos(&self, name: &str) -> Vec<LayerInfo> {
        let mut v = self.attn.infos(&format!("{name}.attn"));
        v.push(self.ln1.info(&format!("{name}.ln1")));
        v.push(self.ff.l1.info(&format!("{name}.ff.l1")));
        v.push(self.ff.l2.info(&format!("{name}.ff.l2")));
        v.push(self.ln2.info(&format!("{name}.ln2")));
        v
    }
}

/// Fixed sinusoidal table `[len, d]`: `sin(p/10000^(2i/d))` at even
/// columns, `cos` of the same angle at odd columns.
pub fn sinusoidal_table(len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * d];
    for p in 0..len {
        for i in 0..d {
            let pair = (i / 2) * 2;
            let angle = p as f64 / 10000f64.powf(pair as f64 / d as f64);
            pe[p * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

pub fn positional_encoding<F: Scalar>(len: usize, d: usize) -> Tensor<F> {
    Tensor::from_f64(&[len, d], &sinusoidal_table(len, d)).expect("shape matches")
}
