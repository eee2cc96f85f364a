use rand::Rng;

use super::layers::{uniform, LayerInfo, Linear};
use crate::diffcore::{Graph, ParamId, ParamStore, Scalar, Var};
use crate::error::{dim_err, Result};

/// Epoch-wise attention pooling: `a_t = tanh(W z_t + b)`,
/// `α = softmax_t(a_t·a_e)`, output `Σ_t α_t z_t`.
#[derive(Clone, Debug)]
pub struct EpochAttention {
    pub proj: Linear,
    pub context: ParamId,
    pub dim: usize,
    pub attn_size: usize,
}

/// Pooled features and the attention weights `[N, T]` that produced them.
#[derive(Clone, Copy, Debug)]
pub struct Pooled {
    pub output: Var,
    pub weights: Var,
}

impl EpochAttention {
    pub fn new<F: Scalar, R: Rng>(store: &mut ParamStore<F>, rng: &mut R, name: &str, dim: usize, attn_size: usize) -> Result<Self> {
        let proj = Linear::new(store, rng, &format!("{name}.w"), dim, attn_size)?;
        let bound = (3.0 / attn_size as f64).sqrt();
        let context = store.add(&format!("{name}.context"), uniform(rng, &[attn_size], bound))?;
        Ok(EpochAttention { proj, context, dim, attn_size })
    }

    /// `z[N,T,D]` → `[N,D]`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, z: Var) -> Result<Pooled> {
        let s = g.shape(z).to_vec();
        if s.len() != 3 || s[2] != self.dim {
            return Err(dim_err!("epoch_pool expects [N,T,{}], got {s:?}", self.dim));
        }
        let (n, t, d) = (s[0], s[1], s[2]);
        let a = self.proj.forward(g, store, z)?;
        let a = g.tanh(a)?;
        let ctx = g.param(store, self.context);
        let ctx = g.reshape(ctx, &[self.attn_size, 1])?;
        let scores = g.matmul(a, ctx)?;
        let scores = g.reshape(scores, &[n, t])?;
        let weights = g.softmax(scores, 1)?;
        let w3 = g.reshape(weights, &[n, 1, t])?;
        let out = g.bmm(w3, z, false)?;
        let output = g.reshape(out, &[n, d])?;
        Ok(Pooled { output, weights })
    }

    pub fn infos(&self, name: &str) -> Vec<LayerInfo> {
        vec![
            self.proj.info(&format!("{name}.w")),
            LayerInfo { name: format!("{name}.context"), kind: "vector".into(), shapes: vec![vec![self.attn_size]], params: self.attn_size },
        ]
    }
}
