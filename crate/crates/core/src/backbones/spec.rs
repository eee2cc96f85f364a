use rand::Rng;

use super::layers::{positional_encoding, uniform, AttnTrace, EncoderLayer, LayerInfo};
use crate::config::ModelConfig;
use crate::diffcore::{Graph, Padding, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::error::{dim_err, Result};

/// Spectrogram encoder: a kernel-3 conv over time mapping frequency bins to
/// `d_model` channels (ReLU), a fixed sinusoidal positional encoding, then
/// a stack of post-norm Transformer layers.
#[derive(Clone, Debug)]
pub struct SpecTransformer {
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub frames: usize,
    pub bins: usize,
    pub kernel: usize,
    pub d_model: usize,
    pub dropout: f64,
}

impl SpecTransformer {
    pub fn new<F: Scalar, R: Rng>(store: &mut ParamStore<F>, rng: &mut R, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let (bins, d) = (cfg.spec_bins(), cfg.d_model);
        let bound = (6.0 / (bins * cfg.kernel) as f64).sqrt();
        let proj_w = store.add(&format!("{name}.proj.w"), uniform(rng, &[d, bins, cfg.kernel], bound))?;
        let proj_b = store.add(&format!("{name}.proj.b"), Tensor::zeros(&[d]))?;
        let layers = (0..cfg.epoch_layers)
            .map(|l| EncoderLayer::new(store, rng, &format!("{name}.layer{l}"), d, cfg.n_heads, cfg.d_k, cfg.d_ff))
            .collect::<Result<_>>()?;
        Ok(SpecTransformer { proj_w, proj_b, layers, frames: cfg.spec_frames(), bins, kernel: cfg.kernel, d_model: d, dropout: cfg.dropout })
    }

    /// `spec[B,T,bins]` → `proj(spec) + PE`, `[B,T,d_model]`.
    pub fn project<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, spec: Var) -> Result<Var> {
        let s = g.shape(spec).to_vec();
        if s.len() != 3 || s[2] != self.bins {
            return Err(dim_err!("spec_project expects [B,T,{}], got {s:?}", self.bins));
        }
        let x = g.permute(spec, &[0, 2, 1])?;
        let w = g.param(store, self.proj_w);
        let b = g.param(store, self.proj_b);
        let h = g.conv1d(x, w, b, 1, Padding::Same)?;
        let h = g.relu(h)?;
        let h = g.permute(h, &[0, 2, 1])?;
        let pe = g.constant(positional_encoding(s[1], self.d_model));
        g.add_broadcast(h, pe)
    }

    /// Transformer stack over `x[B,T,d_model]`.
    pub fn encode<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var, trace: &mut AttnTrace) -> Result<Var> {
        transformer_encode(g, store, &self.layers, x, self.dropout, trace)
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, spec: Var, trace: &mut AttnTrace) -> Result<Var> {
        if g.shape(spec).get(1) != Some(&self.frames) {
            return Err(dim_err!("spectrogram must have {} frames, got {:?}", self.frames, g.shape(spec)));
        }
        let x = self.project(g, store, spec)?;
        self.encode(g, store, x, trace)
    }

    pub fn infos(&self, name: &str) -> Vec<LayerInfo> {
        let k = self.kernel;
        let mut out = vec![LayerInfo {
            name: format!("{name}.proj"),
            kind: "conv1d over time".into(),
            shapes: vec![vec![self.d_model, self.bins, k], vec![self.d_model]],
            params: self.d_model * self.bins * k + self.d_model,
        }];
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.infos(&format!("{name}.layer{l}")));
        }
        out
    }
}

/// Applies `layers` in order; shape is preserved.
pub fn transformer_encode<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    layers: &[EncoderLayer],
    x: Var,
    dropout: f64,
    trace: &mut AttnTrace,
) -> Result<Var> {
    let d = layers.first().map(|l| l.ln1.dim);
    if let Some(d) = d {
        if g.shape(x).len() != 3 || g.shape(x)[2] != d {
            return Err(dim_err!("transformer_encode expects [B,T,{d}], got {:?}", g.shape(x)));
        }
    }
    let mut h = x;
    for layer in layers {
        h = layer.forward(g, store, h, dropout, trace)?;
    }
    Ok(h)
}
