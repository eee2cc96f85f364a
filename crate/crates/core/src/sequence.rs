//! Cross-masking sequence model: two Transformer stacks (raw-signal and
//! spectrogram streams) that exchange information through cross-attention,
//! learnable mask tokens, and three classification heads.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::{positional_encoding, AttnTrace, FeedForward, LayerInfo, Linear, MultiHeadAttention, Norm};
use crate::backbones::layers::normal;
use crate::config::{ModelConfig, N_CLASSES};
use crate::diffcore::{Graph, ParamId, ParamStore, Scalar, Var};
use crate::error::{dim_err, input_err, Result};

pub const MASK_TOKEN_STD: f64 = 0.02;
pub const PRETRAIN_WEIGHTS: [f64; 3] = [1.0, 0.1, 0.1];
pub const FINETUNE_WEIGHTS: [f64; 3] = [1.0, 1.0, 1.0];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    #[default]
    Independent,
    Complementary,
}

/// Masked positions of one sequence, per modality.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub ratio: f64,
    pub mode: MaskMode,
    pub sg: Vec<bool>,
    pub sp: Vec<bool>,
}

impl MaskSpec {
    pub fn none(len: usize) -> Self {
        MaskSpec { ratio: 0.0, mode: MaskMode::Independent, sg: vec![false; len], sp: vec![false; len] }
    }
}

/// `round-half-up(ratio·len)`.
pub fn mask_count(len: usize, ratio: f64) -> usize {
    ((ratio * len as f64) + 0.5 + 1e-9).floor() as usize
}

fn flags(len: usize, idx: impl IntoIterator<Item = usize>) -> Vec<bool> {
    let mut v = vec![false; len];
    for i in idx {
        v[i] = true;
    }
    v
}

/// Draws exactly `mask_count(len, ratio)` positions for the raw-signal
/// stream. Independent mode draws the spectrogram positions separately;
/// complementary mode draws them from the unmasked remainder, capped at its
/// size.
pub fn sample_masks<R: Rng>(len: usize, ratio: f64, mode: MaskMode, rng: &mut R) -> Result<MaskSpec> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(input_err!("mask ratio must lie in [0,1], got {ratio}"));
    }
    if mode == MaskMode::Complementary && ratio > 0.5 {
        return Err(input_err!("complementary masking needs ratio <= 0.5, got {ratio}"));
    }
    let k = mask_count(len, ratio);
    let sg_idx = sample(rng, len, k).into_vec();
    let sg = flags(len, sg_idx);
    let sp = match mode {
        MaskMode::Independent => flags(len, sample(rng, len, k).into_vec()),
        MaskMode::Complementary => {
            let free: Vec<usize> = (0..len).filter(|&i| !sg[i]).collect();
            let picks = sample(rng, free.len(), k.min(free.len()));
            flags(len, picks.into_iter().map(|i| free[i]))
        }
    };
    Ok(MaskSpec { ratio, mode, sg, sp })
}

/// Replaces flagged rows of `seq[B,L,D]` (flags flattened over `B·L`) with
/// the shared token.
pub fn apply_masks<F: Scalar>(g: &mut Graph<F>, seq: Var, flags: &[bool], token: Var) -> Result<Var> {
    if !flags.iter().any(|&m| m) {
        return Ok(seq);
    }
    g.mask_replace(seq, token, flags)
}

/// Self-attention, cross-attention and feed-forward sublayers of one
/// stream, each followed by a residual add and LayerNorm.
#[derive(Clone, Debug)]
pub struct CrossHalf {
    pub self_attn: MultiHeadAttention,
    pub ln1: Norm,
    pub cross_attn: MultiHeadAttention,
    pub ln2: Norm,
    pub ff: FeedForward,
    pub ln3: Norm,
}

impl CrossHalf {
    fn new<F: Scalar, R: Rng>(store: &mut ParamStore<F>, rng: &mut R, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        Ok(CrossHalf {
            self_attn: MultiHeadAttention::new(store, rng, &format!("{name}.self"), d, cfg.n_heads, cfg.d_k)?,
            ln1: Norm::new(store, &format!("{name}.ln1"), d)?,
            cross_attn: MultiHeadAttention::new(store, rng, &format!("{name}.cross"), d, cfg.n_heads, cfg.d_k)?,
            ln2: Norm::new(store, &format!("{name}.ln2"), d)?,
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), d, cfg.d_ff)?,
            ln3: Norm::new(store, &format!("{name}.ln3"), d)?,
        })
    }

    /// `x` queries itself, then `other` (the opposite stream's input to
    /// this layer).
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var, other: Var, dropout: f64, trace: &mut AttnTrace) -> Result<Var> {
        let a = self.self_attn.forward(g, store, x, x, dropout, trace)?;
        let y = g.add(x, a)?;
        let y = self.ln1.forward(g, store, y)?;
        let c = self.cross_attn.forward(g, store, y, other, dropout, trace)?;
        let z = g.add(y, c)?;
        let z = self.ln2.forward(g, store, z)?;
        let f = self.ff.forward(g, store, z)?;
        let f = g.dropout(f, dropout)?;
        let out = g.add(z, f)?;
        self.ln3.forward(g, store, out)
    }

    fn infos(&self, name: &str) -> Vec<LayerInfo> {
        let mut v = self.self_attn.infos(&format!("{name}.self"));
        v.push(self.ln1.info(&format!("{name}.ln1")));
        v.extend(self.cross_attn.infos(&format!("{name}.cross")));
        v.push(self.ln2.info(&format!("{name}.ln2")));
        v.push(self.ff.l1.info(&format!("{name}.ff.l1")));
        v.push(self.ff.l2.info(&format!("{name}.ff.l2")));
        v.push(self.ln3.info(&format!("{name}.ln3")));
        v
    }
}

#[derive(Clone, Debug)]
pub struct CrossLayer {
    pub sg: CrossHalf,
    pub sp: CrossHalf,
}

/// Two-layer ReLU MLP classifier.
#[derive(Clone, Debug)]
pub struct Head {
    pub l1: Linear,
    pub l2: Linear,
}

impl Head {
    fn new<F: Scalar, R: Rng>(store: &mut ParamStore<F>, rng: &mut R, name: &str, din: usize, hidden: usize) -> Result<Self> {
        Ok(Head {
            l1: Linear::new(store, rng, &format!("{name}.l1"), din, hidden)?,
            l2: Linear::new(store, rng, &format!("{name}.l2"), hidden, N_CLASSES)?,
        })
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let h = self.l1.forward(g, store, x)?;
        let h = g.relu(h)?;
        self.l2.forward(g, store, h)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SeqOutputs {
    pub t_sg: Var,
    pub t_sp: Var,
    pub logits_sg: Var,
    pub logits_sp: Var,
    pub logits_cat: Var,
}

#[derive(Clone, Debug)]
pub struct SequenceModel {
    pub layers: Vec<CrossLayer>,
    pub token_sg: ParamId,
    pub token_sp: ParamId,
    pub head_sg: Head,
    pub head_sp: Head,
    pub head_cat: Head,
    pub d_model: usize,
    pub dropout: f64,
}

impl SequenceModel {
    /// Parameters are registered under `{seq}.` (stacks and mask tokens) and
    /// `{head}.` (classifiers).
    pub fn new<F: Scalar, R: Rng>(store: &mut ParamStore<F>, rng: &mut R, seq: &str, head: &str, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        let layers = (0..cfg.seq_layers)
            .map(|l| {
                Ok(CrossLayer {
                    sg: CrossHalf::new(store, rng, &format!("{seq}.layer{l}.sg"), cfg)?,
                    sp: CrossHalf::new(store, rng, &format!("{seq}.layer{l}.sp"), cfg)?,
                })
            })
            .collect::<Result<_>>()?;
        let token_sg = store.add(&format!("{seq}.mask_token_sg"), normal(rng, &[d], MASK_TOKEN_STD))?;
        let token_sp = store.add(&format!("{seq}.mask_token_sp"), normal(rng, &[d], MASK_TOKEN_STD))?;
        Ok(SequenceModel {
            layers,
            token_sg,
            token_sp,
            head_sg: Head::new(store, rng, &format!("{head}.sg"), d, cfg.head_hidden)?,
            head_sp: Head::new(store, rng, &format!("{head}.sp"), d, cfg.head_hidden)?,
            head_cat: Head::new(store, rng, &format!("{head}.cat"), 2 * d, cfg.head_hidden)?,
            d_model: d,
            dropout: cfg.dropout,
        })
    }

    /// Adds the sequence positional encoding, then runs the stacks
    /// layer-synchronously.
    pub fn cross_encode<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, seq_sg: Var, seq_sp: Var, trace: &mut AttnTrace) -> Result<(Var, Var)> {
        let (a, b) = (g.shape(seq_sg).to_vec(), g.shape(seq_sp).to_vec());
        if a.len() != 3 || a[2] != self.d_model || a != b {
            return Err(dim_err!("cross_encode expects matching [B,L,{}] inputs, got {a:?} and {b:?}", self.d_model));
        }
        let pe = g.constant(positional_encoding(a[1], self.d_model));
        let mut x_sg = g.add_broadcast(seq_sg, pe)?;
        let mut x_sp = g.add_broadcast(seq_sp, pe)?;
        for layer in &self.layers {
            let n_sg = layer.sg.forward(g, store, x_sg, x_sp, self.dropout, trace)?;
            let n_sp = layer.sp.forward(g, store, x_sp, x_sg, self.dropout, trace)?;
            x_sg = n_sg;
            x_sp = n_sp;
        }
        Ok((x_sg, x_sp))
    }

    pub fn heads_forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, t_sg: Var, t_sp: Var) -> Result<(Var, Var, Var)> {
        let logits_sg = self.head_sg.forward(g, store, t_sg)?;
        let logits_sp = self.head_sp.forward(g, store, t_sp)?;
        let cat = g.concat_last(t_sg, t_sp)?;
        let logits_cat = self.head_cat.forward(g, store, cat)?;
        Ok((logits_sg, logits_sp, logits_cat))
    }

    /// Full pass over pooled epoch features `[B,L,D]`; `masks` holds one
    /// [`MaskSpec`] per batch item when masking is active.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        o_sg: Var,
        o_sp: Var,
        masks: Option<&[MaskSpec]>,
        trace: &mut AttnTrace,
    ) -> Result<SeqOutputs> {
        let (mut s_sg, mut s_sp) = (o_sg, o_sp);
        if let Some(masks) = masks {
            let shape = g.shape(o_sg).to_vec();
            if masks.len() != shape[0] || masks.iter().any(|m| m.sg.len() != shape[1] || m.sp.len() != shape[1]) {
                return Err(dim_err!("{} masks of length {:?} for input {shape:?}", masks.len(), masks.first().map(|m| m.sg.len())));
            }
            let f_sg: Vec<bool> = masks.iter().flat_map(|m| m.sg.iter().copied()).collect();
            let f_sp: Vec<bool> = masks.iter().flat_map(|m| m.sp.iter().copied()).collect();
            let tok_sg = g.param(store, self.token_sg);
            let tok_sp = g.param(store, self.token_sp);
            s_sg = apply_masks(g, o_sg, &f_sg, tok_sg)?;
            s_sp = apply_masks(g, o_sp, &f_sp, tok_sp)?;
        }
        let (t_sg, t_sp) = self.cross_encode(g, store, s_sg, s_sp, trace)?;
        let (logits_sg, logits_sp, logits_cat) = self.heads_forward(g, store, t_sg, t_sp)?;
        Ok(SeqOutputs { t_sg, t_sp, logits_sg, logits_sp, logits_cat })
    }

    pub fn infos(&self, seq: &str, head: &str) -> Vec<LayerInfo> {
        let mut v = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            v.extend(layer.sg.infos(&format!("{seq}.layer{l}.sg")));
            v.extend(layer.sp.infos(&format!("{seq}.layer{l}.sp")));
        }
        for m in ["sg", "sp"] {
            v.push(LayerInfo { name: format!("{seq}.mask_token_{m}"), kind: "mask token".into(), shapes: vec![vec![self.d_model]], params: self.d_model });
        }
        for (h, name) in [(&self.head_sg, "sg"), (&self.head_sp, "sp"), (&self.head_cat, "cat")] {
            v.push(h.l1.info(&format!("{head}.{name}.l1")));
            v.push(h.l2.info(&format!("{head}.{name}.l2")));
        }
        v
    }
}

/// `w1·CE(sg) + w2·CE(sp) + w3·CE(cat)`, each the mean over all `B·L`
/// positions. `labels` is flattened row-major over `[B,L]`.
pub fn sequence_loss<F: Scalar>(g: &mut Graph<F>, logits: [Var; 3], labels: &[usize], weights: [f64; 3]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (lg, w) in logits.into_iter().zip(weights) {
        let s = g.shape(lg).to_vec();
        let rows: usize = s[..s.len() - 1].iter().product();
        let flat = g.reshape(lg, &[rows, s[s.len() - 1]])?;
        let ce = g.cross_entropy(flat, labels)?;
        let term = g.scale(ce, F::lit(w))?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("three heads"))
}
