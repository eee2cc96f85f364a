//! Projection heads and the bidirectional InfoNCE loss that aligns raw-signal
//! and spectrogram epoch embeddings.

use rand::Rng;

use crate::backbones::{LayerInfo, Linear};
use crate::diffcore::{Graph, ParamStore, Scalar, Var};
use crate::error::{dim_err, input_err, Result};

pub const DEFAULT_TAU: f64 = 0.1;

/// `normalize(W2·relu(W1·o + b1) + b2)`.
#[derive(Clone, Debug)]
pub struct Projection {
    pub l1: Linear,
    pub l2: Linear,
}

impl Projection {
    pub fn new<F: Scalar, R: Rng>(store: &mut ParamStore<F>, rng: &mut R, name: &str, d_in: usize, d_proj: usize) -> Result<Self> {
        Ok(Projection {
            l1: Linear::new(store, rng, &format!("{name}.l1"), d_in, d_proj)?,
            l2: Linear::new(store, rng, &format!("{name}.l2"), d_proj, d_proj)?,
        })
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, o: Var) -> Result<Var> {
        let h = self.l1.forward(g, store, o)?;
        let h = g.relu(h)?;
        let h = self.l2.forward(g, store, h)?;
        g.l2_normalize(h)
    }

    pub fn infos(&self, name: &str) -> Vec<LayerInfo> {
        vec![self.l1.info(&format!("{name}.l1")), self.l2.info(&format!("{name}.l2"))]
    }
}

/// One direction: anchors from `a[L,B,D]`, candidates from `b[L,B,D]`.
fn directed<F: Scalar>(g: &mut Graph<F>, a: Var, b: Var, tau: f64, l: usize, bsz: usize) -> Result<Var> {
    let sim = g.bmm(a, b, true)?;
    let sim = g.scale(sim, F::lit(1.0 / tau))?;
    let sim = g.reshape(sim, &[l * bsz, bsz])?;
    let labels: Vec<usize> = (0..l).flat_map(|_| 0..bsz).collect();
    g.cross_entropy(sim, &labels)
}

/// Symmetric InfoNCE over unit embeddings `[B,L,D]`. Negatives for anchor
/// `(i,j)` are the other batch items at the same epoch index `j`; each
/// direction is the mean over `i` and `j`, and the two directions are
/// averaged.
pub fn info_nce_loss<F: Scalar>(g: &mut Graph<F>, zz_sg: Var, zz_sp: Var, tau: f64) -> Result<Var> {
    let s = g.shape(zz_sg).to_vec();
    if s.len() != 3 || g.shape(zz_sp) != s.as_slice() {
        return Err(dim_err!("info_nce_loss: shapes {s:?} and {:?} must match as [B,L,D]", g.shape(zz_sp)));
    }
    if !(tau > 0.0) {
        return Err(input_err!("temperature must be positive, got {tau}"));
    }
    let (bsz, l) = (s[0], s[1]);
    if bsz < 2 {
        return Err(input_err!("info_nce_loss needs a batch of at least 2 for negatives, got {bsz}"));
    }
    let a = g.permute(zz_sg, &[1, 0, 2])?;
    let b = g.permute(zz_sp, &[1, 0, 2])?;
    let fwd = directed(g, a, b, tau, l, bsz)?;
    let bwd = directed(g, b, a, tau, l, bsz)?;
    let total = g.add(fwd, bwd)?;
    g.scale(total, F::lit(0.5))
}
