use rand::Rng;

use super::layers::{uniform, LayerInfo};
use crate::config::ModelConfig;
use crate::diffcore::{Graph, Padding, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::error::{dim_err, Result};

/// Conv layers per block.
pub const BLOCK_DEPTHS: [usize; 5] = [2, 2, 3, 3, 3];
pub const POOL_WIDTH: usize = 5;
pub const CHANNEL_POOL_WIDTH: usize = 2;

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

/// Raw-signal encoder: five conv blocks (kernel 3, stride 1, same padding,
/// ReLU), width-5 ceil-mode pooling after blocks 2–5, then a width-2
/// pool across channels so the output is `[B, 5, d_model]`.
#[derive(Clone, Debug)]
pub struct CnnBackbone {
    pub blocks: Vec<Vec<ConvLayer>>,
    pub raw_len: usize,
}

impl CnnBackbone {
    pub fn new<F: Scalar, R: Rng>(store: &mut ParamStore<F>, rng: &mut R, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let mut cin = 1;
        let mut blocks = Vec::new();
        for (bi, (&depth, &cout)) in BLOCK_DEPTHS.iter().zip(&cfg.cnn_channels).enumerate() {
            let mut layers = Vec::new();
            for li in 0..depth {
                let fan_in = cin * cfg.kernel;
                // He-uniform for ReLU layers
                let bound = (6.0 / fan_in as f64).sqrt();
                let w = store.add(&format!("{name}.block{bi}.conv{li}.w"), uniform(rng, &[cout, cin, cfg.kernel], bound))?;
                let b = store.add(&format!("{name}.block{bi}.conv{li}.b"), Tensor::zeros(&[cout]))?;
                layers.push(ConvLayer { w, b, cin, cout, kernel: cfg.kernel });
                cin = cout;
            }
            blocks.push(layers);
        }
        Ok(CnnBackbone { blocks, raw_len: cfg.raw_len() })
    }

    /// `x[B,1,T]` → `[B, tokens, C_last/2]`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[1] != 1 || s[2] != self.raw_len {
            return Err(dim_err!("cnn_encode expects [B,1,{}], got {s:?}", self.raw_len));
        }
        let mut h = x;
        for (bi, block) in self.blocks.iter().enumerate() {
            for layer in block {
                let w = g.param(store, layer.w);
                let b = g.param(store, layer.b);
                h = g.conv1d(h, w, b, 1, Padding::Same)?;
                h = g.relu(h)?;
            }
            if bi > 0 {
                h = g.maxpool1d(h, POOL_WIDTH, POOL_WIDTH, true)?;
            }
        }
        let h = g.permute(h, &[0, 2, 1])?;
        g.maxpool1d(h, CHANNEL_POOL_WIDTH, CHANNEL_POOL_WIDTH, true)
    }

    pub fn infos(&self, name: &str) -> Vec<LayerInfo> {
        let mut out = Vec::new();
        for (bi, block) in self.blocks.iter().enumerate() {
            for (li, l) in block.iter().enumerate() {
                out.push(LayerInfo {
                    name: format!("{name}.block{bi}.conv{li}"),
                    kind: "conv1d".into(),
                    shapes: vec![vec![l.cout, l.cin, l.kernel], vec![l.cout]],
                    params: l.cout * l.cin * l.kernel + l.cout,
                });
            }
            if bi > 0 {
                out.push(LayerInfo { name: format!("{name}.block{bi}.pool"), kind: "maxpool1d(5, ceil)".into(), shapes: vec![], params: 0 });
            }
        }
        out.push(LayerInfo { name: format!("{name}.channel_pool"), kind: "maxpool1d(2) over channels".into(), shapes: vec![], params: 0 });
        out
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn paper_shape_and_param_count() {
        let cfg = ModelConfig::paper();
        let mut store = ParamStore::<f32>::new();
        let cnn = CnnBackbone::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), "cnn", &cfg).unwrap();
        // independent count straight from the layer plan
        let plan: [(usize, usize); 13] = [
            (1, 64), (64, 64),
            (64, 128), (128, 128),
            (128, 128), (128, 128), (128, 128),
            (128, 256), (256, 256), (256, 256),
            (256, 256), (256, 256), (256, 256),
        ];
        let expect: usize = plan.iter().map(|(i, o)| o * i * 3 + o).sum();
        assert_eq!(store.count_prefix("cnn."), expect);
        assert_eq!(cnn.infos("cnn").iter().map(|l| l.params).sum::<usize>(), expect);

        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[32, 1, 3000]));
        let y = cnn.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[32, 5, 128]);
        // zero input and zero biases stay zero through conv/ReLU/pool
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_length_rejected() {
        let cfg = ModelConfig::desk();
        let mut store = ParamStore::<f32>::new();
        let cnn = CnnBackbone::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), "cnn", &cfg).unwrap();
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[2, 1, 2999]));
        assert!(matches!(cnn.forward(&mut g, &store, x), Err(crate::Error::Dimension(_))));
    }
}
