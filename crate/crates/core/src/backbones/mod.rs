//! Epoch-level encoders and the layers they share with the sequence model.

pub mod cnn;
pub mod layers;
pub mod pool;
pub mod spec;

pub use cnn::CnnBackbone;
pub use layers::{positional_encoding, sinusoidal_table, AttnTrace, EncoderLayer, FeedForward, LayerInfo, Linear, MultiHeadAttention, Norm};
pub use pool::{EpochAttention, Pooled};
pub use spec::{transformer_encode, SpecTransformer};

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::config::ModelConfig;
    use crate::diffcore::{check_params, GradCheckConfig, Graph, ParamStore, Tensor, Var};

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            cnn_channels: [2, 2, 2, 4, 4],
            d_model: 2,
            n_heads: 1,
            d_k: 2,
            d_ff: 4,
            epoch_layers: 1,
            attn_size: 2,
            ..ModelConfig::desk()
        }
    }

    #[test]
    fn pe_matches_direct_sinusoids() {
        let pe = positional_encoding::<f32>(29, 128);
        for p in [0usize, 1, 17, 28] {
            for i in 0..64 {
                let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / 128.0);
                assert!((pe.data()[p * 128 + 2 * i] as f64 - angle.sin()).abs() < 1e-6);
                assert!((pe.data()[p * 128 + 2 * i + 1] as f64 - angle.cos()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn spec_project_zero_input_is_pe() {
        let cfg = ModelConfig::paper();
        let mut store = ParamStore::<f32>::new();
        let st = SpecTransformer::new(&mut store, &mut ChaCha8Rng::seed_from_u64(1), "spec", &cfg).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 29, 129]));
        let y = st.project(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[2, 29, 128]);
        let pe = positional_encoding::<f32>(29, 128);
        assert_eq!(&g.value(y).data()[..29 * 128], pe.data());
        assert_eq!(&g.value(y).data()[29 * 128..], pe.data());
        let bad = g.constant(Tensor::zeros(&[2, 29, 128]));
        assert!(st.project(&mut g, &store, bad).is_err());
    }

    #[test]
    fn spec_transformer_paper_shapes_and_attention_rows() {
        let cfg = ModelConfig::paper();
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let st = SpecTransformer::new(&mut store, &mut rng, "spec", &cfg).unwrap();
        let mut g = Graph::new();
        let x = g.constant(rand_t(&mut rng, &[2, 29, 129]).cast());
        let mut trace = AttnTrace::default();
        let y = st.forward(&mut g, &store, x, &mut trace).unwrap();
        assert_eq!(g.shape(y), &[2, 29, 128]);
        assert_eq!(trace.weights.len(), 4);
        for &w in &trace.weights {
            assert_eq!(g.shape(w), &[16, 29, 29]);
            for row in g.value(w).data().chunks(29) {
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_token_attention_weight_is_one() {
        let cfg = ModelConfig::paper();
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let st = SpecTransformer::new(&mut store, &mut rng, "spec", &cfg).unwrap();
        let mut g = Graph::new();
        let x = g.constant(rand_t(&mut rng, &[3, 1, 128]));
        let mut trace = AttnTrace::default();
        let y = st.encode(&mut g, &store, x, &mut trace).unwrap();
        assert_eq!(g.shape(y), &[3, 1, 128]);
        for &w in &trace.weights {
            assert!(g.value(w).data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn attention_scale_matches_hand_oracle() {
        // one head, d_k = 16, identity q/k/v/o projections, two tokens
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mha = MultiHeadAttention::new(&mut store, &mut rng, "a", 16, 1, 16).unwrap();
        let mut eye = vec![0.0; 256];
        for i in 0..16 {
            eye[i * 16 + i] = 1.0;
        }
        for l in [&mha.q, &mha.k, &mha.v, &mha.o] {
            store.get_mut(l.w).value = Tensor::new(&[16, 16], eye.clone()).unwrap();
        }
        let x = rand_t(&mut rng, &[1, 2, 16]);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mut trace = AttnTrace::default();
        let y = mha.forward(&mut g, &store, xv, xv, 0.0, &mut trace).unwrap();
        let xs = x.data();
        let dot = |a: usize, b: usize| (0..16).map(|i| xs[a * 16 + i] * xs[b * 16 + i]).sum::<f64>();
        for q in 0..2 {
            let s0 = dot(q, 0) * 0.25;
            let s1 = dot(q, 1) * 0.25;
            let m = s0.max(s1);
            let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
            let (a0, a1) = (e0 / (e0 + e1), e1 / (e0 + e1));
            assert!((g.value(trace.weights[0]).data()[q * 2] - a0).abs() < 1e-12);
            for i in 0..16 {
                let expect = a0 * xs[i] + a1 * xs[16 + i];
                assert!((g.value(y).data()[q * 16 + i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn positional_encoding_breaks_permutation_symmetry() {
        let cfg = ModelConfig::desk();
        let d = cfg.d_model;
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let st = SpecTransformer::new(&mut store, &mut rng, "spec", &cfg).unwrap();
        let x = rand_t(&mut rng, &[1, 29, d]);
        let mut swapped = x.clone();
        for j in 0..d {
            swapped.data_mut().swap(j, d + j);
        }
        let run = |inp: &Tensor<f64>, with_pe: bool| {
            let mut g = Graph::new();
            let mut h = g.constant(inp.clone());
            if with_pe {
                let pe = g.constant(positional_encoding::<f64>(29, d));
                h = g.add_broadcast(h, pe).unwrap();
            }
            let y = st.encode(&mut g, &store, h, &mut AttnTrace::default()).unwrap();
            g.value(y).data().to_vec()
        };
        // the bare stack is permutation-equivariant
        let (a, b) = (run(&x, false), run(&swapped, false));
        for i in 0..d {
            assert!((a[i] - b[d + i]).abs() < 1e-9);
            assert!((a[d + i] - b[i]).abs() < 1e-9);
        }
        let (a, b) = (run(&x, true), run(&swapped, true));
        let diff: f64 = (0..d).map(|i| (a[i] - b[d + i]).abs()).sum();
        assert!(diff > 1e-3, "{diff}");
    }

    #[test]
    fn epoch_pool_properties() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pool = EpochAttention::new(&mut store, &mut rng, "pool", 128, 128).unwrap();
        // identical tokens pool to themselves
        let v: Vec<f64> = (0..128).map(|i| (i as f64).sin()).collect();
        let z = Tensor::new(&[1, 5, 128], v.iter().cycle().take(5 * 128).copied().collect()).unwrap();
        let mut g = Graph::new();
        let zv = g.constant(z);
        let p = pool.forward(&mut g, &store, zv).unwrap();
        for (a, b) in g.value(p.output).data().iter().zip(&v) {
            assert!((a - b).abs() < 1e-12);
        }
        for t in [5usize, 29] {
            let z = rand_t(&mut rng, &[3, t, 128]);
            let mut g = Graph::new();
            let zv = g.constant(z.clone());
            let p = pool.forward(&mut g, &store, zv).unwrap();
            assert_eq!(g.shape(p.output), &[3, 128]);
            // independent recomputation of α
            let w = store.get(pool.proj.w).value.data();
            let b = store.get(pool.proj.b).value.data();
            let ctx = store.get(pool.context).value.data();
            for n in 0..3 {
                let scores: Vec<f64> = (0..t)
                    .map(|ti| {
                        let zt = &z.data()[(n * t + ti) * 128..(n * t + ti + 1) * 128];
                        (0..128)
                            .map(|a| {
                                let pre: f64 = (0..128).map(|d| zt[d] * w[d * 128 + a]).sum::<f64>() + b[a];
                                pre.tanh() * ctx[a]
                            })
                            .sum()
                    })
                    .collect();
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for ti in 0..t {
                    let alpha = (scores[ti] - m).exp() / total;
                    assert!((g.value(p.weights).data()[n * t + ti] - alpha).abs() < 1e-6);
                }
                // convex combination: each coordinate within token min/max
                for d in 0..128 {
                    let col: Vec<f64> = (0..t).map(|ti| z.data()[(n * t + ti) * 128 + d]).collect();
                    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let o = g.value(p.output).data()[n * 128 + d];
                    assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
                }
            }
        }
    }

    fn weighted(g: &mut Graph<f64>, y: Var, seed: u64) -> crate::Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = g.constant(rand_t(&mut rng, g.shape(y)));
        let p = g.mul(y, w)?;
        g.sum(p)
    }

    #[test]
    fn gradcheck_cnn_encode_tiny() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cnn = CnnBackbone::new(&mut store, &mut rng, "cnn", &cfg).unwrap();
        // small positive biases keep ReLUs away from the all-dead regime
        for p in store.iter_mut().filter(|p| p.name.ends_with(".b")) {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.1);
        }
        // a short random burst in a silent epoch keeps the number of
        // ReLU and pooling kinks near the evaluation point small
        let mut xt = Tensor::zeros(&[2, 1, 3000]);
        for v in &mut xt.data_mut()[1200..1260] {
            *v = rng.random_range(-1.0..1.0);
        }
        for v in &mut xt.data_mut()[3000 + 400..3000 + 460] {
            *v = rng.random_range(-1.0..1.0);
        }
        let report = check_params(
            &mut store,
            |g, s| {
                let xv = g.constant(xt.clone());
                let y = cnn.forward(g, s, xv)?;
                weighted(g, y, 8)
            },
            &GradCheckConfig { step: 1e-5, max_coords: None, seed: 1 },
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-5, "{report:?}");
    }

    #[test]
    fn gradcheck_transformer_encode_tiny() {
        let cfg = ModelConfig { d_model: 4, n_heads: 2, d_k: 2, d_ff: 8, epoch_layers: 2, ..ModelConfig::desk() };
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layers: Vec<EncoderLayer> = (0..2)
            .map(|l| EncoderLayer::new(&mut store, &mut rng, &format!("l{l}"), 4, cfg.n_heads, cfg.d_k, cfg.d_ff).unwrap())
            .collect();
        let x = store.add("x", rand_t(&mut rng, &[2, 4, 4])).unwrap();
        // key biases shift every score of a query equally, so their exact gradient is zero
        assert_eq!(store.set_trainable("l0.attn.k.b", false) + store.set_trainable("l1.attn.k.b", false), 2);
        let report = check_params(
            &mut store,
            |g, s| {
                let xv = g.param(s, x);
                let mut tr = AttnTrace::default();
                let y = transformer_encode(g, s, &layers, xv, 0.1, &mut tr)?;
                weighted(g, y, 10)
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-5, "{report:?}");
    }

    #[test]
    fn gradcheck_epoch_pool() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pool = EpochAttention::new(&mut store, &mut rng, "pool", 4, 3).unwrap();
        let z = store.add("z", rand_t(&mut rng, &[2, 5, 4])).unwrap();
        let report = check_params(
            &mut store,
            |g, s| {
                let zv = g.param(s, z);
                let p = pool.forward(g, s, zv)?;
                weighted(g, p.output, 12)
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-5, "{report:?}");
    }
}
