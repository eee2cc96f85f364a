//! Finite-difference gradient suite over every differentiable op and the
//! three end-to-end compositions, in 64-bit arithmetic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::backbones::AttnTrace;
use crate::config::ModelConfig;
use crate::contrastive::{info_nce_loss, Projection};
use crate::diffcore::{check_params, grad_check, GradCheckConfig, Graph, Padding, ParamStore, Tensor, Var};
use crate::error::Result;
use crate::model::SleepNet;
use crate::sequence::{sequence_loss, MaskMode, MaskSpec, SequenceModel, PRETRAIN_WEIGHTS};

pub const OP_TOLERANCE: f64 = 1e-5;
pub const COMPOSITION_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches data")
}

fn unit_rows(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let d = *shape.last().expect("non-empty shape");
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    for row in v.chunks_mut(d) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= norm);
    }
    Tensor::new(shape, v).expect("shape matches data")
}

/// `sum(y ⊙ w)` with fixed random `w`, so every output coordinate matters.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(rand_t(&mut rng, g.shape(y)));
    let p = g.mul(y, w)?;
    g.sum(p)
}

struct Ops {
    out: Vec<CheckResult>,
}

impl Ops {
    fn check(&mut self, name: &str, inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> Result<()> {
        let err = grad_check(
            |g, v| {
                let y = f(g, v)?;
                weighted_sum(g, y, 77)
            },
            &inputs,
            1e-6,
        )?;
        self.out.push(CheckResult { name: name.to_string(), max_rel_error: err, tolerance: OP_TOLERANCE });
        Ok(())
    }
}

/// One check per differentiable op on random inputs away from kinks and
/// ties.
pub fn op_checks() -> Result<Vec<CheckResult>> {
    let mut ops = Ops { out: Vec::new() };
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = rand_t(&mut rng, &[3, 4]);
    let b = rand_t(&mut rng, &[3, 4]);
    let bias = rand_t(&mut rng, &[4]);
    ops.check("add", vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]))?;
    ops.check("sub", vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]))?;
    ops.check("mul", vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]))?;
    ops.check("scale", vec![a.clone()], |g, v| g.scale(v[0], 0.37))?;
    ops.check("tanh", vec![a.clone()], |g, v| g.tanh(v[0]))?;
    ops.check("relu", vec![a.clone()], |g, v| g.relu(v[0]))?;
    ops.check("add_broadcast", vec![a.clone(), bias], |g, v| g.add_broadcast(v[0], v[1]))?;
    ops.check("sum", vec![a.clone()], |g, v| g.sum(v[0]))?;
    ops.check("mean", vec![a.clone()], |g, v| g.mean(v[0]))?;
    ops.check("concat_last", vec![a.clone(), b.clone()], |g, v| g.concat_last(v[0], v[1]))?;
    ops.check("reshape", vec![a.clone()], |g, v| g.reshape(v[0], &[2, 6]))?;
    ops.check("l2_normalize", vec![a.clone()], |g, v| g.l2_normalize(v[0]))?;

    let x = rand_t(&mut rng, &[2, 3, 4]);
    let w = rand_t(&mut rng, &[4, 5]);
    let wb = rand_t(&mut rng, &[5]);
    ops.check("matmul", vec![a.clone(), w.clone()], |g, v| g.matmul(v[0], v[1]))?;
    ops.check("affine", vec![x.clone(), w, wb], |g, v| g.affine(v[0], v[1], v[2]))?;
    let y = rand_t(&mut rng, &[2, 4, 3]);
    ops.check("bmm", vec![x.clone(), y], |g, v| g.bmm(v[0], v[1], false))?;
    let z = rand_t(&mut rng, &[2, 5, 4]);
    ops.check("bmm_trans_b", vec![x.clone(), z], |g, v| g.bmm(v[0], v[1], true))?;
    ops.check("permute", vec![x.clone()], |g, v| g.permute(v[0], &[2, 0, 1]))?;

    let s = rand_t(&mut rng, &[3, 6]);
    ops.check("softmax_last", vec![s.clone()], |g, v| g.softmax(v[0], 1))?;
    ops.check("softmax_first", vec![s.clone()], |g, v| g.softmax(v[0], 0))?;
    let gamma = rand_t(&mut rng, &[6]);
    let beta = rand_t(&mut rng, &[6]);
    ops.check("layer_norm", vec![s, gamma, beta], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5))?;
    let logits = rand_t(&mut rng, &[4, 5]);
    let err = grad_check(|g, v| g.cross_entropy(v[0], &[0, 3, 4, 1]), &[logits], 1e-6)?;
    ops.out.push(CheckResult { name: "cross_entropy".into(), max_rel_error: err, tolerance: OP_TOLERANCE });

    let cx = rand_t(&mut rng, &[2, 3, 11]);
    let cw = rand_t(&mut rng, &[4, 3, 3]);
    let cb = rand_t(&mut rng, &[4]);
    ops.check("conv1d_same", vec![cx.clone(), cw.clone(), cb.clone()], |g, v| g.conv1d(v[0], v[1], v[2], 1, Padding::Same))?;
    ops.check("conv1d_valid_stride2", vec![cx.clone(), cw.clone(), cb.clone()], |g, v| g.conv1d(v[0], v[1], v[2], 2, Padding::Valid))?;
    ops.check("conv1d_same_stride3", vec![cx.clone(), cw, cb], |g, v| g.conv1d(v[0], v[1], v[2], 3, Padding::Same))?;
    ops.check("maxpool1d_ceil", vec![cx.clone()], |g, v| g.maxpool1d(v[0], 5, 5, true))?;
    ops.check("maxpool1d_overlap", vec![cx], |g, v| g.maxpool1d(v[0], 2, 1, false))?;

    let mx = rand_t(&mut rng, &[2, 3, 4]);
    let tok = rand_t(&mut rng, &[4]);
    let mask = [true, false, true, false, false, true];
    ops.check("mask_replace", vec![mx, tok], move |g, v| g.mask_replace(v[0], v[1], &mask))?;
    Ok(ops.out)
}

/// Attention key biases add the same amount to every score of a query, so
/// their exact gradient is zero and a relative error is meaningless.
fn freeze_key_biases(store: &mut ParamStore<f64>) {
    for p in store.iter_mut().filter(|p| p.name.ends_with(".k.b")) {
        p.trainable = false;
    }
}

fn set_biases(store: &mut ParamStore<f64>, prefix: &str, value: f64) {
    for p in store.iter_mut().filter(|p| p.name.starts_with(prefix) && p.name.ends_with(".b")) {
        p.value.data_mut().iter_mut().for_each(|v| *v = value);
    }
}

/// Raw epoch and spectrogram backbones with their epoch pools, on a tiny
/// network.
fn epoch_path() -> Result<CheckResult> {
    let cfg = ModelConfig { cnn_channels: [2, 2, 4, 4, 8], d_model: 4, n_heads: 2, d_k: 2, d_ff: 4, epoch_layers: 1, attn_size: 3, ..ModelConfig::desk() };
    let (net, mut store) = SleepNet::new::<f64>(&cfg, 7)?;
    for prefix in ["proj_", "seq.", "head."] {
        store.set_trainable(prefix, false);
    }
    freeze_key_biases(&mut store);
    // positive CNN biases keep ReLUs away from the all-dead regime
    set_biases(&mut store, "cnn.", 0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    // a short burst in a silent epoch keeps the number of ReLU and pooling
    // kinks near the evaluation point small
    let mut raw = Tensor::zeros(&[1, 1, 3000]);
    for v in &mut raw.data_mut()[1200..1260] {
        *v = rng.random_range(-1.0..1.0);
    }
    let spec = rand_t(&mut rng, &[1, 29, 129]);
    let report = check_params(
        &mut store,
        |g, s| {
            let (r, sp) = (g.constant(raw.clone()), g.constant(spec.clone()));
            let f = net.encode_epochs(g, s, r, sp, &mut AttnTrace::default())?;
            let both = g.concat_last(f.sg, f.sp)?;
            weighted_sum(g, both, 9)
        },
        &GradCheckConfig { step: 1e-5, max_coords: None, seed: 1 },
    )?;
    Ok(CheckResult { name: "epoch_path".into(), max_rel_error: report.max_rel_error, tolerance: COMPOSITION_TOLERANCE })
}

/// Projection heads and the symmetric InfoNCE loss.
fn contrastive_path() -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f64>::new();
    let p_sg = Projection::new(&mut store, &mut rng, "proj_sg", 4, 4)?;
    let p_sp = Projection::new(&mut store, &mut rng, "proj_sp", 4, 4)?;
    set_biases(&mut store, "proj_", 0.1);
    let a = store.add("o_sg", unit_rows(&mut rng, &[3, 2, 4]))?;
    let b = store.add("o_sp", unit_rows(&mut rng, &[3, 2, 4]))?;
    let report = check_params(
        &mut store,
        |g, s| {
            let (x, y) = (g.param(s, a), g.param(s, b));
            let zx = p_sg.forward(g, s, x)?;
            let zy = p_sp.forward(g, s, y)?;
            info_nce_loss(g, zx, zy, 0.1)
        },
        &GradCheckConfig::default(),
    )?;
    Ok(CheckResult { name: "contrastive_path".into(), max_rel_error: report.max_rel_error, tolerance: COMPOSITION_TOLERANCE })
}

/// Masking, cross-modal stacks, heads and the weighted sequence loss.
fn masked_sequence_path() -> Result<CheckResult> {
    let cfg = ModelConfig { d_model: 8, n_heads: 2, d_k: 4, d_ff: 8, seq_layers: 1, head_hidden: 4, ..ModelConfig::desk() };
    let mut store = ParamStore::<f64>::new();
    let m = SequenceModel::new(&mut store, &mut ChaCha8Rng::seed_from_u64(14), "seq", "head", &cfg)?;
    set_biases(&mut store, "", 0.05);
    freeze_key_biases(&mut store);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let a = store.add("in_sg", rand_t(&mut rng, &[1, 3, 8]))?;
    let b = store.add("in_sp", rand_t(&mut rng, &[1, 3, 8]))?;
    let masks = vec![MaskSpec { ratio: 0.3, mode: MaskMode::Independent, sg: vec![true, false, false], sp: vec![false, false, true] }];
    let labels = [0usize, 3, 1];
    let report = check_params(
        &mut store,
        |g, s| {
            let (x, y) = (g.param(s, a), g.param(s, b));
            let o = m.forward(g, s, x, y, Some(&masks), &mut AttnTrace::default())?;
            sequence_loss(g, [o.logits_sg, o.logits_sp, o.logits_cat], &labels, PRETRAIN_WEIGHTS)
        },
        &GradCheckConfig::default(),
    )?;
    Ok(CheckResult { name: "masked_sequence_path".into(), max_rel_error: report.max_rel_error, tolerance: COMPOSITION_TOLERANCE })
}

pub fn composition_checks() -> Result<Vec<CheckResult>> {
    Ok(vec![epoch_path()?, contrastive_path()?, masked_sequence_path()?])
}

/// Ops followed by compositions.
pub fn run_all() -> Result<Vec<CheckResult>> {
    let mut v = op_checks()?;
    v.extend(composition_checks()?);
    Ok(v)
}
