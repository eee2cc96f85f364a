use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Stage, TrainConfig};
use super::log::{LogRow, TrainLog};
use super::metrics::{should_stop, Metrics};
use super::prepare::{precompute_features, split_windows, Prepared, Split};
use super::sub_seed;
use crate::backbones::{AttnTrace, Linear};
use crate::config::N_CLASSES;
use crate::contrastive::info_nce_loss;
use crate::data::{sequence_windows, Dataset, Window};
use crate::diffcore::{AdamState, Graph, ParamStore, Tensor, Var};
use crate::error::{input_err, state_err, Error, Result};
use crate::model::{SleepNet, BACKBONE_PREFIXES};
use crate::sequence::{sample_masks, sequence_loss, MaskSpec};

const EVAL_CHUNK: usize = 64;

/// One sequence batch: `B` windows of `L` epochs flattened to `B·L` rows.
#[derive(Clone, Debug)]
pub struct Batch {
    pub raw: Tensor<f32>,
    pub spec: Tensor<f32>,
    pub labels: Vec<usize>,
    pub masks: Option<Vec<MaskSpec>>,
    pub b: usize,
    pub l: usize,
}

/// Loss nodes of one pre-training forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub epoch: Option<Var>,
    pub seq: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub epoch: f64,
    pub seq: f64,
    pub total: f64,
}

pub struct Stage0Outcome {
    pub net: SleepNet,
    /// Full network parameters; only the backbones and epoch pools moved.
    pub store: ParamStore<f32>,
    pub log: TrainLog,
    pub final_loss: f64,
    pub train_acc_sg: f64,
    pub train_acc_sp: f64,
    pub val_sg: Option<Metrics>,
    pub val_sp: Option<Metrics>,
}

pub struct TrainOutcome {
    pub net: SleepNet,
    pub store: ParamStore<f32>,
    pub log: TrainLog,
    pub split: Split,
    /// Best validation accuracy; its parameters are the ones returned.
    pub best_val: Option<f64>,
    pub steps_run: usize,
    pub stopped_early: bool,
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn argmax_rows(t: &Tensor<f32>) -> Vec<usize> {
    t.data().chunks(N_CLASSES).map(argmax).collect()
}

fn open_log(seed: u64, stage: Stage, path: Option<&Path>) -> Result<TrainLog> {
    match path {
        Some(p) => TrainLog::to_file(seed, stage.name(), p),
        None => Ok(TrainLog::new(seed, stage.name())),
    }
}

fn check_finite(v: f64, step: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Evaluation(format!("non-finite loss {v} at step {step}")))
    }
}

/// Cycles through shuffled windows in full batches of `b`; a tail shorter
/// than `b` is skipped before reshuffling.
struct WindowCycle {
    windows: Vec<Window>,
    cursor: usize,
    b: usize,
    rng: ChaCha8Rng,
}

impl WindowCycle {
    fn new(windows: Vec<Window>, b: usize, seed: u64) -> Self {
        let b = b.min(windows.len());
        WindowCycle { windows, cursor: usize::MAX, b, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn next_batch(&mut self) -> Vec<Window> {
        if self.cursor.saturating_add(self.b) > self.windows.len() {
            self.windows.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let out = self.windows[self.cursor..self.cursor + self.b].to_vec();
        self.cursor += self.b;
        out
    }
}

/// Assembles inputs, labels and (outside fine-tuning) masks for `windows`.
pub fn make_batch(prep: &Prepared, windows: &[Window], cfg: &TrainConfig, aug: Option<&mut ChaCha8Rng>, mask_rng: &mut ChaCha8Rng) -> Result<Batch> {
    let l = windows.first().map(|w| w.len).ok_or_else(|| input_err!("empty batch"))?;
    let idx: Vec<usize> = windows.iter().flat_map(|w| prep.window_indices(w)).collect();
    let (raw, spec) = prep.inputs(&idx, aug)?;
    let masks = match cfg.stage {
        Stage::Finetune => None,
        _ => Some(
            windows
                .iter()
                .map(|_| sample_masks(l, cfg.effective_mask_ratio(), cfg.mask_mode, mask_rng))
                .collect::<Result<Vec<_>>>()?,
        ),
    };
    Ok(Batch { raw, spec, labels: prep.labels_of(&idx), masks, b: windows.len(), l })
}

/// InfoNCE on projected features (when enabled) plus the weighted sequence
/// loss on masked features.
pub fn pretrain_objective(g: &mut Graph<f32>, net: &SleepNet, store: &ParamStore<f32>, batch: &Batch, cfg: &TrainConfig) -> Result<Objective> {
    let d = net.cfg.d_model;
    let raw = g.constant(batch.raw.clone());
    let spec = g.constant(batch.spec.clone());
    let f = net.encode_epochs(g, store, raw, spec, &mut AttnTrace::default())?;
    let o_sg = g.reshape(f.sg, &[batch.b, batch.l, d])?;
    let o_sp = g.reshape(f.sp, &[batch.b, batch.l, d])?;
    let epoch = if cfg.contrastive {
        let zz_sg = net.proj_sg.forward(g, store, o_sg)?;
        let zz_sp = net.proj_sp.forward(g, store, o_sp)?;
        Some(info_nce_loss(g, zz_sg, zz_sp, cfg.tau)?)
    } else {
        None
    };
    let out = net.seq.forward(g, store, o_sg, o_sp, batch.masks.as_deref(), &mut AttnTrace::default())?;
    let seq = sequence_loss(g, [out.logits_sg, out.logits_sp, out.logits_cat], &batch.labels, cfg.weights())?;
    let total = match epoch {
        Some(e) => g.add(e, seq)?,
        None => seq,
    };
    Ok(Objective { epoch, seq, total })
}

fn apply_gradients(g: &Graph<f32>, loss: Var, store: &mut ParamStore<f32>, adam: &mut AdamState<f32>) -> Result<()> {
    let grads = g.backward(loss)?;
    store.accumulate(g, &grads)?;
    adam.step(store)
}

/// One Adam step on `batch`. `graph_seed` enables dropout; `None` runs the
/// forward pass in evaluation mode.
pub fn pretrain_step(
    net: &SleepNet,
    store: &mut ParamStore<f32>,
    adam: &mut AdamState<f32>,
    batch: &Batch,
    cfg: &TrainConfig,
    graph_seed: Option<u64>,
) -> Result<LossParts> {
    store.zero_grads();
    let mut g = graph_seed.map(Graph::training).unwrap_or_default();
    let obj = pretrain_objective(&mut g, net, store, batch, cfg)?;
    let parts = LossParts {
        epoch: obj.epoch.map(|e| g.value(e).item() as f64).unwrap_or(0.0),
        seq: g.value(obj.seq).item() as f64,
        total: g.value(obj.total).item() as f64,
    };
    apply_gradients(&g, obj.total, store, adam)?;
    Ok(parts)
}

/// `[b, l, d]` tensor of per-epoch feature rows for `windows`.
fn feature_tensor(rows: &[Vec<f32>], prep: &Prepared, windows: &[Window], d: usize) -> Result<Tensor<f32>> {
    let l = windows.first().map(|w| w.len).unwrap_or(0);
    let mut data = Vec::with_capacity(windows.len() * l * d);
    for w in windows {
        for i in prep.window_indices(w) {
            data.extend_from_slice(&rows[i]);
        }
    }
    Tensor::new(&[windows.len(), l, d], data)
}

/// Truth and `logits_cat` argmax for every epoch of every window, from
/// precomputed features.
fn predict_from_features(net: &SleepNet, store: &ParamStore<f32>, sg: &[Vec<f32>], sp: &[Vec<f32>], prep: &Prepared, windows: &[Window]) -> Result<(Vec<usize>, Vec<usize>)> {
    let d = net.cfg.d_model;
    let (mut truth, mut pred) = (Vec::new(), Vec::new());
    let per_chunk = (EVAL_CHUNK / net.cfg.seq_len).max(1);
    for part in windows.chunks(per_chunk) {
        let mut g = Graph::new();
        let o_sg = g.constant(feature_tensor(sg, prep, part, d)?);
        let o_sp = g.constant(feature_tensor(sp, prep, part, d)?);
        let out = net.seq.forward(&mut g, store, o_sg, o_sp, None, &mut AttnTrace::default())?;
        pred.extend(argmax_rows(g.value(out.logits_cat)));
        for w in part {
            truth.extend(prep.labels_of(&prep.window_indices(w)));
        }
    }
    Ok((truth, pred))
}

fn unique_indices(prep: &Prepared, windows: &[Window]) -> Vec<usize> {
    windows.iter().flat_map(|w| prep.window_indices(w)).collect::<BTreeSet<_>>().into_iter().collect()
}

/// Scores every epoch of `windows` by the argmax of the concatenated-feature
/// head, with dropout and masking off.
pub fn evaluate_windows(net: &SleepNet, store: &ParamStore<f32>, prep: &Prepared, windows: &[Window]) -> Result<Metrics> {
    let (sg, sp) = precompute_features(net, store, prep, &unique_indices(prep, windows), EVAL_CHUNK)?;
    let (truth, pred) = predict_from_features(net, store, &sg, &sp, prep, windows)?;
    Ok(Metrics::from_predictions(&truth, &pred))
}

/// Metrics over the non-overlapping windows of `ds`.
pub fn evaluate(ds: &Dataset, net: &SleepNet, store: &ParamStore<f32>) -> Result<Metrics> {
    let l = net.cfg.seq_len;
    let windows = sequence_windows(ds, l, l)?;
    evaluate_windows(net, store, &Prepared::new(ds), &windows)
}

/// Predictions of the two single-modality stage-0 models.
fn single_predictions(net: &SleepNet, store: &ParamStore<f32>, heads: (&Linear, &Linear), prep: &Prepared, idx: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let (mut p_sg, mut p_sp) = (Vec::new(), Vec::new());
    for part in idx.chunks(EVAL_CHUNK) {
        let (raw, spec) = prep.inputs(part, None)?;
        let mut g = Graph::new();
        let (r, s) = (g.constant(raw), g.constant(spec));
        let f = net.encode_epochs(&mut g, store, r, s, &mut AttnTrace::default())?;
        let l_sg = heads.0.forward(&mut g, store, f.sg)?;
        let l_sp = heads.1.forward(&mut g, store, f.sp)?;
        p_sg.extend(argmax_rows(g.value(l_sg)));
        p_sp.extend(argmax_rows(g.value(l_sp)));
    }
    Ok((p_sg, p_sp))
}

fn accuracy(truth: &[usize], pred: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    truth.iter().zip(pred).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

/// Trains each backbone with its epoch pool and a temporary linear head on
/// single epochs. Epochs inside validation windows are held out. The
/// returned store holds the full network with the temporary heads removed.
pub fn stage0_train(ds: &Dataset, cfg: &TrainConfig, log_path: Option<&Path>) -> Result<Stage0Outcome> {
    cfg.expect_stage(Stage::Stage0)?;
    cfg.validate()?;
    if ds.num_epochs() == 0 {
        return Err(input_err!("stage-0 training needs a non-empty dataset"));
    }
    let prep = Prepared::new(ds);
    let l = cfg.model.seq_len;
    let val_windows = if cfg.val_fraction > 0.0 && ds.recordings.iter().any(|r| r.epochs.len() >= l) {
        split_windows(ds, l, cfg.stride(), cfg.val_fraction, cfg.seed)?.val
    } else {
        Vec::new()
    };
    let val_idx = unique_indices(&prep, &val_windows);
    let held: BTreeSet<usize> = val_idx.iter().copied().collect();
    let mut train_idx: Vec<usize> = (0..prep.len()).filter(|i| !held.contains(i)).collect();
    if train_idx.is_empty() {
        return Err(input_err!("no epochs left for stage-0 training after the validation split"));
    }

    let (net, mut store) = SleepNet::new::<f32>(&cfg.model, sub_seed(cfg.seed, "init"))?;
    let mut head_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "stage0_heads"));
    let d = cfg.model.d_model;
    let head_sg = Linear::new(&mut store, &mut head_rng, "stage0.head_sg", d, N_CLASSES)?;
    let head_sp = Linear::new(&mut store, &mut head_rng, "stage0.head_sp", d, N_CLASSES)?;
    for prefix in ["proj_", "seq.", "head."] {
        store.set_trainable(prefix, false);
    }
    let mut adam = AdamState::new(cfg.adam(), &store);
    let mut log = open_log(cfg.seed, Stage::Stage0, log_path)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "batches"));
    let dropout_seed = sub_seed(cfg.seed, "dropout");
    let n = cfg.epoch_batch_size.min(train_idx.len());
    let mut cursor = usize::MAX;
    let mut final_loss = f64::NAN;
    for step in 0..cfg.steps {
        if cursor.saturating_add(n) > train_idx.len() {
            train_idx.shuffle(&mut order_rng);
            cursor = 0;
        }
        let idx = &train_idx[cursor..cursor + n];
        cursor += n;
        let (raw, spec) = prep.inputs(idx, None)?;
        let labels = prep.labels_of(idx);
        store.zero_grads();
        let mut g = Graph::training(dropout_seed.wrapping_add(step as u64));
        let (r, s) = (g.constant(raw), g.constant(spec));
        let f = net.encode_epochs(&mut g, &store, r, s, &mut AttnTrace::default())?;
        let l_sg = head_sg.forward(&mut g, &store, f.sg)?;
        let l_sp = head_sp.forward(&mut g, &store, f.sp)?;
        let ce_sg = g.cross_entropy(l_sg, &labels)?;
        let ce_sp = g.cross_entropy(l_sp, &labels)?;
        let total = g.add(ce_sg, ce_sp)?;
        final_loss = check_finite(g.value(total).item() as f64, step)?;
        apply_gradients(&g, total, &mut store, &mut adam)?;
        log.push(LogRow { step, loss_epoch: final_loss, loss_seq: 0.0, loss_total: final_loss, val_acc: None })?;
    }

    train_idx.sort_unstable();
    let truth = prep.labels_of(&train_idx);
    let (p_sg, p_sp) = single_predictions(&net, &store, (&head_sg, &head_sp), &prep, &train_idx)?;
    let (val_sg, val_sp) = if val_idx.is_empty() {
        (None, None)
    } else {
        let vt = prep.labels_of(&val_idx);
        let (v_sg, v_sp) = single_predictions(&net, &store, (&head_sg, &head_sp), &prep, &val_idx)?;
        (Some(Metrics::from_predictions(&vt, &v_sg)), Some(Metrics::from_predictions(&vt, &v_sp)))
    };
    store.remove_prefix("stage0.");
    for p in store.iter_mut() {
        p.trainable = true;
    }
    Ok(Stage0Outcome {
        net,
        store,
        log,
        final_loss,
        train_acc_sg: accuracy(&truth, &p_sg),
        train_acc_sp: accuracy(&truth, &p_sp),
        val_sg,
        val_sp,
    })
}

/// Validation bookkeeping shared by the joint stages.
struct EarlyStop {
    history: Vec<f64>,
    best: Option<(f64, ParamStore<f32>)>,
    patience: usize,
}

impl EarlyStop {
    /// Records `acc`; returns true when training should stop.
    fn observe(&mut self, acc: f64, store: &ParamStore<f32>) -> bool {
        self.history.push(acc);
        if self.best.as_ref().is_none_or(|(b, _)| acc >= *b) {
            self.best = Some((acc, store.clone()));
        }
        should_stop(&self.history, self.patience)
    }

    fn finish(self, store: &mut ParamStore<f32>) -> Option<f64> {
        self.best.map(|(acc, snap)| {
            *store = snap;
            acc
        })
    }
}

/// Joint training of backbones, projections and the sequence model with the
/// InfoNCE epoch loss and the weighted sequence loss. `init` holds stage-0
/// weights; without it the run fails unless `from_scratch` is set. The
/// network shape comes from `init` when given.
pub fn pretrain_run(ds: &Dataset, cfg: &TrainConfig, init: Option<(SleepNet, ParamStore<f32>)>, log_path: Option<&Path>) -> Result<TrainOutcome> {
    cfg.expect_stage(Stage::Pretrain)?;
    cfg.validate()?;
    let (net, mut store) = match init {
        Some(x) => x,
        None if cfg.from_scratch => SleepNet::new::<f32>(&cfg.model, sub_seed(cfg.seed, "init"))?,
        None => return Err(state_err!("pre-training needs stage-0 backbone weights; enable from_scratch to start from random weights")),
    };
    for p in store.iter_mut() {
        p.trainable = true;
    }
    let split = split_windows(ds, net.cfg.seq_len, cfg.stride(), cfg.val_fraction, cfg.seed)?;
    let min_b = if cfg.contrastive { 2 } else { 1 };
    if split.train.len() < min_b || cfg.batch_size < min_b {
        return Err(input_err!(
            "pre-training needs batches of at least {min_b} sequences; have {} training windows and batch size {}",
            split.train.len(),
            cfg.batch_size
        ));
    }
    let prep = Prepared::new(ds);
    let mut adam = AdamState::new(cfg.adam(), &store);
    let mut log = open_log(cfg.seed, Stage::Pretrain, log_path)?;
    let mut cycle = WindowCycle::new(split.train.clone(), cfg.batch_size, sub_seed(cfg.seed, "batches"));
    let mut aug_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "augment"));
    let mut mask_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "mask"));
    let dropout_seed = sub_seed(cfg.seed, "dropout");
    let mut stop = EarlyStop { history: Vec::new(), best: None, patience: cfg.patience };
    let (mut steps_run, mut stopped_early) = (0, false);
    for step in 0..cfg.steps {
        let windows = cycle.next_batch();
        let aug = if cfg.augment { Some(&mut aug_rng) } else { None };
        let batch = make_batch(&prep, &windows, cfg, aug, &mut mask_rng)?;
        let parts = pretrain_step(&net, &mut store, &mut adam, &batch, cfg, Some(dropout_seed.wrapping_add(step as u64)))?;
        check_finite(parts.total, step)?;
        steps_run = step + 1;
        let val_acc = if steps_run % cfg.validate_every == 0 && !split.val.is_empty() {
            Some(evaluate_windows(&net, &store, &prep, &split.val)?.accuracy)
        } else {
            None
        };
        log.push(LogRow { step, loss_epoch: parts.epoch, loss_seq: parts.seq, loss_total: parts.total, val_acc })?;
        if let Some(acc) = val_acc {
            if stop.observe(acc, &store) {
                stopped_early = true;
                break;
            }
        }
    }
    let best_val = stop.finish(&mut store);
    Ok(TrainOutcome { net, store, log, split, best_val, steps_run, stopped_early })
}

/// Trains the sequence model and heads on frozen backbone features with the
/// fine-tuning head weights and no masking. Projections and mask tokens are
/// frozen as well since no fine-tuning loss reaches them.
pub fn finetune_run(ds: &Dataset, cfg: &TrainConfig, init: Option<(SleepNet, ParamStore<f32>)>, log_path: Option<&Path>) -> Result<TrainOutcome> {
    cfg.expect_stage(Stage::Finetune)?;
    cfg.validate()?;
    let (net, mut store) = init.ok_or_else(|| state_err!("fine-tuning needs a pre-trained checkpoint"))?;
    for p in store.iter_mut() {
        p.trainable = true;
    }
    for prefix in BACKBONE_PREFIXES.iter().copied().chain(["proj_", "seq.mask_token"]) {
        store.set_trainable(prefix, false);
    }
    let frozen_hash = store.hash_prefixes(&BACKBONE_PREFIXES);
    let split = split_windows(ds, net.cfg.seq_len, cfg.stride(), cfg.val_fraction, cfg.seed)?;
    if split.train.is_empty() {
        return Err(input_err!("no training windows for fine-tuning"));
    }
    let prep = Prepared::new(ds);
    let all: Vec<Window> = split.train.iter().chain(&split.val).copied().collect();
    let (sg, sp) = precompute_features(&net, &store, &prep, &unique_indices(&prep, &all), EVAL_CHUNK)?;
    let d = net.cfg.d_model;
    let weights = cfg.weights();
    let mut adam = AdamState::new(cfg.adam(), &store);
    let mut log = open_log(cfg.seed, Stage::Finetune, log_path)?;
    let mut cycle = WindowCycle::new(split.train.clone(), cfg.batch_size, sub_seed(cfg.seed, "batches"));
    let dropout_seed = sub_seed(cfg.seed, "dropout");
    let mut stop = EarlyStop { history: Vec::new(), best: None, patience: cfg.patience };
    let (mut steps_run, mut stopped_early) = (0, false);
    for step in 0..cfg.steps {
        let windows = cycle.next_batch();
        let labels: Vec<usize> = windows.iter().flat_map(|w| prep.labels_of(&prep.window_indices(w))).collect();
        store.zero_grads();
        let mut g = Graph::training(dropout_seed.wrapping_add(step as u64));
        let o_sg = g.constant(feature_tensor(&sg, &prep, &windows, d)?);
        let o_sp = g.constant(feature_tensor(&sp, &prep, &windows, d)?);
        let out = net.seq.forward(&mut g, &store, o_sg, o_sp, None, &mut AttnTrace::default())?;
        let loss = sequence_loss(&mut g, [out.logits_sg, out.logits_sp, out.logits_cat], &labels, weights)?;
        let value = check_finite(g.value(loss).item() as f64, step)?;
        apply_gradients(&g, loss, &mut store, &mut adam)?;
        steps_run = step + 1;
        let val_acc = if steps_run % cfg.validate_every == 0 && !split.val.is_empty() {
            let (t, p) = predict_from_features(&net, &store, &sg, &sp, &prep, &split.val)?;
            Some(Metrics::from_predictions(&t, &p).accuracy)
        } else {
            None
        };
        log.push(LogRow { step, loss_epoch: 0.0, loss_seq: value, loss_total: value, val_acc })?;
        if let Some(acc) = val_acc {
            if stop.observe(acc, &store) {
                stopped_early = true;
                break;
            }
        }
    }
    let best_val = stop.finish(&mut store);
    if store.hash_prefixes(&BACKBONE_PREFIXES) != frozen_hash {
        return Err(state_err!("frozen backbone parameters changed during fine-tuning"));
    }
    Ok(TrainOutcome { net, store, log, split, best_val, steps_run, stopped_early })
}
