use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::sub_seed;
use crate::backbones::AttnTrace;
use crate::data::{sequence_windows, Dataset, Window};
use crate::diffcore::{Graph, ParamStore, Tensor};
use crate::dsp::{augment_raw, augment_spec, zscore_normalize, AugmentKind, RawEpoch, Spectrogram, Stft, EPOCH_SAMPLES, N_BINS, N_FRAMES};
use crate::error::Result;
use crate::model::SleepNet;

/// Network-ready views of every epoch of a dataset, indexed by a flat
/// position (recordings concatenated in order).
pub struct Prepared {
    pub raw: Vec<Vec<f32>>,
    pub spec: Vec<Spectrogram>,
    pub labels: Vec<u8>,
    offsets: Vec<usize>,
}

impl Prepared {
    /// z-scores every raw epoch and computes (or reuses) its spectrogram.
    pub fn new(ds: &Dataset) -> Prepared {
        let stft = Stft::new();
        let mut p = Prepared { raw: Vec::new(), spec: Vec::new(), labels: Vec::new(), offsets: Vec::new() };
        for rec in &ds.recordings {
            p.offsets.push(p.raw.len());
            for e in &rec.epochs {
                p.raw.push(zscore_normalize(e.raw.samples()));
                p.spec.push(e.spectrogram.clone().unwrap_or_else(|| stft.spectrogram(&e.raw)));
                p.labels.push(e.label);
            }
        }
        p
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn flat(&self, recording: usize, index: usize) -> usize {
        self.offsets[recording] + index
    }

    /// Flat indices of the epochs of `w`, in order.
    pub fn window_indices(&self, w: &Window) -> Vec<usize> {
        (w.start..w.start + w.len).map(|i| self.flat(w.recording, i)).collect()
    }

    /// `raw[N,1,3000]` and `spec[N,29,129]` for `idx`. With `aug`, each raw
    /// epoch gets one randomly chosen raw augmentation and each spectrogram
    /// gets additive noise.
    pub fn inputs(&self, idx: &[usize], aug: Option<&mut ChaCha8Rng>) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let n = idx.len();
        let mut raw = Vec::with_capacity(n * EPOCH_SAMPLES);
        let mut spec = Vec::with_capacity(n * N_FRAMES * N_BINS);
        match aug {
            None => {
                for &i in idx {
                    raw.extend_from_slice(&self.raw[i]);
                    spec.extend_from_slice(&self.spec[i].values);
                }
            }
            Some(rng) => {
                for &i in idx {
                    let kind = AugmentKind::RAW[rng.random_range(0..AugmentKind::RAW.len())];
                    let e = augment_raw(&RawEpoch::new(self.raw[i].clone())?, kind, rng)?;
                    raw.extend_from_slice(e.samples());
                    spec.extend_from_slice(&augment_spec(&self.spec[i], rng).values);
                }
            }
        }
        Ok((Tensor::new(&[n, 1, EPOCH_SAMPLES], raw)?, Tensor::new(&[n, N_FRAMES, N_BINS], spec)?))
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i] as usize).collect()
    }
}

/// Training and validation windows.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<Window>,
    pub val: Vec<Window>,
}

/// Holds out `round(val_fraction·n)` windows chosen by `seed` (at least one
/// when the fraction is positive and two or more windows exist).
pub fn split_windows(ds: &Dataset, len: usize, stride: usize, val_fraction: f64, seed: u64) -> Result<Split> {
    let mut w = sequence_windows(ds, len, stride)?;
    w.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(seed, "split")));
    let mut n_val = (val_fraction * w.len() as f64).round() as usize;
    if val_fraction > 0.0 && w.len() >= 2 {
        n_val = n_val.clamp(1, w.len() - 1);
    }
    let val = w.drain(..n_val).collect();
    Ok(Split { train: w, val })
}

/// Per-epoch `(sg, sp)` feature rows.
pub type FeatureRows = (Vec<Vec<f32>>, Vec<Vec<f32>>);

/// Pooled features of every listed epoch computed in evaluation mode, in
/// chunks of `chunk` epochs. Returns `[sg, sp]` rows of length `d_model`.
pub fn precompute_features(net: &SleepNet, store: &ParamStore<f32>, prep: &Prepared, idx: &[usize], chunk: usize) -> Result<FeatureRows> {
    let d = net.cfg.d_model;
    let mut sg = vec![Vec::new(); prep.len()];
    let mut sp = vec![Vec::new(); prep.len()];
    for part in idx.chunks(chunk.max(1)) {
        let (raw, spec) = prep.inputs(part, None)?;
        let mut g = Graph::new();
        let (r, s) = (g.constant(raw), g.constant(spec));
        let f = net.encode_epochs(&mut g, store, r, s, &mut AttnTrace::default())?;
        for (k, &i) in part.iter().enumerate() {
            sg[i] = g.value(f.sg).data()[k * d..(k + 1) * d].to_vec();
            sp[i] = g.value(f.sp).data()[k * d..(k + 1) * d].to_vec();
        }
    }
    Ok((sg, sp))
}
