//! Signal conditioning: spectrograms, per-epoch standardization,
//! augmentations and sample-rate conversion.

pub mod augment;
pub mod resample;
pub mod stft;

pub use augment::{augment_raw, augment_spec, sample_transform, AugmentKind, RawTransform};
pub use resample::resample_125_to_100;
pub use stft::{stft_spectrogram, Spectrogram, Stft, N_BINS, N_FRAMES};

use crate::error::{dim_err, Result};

pub const SAMPLE_RATE: f64 = 100.0;
pub const EPOCH_SAMPLES: usize = 3000;

/// One 30 s single-channel epoch at 100 Hz.
#[derive(Clone, Debug, PartialEq)]
pub struct RawEpoch {
    samples: Vec<f32>,
}

impl RawEpoch {
    pub fn new(samples: Vec<f32>) -> Result<Self> {
        if samples.len() != EPOCH_SAMPLES {
            return Err(dim_err!("epoch has {} samples, expected {EPOCH_SAMPLES}", samples.len()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(crate::error::input_err!("epoch contains non-finite samples"));
        }
        Ok(RawEpoch { samples })
    }

    pub fn zeros() -> Self {
        RawEpoch { samples: vec![0.0; EPOCH_SAMPLES] }
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }
}

pub(crate) fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len().max(1) as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub(crate) fn zscore_in_place(x: &mut [f64]) {
    if x.windows(2).all(|w| w[0] == w[1]) {
        x.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let (mean, std) = mean_std(x);
    let denom = std.max(1e-8);
    for v in x.iter_mut() {
        *v = (*v - mean) / denom;
    }
}

/// `(x - mean) / max(std, 1e-8)` with the population standard deviation.
pub fn zscore_normalize(samples: &[f32]) -> Vec<f32> {
    let mut v: Vec<f64> = samples.iter().map(|&s| s as f64).collect();
    zscore_in_place(&mut v);
    v.into_iter().map(|s| s as f32).collect()
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn zscore_examples() {
        assert_eq!(zscore_normalize(&[4.0, 4.0, 4.0]), vec![0.0, 0.0, 0.0]);
        assert_eq!(zscore_normalize(&[-1.0, 1.0]), vec![-1.0, 1.0]);
    }

    #[test]
    fn zscore_random_input_recomputed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f32> = (0..3000).map(|_| rng.random_range(-5.0..9.0)).collect();
        let z = zscore_normalize(&x);
        let n = z.len() as f64;
        let mean = z.iter().map(|&v| v as f64).sum::<f64>() / n;
        let std = (z.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-6);
        assert!((std - 1.0).abs() < 1e-4);
    }

    #[test]
    fn epoch_length_enforced() {
        assert!(RawEpoch::new(vec![0.0; 2999]).is_err());
        assert!(RawEpoch::new(vec![f32::NAN; 3000]).is_err());
    }
}
