use rand::Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{mean_std, RawEpoch, Spectrogram, EPOCH_SAMPLES, SAMPLE_RATE};
use crate::error::{input_err, Result};

pub const SCALE_RANGE: (f64, f64) = (0.8, 1.2);
pub const SHIFT_FRACTION: f64 = 0.1;
pub const NOISE_FRACTION: f64 = 0.05;
pub const STOP_BAND_WIDTH_HZ: f64 = 2.0;
pub const STOP_BAND_RANGE_HZ: (f64, f64) = (0.5, 45.0);
pub const MAX_ROLL: i64 = 300;
pub const MAX_ZERO_MASK: usize = 300;
pub const SPEC_NOISE_STD: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AugmentKind {
    AmplitudeScale,
    AmplitudeShift,
    GaussianNoise,
    BandStop,
    TimeShift,
    ZeroMask,
    /// Spectrogram-only.
    RandomNoise,
}

impl AugmentKind {
    pub const RAW: [AugmentKind; 6] = [
        AugmentKind::AmplitudeScale,
        AugmentKind::AmplitudeShift,
        AugmentKind::GaussianNoise,
        AugmentKind::BandStop,
        AugmentKind::TimeShift,
        AugmentKind::ZeroMask,
    ];

    pub fn is_raw(self) -> bool {
        self != AugmentKind::RandomNoise
    }
}

/// A raw-signal augmentation with its parameters drawn.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RawTransform {
    Scale(f64),
    /// Offset as a multiple of the epoch's standard deviation.
    Shift(f64),
    /// Noise standard deviation as a multiple of the epoch's standard deviation.
    Noise(f64),
    BandStop { low_hz: f64, high_hz: f64 },
    Roll(i64),
    ZeroMask { start: usize, len: usize },
}

pub fn sample_transform<R: Rng>(kind: AugmentKind, rng: &mut R) -> Result<RawTransform> {
    Ok(match kind {
        AugmentKind::AmplitudeScale => RawTransform::Scale(rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1)),
        AugmentKind::AmplitudeShift => RawTransform::Shift(rng.random_range(-SHIFT_FRACTION..=SHIFT_FRACTION)),
        AugmentKind::GaussianNoise => RawTransform::Noise(NOISE_FRACTION),
        AugmentKind::BandStop => {
            let low = rng.random_range(STOP_BAND_RANGE_HZ.0..=STOP_BAND_RANGE_HZ.1 - STOP_BAND_WIDTH_HZ);
            RawTransform::BandStop { low_hz: low, high_hz: low + STOP_BAND_WIDTH_HZ }
        }
        AugmentKind::TimeShift => RawTransform::Roll(rng.random_range(-MAX_ROLL..=MAX_ROLL)),
        AugmentKind::ZeroMask => {
            let len = rng.random_range(0..=MAX_ZERO_MASK);
            let start = rng.random_range(0..=EPOCH_SAMPLES - len);
            RawTransform::ZeroMask { start, len }
        }
        AugmentKind::RandomNoise => return Err(input_err!("RandomNoise applies to spectrograms, not raw epochs")),
    })
}

impl RawTransform {
    pub fn apply<R: Rng>(&self, epoch: &RawEpoch, rng: &mut R) -> RawEpoch {
        let x = epoch.samples();
        let std = || mean_std(&x.iter().map(|&v| v as f64).collect::<Vec<_>>()).1;
        let out: Vec<f32> = match *self {
            RawTransform::Scale(u) => x.iter().map(|&v| (v as f64 * u) as f32).collect(),
            RawTransform::Shift(u) => {
                let off = u * std();
                x.iter().map(|&v| (v as f64 + off) as f32).collect()
            }
            RawTransform::Noise(frac) => {
                let sigma = frac * std();
                if sigma > 0.0 {
                    let normal = Normal::new(0.0, sigma).expect("positive sigma");
                    x.iter().map(|&v| (v as f64 + normal.sample(rng)) as f32).collect()
                } else {
                    x.to_vec()
                }
            }
            RawTransform::BandStop { low_hz, high_hz } => band_stop(x, low_hz, high_hz),
            RawTransform::Roll(shift) => {
                let n = x.len() as i64;
                (0..n).map(|i| x[(i - shift).rem_euclid(n) as usize]).collect()
            }
            RawTransform::ZeroMask { start, len } => {
                let mut v = x.to_vec();
                let end = (start + len).min(v.len());
                v[start.min(end)..end].iter_mut().for_each(|s| *s = 0.0);
                v
            }
        };
        RawEpoch::new(out).expect("augmentations preserve length and finiteness")
    }
}

/// Zeroes every DFT bin whose frequency lies in `[low_hz, high_hz]`.
pub fn band_stop(x: &[f32], low_hz: f64, high_hz: f64) -> Vec<f32> {
    let n = x.len();
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let kk = k.min(n - k);
        let f = kk as f64 * SAMPLE_RATE / n as f64;
        if f >= low_hz && f <= high_hz {
            *c = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| (c.re / n as f64) as f32).collect()
}

/// Applies one draw of `kind` to `epoch`.
pub fn augment_raw<R: Rng>(epoch: &RawEpoch, kind: AugmentKind, rng: &mut R) -> Result<RawEpoch> {
    if !kind.is_raw() {
        return Err(input_err!("{kind:?} is not a raw-signal augmentation"));
    }
    let t = sample_transform(kind, rng)?;
    Ok(t.apply(epoch, rng))
}

/// Adds i.i.d. `N(0, sigma²)` noise per cell.
pub fn augment_spec_with<R: Rng>(spec: &Spectrogram, sigma: f64, rng: &mut R) -> Spectrogram {
    if sigma == 0.0 {
        return spec.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    Spectrogram { values: spec.values.iter().map(|&v| (v as f64 + normal.sample(rng)) as f32).collect() }
}

pub fn augment_spec<R: Rng>(spec: &Spectrogram, rng: &mut R) -> Spectrogram {
    augment_spec_with(spec, SPEC_NOISE_STD, rng)
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn sine(freq: f64) -> RawEpoch {
        RawEpoch::new((0..EPOCH_SAMPLES).map(|i| (2.0 * PI * freq * i as f64 / 100.0).sin() as f32).collect()).unwrap()
    }

    fn random_epoch(seed: u64) -> RawEpoch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RawEpoch::new((0..EPOCH_SAMPLES).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    /// Direct DFT energy of `x` over bins whose frequency lies in `[lo, hi]`.
    fn band_energy(x: &[f32], lo: f64, hi: f64) -> f64 {
        let n = x.len();
        let mut e = 0.0;
        for k in 0..=n / 2 {
            let f = k as f64 * SAMPLE_RATE / n as f64;
            if f < lo || f > hi {
                continue;
            }
            let (mut re, mut im) = (0.0, 0.0);
            for (j, &v) in x.iter().enumerate() {
                let a = -2.0 * PI * ((k * j) % n) as f64 / n as f64;
                re += v as f64 * a.cos();
                im += v as f64 * a.sin();
            }
            e += re * re + im * im;
        }
        e
    }

    #[test]
    fn null_parameters_are_identity() {
        let e = random_epoch(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(RawTransform::ZeroMask { start: 100, len: 0 }.apply(&e, &mut rng), e);
        assert_eq!(RawTransform::Scale(1.0).apply(&e, &mut rng), e);
        assert_eq!(RawTransform::Shift(0.0).apply(&e, &mut rng), e);
        assert_eq!(RawTransform::Noise(0.0).apply(&e, &mut rng), e);
        assert_eq!(RawTransform::Roll(0).apply(&e, &mut rng), e);
        let s = crate::dsp::stft_spectrogram(&e);
        assert_eq!(augment_spec_with(&s, 0.0, &mut rng), s);
    }

    #[test]
    fn band_stop_removes_in_band_sine() {
        let e = sine(11.0);
        let before = band_energy(e.samples(), 10.0, 12.0);
        let out = RawTransform::BandStop { low_hz: 10.0, high_hz: 12.0 }.apply(&e, &mut ChaCha8Rng::seed_from_u64(0));
        let after = band_energy(out.samples(), 10.0, 12.0);
        assert!(after < 1e-3 * before, "{after} vs {before}");
    }

    #[test]
    fn roll_is_circular() {
        let e = random_epoch(2);
        let out = RawTransform::Roll(5).apply(&e, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(out.samples()[5], e.samples()[0]);
        assert_eq!(out.samples()[0], e.samples()[EPOCH_SAMPLES - 5]);
    }

    #[test]
    fn every_raw_kind_preserves_length_and_is_seeded() {
        let e = random_epoch(3);
        for kind in AugmentKind::RAW {
            let a = augment_raw(&e, kind, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
            let b = augment_raw(&e, kind, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
            assert_eq!(a.samples().len(), EPOCH_SAMPLES);
            assert!(a.samples().iter().all(|v| v.is_finite()));
            assert_eq!(a, b, "{kind:?}");
        }
    }

    #[test]
    fn random_noise_rejected_for_raw() {
        let e = random_epoch(4);
        let r = augment_raw(&e, AugmentKind::RandomNoise, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(crate::Error::Input(_))));
    }

    #[test]
    fn sampled_parameters_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..500 {
            match sample_transform(AugmentKind::BandStop, &mut rng).unwrap() {
                RawTransform::BandStop { low_hz, high_hz } => {
                    assert!(low_hz >= 0.5 && high_hz <= 45.0 + 1e-12);
                    assert!((high_hz - low_hz - 2.0).abs() < 1e-12);
                }
                other => panic!("{other:?}"),
            }
            match sample_transform(AugmentKind::ZeroMask, &mut rng).unwrap() {
                RawTransform::ZeroMask { start, len } => assert!(len <= 300 && start + len <= EPOCH_SAMPLES),
                other => panic!("{other:?}"),
            }
            match sample_transform(AugmentKind::AmplitudeScale, &mut rng).unwrap() {
                RawTransform::Scale(u) => assert!((0.8..=1.2).contains(&u)),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn spec_noise_std_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let base = Spectrogram::zeros();
        let mut diffs = Vec::new();
        while diffs.len() < 10_000 {
            let out = augment_spec(&base, &mut rng);
            assert_eq!(out.values.len(), 29 * 129);
            diffs.extend(out.values.iter().zip(&base.values).map(|(a, b)| (a - b) as f64));
        }
        diffs.truncate(10_000);
        let (_, std) = mean_std(&diffs);
        assert!((0.045..=0.055).contains(&std), "{std}");
    }
}
