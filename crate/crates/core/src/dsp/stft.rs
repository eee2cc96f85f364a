use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{zscore_in_place, RawEpoch, EPOCH_SAMPLES};

pub const FRAME_LEN: usize = 200;
pub const HOP: usize = 100;
pub const FFT_LEN: usize = 256;
pub const N_FRAMES: usize = (EPOCH_SAMPLES - FRAME_LEN) / HOP + 1;
pub const N_BINS: usize = FFT_LEN / 2 + 1;
pub const EPS_FLOOR: f64 = 1e-6;

/// Log-magnitude spectrogram, `[N_FRAMES, N_BINS]` row-major (frame-major).
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub values: Vec<f32>,
}

impl Spectrogram {
    pub fn zeros() -> Self {
        Spectrogram { values: vec![0.0; N_FRAMES * N_BINS] }
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.values[t * N_BINS..(t + 1) * N_BINS]
    }
}

/// Symmetric Hamming window.
pub fn hamming(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos()).collect()
}

/// Cached FFT plan and window for repeated spectrogram computation.
pub struct Stft {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
}

impl Default for Stft {
    fn default() -> Self {
        Self::new()
    }
}

impl Stft {
    pub fn new() -> Self {
        let fft = FftPlanner::new().plan_fft_forward(FFT_LEN);
        Stft { fft, window: hamming(FRAME_LEN) }
    }

    /// Windowed, zero-padded frame `t` of `samples`.
    pub fn windowed_frame(&self, samples: &[f32], t: usize) -> Vec<f64> {
        let start = t * HOP;
        let mut frame = vec![0.0; FFT_LEN];
        for (i, (f, w)) in frame.iter_mut().zip(&self.window).enumerate() {
            *f = samples[start + i] as f64 * w;
        }
        frame
    }

    /// One-sided magnitude spectrum of each frame, `[N_FRAMES][N_BINS]`.
    pub fn magnitudes(&self, epoch: &RawEpoch) -> Vec<Vec<f64>> {
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_LEN];
        (0..N_FRAMES)
            .map(|t| {
                for (b, v) in buf.iter_mut().zip(self.windowed_frame(epoch.samples(), t)) {
                    *b = Complex::new(v, 0.0);
                }
                self.fft.process(&mut buf);
                buf[..N_BINS].iter().map(|c| c.norm()).collect()
            })
            .collect()
    }

    /// `log(|X| + EPS_FLOOR)` per cell, before standardization.
    pub fn log_magnitude(&self, epoch: &RawEpoch) -> Vec<f64> {
        self.magnitudes(epoch).into_iter().flatten().map(|m| (m + EPS_FLOOR).ln()).collect()
    }

    /// Log-magnitude spectrogram standardized to zero mean and unit
    /// variance over the whole epoch (a constant array maps to zeros).
    pub fn spectrogram(&self, epoch: &RawEpoch) -> Spectrogram {
        let mut v = self.log_magnitude(epoch);
        zscore_in_place(&mut v);
        Spectrogram { values: v.into_iter().map(|x| x as f32).collect() }
    }
}

/// Convenience wrapper building a fresh plan.
pub fn stft_spectrogram(epoch: &RawEpoch) -> Spectrogram {
    Stft::new().spectrogram(epoch)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Direct O(N²) one-sided DFT magnitude of a real sequence.
    fn naive_dft_mag(x: &[f64]) -> Vec<f64> {
        let n = x.len();
        (0..n / 2 + 1)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (j, &v) in x.iter().enumerate() {
                    let a = -2.0 * PI * (k * j) as f64 / n as f64;
                    re += v * a.cos();
                    im += v * a.sin();
                }
                (re * re + im * im).sqrt()
            })
            .collect()
    }

    fn sine(freq: f64) -> RawEpoch {
        RawEpoch::new((0..EPOCH_SAMPLES).map(|i| (2.0 * PI * freq * i as f64 / 100.0).sin() as f32).collect()).unwrap()
    }

    #[test]
    fn geometry_constants() {
        assert_eq!(N_FRAMES, 29);
        assert_eq!(N_BINS, 129);
    }

    #[test]
    fn zero_epoch_maps_to_zero() {
        let s = stft_spectrogram(&RawEpoch::zeros());
        assert_eq!(s.values.len(), 29 * 129);
        assert!(s.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ten_hz_peak_bin() {
        let stft = Stft::new();
        let mags = stft.magnitudes(&sine(10.0));
        for frame in &mags {
            let arg = frame.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert_eq!(arg, 26);
        }
        let oracle = naive_dft_mag(&stft.windowed_frame(sine(10.0).samples(), 0));
        let arg = oracle.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(arg, 26);
    }

    #[test]
    fn matches_naive_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let stft = Stft::new();
        let e = RawEpoch::new((0..EPOCH_SAMPLES).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let mags = stft.magnitudes(&e);
        for t in [0, 13, 28] {
            let oracle = naive_dft_mag(&stft.windowed_frame(e.samples(), t));
            for (a, b) in mags[t].iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn parseval_one_sided() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let stft = Stft::new();
        let e = RawEpoch::new((0..EPOCH_SAMPLES).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mags = stft.magnitudes(&e);
        for t in 0..N_FRAMES {
            let frame = stft.windowed_frame(e.samples(), t);
            let time_energy: f64 = frame.iter().map(|v| v * v).sum();
            let spec_energy: f64 = mags[t]
                .iter()
                .enumerate()
                .map(|(k, m)| if k == 0 || k == N_BINS - 1 { m * m } else { 2.0 * m * m })
                .sum::<f64>()
                / FFT_LEN as f64;
            assert!((spec_energy - time_energy).abs() <= 1e-4 * time_energy);
        }
    }

    #[test]
    fn standardized_output() {
        let s = stft_spectrogram(&sine(7.0));
        let n = s.values.len() as f64;
        let mean = s.values.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = s.values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-5);
        assert!((var.sqrt() - 1.0).abs() < 1e-4);
    }
}
