use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, EpochRecord, Recording};
use crate::config::N_CLASSES;
use crate::dsp::{RawEpoch, EPOCH_SAMPLES, SAMPLE_RATE};

pub const P_STAY: f64 = 0.85;
pub const NOISE_STD: f64 = 0.1;

const NEIGHBOURS: [&[usize]; N_CLASSES] = [&[1], &[0, 2], &[1, 3, 4], &[2], &[2]];

/// Transition probabilities out of `stage`: `P_STAY` on the diagonal, the
/// rest split evenly over adjacent stages (W–N1–N2–N3, N2–REM).
pub fn transition_row(stage: usize) -> [f64; N_CLASSES] {
    let mut row = [0.0; N_CLASSES];
    row[stage] = P_STAY;
    let n = NEIGHBOURS[stage];
    for &j in n {
        row[j] = (1.0 - P_STAY) / n.len() as f64;
    }
    row
}

fn next_stage<R: Rng>(stage: usize, rng: &mut R) -> usize {
    let row = transition_row(stage);
    let mut u: f64 = rng.random();
    for (j, p) in row.iter().enumerate() {
        if u < *p {
            return j;
        }
        u -= p;
    }
    stage
}

fn add_tone(x: &mut [f64], freq: f64, amp: f64, phase: f64) {
    for (n, v) in x.iter_mut().enumerate() {
        *v += amp * (2.0 * PI * freq * n as f64 / SAMPLE_RATE + phase).sin();
    }
}

fn add_band_mix<R: Rng>(x: &mut [f64], rng: &mut R, lo: f64, hi: f64, k: usize, amp: f64) {
    for _ in 0..k {
        let f = rng.random_range(lo..hi);
        let ph = rng.random_range(0.0..2.0 * PI);
        add_tone(x, f, amp / (k as f64).sqrt(), ph);
    }
}

fn stage_signal<R: Rng>(stage: usize, rng: &mut R) -> Vec<f64> {
    let mut x = vec![0.0; EPOCH_SAMPLES];
    match stage {
        0 => add_band_mix(&mut x, rng, 20.0, 30.0, 4, 1.0),
        // single theta tone
        1 => add_band_mix(&mut x, rng, 4.0, 7.0, 1, 0.7),
        2 => {
            add_band_mix(&mut x, rng, 4.0, 7.0, 1, 0.5);
            // spindle trains: Hann-windowed 11–15 Hz bursts
            let bursts = rng.random_range(4..=6);
            let len = (1.5 * SAMPLE_RATE) as usize;
            for b in 0..bursts {
                let slot = EPOCH_SAMPLES / bursts;
                let start = b * slot + rng.random_range(0..slot - len);
                let f = rng.random_range(11.0..15.0);
                let ph = rng.random_range(0.0..2.0 * PI);
                for i in 0..len {
                    let env = 0.5 - 0.5 * (2.0 * PI * i as f64 / (len - 1) as f64).cos();
                    x[start + i] += 1.2 * env * (2.0 * PI * f * i as f64 / SAMPLE_RATE + ph).sin();
                }
            }
        }
        3 => add_band_mix(&mut x, rng, 0.5, 2.0, 3, 2.0),
        _ => {
            // two theta components at opposite ends of 4–8 Hz
            let amp = 0.9 / 2f64.sqrt();
            add_tone(&mut x, rng.random_range(4.0..5.0), amp, rng.random_range(0.0..2.0 * PI));
            add_tone(&mut x, rng.random_range(7.0..8.0), amp, rng.random_range(0.0..2.0 * PI));
        }
    }
    x
}

/// Deterministic synthetic dataset: stages follow a sticky Markov chain and
/// each stage has a distinct spectral signature plus N(0, 0.1²) noise.
pub fn generate_synthetic(n_recordings: usize, epochs_per_recording: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let recordings = (0..n_recordings)
        .map(|r| {
            let mut stage = rng.random_range(0..N_CLASSES);
            let epochs = (0..epochs_per_recording)
                .map(|i| {
                    if i > 0 {
                        stage = next_stage(stage, &mut rng);
                    }
                    let sig = stage_signal(stage, &mut rng);
                    let samples = sig.iter().map(|&v| (v + noise.sample(&mut rng)) as f32).collect();
                    EpochRecord::new(RawEpoch::new(samples).expect("finite samples"), stage as u8).expect("label in range")
                })
                .collect();
            Recording { id: format!("synth-{seed}-{r:03}"), epochs }
        })
        .collect();
    Dataset { recordings, source: format!("synthetic(seed={seed})") }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fraction of one-sided DFT energy inside `[lo, hi]` Hz, by direct sum.
    fn band_fraction(x: &[f32], lo: f64, hi: f64) -> f64 {
        let n = x.len();
        let mut inside = 0.0;
        let mut total = 0.0;
        for k in 1..=n / 2 {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, &v) in x.iter().enumerate() {
                let a = -2.0 * PI * (k * t) as f64 / n as f64;
                re += v as f64 * a.cos();
                im += v as f64 * a.sin();
            }
            let p = re * re + im * im;
            let f = k as f64 * SAMPLE_RATE / n as f64;
            total += p;
            if f >= lo && f <= hi {
                inside += p;
            }
        }
        inside / total
    }

    #[test]
    fn deterministic_and_well_formed() {
        let a = generate_synthetic(2, 30, 3);
        let b = generate_synthetic(2, 30, 3);
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic(2, 30, 4));
        for r in &a.recordings {
            assert_eq!(r.epochs.len(), 30);
            for e in &r.epochs {
                assert_eq!(e.raw.samples().len(), 3000);
                assert!(e.label < 5);
            }
        }
    }

    #[test]
    fn transition_rows_are_distributions() {
        for s in 0..5 {
            let row = transition_row(s);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(row[s], P_STAY);
        }
    }

    #[test]
    fn spectral_signatures() {
        let ds = generate_synthetic(4, 60, 11);
        let (mut n3, mut wake) = (0, 0);
        for e in ds.recordings.iter().flat_map(|r| &r.epochs) {
            match e.label {
                3 if n3 < 3 => {
                    n3 += 1;
                    assert!(band_fraction(e.raw.samples(), 0.5, 2.0) > 0.6);
                }
                0 if wake < 3 => {
                    wake += 1;
                    assert!(band_fraction(e.raw.samples(), 20.0, 30.0) > 0.6);
                }
                _ => {}
            }
        }
        assert!(n3 > 0 && wake > 0);
    }

    #[test]
    fn no_starved_class() {
        let ds = generate_synthetic(20, 500, 5);
        let counts = ds.label_counts();
        for c in counts {
            assert!(c as f64 / 10_000.0 >= 0.05, "{counts:?}");
        }
    }
}
