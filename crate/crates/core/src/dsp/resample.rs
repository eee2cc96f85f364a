use std::f64::consts::PI;

const UP: usize = 4;
const DOWN: usize = 5;
/// Filter half-length in input-rate zero crossings.
const HALF_ZEROS: usize = 10;

fn lowpass() -> Vec<f64> {
    // cutoff at the output Nyquist (50 Hz) on the 500 Hz upsampled grid
    let cutoff = 0.5 / DOWN as f64;
    let half = HALF_ZEROS * UP * DOWN / 2;
    let len = 2 * half + 1;
    let mut h: Vec<f64> = (0..len)
        .map(|i| {
            let n = i as f64 - half as f64;
            let sinc = if n == 0.0 { 2.0 * cutoff } else { (2.0 * PI * cutoff * n).sin() / (PI * n) };
            let w = 0.54 - 0.46 * (2.0 * PI * i as f64 / (len - 1) as f64).cos();
            sinc * w
        })
        .collect();
    let dc: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v *= UP as f64 / dc);
    h
}

/// Rational 4/5 polyphase resampling with a linear-phase windowed-sinc
/// low-pass (125 Hz → 100 Hz). Output length is `ceil(len·4/5)`.
pub fn resample_125_to_100(x: &[f32]) -> Vec<f32> {
    let h = lowpass();
    let delay = (h.len() - 1) / 2;
    let n_out = (x.len() * UP).div_ceil(DOWN);
    (0..n_out)
        .map(|m| {
            // y[m] = Σ_j x[j] · h[DOWN·m + delay − UP·j]
            let pos = DOWN * m + delay;
            let j_hi = (pos / UP).min(x.len().saturating_sub(1));
            let j_lo = pos.saturating_sub(h.len() - 1).div_ceil(UP);
            (j_lo..=j_hi)
                .filter(|&j| j < x.len())
                .map(|j| x[j] as f64 * h[pos - UP * j])
                .sum::<f64>() as f32
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_and_interior_sine() {
        let f = 7.0;
        let x: Vec<f32> = (0..3750).map(|i| (2.0 * PI * f * i as f64 / 125.0).sin() as f32).collect();
        let y = resample_125_to_100(&x);
        assert_eq!(y.len(), 3000);
        for (m, &v) in y.iter().enumerate().take(2900).skip(100) {
            let expect = (2.0 * PI * f * m as f64 / 100.0).sin();
            assert!((v as f64 - expect).abs() < 1e-2, "sample {m}: {v} vs {expect}");
        }
    }

    #[test]
    fn rejects_above_output_nyquist() {
        // 60 Hz is representable at 125 Hz but aliases at 100 Hz
        let x: Vec<f32> = (0..3750).map(|i| (2.0 * PI * 60.0 * i as f64 / 125.0).sin() as f32).collect();
        let y = resample_125_to_100(&x);
        let rms = (y[100..2900].iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / 2800.0).sqrt();
        assert!(rms < 0.1, "{rms}");
    }
}
