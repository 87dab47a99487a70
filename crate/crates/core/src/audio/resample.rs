//! Windowed-sinc sample-rate conversion.

use std::f64::consts::PI;

use super::Waveform;

/// Half-width of the sinc interpolation kernel, in source samples at the
/// effective cutoff rate.
const KERNEL_HALF_WIDTH: f64 = 32.0;

/// Resample to `target_hz` with a Hann-windowed sinc interpolator; the
/// cutoff tracks the lower of the two Nyquist rates to avoid aliasing.
pub fn resample(w: &Waveform, target_hz: u32) -> Waveform {
    if w.sample_rate_hz == target_hz || w.is_empty() {
        return Waveform::new(w.samples.clone(), target_hz);
    }
    let ratio = target_hz as f64 / w.sample_rate_hz as f64;
    let cutoff = ratio.min(1.0); // fraction of the source Nyquist band kept
    let support = KERNEL_HALF_WIDTH / cutoff;
    let n_in = w.samples.len();
    let n_out = (n_in as f64 * ratio).round() as usize;

    let samples: Vec<f64> = (0..n_out)
        .map(|j| {
            let center = j as f64 / ratio;
            let lo = (center - support).floor().max(0.0) as usize;
            let hi = ((center + support).ceil() as usize).min(n_in.saturating_sub(1));
            let mut acc = 0.0;
            for (i, &x) in w.samples.iter().enumerate().take(hi + 1).skip(lo) {
                let d = center - i as f64;
                acc += x * cutoff * sinc(cutoff * d) * hann(d / support);
            }
            acc
        })
        .collect();
    Waveform::new(samples, target_hz)
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

fn hann(frac: f64) -> f64 {
    if frac.abs() >= 1.0 {
        0.0
    } else {
        0.5 * (1.0 + (PI * frac).cos())
    }
}
