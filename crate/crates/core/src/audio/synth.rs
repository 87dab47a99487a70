//! Deterministic synthetic corpus: harmonic "real" clips and procedurally
//! corrupted "fake" clips with quantization, low-pass, and phase artifacts.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{peak_normalize, Label, LabeledClip, Waveform, CLIP_LEN, SAMPLE_RATE_HZ};

// Clip i of synth_real(seed, ·) draws from stream i; fakes use disjoint
// stream ranges so the two corpora are independent for the same seed.
const FAKE_BASE_STREAM: u64 = 1 << 62;
const FAKE_CHAIN_STREAM: u64 = 2 << 62;

/// Artifact chain parameters for the fake corpus.
const QUANT_STEP: f64 = 2.0 / 63.0; // 6-bit grid over [-1, 1]
const LOWPASS_HZ: f64 = 3400.0;
const LOWPASS_TAPS: usize = 101;
const JUMP_FRAME: usize = 512;

/// Generate `n` deterministic "real" clips: harmonic stacks with decaying
/// partials plus band-limited noise under a smooth positive envelope.
pub fn synth_real(seed: u64, n: usize) -> Vec<LabeledClip> {
    assert!(n >= 1, "need at least one clip");
    (0..n as u64)
        .map(|i| LabeledClip {
            waveform: synth_real_one(seed, i),
            label: Label::Real,
            source: "synth_real".to_string(),
        })
        .collect()
}

/// Generate `n` deterministic "fake" clips by corrupting independent
/// harmonic clips with 6-bit quantization, a 3.4 kHz low-pass, and circular
/// phase jumps at every 512-sample frame boundary.
pub fn synth_fake(seed: u64, n: usize) -> Vec<LabeledClip> {
    assert!(n >= 1, "need at least one clip");
    (0..n as u64)
        .map(|i| {
            let base = synth_real_one(seed, FAKE_BASE_STREAM | i);
            let mut rng = stream_rng(seed, FAKE_CHAIN_STREAM | i);
            let mut s: Vec<f64> = base.samples.iter().map(|&x| quantize_6bit(x)).collect();
            s = fir_lowpass(&s, LOWPASS_HZ, SAMPLE_RATE_HZ);
            phase_jumps(&mut s, JUMP_FRAME, &mut rng);
            let waveform = peak_normalize(&Waveform::new(s, SAMPLE_RATE_HZ));
            LabeledClip {
                waveform,
                label: Label::Fake,
                source: "synth_fake".to_string(),
            }
        })
        .collect()
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn synth_real_one(seed: u64, stream: u64) -> Waveform {
    let mut rng = stream_rng(seed, stream);
    let f0 = rng.gen_range(100.0..300.0);
    let n_harm: usize = rng.gen_range(3..=6);
    let decay = rng.gen_range(0.4..0.75);
    let phases: Vec<f64> = (0..n_harm).map(|_| rng.gen_range(0.0..TAU)).collect();
    let noise_amp = rng.gen_range(0.02..0.08);
    let env_rate = rng.gen_range(0.5..2.0);
    let env_phase = rng.gen_range(0.0..TAU);
    let white: Vec<f64> = (0..CLIP_LEN).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let noise = moving_average(&white, 15);

    let sr = SAMPLE_RATE_HZ as f64;
    let samples: Vec<f64> = (0..CLIP_LEN)
        .map(|t| {
            let time = t as f64 / sr;
            let mut tone = 0.0;
            let mut amp = 1.0;
            for (h, &phase) in phases.iter().enumerate() {
                tone += amp * (TAU * (h + 1) as f64 * f0 * time + phase).sin();
                amp *= decay;
            }
            let env = 0.55 + 0.45 * (TAU * env_rate * time + env_phase).sin();
            env * (tone + noise_amp * noise[t])
        })
        .collect();
    peak_normalize(&Waveform::new(samples, SAMPLE_RATE_HZ))
}

/// Snap to the nearest point of the 64-level grid over [-1, 1].
pub fn quantize_6bit(x: f64) -> f64 {
    (((x + 1.0) / QUANT_STEP).round() * QUANT_STEP - 1.0).clamp(-1.0, 1.0)
}

fn moving_average(x: &[f64], width: usize) -> Vec<f64> {
    let half = width / 2;
    let n = x.len() as isize;
    (0..x.len())
        .map(|t| {
            let lo = (t as isize - half as isize).max(0);
            let hi = (t as isize + half as isize + 1).min(n);
            x[lo as usize..hi as usize].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Same-length convolution with a Hamming-windowed sinc low-pass kernel.
pub fn fir_lowpass(x: &[f64], cutoff_hz: f64, sample_rate_hz: u32) -> Vec<f64> {
    let taps = LOWPASS_TAPS;
    let center = (taps / 2) as isize;
    let fc = cutoff_hz / sample_rate_hz as f64; // cycles per sample
    let mut h: Vec<f64> = (0..taps)
        .map(|m| {
            let k = m as isize - center;
            let sinc = if k == 0 {
                2.0 * fc
            } else {
                (TAU * fc * k as f64).sin() / (PI * k as f64)
            };
            let window = 0.54 - 0.46 * (TAU * m as f64 / (taps - 1) as f64).cos();
            sinc * window
        })
        .collect();
    let gain: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= gain);

    let n = x.len() as isize;
    (0..x.len())
        .map(|t| {
            let mut acc = 0.0;
            for (m, &hv) in h.iter().enumerate() {
                let idx = t as isize + center - m as isize;
                if idx >= 0 && idx < n {
                    acc += hv * x[idx as usize];
                }
            }
            acc
        })
        .collect()
}

/// Circularly rotate each full frame by a random shift, leaving clicks at
/// the frame boundaries.
fn phase_jumps(x: &mut [f64], frame: usize, rng: &mut ChaCha8Rng) {
    let full_frames = x.len() / frame;
    for f in 0..full_frames {
        let shift = rng.gen_range(frame / 16..frame / 2);
        x[f * frame..(f + 1) * frame].rotate_left(shift);
    }
}
