//! Scratch probe: effect of a fixed windowed-sinc band-limit stage (applied
//! in atanh space, mirroring the generator wrapper) on correlation ordering
//! and L1 distortion. Not part of the suite; run with --ignored.

use std::f64::consts::{PI, TAU};

use shield_core::audio::{synth_fake, synth_real, Waveform};
use shield_core::dsp::pearson_correlation;

fn sinc_kernel(cutoff_hz: f64, taps: usize) -> Vec<f64> {
    let center = (taps / 2) as isize;
    let fc = cutoff_hz / 16_000.0;
    let mut h: Vec<f64> = (0..taps)
        .map(|m| {
            let k = m as isize - center;
            let sinc = if k == 0 {
                2.0 * fc
            } else {
                (TAU * fc * k as f64).sin() / (PI * k as f64)
            };
            let w = 0.54 - 0.46 * (TAU * m as f64 / (taps - 1) as f64).cos();
            sinc * w
        })
        .collect();
    let gain: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= gain);
    h
}

fn conv_same(x: &[f64], h: &[f64]) -> Vec<f64> {
    let n = x.len() as isize;
    let center = (h.len() / 2) as isize;
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

/// The generator at init with a band-limit stage: tanh(S(atanh(clamp(x)))).
fn g_init(x: &[f64], h: &[f64]) -> Vec<f64> {
    let z: Vec<f64> = x.iter().map(|&v| v.clamp(-0.9999, 0.9999).atanh()).collect();
    conv_same(&z, h).iter().map(|&v| v.tanh()).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
#[ignore]
fn bandlimit_probe() {
    let reals = synth_real(1, 80);
    let fakes = synth_fake(1, 80);
    let corr = |a: &[f64], b: &[f64]| {
        pearson_correlation(
            &Waveform::new(a.to_vec(), 16_000),
            &Waveform::new(b.to_vec(), 16_000),
        )
        .unwrap()
    };
    for &(cutoff, taps) in &[
        (400.0, 63),
        (500.0, 63),
        (600.0, 63),
        (700.0, 63),
        (800.0, 63),
    ] {
        let h = sinc_kernel(cutoff, taps);
        let mut c_real = Vec::new();
        let mut c_att = Vec::new();
        let mut l1 = Vec::new();
        for (r, f) in reals.iter().zip(fakes.iter()) {
            let gr = g_init(&r.waveform.samples, &h);
            c_real.push(corr(&r.waveform.samples, &gr));
            let att = g_init(&f.waveform.samples, &h); // attacked = G(fake)
            let att2 = g_init(&att, &h); // defense reconstruction
            c_att.push(corr(&att, &att2));
            l1.push(
                f.waveform
                    .samples
                    .iter()
                    .zip(att.iter())
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
                    / att.len() as f64,
            );
        }
        println!(
            "cutoff {cutoff:6.0} taps {taps:3}: corr_real {:.4}  corr_att {:.4}  gap {:+.4}  l1_fake {:.4}",
            mean(&c_real),
            mean(&c_att),
            mean(&c_att) - mean(&c_real),
            mean(&l1)
        );
    }
}
