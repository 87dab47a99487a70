//! Deterministic signal transforms: log-mel spectrograms (with a backward
//! pass for gradient flow into waveforms), waveform correlation, and
//! spectrogram export for visual comparison.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::audio::Waveform;
use crate::error::{Error, Result};

pub const N_MELS: usize = 64;
pub const WIN: usize = 1024;
pub const HOP: usize = 256;
const LOG_FLOOR: f64 = 1e-10;
const LN_10: f64 = std::f64::consts::LN_10;

/// Log-magnitude mel spectrogram, `n_mels` bands × `frames` columns.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub n_mels: usize,
    pub frames: usize,
    pub hop: usize,
    pub win: usize,
    /// Row-major: `bins[band * frames + frame]`.
    pub bins: Vec<f64>,
}

impl Spectrogram {
    pub fn at(&self, band: usize, frame: usize) -> f64 {
        self.bins[band * self.frames + frame]
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the triangular mel filters from 0 to Nyquist.
pub fn mel_band_centers_hz(n_mels: usize, sample_rate_hz: u32) -> Vec<f64> {
    let top = hz_to_mel(sample_rate_hz as f64 / 2.0);
    (1..=n_mels)
        .map(|i| mel_to_hz(i as f64 * top / (n_mels + 1) as f64))
        .collect()
}

/// Magnitude STFT (Hann window, 1024/256) -> triangular mel filterbank
/// (peak 1, 0 to Nyquist) -> log10 with floor 1e-10.
pub fn log_mel_spectrogram(w: &Waveform) -> Result<Spectrogram> {
    MelAnalyzer::new(WIN, HOP, N_MELS, w.sample_rate_hz).transform(w)
}

/// The log-mel transform with a hand-written backward pass, so losses on
/// spectrogram-consuming models can propagate into the waveform.
pub struct MelAnalyzer {
    pub win: usize,
    pub hop: usize,
    pub n_mels: usize,
    window: Vec<f64>,
    filters: Vec<Vec<(usize, f64)>>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    cache: Option<MelCache>,
}

struct MelCache {
    t: usize,
    frames: usize,
    /// X_k / |X_k| per (frame, rfft bin); zero where the magnitude is zero.
    units: Vec<Complex<f64>>,
    /// Pre-log mel values per (frame, band).
    mels: Vec<f64>,
}

impl MelAnalyzer {
    pub fn new(win: usize, hop: usize, n_mels: usize, sample_rate_hz: u32) -> Self {
        let mut planner = FftPlanner::new();
        let window = (0..win)
            .map(|n| 0.5 * (1.0 - (std::f64::consts::TAU * n as f64 / win as f64).cos()))
            .collect();
        MelAnalyzer {
            win,
            hop,
            n_mels,
            window,
            filters: mel_filterbank(n_mels, win, win / 2 + 1, sample_rate_hz),
            fft: planner.plan_fft_forward(win),
            ifft: planner.plan_fft_inverse(win),
            cache: None,
        }
    }

    pub fn frames_for(&self, t: usize) -> Result<usize> {
        if t < self.win {
            return Err(Error::InvalidArgument(format!(
                "clip of {t} samples is shorter than the {}-sample analysis window",
                self.win
            )));
        }
        Ok((t - self.win) / self.hop + 1)
    }

    /// Pure forward transform.
    pub fn transform(&self, w: &Waveform) -> Result<Spectrogram> {
        let (spec, _) = self.run(w)?;
        Ok(spec)
    }

    /// Forward pass that caches what `backward` needs.
    pub fn forward_train(&mut self, w: &Waveform) -> Result<Spectrogram> {
        let (spec, cache) = self.run(w)?;
        self.cache = Some(cache);
        Ok(spec)
    }

    /// Propagate d loss / d bins (row-major band × frame) to d loss / d samples.
    pub fn backward(&mut self, grad_bins: &[f64]) -> Vec<f64> {
        let cache = self.cache.take().expect("mel backward without forward");
        let n_freqs = self.win / 2 + 1;
        let mut gx = vec![0.0; cache.t];
        let mut spectrum = vec![Complex::new(0.0, 0.0); self.win];
        for frame in 0..cache.frames {
            // d loss / d magnitude per rfft bin
            spectrum.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (band, filter) in self.filters.iter().enumerate() {
                let mel = cache.mels[frame * self.n_mels + band];
                if mel <= LOG_FLOOR {
                    continue; // clamped bin: zero gradient
                }
                let g_mel = grad_bins[band * cache.frames + frame] / (mel * LN_10);
                for &(k, weight) in filter {
                    let unit = cache.units[frame * n_freqs + k];
                    spectrum[k] += unit * (weight * g_mel);
                }
            }
            // Adjoint of the (one-sided) DFT: dL/dy_n = Re(Σ_k G_k e^{i2πkn/N}),
            // which is the unnormalized inverse FFT of G zero-padded to N.
            self.ifft.process(&mut spectrum);
            let start = frame * self.hop;
            for n in 0..self.win {
                gx[start + n] += self.window[n] * spectrum[n].re;
            }
        }
        gx
    }

    fn run(&self, w: &Waveform) -> Result<(Spectrogram, MelCache)> {
        let t = w.len();
        let frames = self.frames_for(t)?;
        let n_freqs = self.win / 2 + 1;
        let mut bins = vec![0.0; self.n_mels * frames];
        let mut units = vec![Complex::new(0.0, 0.0); frames * n_freqs];
        let mut mels = vec![0.0; frames * self.n_mels];
        let mut buf = vec![Complex::new(0.0, 0.0); self.win];
        for frame in 0..frames {
            let start = frame * self.hop;
            for n in 0..self.win {
                buf[n] = Complex::new(w.samples[start + n] * self.window[n], 0.0);
            }
            self.fft.process(&mut buf);
            for k in 0..n_freqs {
                let mag = buf[k].norm();
                units[frame * n_freqs + k] = if mag > 0.0 {
                    buf[k] / mag
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            for (band, filter) in self.filters.iter().enumerate() {
                let mut acc = 0.0;
                for &(k, weight) in filter {
                    acc += weight * buf[k].norm();
                }
                let floored = acc.max(LOG_FLOOR);
                mels[frame * self.n_mels + band] = floored;
                bins[band * frames + frame] = floored.log10();
            }
        }
        Ok((
            Spectrogram {
                n_mels: self.n_mels,
                frames,
                hop: self.hop,
                win: self.win,
                bins,
            },
            MelCache {
                t,
                frames,
                units,
                mels,
            },
        ))
    }
}

/// Sparse triangular filters as (fft bin, weight) pairs per band.
fn mel_filterbank(
    n_mels: usize,
    win: usize,
    n_freqs: usize,
    sample_rate_hz: u32,
) -> Vec<Vec<(usize, f64)>> {
    let nyquist = sample_rate_hz as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(i as f64 * top / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate_hz as f64 / win as f64;
    (0..n_mels)
        .map(|band| {
            let (lo, mid, hi) = (edges[band], edges[band + 1], edges[band + 2]);
            let mut filter = Vec::new();
            for k in 0..n_freqs {
                let f = k as f64 * bin_hz;
                let weight = if f > lo && f < mid {
                    (f - lo) / (mid - lo)
                } else if (f - mid).abs() < 1e-12 {
                    1.0
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                if weight > 0.0 {
                    filter.push((k, weight));
                }
            }
            filter
        })
        .collect()
}

/// Pearson r over raw samples; errors on length mismatch or constant input.
pub fn pearson_correlation(a: &Waveform, b: &Waveform) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::EmptyInput("correlation"));
    }
    let n = a.len() as f64;
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&x, &y) in a.samples.iter().zip(b.samples.iter()) {
        sx += x;
        sy += y;
        sxx += x * x;
        syy += y * y;
        sxy += x * y;
    }
    let vx = n * sxx - sx * sx;
    let vy = n * syy - sy * sy;
    if vx <= 0.0 || vy <= 0.0 {
        return Err(Error::ConstantInput);
    }
    Ok(((n * sxy - sx * sy) / (vx.sqrt() * vy.sqrt())).clamp(-1.0, 1.0))
}

/// Write a grayscale raster (time on x, mel band on y, low bands at the
/// bottom) plus a sidecar CSV of the raw bins next to it.
pub fn export_spectrogram_plot(s: &Spectrogram, path: &Path) -> Result<()> {
    let (min, max) = s
        .bins
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = max - min;
    let mut img = image::GrayImage::new(s.frames as u32, s.n_mels as u32);
    for band in 0..s.n_mels {
        for frame in 0..s.frames {
            let v = s.at(band, frame);
            let level = if range > 0.0 {
                ((v - min) / range * 255.0).round() as u8
            } else {
                128
            };
            // band 0 at the bottom row
            img.put_pixel(frame as u32, (s.n_mels - 1 - band) as u32, image::Luma([level]));
        }
    }
    img.save(path).map_err(|e| {
        Error::io(path, std::io::Error::other(e.to_string()))
    })?;

    let csv_path = path.with_extension("csv");
    let mut file = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut text = String::new();
    for band in 0..s.n_mels {
        for frame in 0..s.frames {
            if frame > 0 {
                text.push(',');
            }
            text.push_str(&format!("{:.5e}", s.at(band, frame)));
        }
        text.push('\n');
    }
    file.write_all(text.as_bytes())
        .map_err(|e| Error::io(&csv_path, e))
}

/// Mean absolute difference between two spectrograms of equal shape.
pub fn mean_abs_diff(a: &Spectrogram, b: &Spectrogram) -> Result<f64> {
    if a.bins.len() != b.bins.len() {
        return Err(Error::LengthMismatch {
            expected: a.bins.len(),
            got: b.bins.len(),
        });
    }
    let total: f64 = a
        .bins
        .iter()
        .zip(b.bins.iter())
        .map(|(&x, &y)| (x - y).abs())
        .sum();
    Ok(total / a.bins.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{synth_real, Waveform, CLIP_LEN, SAMPLE_RATE_HZ};
    use proptest::prelude::*;
    use std::f64::consts::TAU;

    #[test]
    fn silence_hits_the_log_floor_everywhere() {
        let w = Waveform::new(vec![0.0; CLIP_LEN], SAMPLE_RATE_HZ);
        let s = log_mel_spectrogram(&w).unwrap();
        for &v in &s.bins {
            assert_eq!(v, -10.0, "expected log10(1e-10) for every bin");
        }
    }

    #[test]
    fn one_second_clip_has_59_frames() {
        let w = Waveform::new(vec![0.1; 16000], SAMPLE_RATE_HZ);
        let s = log_mel_spectrogram(&w).unwrap();
        assert_eq!(s.frames, 59);
        assert_eq!(s.n_mels, 64);
        assert_eq!(s.bins.len(), 64 * 59);
    }

    #[test]
    fn short_clip_is_rejected() {
        let w = Waveform::new(vec![0.1; 1000], SAMPLE_RATE_HZ);
        assert!(log_mel_spectrogram(&w).is_err());
    }

    #[test]
    fn sine_peaks_in_the_band_nearest_its_frequency() {
        // Oracle: recompute band centers from the mel formula and pick the
        // one closest to 1 kHz; the spectrogram must peak there in every frame.
        let centers = mel_band_centers_hz(N_MELS, SAMPLE_RATE_HZ);
        let expected = centers
            .iter()
            .enumerate()
            .min_by(|a, b| {
                (a.1 - 1000.0)
                    .abs()
                    .partial_cmp(&(b.1 - 1000.0).abs())
                    .unwrap()
            })
            .unwrap()
            .0;
        let w = Waveform::new(
            (0..CLIP_LEN)
                .map(|t| 0.9 * (TAU * 1000.0 * t as f64 / SAMPLE_RATE_HZ as f64).sin())
                .collect(),
            SAMPLE_RATE_HZ,
        );
        let s = log_mel_spectrogram(&w).unwrap();
        for frame in 0..s.frames {
            let argmax = (0..s.n_mels)
                .max_by(|&a, &b| s.at(a, frame).partial_cmp(&s.at(b, frame)).unwrap())
                .unwrap();
            assert_eq!(
                argmax, expected,
                "frame {frame}: peak band {argmax}, want {expected}"
            );
        }
    }

    #[test]
    fn correlation_of_identical_and_negated_signals() {
        let w = synth_real(11, 1).remove(0).waveform;
        let neg = Waveform::new(w.samples.iter().map(|&s| -s).collect(), SAMPLE_RATE_HZ);
        assert!((pearson_correlation(&w, &w).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson_correlation(&w, &neg).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn correlation_matches_two_pass_oracle() {
        // Independent oracle: explicit centered covariance in two passes.
        let a = synth_real(21, 1).remove(0).waveform;
        let b = synth_real(22, 1).remove(0).waveform;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (ma, mb) = (mean(&a.samples), mean(&b.samples));
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for (&x, &y) in a.samples.iter().zip(b.samples.iter()) {
            cov += (x - ma) * (y - mb);
            va += (x - ma) * (x - ma);
            vb += (y - mb) * (y - mb);
        }
        let oracle = cov / (va.sqrt() * vb.sqrt());
        let got = pearson_correlation(&a, &b).unwrap();
        assert!(
            (got - oracle).abs() < 1e-9,
            "one-pass {got} vs two-pass {oracle}"
        );
    }

    #[test]
    fn correlation_rejects_constant_input() {
        let flat = Waveform::new(vec![0.3; 100], SAMPLE_RATE_HZ);
        let ramp = Waveform::new((0..100).map(|i| i as f64 / 100.0).collect(), SAMPLE_RATE_HZ);
        assert!(matches!(
            pearson_correlation(&flat, &ramp),
            Err(Error::ConstantInput)
        ));
    }

    #[test]
    fn correlation_rejects_length_mismatch() {
        let a = Waveform::new(vec![0.1, 0.2, 0.3], SAMPLE_RATE_HZ);
        let b = Waveform::new(vec![0.1, 0.2], SAMPLE_RATE_HZ);
        assert!(matches!(
            pearson_correlation(&a, &b),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn mel_backward_matches_finite_differences_on_input() {
        // Loss = sum of squared log-mel bins; compare the analytic waveform
        // gradient against central differences at every sample.
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(31);
        use rand::Rng;
        let t = 64;
        let samples: Vec<f64> = (0..t).map(|_| rng.gen_range(-0.8..0.8)).collect();
        let make = |s: Vec<f64>| Waveform::new(s, SAMPLE_RATE_HZ);
        let loss_of = |mel: &MelAnalyzer, s: &[f64]| -> f64 {
            let spec = mel.transform(&make(s.to_vec())).unwrap();
            spec.bins.iter().map(|&v| v * v).sum()
        };
        let mut mel = MelAnalyzer::new(32, 16, 8, SAMPLE_RATE_HZ);
        let spec = mel.forward_train(&make(samples.clone())).unwrap();
        let grad_bins: Vec<f64> = spec.bins.iter().map(|&v| 2.0 * v).collect();
        let analytic = mel.backward(&grad_bins);

        let probe = MelAnalyzer::new(32, 16, 8, SAMPLE_RATE_HZ);
        let step = 1e-6;
        for i in 0..t {
            let mut plus = samples.clone();
            plus[i] += step;
            let mut minus = samples.clone();
            minus[i] -= step;
            let fd = (loss_of(&probe, &plus) - loss_of(&probe, &minus)) / (2.0 * step);
            let err = (analytic[i] - fd).abs() / (analytic[i].abs() + fd.abs()).max(1e-5);
            assert!(
                err <= 1e-4,
                "sample {i}: analytic {} vs fd {fd} (rel err {err:.2e})",
                analytic[i]
            );
        }
    }

    #[test]
    fn export_writes_image_and_sidecar_of_matching_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spec.png");
        let w = synth_real(4, 1).remove(0).waveform;
        let s = log_mel_spectrogram(&w).unwrap();
        export_spectrogram_plot(&s, &path).unwrap();
        let img = image::open(&path).unwrap();
        assert_eq!(img.width(), 59);
        assert_eq!(img.height(), 64);
        let csv = std::fs::read_to_string(dir.path().join("spec.csv")).unwrap();
        let rows: Vec<&str> = csv.lines().collect();
        assert_eq!(rows.len(), 64);
        for row in rows {
            assert_eq!(row.split(',').count(), 59);
        }
    }

    #[test]
    fn export_of_silence_is_uniform() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flat.png");
        let w = Waveform::new(vec![0.0; CLIP_LEN], SAMPLE_RATE_HZ);
        let s = log_mel_spectrogram(&w).unwrap();
        export_spectrogram_plot(&s, &path).unwrap();
        let img = image::open(&path).unwrap().into_luma8();
        let first = img.get_pixel(0, 0)[0];
        assert!(img.pixels().all(|p| p[0] == first), "image should be uniform");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn doubling_amplitude_never_decreases_any_bin(
            seed in 0u64..1000,
            scale in 0.05f64..0.5,
        ) {
            let mut base = synth_real(seed, 1).remove(0).waveform;
            base.samples.iter_mut().for_each(|s| *s *= scale);
            let doubled = Waveform::new(
                base.samples.iter().map(|&s| s * 2.0).collect(),
                SAMPLE_RATE_HZ,
            );
            let s1 = log_mel_spectrogram(&base).unwrap();
            let s2 = log_mel_spectrogram(&doubled).unwrap();
            for (a, b) in s1.bins.iter().zip(s2.bins.iter()) {
                prop_assert!(b >= a, "bin decreased after doubling: {a} -> {b}");
            }
        }

        #[test]
        fn correlation_is_symmetric_and_positive_affine_invariant(
            seed in 0u64..1000,
            gain in 0.1f64..4.0,
            offset in -0.5f64..0.5,
        ) {
            let a = synth_real(seed, 1).remove(0).waveform;
            let b = synth_real(seed + 5000, 1).remove(0).waveform;
            let r_ab = pearson_correlation(&a, &b).unwrap();
            let r_ba = pearson_correlation(&b, &a).unwrap();
            prop_assert!((r_ab - r_ba).abs() < 1e-12);
            let b_affine = Waveform::new(
                b.samples.iter().map(|&s| gain * s + offset).collect(),
                SAMPLE_RATE_HZ,
            );
            let r_affine = pearson_correlation(&a, &b_affine).unwrap();
            prop_assert!((r_ab - r_affine).abs() < 1e-9);
        }
    }
}
