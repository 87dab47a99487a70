//! Signal types, synthetic corpus generation, and manifest-driven ingestion
//! of external audio.

mod resample;
mod synth;
mod wav;

pub use resample::resample;
pub use synth::{quantize_6bit, synth_fake, synth_real};
pub use wav::{read_wav, write_wav};

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

/// Default sample rate for every experiment.
pub const SAMPLE_RATE_HZ: u32 = 16_000;
/// Default clip length in samples (1 s at 16 kHz).
pub const CLIP_LEN: usize = 16_000;

/// A fixed-rate mono clip with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Self {
        Waveform {
            samples,
            sample_rate_hz,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Check the type invariants: finite samples, peak ≤ 1, expected length.
    pub fn validate(&self, expected_len: usize) -> Result<()> {
        if self.samples.len() != expected_len {
            return Err(Error::LengthMismatch {
                expected: expected_len,
                got: self.samples.len(),
            });
        }
        for (i, &s) in self.samples.iter().enumerate() {
            if !s.is_finite() {
                return Err(Error::Audio(format!("non-finite sample at index {i}")));
            }
            if s.abs() > 1.0 {
                return Err(Error::Audio(format!(
                    "sample {s} at index {i} exceeds [-1, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Ground-truth role of a clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Real,
    Fake,
    Attacked,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Fake => "fake",
            Label::Attacked => "attacked",
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        match s {
            "real" => Some(Label::Real),
            "fake" => Some(Label::Fake),
            "attacked" => Some(Label::Attacked),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A waveform plus its ground truth and provenance.
#[derive(Debug, Clone)]
pub struct LabeledClip {
    pub waveform: Waveform,
    pub label: Label,
    /// Corpus name or generator id (attack generator id when label=attacked).
    pub source: String,
}

/// Scale so the peak |sample| is exactly 1; silence passes through unchanged.
pub fn peak_normalize(w: &Waveform) -> Waveform {
    let peak = w.samples.iter().fold(0.0_f64, |m, &s| m.max(s.abs()));
    if peak == 0.0 {
        return w.clone();
    }
    Waveform {
        samples: w.samples.iter().map(|&s| s / peak).collect(),
        sample_rate_hz: w.sample_rate_hz,
    }
}

/// Truncate or zero-pad to exactly `len` samples.
pub fn fit_length(mut samples: Vec<f64>, len: usize) -> Vec<f64> {
    samples.resize(len, 0.0);
    samples
}

/// Load a CSV manifest (`path,label,source`) and ingest every referenced WAV:
/// first channel, resampled to 16 kHz, peak-normalized, fitted to `CLIP_LEN`.
pub fn load_manifest(root: &Path, manifest: &Path) -> Result<Vec<LabeledClip>> {
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let mut clips = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let row = idx + 1;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        if idx == 0 {
            if line != "path,label,source" {
                return Err(Error::Manifest {
                    row,
                    msg: format!("expected header 'path,label,source', got '{line}'"),
                });
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Manifest {
                row,
                msg: format!("expected 3 fields, got {}", fields.len()),
            });
        }
        let label = Label::parse(fields[1]).ok_or_else(|| Error::Manifest {
            row,
            msg: format!("unknown label '{}'", fields[1]),
        })?;
        let path = root.join(fields[0]);
        if !path.is_file() {
            return Err(Error::MissingFile(path));
        }
        let raw = read_wav(&path)?;
        let at_rate = if raw.sample_rate_hz == SAMPLE_RATE_HZ {
            raw
        } else {
            resample(&raw, SAMPLE_RATE_HZ)
        };
        let normalized = peak_normalize(&at_rate);
        let waveform = Waveform::new(fit_length(normalized.samples, CLIP_LEN), SAMPLE_RATE_HZ);
        clips.push(LabeledClip {
            waveform,
            label,
            source: fields[2].to_string(),
        });
    }
    Ok(clips)
}

/// Write a manifest CSV for clips stored as `<root>/<relative path>`.
pub fn write_manifest(path: &Path, entries: &[(String, Label, String)]) -> Result<()> {
    let mut out = String::from("path,label,source\n");
    for (rel, label, source) in entries {
        out.push_str(&format!("{rel},{label},{source}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
