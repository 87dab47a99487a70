//! WAV ingestion and export via `hound`.

use std::path::Path;

use crate::error::{Error, Result};

use super::Waveform;

/// Read a RIFF WAV (PCM16 or float32); stereo files keep the first channel.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader =
        hound::WavReader::open(path).map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?
            .iter()
            .step_by(channels)
            .map(|&s| s as f64 / 32768.0)
            .collect(),
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?
            .iter()
            .step_by(channels)
            .map(|&s| s as f64)
            .collect(),
        (fmt, bits) => {
            return Err(Error::Audio(format!(
                "{}: unsupported sample format {fmt:?}/{bits}-bit (want PCM16 or float32)",
                path.display()
            )))
        }
    };
    Ok(Waveform::new(samples, spec.sample_rate))
}

/// Write a mono float32 WAV.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate_hz,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
    for &s in &w.samples {
        writer
            .write_sample(s as f32)
            .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
    }
    writer
        .finalize()
        .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))
}
