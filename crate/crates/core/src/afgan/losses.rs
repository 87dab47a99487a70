//! Loss terms for attack training: perceptual, adversarial, surrogate,
//! and the discriminator objective.

use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::detectors::{DetectorModel, PROB_EPS};
use crate::error::{Error, Result};

/// Which discriminator objective to optimize.
///
/// `Standard` is the conventional binary cross-entropy (real clips pushed
/// toward 1, attacked clips toward 0). `AsPrinted` is the literal
/// log(1-d_real) + log(1-d_attacked) form, kept selectable for fidelity
/// experiments even though minimizing it rewards calling real clips fake.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DLossForm {
    #[default]
    Standard,
    AsPrinted,
}

impl DLossForm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(DLossForm::Standard),
            "as_printed" => Ok(DLossForm::AsPrinted),
            other => Err(Error::InvalidArgument(format!(
                "unknown discriminator loss form {other:?}; expected \"standard\" or \"as_printed\""
            ))),
        }
    }
}

fn ln_clamped(x: f64) -> f64 {
    x.clamp(PROB_EPS, 1.0).ln()
}

/// Mean absolute sample difference between the original and attacked clip.
pub fn perceptual_loss(orig: &Waveform, attacked: &Waveform) -> Result<f64> {
    if orig.len() != attacked.len() {
        return Err(Error::LengthMismatch {
            expected: orig.len(),
            got: attacked.len(),
        });
    }
    if orig.len() == 0 {
        return Err(Error::EmptyInput("perceptual loss"));
    }
    let sum: f64 = orig
        .samples
        .iter()
        .zip(attacked.samples.iter())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(sum / orig.len() as f64)
}

/// log(1 - d_out), argument clamped to [1e-7, 1]. Minimizing drives the
/// discriminator output on attacked audio toward 1 ("real").
pub fn adversarial_loss(d_out: f64) -> f64 {
    ln_clamped(1.0 - d_out)
}

/// Mean of -log(p_real) over an ensemble's real-class probabilities.
pub fn surrogate_loss_from_probs(p_reals: &[f64]) -> Result<f64> {
    if p_reals.is_empty() {
        return Err(Error::EmptyInput("surrogate ensemble"));
    }
    let sum: f64 = p_reals.iter().map(|&p| -ln_clamped(p)).sum();
    Ok(sum / p_reals.len() as f64)
}

/// Mean cross-entropy toward the real class over the surrogate ensemble.
pub fn surrogate_loss(surrogates: &[DetectorModel], attacked: &Waveform) -> Result<f64> {
    if surrogates.is_empty() {
        return Err(Error::EmptyInput("surrogate ensemble"));
    }
    let probs = surrogates
        .iter()
        .map(|s| crate::detectors::detect(s, attacked))
        .collect::<Result<Vec<f64>>>()?;
    surrogate_loss_from_probs(&probs)
}

/// Discriminator objective on one (real, attacked) pair.
pub fn discriminator_loss(d_real: f64, d_attacked: f64, form: DLossForm) -> f64 {
    match form {
        DLossForm::Standard => -ln_clamped(d_real) - ln_clamped(1.0 - d_attacked),
        DLossForm::AsPrinted => ln_clamped(1.0 - d_real) + ln_clamped(1.0 - d_attacked),
    }
}
