//! Anti-forensic attack: generator/discriminator pairs trained so that
//! regenerated deepfakes evade audio deepfake detectors.

mod losses;
mod nets;
mod train;

pub use losses::{
    adversarial_loss, discriminator_loss, perceptual_loss, surrogate_loss,
    surrogate_loss_from_probs, DLossForm,
};
pub use nets::{
    full_discriminator, nudge_zero_params, tiny_discriminator, Generator, ResStack1d, Segan1d,
    UNet1d,
};
pub use train::{generator_step, train_attack, write_loss_history, AttackLossReport};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{Waveform, CLIP_LEN};
use crate::error::{Error, Result};
use crate::nn::{flat_params, param_count, set_flat_params, Layer, Sequential, Tensor};

/// Which attack generator architecture a bundle carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenId {
    /// 1-D U-Net: 4 down / 4 up with skip connections.
    G1,
    /// Strided encoder-decoder without skips, seeded latent at the bottleneck.
    G2,
    /// Compact stack of 6 residual conv blocks, no resampling.
    G3,
}

impl GenId {
    pub const ALL: [GenId; 3] = [GenId::G1, GenId::G2, GenId::G3];

    pub fn as_str(&self) -> &'static str {
        match self {
            GenId::G1 => "g1",
            GenId::G2 => "g2",
            GenId::G3 => "g3",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "g1" => Ok(GenId::G1),
            "g2" => Ok(GenId::G2),
            "g3" => Ok(GenId::G3),
            other => Err(Error::InvalidArgument(format!(
                "unknown generator id {other:?}; expected g1, g2, or g3"
            ))),
        }
    }
}

impl std::fmt::Display for GenId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A generator/discriminator pair plus the config needed to rebuild it.
pub struct GanBundle {
    pub gen_id: GenId,
    pub seed: u64,
    pub input_len: usize,
    pub gen: Generator,
    pub disc: Sequential,
}

impl GanBundle {
    pub fn gen_param_count(&self) -> usize {
        param_count(&self.gen)
    }

    pub fn disc_param_count(&self) -> usize {
        param_count(&self.disc)
    }

    pub fn gen_params(&self) -> Vec<f64> {
        flat_params(&self.gen)
    }

    pub fn disc_params(&self) -> Vec<f64> {
        flat_params(&self.disc)
    }

    pub fn set_gen_params(&mut self, values: &[f64]) {
        set_flat_params(&mut self.gen, values);
    }

    pub fn set_disc_params(&mut self, values: &[f64]) {
        set_flat_params(&mut self.disc, values);
    }
}

fn seeded_pair(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut gen_rng = ChaCha8Rng::seed_from_u64(seed);
    gen_rng.set_stream(1);
    let mut disc_rng = ChaCha8Rng::seed_from_u64(seed);
    disc_rng.set_stream(2);
    (gen_rng, disc_rng)
}

/// Build a full-size (16000-sample) generator/discriminator pair.
pub fn build_gan(gen_id: GenId, seed: u64) -> GanBundle {
    let (mut gen_rng, mut disc_rng) = seeded_pair(seed);
    let net: Box<dyn crate::nn::Layer> = match gen_id {
        GenId::G1 => Box::new(UNet1d::new(
            &[(8, 8, 4), (14, 8, 4), (20, 8, 4), (28, 4, 2)],
            &[(20, 2, 5), (14, 4, 5), (8, 4, 5), (4, 4, 5)],
            9,
            &mut gen_rng,
        )),
        GenId::G2 => Box::new(Segan1d::new(
            &[(8, 8, 4), (16, 8, 4), (24, 8, 4), (32, 4, 2)],
            &[(20, 2, 5), (12, 4, 5), (8, 4, 5), (4, 4, 5)],
            8,
            125,
            9,
            seed,
            &mut gen_rng,
        )),
        GenId::G3 => Box::new(ResStack1d::new(4, 6, 5, 9, &mut gen_rng)),
    };
    GanBundle {
        gen_id,
        seed,
        input_len: CLIP_LEN,
        gen: Generator::new(net),
        disc: full_discriminator(&mut disc_rng),
    }
}

/// Build a scaled-down pair (256-sample input) for gradient checking.
pub fn build_tiny_gan(gen_id: GenId, seed: u64) -> GanBundle {
    let (mut gen_rng, mut disc_rng) = seeded_pair(seed);
    let net: Box<dyn crate::nn::Layer> = match gen_id {
        GenId::G1 => Box::new(UNet1d::new(
            &[(2, 8, 4), (3, 8, 4), (4, 4, 2), (4, 4, 2)],
            &[(4, 2, 3), (3, 2, 3), (2, 4, 3), (2, 4, 3)],
            5,
            &mut gen_rng,
        )),
        GenId::G2 => Box::new(Segan1d::new(
            &[(2, 8, 4), (3, 8, 4), (4, 4, 2), (4, 4, 2)],
            &[(4, 2, 3), (3, 2, 3), (2, 4, 3), (2, 4, 3)],
            2,
            4,
            5,
            seed,
            &mut gen_rng,
        )),
        GenId::G3 => Box::new(ResStack1d::new(2, 6, 3, 5, &mut gen_rng)),
    };
    GanBundle {
        gen_id,
        seed,
        input_len: 256,
        gen: Generator::new(net),
        disc: tiny_discriminator(&mut disc_rng),
    }
}

/// Run the generator on a deepfake clip, producing the attacked clip.
pub fn apply_attack(gan: &GanBundle, fake: &Waveform) -> Result<Waveform> {
    if fake.len() != gan.input_len {
        return Err(Error::LengthMismatch {
            expected: gan.input_len,
            got: fake.len(),
        });
    }
    Ok(Waveform::new(
        gan.gen.infer_samples(&fake.samples),
        fake.sample_rate_hz,
    ))
}

/// Discriminator probability that a clip is real, in (0, 1).
pub fn discriminate(gan: &GanBundle, w: &Waveform) -> Result<f64> {
    if w.len() != gan.input_len {
        return Err(Error::LengthMismatch {
            expected: gan.input_len,
            got: w.len(),
        });
    }
    Ok(gan.disc.infer(&Tensor::from_signal(&w.samples)).data[0])
}
