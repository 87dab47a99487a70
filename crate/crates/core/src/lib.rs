//! Core library: audio synthesis and I/O, signal analysis, deepfake
//! detectors, the anti-forensic attack GAN, the paired-reconstruction
//! defense, and the evaluation protocol that ties them together.

pub mod afgan;
pub mod audio;
pub mod ckpt;
pub mod defense;
pub mod detectors;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod nn;

pub use error::{Error, Result};
