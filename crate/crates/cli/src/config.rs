//! Flat, typed run configuration: TOML file, flag overrides, validation,
//! and the provenance hash stamped into checkpoints and reports.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use shield_core::afgan::{DLossForm, GenId};
use shield_core::detectors::TrainConfig;
use shield_core::error::{Error, Result};
use shield_core::eval::SettingFilter;

pub const SCHEMA_VERSION: u32 = 1;
/// Environment variable that overrides the output root directory.
pub const OUT_ENV: &str = "SHIELD_OUT";

fn default_schema_version() -> u32 {
    SCHEMA_VERSION
}
fn default_seed() -> u64 {
    0
}
fn default_out_dir() -> String {
    "out".into()
}
fn default_jobs() -> usize {
    1
}
fn default_corpus_name() -> String {
    "synth".into()
}
fn default_corpus_n() -> usize {
    1000
}
fn default_batch_size() -> usize {
    32
}
fn default_detector_raw_epochs() -> usize {
    10
}
fn default_detector_raw_lr() -> f64 {
    1e-3
}
fn default_detector_spec_epochs() -> usize {
    5
}
fn default_detector_spec_lr() -> f64 {
    1e-4
}
fn default_detector_seed() -> u64 {
    1
}
fn default_gan_epochs() -> usize {
    5
}
fn default_gan_lr() -> f64 {
    3e-4
}
fn default_gan_max_clips() -> usize {
    300
}
fn default_gan_seed() -> u64 {
    7
}
fn default_shield_epochs() -> usize {
    4
}
fn default_shield_lr() -> f64 {
    1e-4
}
fn default_shield_seed() -> u64 {
    9
}
fn default_shield_max_pairs() -> usize {
    300
}
fn default_gens() -> Vec<String> {
    vec!["g1".into(), "g2".into(), "g3".into()]
}
fn default_settings() -> String {
    "both".into()
}
fn default_d_loss_form() -> String {
    "standard".into()
}

/// The whole experiment configuration as flat keys; field defaults follow
/// the training recipes that the synthetic corpus was calibrated with.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    /// Global seed: corpus synthesis and split assignment.
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
    #[serde(default = "default_jobs")]
    pub jobs: usize,

    #[serde(default = "default_corpus_name")]
    pub corpus_name: String,
    #[serde(default = "default_corpus_n")]
    pub corpus_n_real: usize,
    #[serde(default = "default_corpus_n")]
    pub corpus_n_fake: usize,
    /// When set, stages ingest this external manifest instead of the
    /// generated corpus; `gen-corpus` then refuses to run.
    #[serde(default)]
    pub corpus_manifest: String,

    #[serde(default = "default_detector_raw_epochs")]
    pub detector_raw_epochs: usize,
    #[serde(default = "default_detector_raw_lr")]
    pub detector_raw_learning_rate: f64,
    #[serde(default = "default_detector_spec_epochs")]
    pub detector_spec_epochs: usize,
    #[serde(default = "default_detector_spec_lr")]
    pub detector_spec_learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub detector_batch_size: usize,
    #[serde(default = "default_detector_seed")]
    pub detector_seed: u64,

    #[serde(default = "default_gan_epochs")]
    pub gan_epochs: usize,
    #[serde(default = "default_gan_lr")]
    pub gan_learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub gan_batch_size: usize,
    #[serde(default = "default_gan_seed")]
    pub gan_seed: u64,
    #[serde(default = "default_d_loss_form")]
    pub gan_d_loss_form: String,
    /// Cap on training clips per class for attack training; 0 = all.
    /// Attack strength tracks optimizer steps, so the cap keeps the
    /// distortion/evasion tradeoff stable across corpus sizes.
    #[serde(default = "default_gan_max_clips")]
    pub gan_max_clips: usize,

    #[serde(default = "default_shield_epochs")]
    pub shield_epochs: usize,
    #[serde(default = "default_shield_lr")]
    pub shield_learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub shield_batch_size: usize,
    #[serde(default = "default_shield_seed")]
    pub shield_seed: u64,
    /// Cap on training pairs per class for the paired classifier; 0 = all.
    #[serde(default = "default_shield_max_pairs")]
    pub shield_max_pairs: usize,
    #[serde(default)]
    pub include_plain_fakes: bool,

    /// Generator axis of every grid; attack/defense flags narrow it.
    #[serde(default = "default_gens")]
    pub gens: Vec<String>,
    #[serde(default = "default_settings")]
    pub settings: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults are a valid config")
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.corpus_manifest.is_empty() && (self.corpus_n_real == 0 || self.corpus_n_fake == 0) {
            return Err(Error::Config(
                "synthetic corpus needs corpus_n_real > 0 and corpus_n_fake > 0".into(),
            ));
        }
        if !self.corpus_manifest.is_empty() && !Path::new(&self.corpus_manifest).is_file() {
            return Err(Error::Config(format!(
                "corpus_manifest {:?} does not exist",
                self.corpus_manifest
            )));
        }
        for lr in [
            self.detector_raw_learning_rate,
            self.detector_spec_learning_rate,
            self.gan_learning_rate,
            self.shield_learning_rate,
        ] {
            if !(lr > 0.0) {
                return Err(Error::Config(format!("learning rate {lr} must be positive")));
            }
        }
        for bs in [
            self.detector_batch_size,
            self.gan_batch_size,
            self.shield_batch_size,
        ] {
            if bs == 0 {
                return Err(Error::Config("batch sizes must be at least 1".into()));
            }
        }
        if self.gens.is_empty() {
            return Err(Error::Config("gens must name at least one generator".into()));
        }
        self.gen_ids()?;
        self.d_loss_form()?;
        self.setting_filter()?;
        Ok(())
    }

    pub fn gen_ids(&self) -> Result<Vec<GenId>> {
        let mut ids = Vec::with_capacity(self.gens.len());
        for name in &self.gens {
            let id = GenId::parse(&name.to_lowercase())
                .map_err(|_| Error::Config(format!("unknown generator id {name:?}")))?;
            if ids.contains(&id) {
                return Err(Error::Config(format!("duplicate generator id {name:?}")));
            }
            ids.push(id);
        }
        Ok(ids)
    }

    pub fn d_loss_form(&self) -> Result<DLossForm> {
        DLossForm::parse(&self.gan_d_loss_form)
            .map_err(|_| Error::Config(format!("unknown d_loss_form {:?}", self.gan_d_loss_form)))
    }

    pub fn setting_filter(&self) -> Result<SettingFilter> {
        SettingFilter::parse(&self.settings)
            .map_err(|_| Error::Config(format!("unknown settings {:?}", self.settings)))
    }

    pub fn detector_cfg(&self, raw: bool) -> TrainConfig {
        TrainConfig {
            epochs: if raw {
                self.detector_raw_epochs
            } else {
                self.detector_spec_epochs
            },
            batch_size: self.detector_batch_size,
            learning_rate: if raw {
                self.detector_raw_learning_rate
            } else {
                self.detector_spec_learning_rate
            },
            seed: if raw {
                self.detector_seed
            } else {
                self.detector_seed.wrapping_add(1)
            },
            ..TrainConfig::default()
        }
    }

    pub fn gan_cfg(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.gan_epochs,
            batch_size: self.gan_batch_size,
            learning_rate: self.gan_learning_rate,
            seed: self.gan_seed,
            ..TrainConfig::default()
        }
    }

    pub fn shield_cfg(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.shield_epochs,
            batch_size: self.shield_batch_size,
            learning_rate: self.shield_learning_rate,
            seed: self.shield_seed,
            ..TrainConfig::default()
        }
    }

    /// Hash of the experiment-relevant configuration. Fields that cannot
    /// change artifact bytes (output location, parallelism) are normalized
    /// out so rerunning elsewhere still matches.
    pub fn hash(&self) -> String {
        let mut normalized = self.clone();
        normalized.out_dir = String::new();
        normalized.jobs = 1;
        let text = toml::to_string(&normalized).expect("config serializes");
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the effective config next to the run's outputs.
    pub fn write_effective(&self, out_dir: &Path) -> Result<()> {
        let path = out_dir.join("effective-config.toml");
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))
    }
}

/// Filesystem layout of one run directory.
pub struct RunPaths {
    pub out: PathBuf,
}

impl RunPaths {
    pub fn new(out: &Path) -> RunPaths {
        RunPaths { out: out.to_path_buf() }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.out.join("corpus")
    }

    pub fn manifest(&self) -> PathBuf {
        self.corpus_dir().join("manifest.csv")
    }

    pub fn ckpt_dir(&self) -> PathBuf {
        self.out.join("ckpt")
    }

    pub fn detector_ckpt(&self, arch: &str) -> PathBuf {
        self.ckpt_dir().join(format!("detector_{arch}.ckpt"))
    }

    pub fn gan_ckpt(&self, id: GenId) -> PathBuf {
        self.ckpt_dir().join(format!("gan_{}.ckpt", id.as_str()))
    }

    pub fn shield_ckpt(&self, id: GenId) -> PathBuf {
        self.ckpt_dir().join(format!("shield_{}.ckpt", id.as_str()))
    }

    pub fn logs_dir(&self) -> PathBuf {
        self.out.join("logs")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.out.join("reports")
    }

    pub fn export_dir(&self) -> PathBuf {
        self.out.join("export")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_hash_deterministically() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn hash_ignores_out_dir_and_jobs_but_not_seeds() {
        let base = RunConfig::default();
        let mut moved = base.clone();
        moved.out_dir = "elsewhere".into();
        moved.jobs = 8;
        assert_eq!(base.hash(), moved.hash());
        let mut reseeded = base.clone();
        reseeded.seed = 99;
        assert_ne!(base.hash(), reseeded.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("bogus_key = 1").unwrap_err();
        assert!(err.to_string().contains("bogus_key"));
    }

    #[test]
    fn bad_values_fail_validation() {
        let mut cfg = RunConfig::default();
        cfg.gan_learning_rate = 0.0;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.gens = vec!["g9".into()];
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.gens = vec!["g1".into(), "g1".into()];
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.schema_version = 2;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.corpus_n_real = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.seed = 5;
        cfg.gens = vec!["g2".into()];
        let text = cfg.to_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.seed, 5);
        assert_eq!(back.gens, vec!["g2".to_string()]);
        assert_eq!(back.hash(), cfg.hash());
    }
}
