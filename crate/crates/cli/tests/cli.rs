//! End-to-end tests of the `shield` binary: artifact determinism, exit
//! codes, config precedence, and WAV round-trip fidelity.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use shield_core::audio::{load_manifest, synth_fake, synth_real};
use tempfile::TempDir;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_shield"));
    cmd.env_remove("SHIELD_OUT");
    cmd
}

fn write_cfg(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.toml");
    let text = format!(
        "seed = 3\n\
         out_dir = \"{}\"\n\
         corpus_n_real = 30\n\
         corpus_n_fake = 30\n\
         detector_raw_epochs = 1\n\
         detector_spec_epochs = 1\n\
         gan_epochs = 1\n\
         shield_epochs = 1\n\
         shield_max_pairs = 8\n\
         gens = [\"g1\"]\n\
         {extra}",
        dir.join("out").display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn run(cfg: &Path, args: &[&str]) -> Output {
    bin()
        .arg("--config")
        .arg(cfg)
        .args(args)
        .output()
        .expect("binary spawns")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn corpus_bytes(out_dir: &Path) -> Vec<(String, Vec<u8>)> {
    let dir = out_dir.join("corpus");
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn gen_corpus_reruns_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let cfg = write_cfg(dir.path(), "");
    assert_ok(&run(&cfg, &["gen-corpus"]), "gen-corpus");
    let first = corpus_bytes(&dir.path().join("out"));
    assert_eq!(first.len(), 61, "60 wavs plus the manifest");
    assert_ok(&run(&cfg, &["gen-corpus"]), "gen-corpus rerun");
    let second = corpus_bytes(&dir.path().join("out"));
    assert_eq!(first, second, "rerun must overwrite with identical bytes");
}

#[test]
fn generated_wavs_reload_within_pcm16_tolerance() {
    let dir = TempDir::new().unwrap();
    let cfg = write_cfg(dir.path(), "");
    assert_ok(&run(&cfg, &["gen-corpus"]), "gen-corpus");
    let corpus_dir = dir.path().join("out").join("corpus");
    let clips = load_manifest(&corpus_dir, &corpus_dir.join("manifest.csv")).unwrap();

    let mut expected = synth_real(3, 30);
    expected.extend(synth_fake(3, 30));
    assert_eq!(clips.len(), expected.len());
    let tol = (2.0f64).powi(-15);
    for (got, want) in clips.iter().zip(expected.iter()) {
        assert_eq!(got.label, want.label);
        let max_err = got
            .waveform
            .samples
            .iter()
            .zip(want.waveform.samples.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(
            max_err <= tol,
            "round-trip error {max_err:e} exceeds 2^-15 for a {} clip",
            got.label
        );
    }
}

#[test]
fn train_shield_without_gan_checkpoint_exits_2_naming_it() {
    let dir = TempDir::new().unwrap();
    let cfg = write_cfg(dir.path(), "");
    assert_ok(&run(&cfg, &["gen-corpus"]), "gen-corpus");
    let out = run(&cfg, &["train", "shield"]);
    assert_eq!(code(&out), 2, "missing dependency must exit 2");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("gan_g1.ckpt"),
        "error must name the missing checkpoint, got: {stderr}"
    );
}

#[test]
fn train_attack_without_detectors_exits_2() {
    let dir = TempDir::new().unwrap();
    let cfg = write_cfg(dir.path(), "");
    assert_ok(&run(&cfg, &["gen-corpus"]), "gen-corpus");
    let out = run(&cfg, &["train", "attack"]);
    assert_eq!(code(&out), 2);
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("detector_raw_cnn.ckpt"),
        "error must name the missing surrogate checkpoint"
    );
}

#[test]
fn eval_without_corpus_exits_2() {
    let dir = TempDir::new().unwrap();
    let cfg = write_cfg(dir.path(), "");
    let out = run(&cfg, &["eval", "baseline"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest.csv"));
}

#[test]
fn invalid_config_values_exit_1() {
    let dir = TempDir::new().unwrap();
    let cfg = write_cfg(dir.path(), "gan_learning_rate = 0.0\n");
    let out = run(&cfg, &["gen-corpus"]);
    assert_eq!(code(&out), 1, "invalid learning rate is a config error");

    let unknown = dir.path().join("unknown.toml");
    std::fs::write(&unknown, "no_such_key = 5\n").unwrap();
    let out = run(&unknown, &["gen-corpus"]);
    assert_eq!(code(&out), 1, "unknown keys are config errors");
}

#[test]
fn usage_errors_exit_1() {
    let out = bin().args(["train", "bogus"]).output().unwrap();
    assert_eq!(code(&out), 1);
    let out = bin().arg("no-such-subcommand").output().unwrap();
    assert_eq!(code(&out), 1);
}

#[test]
fn effective_config_records_flag_overrides() {
    let dir = TempDir::new().unwrap();
    let cfg = write_cfg(dir.path(), "");
    assert_ok(&run(&cfg, &["--seed", "42", "gen-corpus"]), "gen-corpus");
    let text = std::fs::read_to_string(dir.path().join("out").join("effective-config.toml"))
        .expect("effective config written next to outputs");
    assert!(
        text.contains("seed = 42"),
        "flag override must land in the effective config: {text}"
    );
}

#[test]
fn out_dir_precedence_is_flag_over_env_over_file() {
    let dir = TempDir::new().unwrap();
    let cfg = write_cfg(dir.path(), "");
    let env_out = dir.path().join("env_out");
    let flag_out = dir.path().join("flag_out");

    let out = bin()
        .arg("--config")
        .arg(&cfg)
        .arg("gen-corpus")
        .env("SHIELD_OUT", &env_out)
        .output()
        .unwrap();
    assert_ok(&out, "gen-corpus with env override");
    assert!(env_out.join("corpus").join("manifest.csv").is_file());

    let out = bin()
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&flag_out)
        .arg("gen-corpus")
        .env("SHIELD_OUT", &env_out)
        .output()
        .unwrap();
    assert_ok(&out, "gen-corpus with flag override");
    assert!(flag_out.join("corpus").join("manifest.csv").is_file());
}

#[test]
fn eval_rerun_emits_byte_identical_csv_and_checkpoints() {
    let dir = TempDir::new().unwrap();
    let cfg = write_cfg(dir.path(), "");
    assert_ok(&run(&cfg, &["gen-corpus"]), "gen-corpus");
    assert_ok(&run(&cfg, &["train", "detector"]), "train detector");
    let ckpt = dir
        .path()
        .join("out")
        .join("ckpt")
        .join("detector_raw_cnn.ckpt");
    let ckpt_first = std::fs::read(&ckpt).unwrap();

    let out = run(&cfg, &["eval", "baseline"]);
    assert_ok(&out, "eval baseline");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        stdout.contains("raw_cnn") && stdout.contains("accuracy"),
        "table must echo to stdout: {stdout}"
    );
    let csv = dir.path().join("out").join("reports").join("baseline.csv");
    let first = std::fs::read(&csv).unwrap();

    assert_ok(&run(&cfg, &["train", "detector"]), "retrain detector");
    assert_eq!(
        std::fs::read(&ckpt).unwrap(),
        ckpt_first,
        "retraining with the same config must reproduce the checkpoint"
    );
    assert_ok(&run(&cfg, &["eval", "baseline"]), "re-eval baseline");
    assert_eq!(
        std::fs::read(&csv).unwrap(),
        first,
        "report body must be byte-identical across reruns"
    );
}

#[test]
fn mixed_config_hashes_require_allow_mixed() {
    let dir = TempDir::new().unwrap();
    let cfg = write_cfg(dir.path(), "");
    assert_ok(&run(&cfg, &["gen-corpus"]), "gen-corpus");
    assert_ok(&run(&cfg, &["train", "detector"]), "train detector");
    let ckpt_dir = dir.path().join("out").join("ckpt");
    let raw = ckpt_dir.join("detector_raw_cnn.ckpt");
    let saved = std::fs::read(&raw).unwrap();

    let cfg2 = write_cfg(dir.path(), "gan_seed = 123\n");
    assert_ok(&run(&cfg2, &["train", "detector"]), "retrain under new config");
    std::fs::write(&raw, saved).unwrap();

    let out = run(&cfg2, &["eval", "baseline"]);
    assert_eq!(code(&out), 1, "mixed hashes must be refused");
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("--allow-mixed"),
        "refusal must mention the escape hatch"
    );
    let out = run(&cfg2, &["eval", "baseline", "--allow-mixed"]);
    assert_ok(&out, "eval with --allow-mixed");
}
