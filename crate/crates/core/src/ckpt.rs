//! Checkpoint persistence: one self-describing file per model, a JSON
//! header line followed by raw little-endian 64-bit parameters.

use std::io::Read as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::afgan::{build_gan, GanBundle, GenId};
use crate::audio::CLIP_LEN;
use crate::defense::{build_shield, ShieldModel};
use crate::detectors::{build_detector, DetectorArch, DetectorModel};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Header written as the first line of every checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CkptHeader {
    pub format_version: u32,
    /// Model family: "detector", "gan", or "shield".
    pub kind: String,
    /// Architecture id within the family (e.g. "raw_cnn", "g2").
    pub arch_id: String,
    pub seed: u64,
    pub input_len: usize,
    /// Hash of the config that produced this model.
    pub config_hash: String,
    /// Named parameter sections in file order with their element counts.
    pub sections: Vec<(String, usize)>,
}

fn write_ckpt(path: &Path, header: &CkptHeader, sections: &[&[f64]]) -> Result<()> {
    debug_assert_eq!(header.sections.len(), sections.len());
    let mut bytes = serde_json::to_string(header)
        .map_err(|e| Error::CheckpointFormat(format!("header serialization: {e}")))?
        .into_bytes();
    bytes.push(b'\n');
    for section in sections {
        for v in *section {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))
}

fn read_ckpt(path: &Path) -> Result<(CkptHeader, Vec<Vec<f64>>)> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.display().to_string()));
    }
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::CheckpointFormat("missing header line".into()))?;
    let header: CkptHeader = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| Error::CheckpointFormat(format!("header parse: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::CheckpointFormat(format!(
            "format version {} unsupported (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let body = &bytes[newline + 1..];
    let expected: usize = header.sections.iter().map(|(_, n)| n * 8).sum();
    if body.len() != expected {
        return Err(Error::CheckpointFormat(format!(
            "parameter payload is {} bytes, header promises {expected}",
            body.len()
        )));
    }
    let mut sections = Vec::with_capacity(header.sections.len());
    let mut off = 0;
    for (_, n) in &header.sections {
        let mut vals = Vec::with_capacity(*n);
        for _ in 0..*n {
            vals.push(f64::from_le_bytes(
                body[off..off + 8].try_into().expect("8-byte chunk"),
            ));
            off += 8;
        }
        sections.push(vals);
    }
    Ok((header, sections))
}

fn check_section(
    header: &CkptHeader,
    idx: usize,
    name: &str,
    expected_len: usize,
) -> Result<()> {
    let (got_name, got_len) = &header.sections[idx];
    if got_name != name || *got_len != expected_len {
        return Err(Error::CheckpointFormat(format!(
            "section {idx} is ({got_name}, {got_len}), expected ({name}, {expected_len})"
        )));
    }
    Ok(())
}

pub fn save_detector(path: &Path, model: &DetectorModel, config_hash: &str) -> Result<()> {
    let params = model.params();
    let header = CkptHeader {
        format_version: FORMAT_VERSION,
        kind: "detector".into(),
        arch_id: model.arch.as_str().into(),
        seed: model.seed,
        input_len: model.input_len,
        config_hash: config_hash.into(),
        sections: vec![("params".into(), params.len())],
    };
    write_ckpt(path, &header, &[&params])
}

pub fn load_detector(path: &Path) -> Result<(DetectorModel, CkptHeader)> {
    let (header, sections) = read_ckpt(path)?;
    if header.kind != "detector" {
        return Err(Error::CheckpointFormat(format!(
            "kind {:?} is not a detector checkpoint",
            header.kind
        )));
    }
    let arch = DetectorArch::parse(&header.arch_id).ok_or_else(|| {
        Error::CheckpointFormat(format!("unknown detector arch {:?}", header.arch_id))
    })?;
    if header.input_len != CLIP_LEN {
        return Err(Error::CheckpointFormat(format!(
            "unsupported detector input length {}",
            header.input_len
        )));
    }
    let mut model = build_detector(arch, header.seed);
    check_section(&header, 0, "params", model.param_count())?;
    model.set_params(&sections[0]);
    Ok((model, header))
}

pub fn save_gan(path: &Path, gan: &GanBundle, config_hash: &str) -> Result<()> {
    let gen = gan.gen_params();
    let disc = gan.disc_params();
    let header = CkptHeader {
        format_version: FORMAT_VERSION,
        kind: "gan".into(),
        arch_id: gan.gen_id.as_str().into(),
        seed: gan.seed,
        input_len: gan.input_len,
        config_hash: config_hash.into(),
        sections: vec![("gen".into(), gen.len()), ("disc".into(), disc.len())],
    };
    write_ckpt(path, &header, &[&gen, &disc])
}

pub fn load_gan(path: &Path) -> Result<(GanBundle, CkptHeader)> {
    let (header, sections) = read_ckpt(path)?;
    if header.kind != "gan" {
        return Err(Error::CheckpointFormat(format!(
            "kind {:?} is not a gan checkpoint",
            header.kind
        )));
    }
    let gen_id = GenId::parse(&header.arch_id)
        .map_err(|_| Error::CheckpointFormat(format!("unknown generator id {:?}", header.arch_id)))?;
    if header.input_len != CLIP_LEN {
        return Err(Error::CheckpointFormat(format!(
            "unsupported gan input length {}",
            header.input_len
        )));
    }
    let mut gan = build_gan(gen_id, header.seed);
    check_section(&header, 0, "gen", gan.gen_param_count())?;
    check_section(&header, 1, "disc", gan.disc_param_count())?;
    gan.set_gen_params(&sections[0]);
    gan.set_disc_params(&sections[1]);
    Ok((gan, header))
}

pub fn save_shield(path: &Path, model: &ShieldModel, config_hash: &str) -> Result<()> {
    let embedder = model.embedder_params();
    let head = model.head_params();
    let header = CkptHeader {
        format_version: FORMAT_VERSION,
        kind: "shield".into(),
        arch_id: model.defense_gen_id.as_str().into(),
        seed: model.seed,
        input_len: model.input_len,
        config_hash: config_hash.into(),
        sections: vec![
            ("embedder".into(), embedder.len()),
            ("head".into(), head.len()),
        ],
    };
    write_ckpt(path, &header, &[&embedder, &head])
}

pub fn load_shield(path: &Path) -> Result<(ShieldModel, CkptHeader)> {
    let (header, sections) = read_ckpt(path)?;
    if header.kind != "shield" {
        return Err(Error::CheckpointFormat(format!(
            "kind {:?} is not a shield checkpoint",
            header.kind
        )));
    }
    let gen_id = GenId::parse(&header.arch_id)
        .map_err(|_| Error::CheckpointFormat(format!("unknown generator id {:?}", header.arch_id)))?;
    if header.input_len != 2 * CLIP_LEN {
        return Err(Error::CheckpointFormat(format!(
            "unsupported shield input length {}",
            header.input_len
        )));
    }
    let mut model = build_shield(gen_id, header.seed);
    check_section(&header, 0, "embedder", model.embedder_param_count())?;
    check_section(&header, 1, "head", model.head_param_count())?;
    model.set_embedder_params(&sections[0]);
    model.set_head_params(&sections[1]);
    Ok((model, header))
}
