//! Implementations of the four subcommands over a validated config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use shield_core::afgan::{
    apply_attack, build_gan, train_attack, write_loss_history, DLossForm, GanBundle, GenId,
};
use shield_core::audio::{
    load_manifest, write_manifest, write_wav, Label, LabeledClip, synth_fake, synth_real,
};
use shield_core::ckpt;
use shield_core::defense::{
    build_shield, embed, intra_inter_distances, make_pair, silhouette, train_shield_with_history,
    export_embeddings, PairPolicy, PairedClip, ShieldModel,
};
use shield_core::detectors::{
    build_detector, train_detector_with_history, DetectorArch, DetectorModel,
};
use shield_core::dsp::{export_spectrogram_plot, log_mel_spectrogram};
use shield_core::error::{Error, Result};
use shield_core::eval::{
    run_attack_grid, run_baseline_grid, run_correlation_report, run_defense_cells,
    run_defense_grid, split_by_id, Corpus, EvalMeta, EvalReport,
};

use crate::config::{RunConfig, RunPaths};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Detector,
    Attack,
    Defense,
    Shield,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grid {
    Baseline,
    Attack,
    Defense,
    Correlation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportKind {
    Spectrogram,
    Embeddings,
}

pub struct Ctx {
    pub cfg: RunConfig,
    pub paths: RunPaths,
}

/// Stable per-generator seed offset, independent of selection order.
fn gen_offset(id: GenId) -> u64 {
    match id {
        GenId::G1 => 0,
        GenId::G2 => 1,
        GenId::G3 => 2,
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

impl Ctx {
    pub fn new(cfg: RunConfig) -> Result<Ctx> {
        cfg.validate()?;
        let paths = RunPaths::new(Path::new(&cfg.out_dir));
        ensure_dir(&paths.out)?;
        cfg.write_effective(&paths.out)?;
        Ok(Ctx { cfg, paths })
    }

    fn meta(&self) -> EvalMeta {
        EvalMeta::now(
            vec![
                self.cfg.seed,
                self.cfg.detector_seed,
                self.cfg.gan_seed,
                self.cfg.shield_seed,
            ],
            &self.cfg.hash(),
        )
    }

    /// Loads the corpus with per-clip ids taken from the manifest paths.
    fn load_corpus(&self) -> Result<Corpus> {
        let (root, manifest) = if self.cfg.corpus_manifest.is_empty() {
            (self.paths.corpus_dir(), self.paths.manifest())
        } else {
            let manifest = PathBuf::from(&self.cfg.corpus_manifest);
            let root = manifest
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("."));
            (root, manifest)
        };
        if !manifest.is_file() {
            return Err(Error::MissingFile(manifest));
        }
        let clips = load_manifest(&root, &manifest)?;
        let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let ids: Vec<String> = text
            .lines()
            .skip(1)
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let path = l.split(',').next().unwrap_or_default();
                Path::new(path)
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| path.to_string())
            })
            .collect();
        Corpus::with_ids(&self.cfg.corpus_name, clips, ids)
    }

    fn train_test_split(&self, corpus: &Corpus) -> (Corpus, Corpus) {
        let split = split_by_id(&corpus.ids, self.cfg.seed);
        (corpus.subset(&split.train), corpus.subset(&split.test))
    }

    fn selection(&self, flag: Option<GenId>) -> Result<Vec<GenId>> {
        match flag {
            Some(id) => Ok(vec![id]),
            None => self.cfg.gen_ids(),
        }
    }

    fn load_detectors(&self) -> Result<(Vec<DetectorModel>, Vec<String>)> {
        let mut models = Vec::new();
        let mut hashes = Vec::new();
        for arch in [DetectorArch::RawCnn, DetectorArch::SpecCnn] {
            let (model, header) = ckpt::load_detector(&self.paths.detector_ckpt(arch.as_str()))?;
            models.push(model);
            hashes.push(header.config_hash);
        }
        Ok((models, hashes))
    }

    fn load_gans(&self, ids: &[GenId]) -> Result<(Vec<GanBundle>, Vec<String>)> {
        let mut gans = Vec::new();
        let mut hashes = Vec::new();
        for &id in ids {
            let (gan, header) = ckpt::load_gan(&self.paths.gan_ckpt(id))?;
            gans.push(gan);
            hashes.push(header.config_hash);
        }
        Ok((gans, hashes))
    }

    fn load_shields(&self, ids: &[GenId]) -> Result<(BTreeMap<GenId, ShieldModel>, Vec<String>)> {
        let mut shields = BTreeMap::new();
        let mut hashes = Vec::new();
        for &id in ids {
            let (model, header) = ckpt::load_shield(&self.paths.shield_ckpt(id))?;
            shields.insert(id, model);
            hashes.push(header.config_hash);
        }
        Ok((shields, hashes))
    }
}

fn check_hashes(hashes: &[String], allow_mixed: bool) -> Result<()> {
    let mut distinct: Vec<&String> = Vec::new();
    for h in hashes {
        if !distinct.contains(&h) {
            distinct.push(h);
        }
    }
    if distinct.len() > 1 && !allow_mixed {
        return Err(Error::Config(format!(
            "checkpoints were trained under {} different configs ({}); pass --allow-mixed to evaluate anyway",
            distinct.len(),
            distinct
                .iter()
                .map(|h| &h[..8.min(h.len())])
                .collect::<Vec<_>>()
                .join(", ")
        )));
    }
    Ok(())
}

pub fn cmd_gen_corpus(ctx: &Ctx) -> Result<()> {
    if !ctx.cfg.corpus_manifest.is_empty() {
        return Err(Error::Config(
            "gen-corpus needs a synthetic corpus spec, but corpus_manifest points at external data"
                .into(),
        ));
    }
    let dir = ctx.paths.corpus_dir();
    ensure_dir(&dir)?;
    let mut entries = Vec::new();
    let reals = synth_real(ctx.cfg.seed, ctx.cfg.corpus_n_real);
    let fakes = synth_fake(ctx.cfg.seed, ctx.cfg.corpus_n_fake);
    for (i, clip) in reals.iter().enumerate() {
        let rel = format!("real_{i:05}.wav");
        write_wav(&dir.join(&rel), &clip.waveform)?;
        entries.push((rel, clip.label, clip.source.clone()));
    }
    for (i, clip) in fakes.iter().enumerate() {
        let rel = format!("fake_{i:05}.wav");
        write_wav(&dir.join(&rel), &clip.waveform)?;
        entries.push((rel, clip.label, clip.source.clone()));
    }
    write_manifest(&ctx.paths.manifest(), &entries)?;
    println!(
        "wrote {} clips + manifest to {}",
        entries.len(),
        dir.display()
    );
    Ok(())
}

fn write_epoch_losses(path: &Path, losses: &[f64]) -> Result<()> {
    let mut out = String::from("epoch,loss\n");
    for (epoch, loss) in losses.iter().enumerate() {
        writeln!(out, "{epoch},{loss}").expect("string write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn train_detectors(ctx: &Ctx) -> Result<()> {
    let corpus = ctx.load_corpus()?;
    let (train, _) = ctx.train_test_split(&corpus);
    ensure_dir(&ctx.paths.ckpt_dir())?;
    ensure_dir(&ctx.paths.logs_dir())?;
    let hash = ctx.cfg.hash();
    for arch in [DetectorArch::RawCnn, DetectorArch::SpecCnn] {
        let raw = arch == DetectorArch::RawCnn;
        let cfg = ctx.cfg.detector_cfg(raw);
        let model = build_detector(arch, cfg.seed);
        let (model, losses) = train_detector_with_history(model, &train.clips, &cfg)?;
        ckpt::save_detector(&ctx.paths.detector_ckpt(arch.as_str()), &model, &hash)?;
        write_epoch_losses(
            &ctx.paths.logs_dir().join(format!("detector_{}_losses.csv", arch.as_str())),
            &losses,
        )?;
        println!(
            "trained {} for {} epochs -> {}",
            arch.as_str(),
            cfg.epochs,
            ctx.paths.detector_ckpt(arch.as_str()).display()
        );
    }
    Ok(())
}

fn train_gans(ctx: &Ctx, selection: &[GenId], d_loss_form: DLossForm) -> Result<()> {
    let (mut surrogates, _) = ctx.load_detectors()?;
    let corpus = ctx.load_corpus()?;
    let (train, _) = ctx.train_test_split(&corpus);
    let cap = ctx.cfg.gan_max_clips;
    let take = |label: Label| -> Vec<LabeledClip> {
        let mut clips: Vec<_> = train
            .clips
            .iter()
            .filter(|c| c.label == label)
            .cloned()
            .collect();
        if cap > 0 {
            clips.truncate(cap);
        }
        clips
    };
    let reals = take(Label::Real);
    let fakes = take(Label::Fake);
    ensure_dir(&ctx.paths.ckpt_dir())?;
    ensure_dir(&ctx.paths.logs_dir())?;
    let hash = ctx.cfg.hash();
    for &id in selection {
        let seed = ctx.cfg.gan_seed.wrapping_add(gen_offset(id));
        let mut cfg = ctx.cfg.gan_cfg();
        cfg.seed = seed;
        let gan = build_gan(id, seed);
        let (gan, reports) = train_attack(gan, &reals, &fakes, &mut surrogates, &cfg, d_loss_form)?;
        ckpt::save_gan(&ctx.paths.gan_ckpt(id), &gan, &hash)?;
        write_loss_history(
            &ctx.paths.logs_dir().join(format!("gan_{}_losses.csv", id.as_str())),
            &reports,
        )?;
        println!(
            "trained generator {id} for {} epochs -> {}",
            cfg.epochs,
            ctx.paths.gan_ckpt(id).display()
        );
    }
    Ok(())
}

/// Real and attacked training pairs under one defense generator. Attacked
/// clips come from the same generator: the defender pairs with the model it
/// has, without assuming knowledge of the attacker's choice.
fn build_pairs(
    ctx: &Ctx,
    train: &Corpus,
    attack: &GanBundle,
    defense: &GanBundle,
) -> Result<(Vec<PairedClip>, Vec<String>)> {
    let cap = ctx.cfg.shield_max_pairs;
    let mut pairs = Vec::new();
    let mut ids = Vec::new();
    let mut reals_kept = 0usize;
    let mut attacked_kept = 0usize;
    for (clip, id) in train.clips.iter().zip(train.ids.iter()) {
        match clip.label {
            Label::Real => {
                if cap > 0 && reals_kept >= cap / 2 {
                    continue;
                }
                reals_kept += 1;
                pairs.push(make_pair(clip, defense, PairPolicy::Strict)?);
                ids.push(id.clone());
            }
            Label::Fake => {
                if cap > 0 && attacked_kept >= cap / 2 {
                    continue;
                }
                attacked_kept += 1;
                let attacked = LabeledClip {
                    waveform: apply_attack(attack, &clip.waveform)?,
                    label: Label::Attacked,
                    source: attack.gen_id.to_string(),
                };
                pairs.push(make_pair(&attacked, defense, PairPolicy::Strict)?);
                ids.push(format!("{id}_atk_{}", attack.gen_id.as_str()));
                if ctx.cfg.include_plain_fakes {
                    pairs.push(make_pair(clip, defense, PairPolicy::IncludePlainFakes)?);
                    ids.push(id.clone());
                }
            }
            Label::Attacked => {
                pairs.push(make_pair(clip, defense, PairPolicy::Strict)?);
                ids.push(id.clone());
            }
        }
    }
    Ok((pairs, ids))
}

fn train_shields(ctx: &Ctx, selection: &[GenId]) -> Result<()> {
    let corpus = ctx.load_corpus()?;
    let (train, _) = ctx.train_test_split(&corpus);
    ensure_dir(&ctx.paths.ckpt_dir())?;
    ensure_dir(&ctx.paths.logs_dir())?;
    let hash = ctx.cfg.hash();
    for &id in selection {
        let (gan, _) = ckpt::load_gan(&ctx.paths.gan_ckpt(id))?;
        let (pairs, _) = build_pairs(ctx, &train, &gan, &gan)?;
        let seed = ctx.cfg.shield_seed.wrapping_add(gen_offset(id));
        let mut cfg = ctx.cfg.shield_cfg();
        cfg.seed = seed;
        let model = build_shield(id, seed);
        let (model, history) = train_shield_with_history(model, &pairs, &cfg)?;
        ckpt::save_shield(&ctx.paths.shield_ckpt(id), &model, &hash)?;
        let mut out = String::from("stage,epoch,loss\n");
        for row in &history {
            writeln!(out, "{},{},{}", row.stage, row.epoch, row.loss).expect("string write");
        }
        let log_path = ctx.paths.logs_dir().join(format!("shield_{}_losses.csv", id.as_str()));
        std::fs::write(&log_path, out).map_err(|e| Error::io(&log_path, e))?;
        println!(
            "trained defense pairing {id} on {} pairs -> {}",
            pairs.len(),
            ctx.paths.shield_ckpt(id).display()
        );
    }
    Ok(())
}

pub fn cmd_train(ctx: &Ctx, stage: Stage, gen: Option<GenId>) -> Result<()> {
    match stage {
        Stage::Detector => train_detectors(ctx),
        Stage::Attack | Stage::Defense => {
            let selection = ctx.selection(gen)?;
            train_gans(ctx, &selection, ctx.cfg.d_loss_form()?)
        }
        Stage::Shield => {
            let selection = ctx.selection(gen)?;
            train_shields(ctx, &selection)
        }
    }
}

fn finish_report(ctx: &Ctx, name: &str, report: &EvalReport) -> Result<()> {
    ensure_dir(&ctx.paths.reports_dir())?;
    let path = ctx.paths.reports_dir().join(format!("{name}.csv"));
    report.write(&path)?;
    print!("{}", report.render_table());
    println!("report -> {}", path.display());
    Ok(())
}

pub fn cmd_eval(
    ctx: &Ctx,
    grid: Grid,
    attack_gen: Option<GenId>,
    defense_gen: Option<GenId>,
    allow_mixed: bool,
) -> Result<()> {
    let corpus = ctx.load_corpus()?;
    let (_, test) = ctx.train_test_split(&corpus);
    let meta = ctx.meta();
    match grid {
        Grid::Baseline => {
            let (detectors, hashes) = ctx.load_detectors()?;
            check_hashes(&hashes, allow_mixed)?;
            let report = run_baseline_grid(&detectors, &[test], &meta, ctx.cfg.jobs)?;
            finish_report(ctx, "baseline", &report)
        }
        Grid::Attack => {
            let (detectors, mut hashes) = ctx.load_detectors()?;
            let ids = ctx.selection(attack_gen)?;
            let (gans, gan_hashes) = ctx.load_gans(&ids)?;
            hashes.extend(gan_hashes);
            check_hashes(&hashes, allow_mixed)?;
            let report = run_attack_grid(&detectors, &gans, &[test], &meta, ctx.cfg.jobs)?;
            finish_report(ctx, "attack", &report)
        }
        Grid::Defense => {
            let axis = ctx.cfg.gen_ids()?;
            let (gans, mut hashes) = ctx.load_gans(&axis)?;
            let narrowed = attack_gen.is_some() || defense_gen.is_some();
            let settings = ctx.cfg.setting_filter()?;
            let report = if narrowed {
                let attacks = ctx.selection(attack_gen)?;
                let defenses = ctx.selection(defense_gen)?;
                let mut cells = Vec::new();
                for &a in &attacks {
                    for &d in &defenses {
                        cells.push((a, d));
                    }
                }
                let defense_ids: Vec<GenId> = defenses.clone();
                let (shields, shield_hashes) = ctx.load_shields(&defense_ids)?;
                hashes.extend(shield_hashes);
                check_hashes(&hashes, allow_mixed)?;
                run_defense_cells(&shields, &gans, &cells, &[test], &meta, ctx.cfg.jobs)?
            } else {
                let (shields, shield_hashes) = ctx.load_shields(&axis)?;
                hashes.extend(shield_hashes);
                check_hashes(&hashes, allow_mixed)?;
                run_defense_grid(&shields, &gans, &[test], settings, &meta, ctx.cfg.jobs)?
            };
            finish_report(ctx, "defense", &report)
        }
        Grid::Correlation => {
            let axis = ctx.cfg.gen_ids()?;
            let defense_id = defense_gen.unwrap_or(axis[0]);
            let attack_id = attack_gen.unwrap_or(defense_id);
            let ids: Vec<GenId> = if attack_id == defense_id {
                vec![defense_id]
            } else {
                vec![attack_id, defense_id]
            };
            let (gans, hashes) = ctx.load_gans(&ids)?;
            check_hashes(&hashes, allow_mixed)?;
            let attack = gans.iter().find(|g| g.gen_id == attack_id).expect("loaded");
            let defense = gans.iter().find(|g| g.gen_id == defense_id).expect("loaded");
            let reals: Vec<_> = test
                .clips
                .iter()
                .filter(|c| c.label == Label::Real)
                .map(|c| c.waveform.clone())
                .collect();
            let attacked: Vec<_> = test
                .clips
                .iter()
                .filter(|c| c.label == Label::Fake)
                .map(|c| apply_attack(attack, &c.waveform))
                .collect::<Result<_>>()?;
            let report =
                run_correlation_report(defense, &reals, &attacked, &ctx.cfg.corpus_name, &meta)?;
            finish_report(ctx, "correlation", &report)
        }
    }
}

fn export_spectrograms(ctx: &Ctx, gen: Option<GenId>) -> Result<()> {
    let axis = ctx.cfg.gen_ids()?;
    let attack_id = gen.unwrap_or(axis[0]);
    let (gan, _) = ckpt::load_gan(&ctx.paths.gan_ckpt(attack_id))?;
    let corpus = ctx.load_corpus()?;
    let (_, test) = ctx.train_test_split(&corpus);
    let real = test
        .clips
        .iter()
        .find(|c| c.label == Label::Real)
        .ok_or(Error::EmptyInput("no real clip in the test split"))?;
    let fake = test
        .clips
        .iter()
        .find(|c| c.label == Label::Fake)
        .ok_or(Error::EmptyInput("no fake clip in the test split"))?;
    let attacked = apply_attack(&gan, &fake.waveform)?;
    let dir = ctx.paths.export_dir();
    ensure_dir(&dir)?;
    for (name, wave) in [
        ("spectrogram_real".to_string(), &real.waveform),
        ("spectrogram_fake".to_string(), &fake.waveform),
        (format!("spectrogram_attacked_{}", attack_id.as_str()), &attacked),
    ] {
        let spec = log_mel_spectrogram(wave)?;
        let path = dir.join(format!("{name}.png"));
        export_spectrogram_plot(&spec, &path)?;
        println!("exported {}", path.display());
    }
    Ok(())
}

fn export_embedding_csv(
    ctx: &Ctx,
    attack_gen: Option<GenId>,
    defense_gen: Option<GenId>,
) -> Result<()> {
    let axis = ctx.cfg.gen_ids()?;
    let defense_id = defense_gen.unwrap_or(axis[0]);
    let attack_id = attack_gen.unwrap_or(defense_id);
    let (model, _) = ckpt::load_shield(&ctx.paths.shield_ckpt(defense_id))?;
    let (defense, _) = ckpt::load_gan(&ctx.paths.gan_ckpt(defense_id))?;
    let attack = if attack_id == defense_id {
        None
    } else {
        Some(ckpt::load_gan(&ctx.paths.gan_ckpt(attack_id))?.0)
    };
    let attack_ref = attack.as_ref().unwrap_or(&defense);

    let corpus = ctx.load_corpus()?;
    let (_, test) = ctx.train_test_split(&corpus);
    let (pairs, ids) = build_pairs(ctx, &test, attack_ref, &defense)?;
    let dir = ctx.paths.export_dir();
    ensure_dir(&dir)?;
    let csv = dir.join(format!(
        "embeddings_{}_{}.csv",
        attack_id.as_str(),
        defense_id.as_str()
    ));
    export_embeddings(&model, &pairs, &ids, &csv)?;

    let embeddings: Vec<_> = pairs
        .iter()
        .map(|p| embed(&model, p))
        .collect::<Result<_>>()?;
    let labels: Vec<_> = pairs.iter().map(|p| p.pair_label).collect();
    let sil = silhouette(&embeddings, &labels)?;
    let (intra, inter) = intra_inter_distances(&embeddings, &labels)?;
    let stats = serde_json::json!({
        "silhouette": sil,
        "mean_intra_distance": intra,
        "mean_inter_distance": inter,
        "n_pairs": pairs.len(),
    });
    let stats_path = csv.with_extension("json");
    std::fs::write(&stats_path, serde_json::to_string_pretty(&stats).expect("json"))
        .map_err(|e| Error::io(&stats_path, e))?;
    log::info!("embedding separation: silhouette {sil:.4}, intra {intra:.4}, inter {inter:.4}");
    println!("exported {} ({} rows), silhouette {sil:.4}", csv.display(), pairs.len());
    Ok(())
}

pub fn cmd_export(
    ctx: &Ctx,
    kind: ExportKind,
    gen: Option<GenId>,
    attack_gen: Option<GenId>,
    defense_gen: Option<GenId>,
) -> Result<()> {
    match kind {
        ExportKind::Spectrogram => export_spectrograms(ctx, gen.or(attack_gen)),
        ExportKind::Embeddings => export_embedding_csv(ctx, attack_gen.or(gen), defense_gen),
    }
}
