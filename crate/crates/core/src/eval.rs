//! Experimental grids: baseline detector accuracy, attack degradation,
//! defense accuracy in match/mismatch settings, and the
//! reconstruction-correlation report.
//!
//! Models are expected to be trained; trainedness is enforced upstream by
//! the checkpoint layer (a missing checkpoint is a hard error there).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::afgan::{apply_attack, GanBundle, GenId};
use crate::audio::{Label, LabeledClip, Waveform};
use crate::defense::{shield_detect, ShieldModel};
use crate::detectors::{detect, DetectorModel};
use crate::dsp::pearson_correlation;
use crate::error::{Error, Result};

/// A named clip collection with stable per-clip ids.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub name: String,
    pub clips: Vec<LabeledClip>,
    pub ids: Vec<String>,
}

fn check_field(kind: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.contains(',') || s.contains('\n') {
        return Err(Error::InvalidArgument(format!(
            "{kind} {s:?} must be nonempty and free of commas and newlines"
        )));
    }
    Ok(())
}

impl Corpus {
    /// Wraps clips with synthesized ids of the form `real_00003`, numbered
    /// per label so ids are stable across regeneration with the same counts.
    pub fn from_clips(name: &str, clips: Vec<LabeledClip>) -> Result<Corpus> {
        let mut counts: BTreeMap<&'static str, usize> = BTreeMap::new();
        let ids = clips
            .iter()
            .map(|c| {
                let k = counts.entry(c.label.as_str()).or_insert(0);
                let id = format!("{}_{:05}", c.label.as_str(), *k);
                *k += 1;
                id
            })
            .collect();
        Corpus::with_ids(name, clips, ids)
    }

    pub fn with_ids(name: &str, clips: Vec<LabeledClip>, ids: Vec<String>) -> Result<Corpus> {
        check_field("corpus name", name)?;
        if clips.len() != ids.len() {
            return Err(Error::LengthMismatch {
                expected: clips.len(),
                got: ids.len(),
            });
        }
        let mut seen = std::collections::BTreeSet::new();
        for id in &ids {
            check_field("clip id", id)?;
            if !seen.insert(id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate clip id {id:?}")));
            }
        }
        Ok(Corpus {
            name: name.to_string(),
            clips,
            ids,
        })
    }

    pub fn subset(&self, indices: &[usize]) -> Corpus {
        Corpus {
            name: self.name.clone(),
            clips: indices.iter().map(|&i| self.clips[i].clone()).collect(),
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
        }
    }

    fn label_indices(&self, label: Label) -> Vec<usize> {
        (0..self.clips.len())
            .filter(|&i| self.clips[i].label == label)
            .collect()
    }

    fn require_real_and_fake(&self) -> Result<()> {
        let has = |l| self.clips.iter().any(|c| c.label == l);
        if !has(Label::Real) || !has(Label::Fake) {
            return Err(Error::InvalidArgument(format!(
                "corpus {:?} must contain both real and fake clips",
                self.name
            )));
        }
        Ok(())
    }
}

/// Index partition of a corpus into train/validation/test.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Assigns each id to train (80%), val (10%), or test (10%) by a seeded
/// hash of the id, so membership survives corpus regeneration.
pub fn split_by_id(ids: &[String], seed: u64) -> SplitIndices {
    let mut split = SplitIndices {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (i, id) in ids.iter().enumerate() {
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(id.as_bytes());
        let digest = h.finalize();
        let bucket = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")) % 10;
        match bucket {
            0..=7 => split.train.push(i),
            8 => split.val.push(i),
            _ => split.test.push(i),
        }
    }
    split
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub setting: String,
    pub corpus: String,
    pub metric: String,
    pub value: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalMeta {
    pub seeds: Vec<u64>,
    pub config_hash: String,
    pub timestamp: String,
}

impl EvalMeta {
    /// Stamps the metadata with the current unix time; the timestamp lives
    /// only in the JSON sidecar, never in the report body.
    pub fn now(seeds: Vec<u64>, config_hash: &str) -> EvalMeta {
        let secs = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        EvalMeta {
            seeds,
            config_hash: config_hash.to_string(),
            timestamp: format!("{secs}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub meta: EvalMeta,
}

impl EvalReport {
    fn sorted(meta: &EvalMeta, mut rows: Vec<EvalRow>) -> EvalReport {
        rows.sort_by(|a, b| {
            (&a.setting, &a.corpus, &a.metric).cmp(&(&b.setting, &b.corpus, &b.metric))
        });
        EvalReport {
            rows,
            meta: meta.clone(),
        }
    }

    pub fn get(&self, setting: &str, corpus: &str, metric: &str) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.setting == setting && r.corpus == corpus && r.metric == metric)
    }

    /// CSV body; a pure function of the rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("setting,corpus,metric,value,n\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{}", r.setting, r.corpus, r.metric, r.value, r.n)
                .expect("string write");
        }
        out
    }

    /// Aligned table for standard output.
    pub fn render_table(&self) -> String {
        let headers = ["setting", "corpus", "metric", "value", "n"];
        let mut widths = [
            headers[0].len(),
            headers[1].len(),
            headers[2].len(),
            10,
            headers[4].len(),
        ];
        for r in &self.rows {
            widths[0] = widths[0].max(r.setting.len());
            widths[1] = widths[1].max(r.corpus.len());
            widths[2] = widths[2].max(r.metric.len());
            widths[4] = widths[4].max(r.n.to_string().len());
        }
        let mut out = format!(
            "{:<w0$}  {:<w1$}  {:<w2$}  {:>w3$}  {:>w4$}\n",
            headers[0],
            headers[1],
            headers[2],
            headers[3],
            headers[4],
            w0 = widths[0],
            w1 = widths[1],
            w2 = widths[2],
            w3 = widths[3],
            w4 = widths[4],
        );
        for r in &self.rows {
            writeln!(
                out,
                "{:<w0$}  {:<w1$}  {:<w2$}  {:>w3$.4}  {:>w4$}",
                r.setting,
                r.corpus,
                r.metric,
                r.value,
                r.n,
                w0 = widths[0],
                w1 = widths[1],
                w2 = widths[2],
                w3 = widths[3],
                w4 = widths[4],
            )
            .expect("string write");
        }
        out
    }

    /// Writes the CSV body plus a `.json` metadata sidecar next to it.
    pub fn write(&self, csv_path: &Path) -> Result<()> {
        std::fs::write(csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))?;
        let sidecar = csv_path.with_extension("json");
        let meta = serde_json::to_string_pretty(&self.meta)
            .map_err(|e| Error::Internal(format!("metadata serialization: {e}")))?;
        std::fs::write(&sidecar, meta).map_err(|e| Error::io(&sidecar, e))
    }
}

fn check_unit(metric: &str, value: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&value) {
        return Err(Error::Internal(format!(
            "{metric} = {value} outside [0, 1]"
        )));
    }
    Ok(value)
}

/// Runs `n_cells` independent jobs on up to `jobs` threads; results are
/// assembled in index order so scheduling never affects the output.
fn for_each_cell<T, F>(n_cells: usize, jobs: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let jobs = jobs.max(1).min(n_cells.max(1));
    if jobs <= 1 {
        return (0..n_cells).map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> =
        Mutex::new((0..n_cells).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n_cells {
                    break;
                }
                let out = f(i);
                slots.lock().expect("cell slots")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("cell slots")
        .into_iter()
        .map(|slot| slot.expect("cell executed"))
        .collect()
}

fn detector_recall(model: &DetectorModel, clips: &[&LabeledClip], positive_real: bool) -> Result<f64> {
    let mut correct = 0usize;
    for clip in clips {
        let predicted_real = detect(model, &clip.waveform)? > 0.5;
        if predicted_real == positive_real {
            correct += 1;
        }
    }
    Ok(correct as f64 / clips.len() as f64)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Accuracy of each detector on each corpus, with per-class recall and a
/// per-corpus average row over detectors.
pub fn run_baseline_grid(
    detectors: &[DetectorModel],
    corpora: &[Corpus],
    meta: &EvalMeta,
    jobs: usize,
) -> Result<EvalReport> {
    if detectors.is_empty() {
        return Err(Error::EmptyInput("baseline grid detectors"));
    }
    if corpora.is_empty() {
        return Err(Error::EmptyInput("baseline grid corpora"));
    }
    for corpus in corpora {
        corpus.require_real_and_fake()?;
    }

    let cells: Vec<(usize, usize)> = (0..detectors.len())
        .flat_map(|d| (0..corpora.len()).map(move |c| (d, c)))
        .collect();
    let cell_rows = for_each_cell(cells.len(), jobs, |k| {
        let (d, c) = cells[k];
        let (det, corpus) = (&detectors[d], &corpora[c]);
        let reals: Vec<&LabeledClip> = corpus.label_indices(Label::Real).iter().map(|&i| &corpus.clips[i]).collect();
        let fakes: Vec<&LabeledClip> = corpus.label_indices(Label::Fake).iter().map(|&i| &corpus.clips[i]).collect();
        let recall_real = detector_recall(det, &reals, true)?;
        let recall_fake = detector_recall(det, &fakes, false)?;
        let n = reals.len() + fakes.len();
        let acc = (recall_real * reals.len() as f64 + recall_fake * fakes.len() as f64) / n as f64;
        let setting = det.arch.as_str().to_string();
        Ok(vec![
            EvalRow {
                setting: setting.clone(),
                corpus: corpus.name.clone(),
                metric: "accuracy".into(),
                value: check_unit("accuracy", acc)?,
                n,
            },
            EvalRow {
                setting: setting.clone(),
                corpus: corpus.name.clone(),
                metric: "recall_real".into(),
                value: check_unit("recall_real", recall_real)?,
                n: reals.len(),
            },
            EvalRow {
                setting,
                corpus: corpus.name.clone(),
                metric: "recall_fake".into(),
                value: check_unit("recall_fake", recall_fake)?,
                n: fakes.len(),
            },
        ])
    })?;

    let mut rows: Vec<EvalRow> = cell_rows.into_iter().flatten().collect();
    for corpus in corpora {
        let members: Vec<&EvalRow> = rows
            .iter()
            .filter(|r| r.corpus == corpus.name && r.metric == "accuracy")
            .collect();
        let values: Vec<f64> = members.iter().map(|r| r.value).collect();
        let n = members.iter().map(|r| r.n).sum();
        rows.push(EvalRow {
            setting: "avg".into(),
            corpus: corpus.name.clone(),
            metric: "accuracy".into(),
            value: mean(&values),
            n,
        });
    }
    Ok(EvalReport::sorted(meta, rows))
}

/// Detector accuracy before and after replacing fakes with attacked fakes,
/// per (detector, gan, corpus), with the degradation delta.
pub fn run_attack_grid(
    detectors: &[DetectorModel],
    gans: &[GanBundle],
    corpora: &[Corpus],
    meta: &EvalMeta,
    jobs: usize,
) -> Result<EvalReport> {
    if detectors.is_empty() {
        return Err(Error::EmptyInput("attack grid detectors"));
    }
    if gans.is_empty() {
        return Err(Error::EmptyInput("attack grid gans"));
    }
    if corpora.is_empty() {
        return Err(Error::EmptyInput("attack grid corpora"));
    }
    for corpus in corpora {
        corpus.require_real_and_fake()?;
    }

    // One cell per (gan, corpus): the attack pass is the expensive part and
    // is shared across detectors.
    let cells: Vec<(usize, usize)> = (0..gans.len())
        .flat_map(|g| (0..corpora.len()).map(move |c| (g, c)))
        .collect();
    let cell_rows = for_each_cell(cells.len(), jobs, |k| {
        let (g, c) = cells[k];
        let (gan, corpus) = (&gans[g], &corpora[c]);
        let reals: Vec<&LabeledClip> = corpus.label_indices(Label::Real).iter().map(|&i| &corpus.clips[i]).collect();
        let fakes: Vec<&LabeledClip> = corpus.label_indices(Label::Fake).iter().map(|&i| &corpus.clips[i]).collect();
        let attacked: Vec<LabeledClip> = fakes
            .iter()
            .map(|clip| {
                Ok(LabeledClip {
                    waveform: apply_attack(gan, &clip.waveform)?,
                    label: Label::Attacked,
                    source: clip.source.clone(),
                })
            })
            .collect::<Result<_>>()?;
        debug_assert_eq!(attacked.len(), fakes.len());
        let attacked_refs: Vec<&LabeledClip> = attacked.iter().collect();

        let mut rows = Vec::new();
        for det in detectors {
            let recall_real = detector_recall(det, &reals, true)?;
            let recall_fake = detector_recall(det, &fakes, false)?;
            let recall_attacked = detector_recall(det, &attacked_refs, false)?;
            let n = reals.len() + fakes.len();
            let acc_baseline =
                (recall_real * reals.len() as f64 + recall_fake * fakes.len() as f64) / n as f64;
            let acc_attacked = (recall_real * reals.len() as f64
                + recall_attacked * attacked.len() as f64)
                / n as f64;
            let setting = format!("{}|{}", det.arch.as_str(), gan.gen_id);
            let corpus_name = corpus.name.clone();
            rows.push(EvalRow {
                setting: setting.clone(),
                corpus: corpus_name.clone(),
                metric: "acc_baseline".into(),
                value: check_unit("acc_baseline", acc_baseline)?,
                n,
            });
            rows.push(EvalRow {
                setting: setting.clone(),
                corpus: corpus_name.clone(),
                metric: "acc_attacked".into(),
                value: check_unit("acc_attacked", acc_attacked)?,
                n,
            });
            rows.push(EvalRow {
                setting: setting.clone(),
                corpus: corpus_name.clone(),
                metric: "delta".into(),
                value: acc_baseline - acc_attacked,
                n,
            });
            rows.push(EvalRow {
                setting: setting.clone(),
                corpus: corpus_name.clone(),
                metric: "recall_attacked".into(),
                value: check_unit("recall_attacked", recall_attacked)?,
                n: attacked.len(),
            });
            rows.push(EvalRow {
                setting,
                corpus: corpus_name,
                metric: "recall_real".into(),
                value: check_unit("recall_real", recall_real)?,
                n: reals.len(),
            });
        }
        Ok(rows)
    })?;
    Ok(EvalReport::sorted(
        meta,
        cell_rows.into_iter().flatten().collect(),
    ))
}

/// Which ordered (attack, defense) generator pairs a defense grid covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SettingFilter {
    Match,
    Mismatch,
    Both,
}

impl SettingFilter {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "match" => Ok(SettingFilter::Match),
            "mismatch" => Ok(SettingFilter::Mismatch),
            "both" => Ok(SettingFilter::Both),
            other => Err(Error::InvalidArgument(format!(
                "unknown settings filter {other:?} (expected match, mismatch, or both)"
            ))),
        }
    }

    fn admits(self, is_match: bool) -> bool {
        match self {
            SettingFilter::Match => is_match,
            SettingFilter::Mismatch => !is_match,
            SettingFilter::Both => true,
        }
    }
}

fn cell_name(attack: GenId, defense: GenId) -> String {
    format!(
        "{}->{}",
        attack.as_str().to_uppercase(),
        defense.as_str().to_uppercase()
    )
}

fn gan_by_id(gans: &[GanBundle], id: GenId) -> Result<&GanBundle> {
    gans.iter()
        .find(|g| g.gen_id == id)
        .ok_or_else(|| Error::InvalidArgument(format!("no gan bundle for generator {id}")))
}

/// Per-cell rows for an explicit list of (attack, defense) pairs; the whole
/// request is validated before any cell runs so a missing model can never
/// leave a partial grid behind.
fn defense_cell_rows(
    shield_models: &BTreeMap<GenId, ShieldModel>,
    gans: &[GanBundle],
    pairs: &[(GenId, GenId)],
    corpora: &[Corpus],
    jobs: usize,
) -> Result<Vec<EvalRow>> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("defense grid cells"));
    }
    if corpora.is_empty() {
        return Err(Error::EmptyInput("defense grid corpora"));
    }
    for corpus in corpora {
        corpus.require_real_and_fake()?;
    }
    for &(a, d) in pairs {
        gan_by_id(gans, a)?;
        gan_by_id(gans, d)?;
        if !shield_models.contains_key(&d) {
            return Err(Error::InvalidArgument(format!(
                "no trained defense model for cell {}",
                cell_name(a, d)
            )));
        }
    }

    let cells: Vec<(GenId, GenId, usize)> = pairs
        .iter()
        .flat_map(|&(a, d)| (0..corpora.len()).map(move |c| (a, d, c)))
        .collect();
    let cell_rows = for_each_cell(cells.len(), jobs, |k| {
        let (a, d, c) = cells[k];
        let attack_gan = gan_by_id(gans, a)?;
        let defense_gan = gan_by_id(gans, d)?;
        let corpus = &corpora[c];
        let model = &shield_models[&defense_gan.gen_id];
        let reals = corpus.label_indices(Label::Real);
        let fakes = corpus.label_indices(Label::Fake);

        let mut correct_real = 0usize;
        for &i in &reals {
            let p = shield_detect(model, defense_gan, &corpus.clips[i].waveform)?;
            if p > 0.5 {
                correct_real += 1;
            }
        }
        let mut correct_attacked = 0usize;
        for &i in &fakes {
            let attacked = apply_attack(attack_gan, &corpus.clips[i].waveform)?;
            let p = shield_detect(model, defense_gan, &attacked)?;
            if p <= 0.5 {
                correct_attacked += 1;
            }
        }
        let recall_real = correct_real as f64 / reals.len() as f64;
        let recall_attacked = correct_attacked as f64 / fakes.len() as f64;
        let n = reals.len() + fakes.len();
        let acc_joint = (correct_real + correct_attacked) as f64 / n as f64;

        let setting = cell_name(attack_gan.gen_id, defense_gan.gen_id);
        let corpus_name = corpus.name.clone();
        Ok(vec![
            EvalRow {
                setting: setting.clone(),
                corpus: corpus_name.clone(),
                metric: "acc_joint".into(),
                value: check_unit("acc_joint", acc_joint)?,
                n,
            },
            EvalRow {
                setting: setting.clone(),
                corpus: corpus_name.clone(),
                metric: "recall_attacked".into(),
                value: check_unit("recall_attacked", recall_attacked)?,
                n: fakes.len(),
            },
            EvalRow {
                setting,
                corpus: corpus_name,
                metric: "recall_real".into(),
                value: check_unit("recall_real", recall_real)?,
                n: reals.len(),
            },
        ])
    })?;
    Ok(cell_rows.into_iter().flatten().collect())
}

/// Evaluates an explicit list of (attack, defense) cells; no average rows.
pub fn run_defense_cells(
    shield_models: &BTreeMap<GenId, ShieldModel>,
    gans: &[GanBundle],
    pairs: &[(GenId, GenId)],
    corpora: &[Corpus],
    meta: &EvalMeta,
    jobs: usize,
) -> Result<EvalReport> {
    let rows = defense_cell_rows(shield_models, gans, pairs, corpora, jobs)?;
    Ok(EvalReport::sorted(meta, rows))
}

/// Joint real-vs-attacked accuracy of each defense-paired classifier under
/// every (attack generator, defense generator) cell admitted by `settings`,
/// with match/mismatch average rows.
pub fn run_defense_grid(
    shield_models: &BTreeMap<GenId, ShieldModel>,
    gans: &[GanBundle],
    corpora: &[Corpus],
    settings: SettingFilter,
    meta: &EvalMeta,
    jobs: usize,
) -> Result<EvalReport> {
    if gans.is_empty() {
        return Err(Error::EmptyInput("defense grid gans"));
    }
    let mut pairs: Vec<(GenId, GenId)> = Vec::new();
    for a in gans {
        for d in gans {
            if settings.admits(a.gen_id == d.gen_id) {
                pairs.push((a.gen_id, d.gen_id));
            }
        }
    }
    let mut rows = defense_cell_rows(shield_models, gans, &pairs, corpora, jobs)?;

    // Average rows over acc_joint: one per corpus for the match diagonal,
    // and per attack generator plus overall for the mismatch cells.
    let acc_of = |rows: &[EvalRow], setting: &str, corpus: &str| -> (f64, usize) {
        let row = rows
            .iter()
            .find(|r| r.setting == setting && r.corpus == corpus && r.metric == "acc_joint")
            .expect("cell row exists");
        (row.value, row.n)
    };
    for corpus in corpora {
        if settings.admits(true) {
            let (mut values, mut n) = (Vec::new(), 0);
            for gan in gans {
                let (v, m) = acc_of(&rows, &cell_name(gan.gen_id, gan.gen_id), &corpus.name);
                values.push(v);
                n += m;
            }
            rows.push(EvalRow {
                setting: "match_avg".into(),
                corpus: corpus.name.clone(),
                metric: "acc_joint".into(),
                value: mean(&values),
                n,
            });
        }
        if settings.admits(false) && gans.len() > 1 {
            let (mut all_values, mut all_n) = (Vec::new(), 0);
            for attack in gans {
                let (mut values, mut n) = (Vec::new(), 0);
                for defense in gans {
                    if attack.gen_id == defense.gen_id {
                        continue;
                    }
                    let (v, m) = acc_of(&rows, &cell_name(attack.gen_id, defense.gen_id), &corpus.name);
                    values.push(v);
                    n += m;
                }
                all_values.extend_from_slice(&values);
                all_n += n;
                rows.push(EvalRow {
                    setting: format!("{}->avg", attack.gen_id.as_str().to_uppercase()),
                    corpus: corpus.name.clone(),
                    metric: "acc_joint".into(),
                    value: mean(&values),
                    n,
                });
            }
            rows.push(EvalRow {
                setting: "mismatch_avg".into(),
                corpus: corpus.name.clone(),
                metric: "acc_joint".into(),
                value: mean(&all_values),
                n: all_n,
            });
        }
    }
    Ok(EvalReport::sorted(meta, rows))
}

fn correlation_stats(
    defense: &GanBundle,
    clips: &[Waveform],
    class: &str,
    corpus_name: &str,
) -> Result<(f64, f64, usize)> {
    let mut values = Vec::new();
    for (i, clip) in clips.iter().enumerate() {
        let recon = apply_attack(defense, clip)?;
        match pearson_correlation(clip, &recon) {
            Ok(r) => values.push(r),
            Err(Error::ConstantInput) => {
                log::warn!(
                    "skipping constant {class} clip {i} of corpus {corpus_name} in correlation report"
                );
            }
            Err(e) => return Err(e),
        }
    }
    if values.is_empty() {
        return Err(Error::EmptyInput("correlation class after skipping constant clips"));
    }
    let m = mean(&values);
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
    };
    Ok((m, std, values.len()))
}

/// Per-class mean/std of the correlation between a clip and its
/// defense-generator reconstruction, plus the ordering verdict.
pub fn run_correlation_report(
    defense: &GanBundle,
    reals: &[Waveform],
    attacked: &[Waveform],
    corpus_name: &str,
    meta: &EvalMeta,
) -> Result<EvalReport> {
    if reals.is_empty() {
        return Err(Error::EmptyInput("correlation reals"));
    }
    if attacked.is_empty() {
        return Err(Error::EmptyInput("correlation attacked"));
    }
    let (real_mean, real_std, n_real) = correlation_stats(defense, reals, "real", corpus_name)?;
    let (att_mean, att_std, n_att) = correlation_stats(defense, attacked, "attacked", corpus_name)?;
    let gap = att_mean - real_mean;
    let rows = vec![
        EvalRow {
            setting: "real".into(),
            corpus: corpus_name.into(),
            metric: "corr_mean".into(),
            value: real_mean,
            n: n_real,
        },
        EvalRow {
            setting: "real".into(),
            corpus: corpus_name.into(),
            metric: "corr_std".into(),
            value: real_std,
            n: n_real,
        },
        EvalRow {
            setting: "attacked".into(),
            corpus: corpus_name.into(),
            metric: "corr_mean".into(),
            value: att_mean,
            n: n_att,
        },
        EvalRow {
            setting: "attacked".into(),
            corpus: corpus_name.into(),
            metric: "corr_std".into(),
            value: att_std,
            n: n_att,
        },
        EvalRow {
            setting: "verdict".into(),
            corpus: corpus_name.into(),
            metric: "attacked_gt_real".into(),
            value: if gap > 0.0 { 1.0 } else { 0.0 },
            n: n_real + n_att,
        },
        EvalRow {
            setting: "verdict".into(),
            corpus: corpus_name.into(),
            metric: "corr_gap".into(),
            value: gap,
            n: n_real + n_att,
        },
    ];
    Ok(EvalReport::sorted(meta, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::afgan::build_tiny_gan;
    use crate::audio::SAMPLE_RATE_HZ;
    use crate::defense::{build_tiny_shield, make_pair, train_shield, PairPolicy};
    use crate::detectors::{build_tiny_detector, train_detector, DetectorArch, TrainConfig};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_clip(seed: u64, label: Label) -> LabeledClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f0 = rng.gen_range(0.02..0.2);
        let samples: Vec<f64> = (0..256)
            .map(|i| {
                let s = (f0 * i as f64).sin() * 0.6 + 0.2 * rng.gen_range(-1.0..1.0);
                if label == Label::Fake {
                    (s * 8.0).round() / 8.0
                } else {
                    s
                }
            })
            .collect();
        LabeledClip {
            waveform: Waveform::new(samples, SAMPLE_RATE_HZ),
            label,
            source: "test".into(),
        }
    }

    fn tiny_corpus(name: &str, seed: u64, per_class: usize) -> Corpus {
        let mut clips = Vec::new();
        for i in 0..per_class {
            clips.push(tiny_clip(seed + i as u64, Label::Real));
        }
        for i in 0..per_class {
            clips.push(tiny_clip(seed + 1000 + i as u64, Label::Fake));
        }
        Corpus::from_clips(name, clips).unwrap()
    }

    fn meta() -> EvalMeta {
        EvalMeta {
            seeds: vec![1, 2],
            config_hash: "test".into(),
            timestamp: "0".into(),
        }
    }

    fn tiny_trained_detector(seed: u64) -> DetectorModel {
        let corpus = tiny_corpus("train", 500 + seed, 8);
        let cfg = TrainConfig {
            epochs: 1,
            learning_rate: 1e-3,
            seed,
            ..TrainConfig::default()
        };
        train_detector(build_tiny_detector(DetectorArch::RawCnn, seed), &corpus.clips, &cfg)
            .unwrap()
    }

    #[test]
    fn corpus_ids_are_stable_per_label() {
        let corpus = tiny_corpus("c", 1, 3);
        assert_eq!(
            corpus.ids,
            vec!["real_00000", "real_00001", "real_00002", "fake_00000", "fake_00001", "fake_00002"]
        );
    }

    #[test]
    fn corpus_rejects_duplicate_ids_and_bad_names() {
        let clips = vec![tiny_clip(1, Label::Real), tiny_clip(2, Label::Fake)];
        let ids = vec!["a".to_string(), "a".to_string()];
        assert!(Corpus::with_ids("c", clips.clone(), ids).is_err());
        assert!(Corpus::from_clips("bad,name", clips).is_err());
    }

    #[test]
    fn split_partitions_all_indices_deterministically() {
        let ids: Vec<String> = (0..1000).map(|i| format!("clip_{i:04}")).collect();
        let s1 = split_by_id(&ids, 9);
        let s2 = split_by_id(&ids, 9);
        assert_eq!(s1, s2, "same seed must reproduce the split");
        let mut all: Vec<usize> = s1
            .train
            .iter()
            .chain(s1.val.iter())
            .chain(s1.test.iter())
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>(), "split must partition the corpus");
        assert!(
            (700..900).contains(&s1.train.len()),
            "train fraction {} far from 80%",
            s1.train.len()
        );
        assert!(s1.val.len() > 30 && s1.test.len() > 30, "tail splits implausibly small");
    }

    #[test]
    fn split_membership_survives_regeneration() {
        let ids: Vec<String> = (0..200).map(|i| format!("clip_{i:04}")).collect();
        let full = split_by_id(&ids, 3);
        // Regenerate a corpus with extra clips appended: original ids must
        // keep their assignment.
        let mut grown = ids.clone();
        grown.extend((200..250).map(|i| format!("clip_{i:04}")));
        let regrown = split_by_id(&grown, 3);
        let in_train = |s: &SplitIndices, i: usize| s.train.contains(&i);
        for i in 0..200 {
            assert_eq!(
                in_train(&full, i),
                in_train(&regrown, i),
                "clip {i} changed split after regeneration"
            );
        }
    }

    #[test]
    fn different_seed_changes_the_split() {
        let ids: Vec<String> = (0..300).map(|i| format!("clip_{i:04}")).collect();
        assert_ne!(split_by_id(&ids, 1).train, split_by_id(&ids, 2).train);
    }

    #[test]
    fn report_rows_sort_and_csv_round_trip() {
        let rows = vec![
            EvalRow { setting: "b".into(), corpus: "c".into(), metric: "m".into(), value: 0.5, n: 2 },
            EvalRow { setting: "a".into(), corpus: "c".into(), metric: "z".into(), value: 1.0, n: 3 },
            EvalRow { setting: "a".into(), corpus: "c".into(), metric: "m".into(), value: 0.25, n: 4 },
        ];
        let report = EvalReport::sorted(&meta(), rows);
        let keys: Vec<&str> = report.rows.iter().map(|r| r.metric.as_str()).collect();
        assert_eq!(keys, vec!["m", "z", "m"], "rows must sort by (setting, corpus, metric)");
        assert_eq!(
            report.to_csv(),
            "setting,corpus,metric,value,n\na,c,m,0.25,4\na,c,z,1,3\nb,c,m,0.5,2\n"
        );
        assert_eq!(report.get("b", "c", "m").unwrap().value, 0.5);
    }

    #[test]
    fn report_write_emits_csv_and_sidecar() {
        let report = EvalReport::sorted(
            &meta(),
            vec![EvalRow { setting: "a".into(), corpus: "c".into(), metric: "m".into(), value: 0.5, n: 1 }],
        );
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("report.csv");
        report.write(&csv).unwrap();
        assert!(std::fs::read_to_string(&csv).unwrap().starts_with("setting,corpus,metric,value,n"));
        let sidecar: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
                .unwrap();
        assert_eq!(sidecar["config_hash"], "test");
    }

    #[test]
    fn baseline_grid_has_cell_and_average_rows() {
        let detectors = vec![tiny_trained_detector(1), tiny_trained_detector(2)];
        let corpora = vec![tiny_corpus("synth", 10, 6)];
        let report = run_baseline_grid(&detectors, &corpora, &meta(), 1).unwrap();
        // 2 detectors x 3 metrics + 1 average row.
        assert_eq!(report.rows.len(), 7);
        let avg = report.get("avg", "synth", "accuracy").unwrap();
        let members: Vec<f64> = report
            .rows
            .iter()
            .filter(|r| r.setting != "avg" && r.metric == "accuracy")
            .map(|r| r.value)
            .collect();
        assert_eq!(members.len(), 2);
        assert!(
            (avg.value - mean(&members)).abs() < 1e-9,
            "average row must equal the member mean"
        );
        assert!(report.rows.iter().all(|r| r.n > 0), "every row must carry n");
    }

    #[test]
    fn baseline_grid_is_deterministic() {
        let detectors = vec![tiny_trained_detector(1)];
        let corpora = vec![tiny_corpus("synth", 10, 5)];
        let a = run_baseline_grid(&detectors, &corpora, &meta(), 1).unwrap();
        let b = run_baseline_grid(&detectors, &corpora, &meta(), 1).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
    }

    #[test]
    fn baseline_grid_requires_both_classes() {
        let detectors = vec![tiny_trained_detector(1)];
        let clips = vec![tiny_clip(1, Label::Real)];
        let corpora = vec![Corpus::from_clips("only_real", clips).unwrap()];
        assert!(run_baseline_grid(&detectors, &corpora, &meta(), 1).is_err());
    }

    #[test]
    fn attack_grid_delta_is_exact_and_counts_match() {
        let detectors = vec![tiny_trained_detector(1)];
        let gans = vec![build_tiny_gan(crate::afgan::GenId::G3, 5)];
        let corpora = vec![tiny_corpus("synth", 20, 6)];
        let report = run_attack_grid(&detectors, &gans, &corpora, &meta(), 1).unwrap();
        assert_eq!(report.rows.len(), 5);
        let base = report.get("raw_cnn|g3", "synth", "acc_baseline").unwrap().value;
        let att = report.get("raw_cnn|g3", "synth", "acc_attacked").unwrap().value;
        let delta = report.get("raw_cnn|g3", "synth", "delta").unwrap();
        assert_eq!(delta.value, base - att, "delta must be exactly baseline - attacked");
        let n_fake = corpora[0].label_indices(Label::Fake).len();
        assert_eq!(
            report.get("raw_cnn|g3", "synth", "recall_attacked").unwrap().n,
            n_fake,
            "attack must be one-to-one with the fakes"
        );
    }

    #[test]
    fn attack_grid_parallel_matches_serial() {
        let detectors = vec![tiny_trained_detector(1)];
        let gans = vec![
            build_tiny_gan(crate::afgan::GenId::G1, 5),
            build_tiny_gan(crate::afgan::GenId::G3, 6),
        ];
        let corpora = vec![tiny_corpus("a", 20, 4), tiny_corpus("b", 60, 4)];
        let serial = run_attack_grid(&detectors, &gans, &corpora, &meta(), 1).unwrap();
        let parallel = run_attack_grid(&detectors, &gans, &corpora, &meta(), 4).unwrap();
        assert_eq!(serial.to_csv(), parallel.to_csv());
    }

    fn tiny_shield_for(gan: &GanBundle, seed: u64) -> ShieldModel {
        let corpus = tiny_corpus("pairs", 300 + seed, 4);
        let pairs: Vec<_> = corpus
            .clips
            .iter()
            .map(|c| make_pair(c, gan, PairPolicy::IncludePlainFakes).unwrap())
            .collect();
        let cfg = TrainConfig {
            epochs: 1,
            learning_rate: 1e-3,
            seed,
            ..TrainConfig::default()
        };
        train_shield(build_tiny_shield(gan.gen_id, seed), &pairs, &cfg).unwrap()
    }

    #[test]
    fn defense_grid_match_and_mismatch_structure() {
        let gans = vec![
            build_tiny_gan(GenId::G1, 5),
            build_tiny_gan(GenId::G2, 6),
            build_tiny_gan(GenId::G3, 7),
        ];
        let mut shields = BTreeMap::new();
        for gan in &gans {
            shields.insert(gan.gen_id, tiny_shield_for(gan, 9));
        }
        let corpora = vec![tiny_corpus("synth", 40, 3)];
        let report =
            run_defense_grid(&shields, &gans, &corpora, SettingFilter::Both, &meta(), 2).unwrap();

        let cell_rows: Vec<&EvalRow> = report
            .rows
            .iter()
            .filter(|r| r.metric == "acc_joint" && r.setting.contains("->") && !r.setting.ends_with("avg"))
            .collect();
        assert_eq!(cell_rows.len(), 9, "3 match + 6 mismatch cells");
        let match_cells: Vec<&&EvalRow> = cell_rows
            .iter()
            .filter(|r| {
                let (a, d) = r.setting.split_once("->").unwrap();
                a == d
            })
            .collect();
        assert_eq!(match_cells.len(), 3);

        let match_avg = report.get("match_avg", "synth", "acc_joint").unwrap();
        let match_values: Vec<f64> = match_cells.iter().map(|r| r.value).collect();
        assert!((match_avg.value - mean(&match_values)).abs() < 1e-9);

        let g1_avg = report.get("G1->avg", "synth", "acc_joint").unwrap();
        let g1_members: Vec<f64> = cell_rows
            .iter()
            .filter(|r| r.setting.starts_with("G1->") && r.setting != "G1->G1")
            .map(|r| r.value)
            .collect();
        assert_eq!(g1_members.len(), 2);
        assert!((g1_avg.value - mean(&g1_members)).abs() < 1e-9);

        let mismatch_avg = report.get("mismatch_avg", "synth", "acc_joint").unwrap();
        let mismatch_values: Vec<f64> = cell_rows
            .iter()
            .filter(|r| {
                let (a, d) = r.setting.split_once("->").unwrap();
                a != d
            })
            .map(|r| r.value)
            .collect();
        assert_eq!(mismatch_values.len(), 6);
        assert!((mismatch_avg.value - mean(&mismatch_values)).abs() < 1e-9);
    }

    #[test]
    fn defense_grid_names_the_missing_cell() {
        let gans = vec![build_tiny_gan(GenId::G1, 5), build_tiny_gan(GenId::G2, 6)];
        let mut shields = BTreeMap::new();
        shields.insert(GenId::G1, tiny_shield_for(&gans[0], 9));
        let corpora = vec![tiny_corpus("synth", 40, 3)];
        let err =
            run_defense_grid(&shields, &gans, &corpora, SettingFilter::Match, &meta(), 1)
                .err()
                .expect("missing shield model must fail");
        assert!(
            err.to_string().contains("G2->G2"),
            "error must name the missing cell, got: {err}"
        );
    }

    #[test]
    fn defense_grid_parallel_matches_serial() {
        let gans = vec![build_tiny_gan(GenId::G1, 5), build_tiny_gan(GenId::G2, 6)];
        let mut shields = BTreeMap::new();
        for gan in &gans {
            shields.insert(gan.gen_id, tiny_shield_for(gan, 9));
        }
        let corpora = vec![tiny_corpus("synth", 40, 3)];
        let serial =
            run_defense_grid(&shields, &gans, &corpora, SettingFilter::Both, &meta(), 1).unwrap();
        let parallel =
            run_defense_grid(&shields, &gans, &corpora, SettingFilter::Both, &meta(), 3).unwrap();
        assert_eq!(serial.to_csv(), parallel.to_csv());
    }

    #[test]
    fn correlation_report_structure_and_verdict_consistency() {
        let gan = build_tiny_gan(GenId::G3, 5);
        let reals: Vec<Waveform> = (0..4).map(|i| tiny_clip(i, Label::Real).waveform).collect();
        let attacked: Vec<Waveform> = (0..4)
            .map(|i| apply_attack(&gan, &tiny_clip(100 + i, Label::Fake).waveform).unwrap())
            .collect();
        let report = run_correlation_report(&gan, &reals, &attacked, "synth", &meta()).unwrap();
        assert_eq!(report.rows.len(), 6);
        let class_means: Vec<&EvalRow> =
            report.rows.iter().filter(|r| r.metric == "corr_mean").collect();
        assert_eq!(class_means.len(), 2, "exactly one mean row per class");
        for row in &class_means {
            assert!(
                (-1.0..=1.0).contains(&row.value),
                "correlation mean {} outside [-1, 1]",
                row.value
            );
        }
        let verdict = report.get("verdict", "synth", "attacked_gt_real").unwrap();
        let gap = report.get("verdict", "synth", "corr_gap").unwrap();
        assert_eq!(verdict.value, if gap.value > 0.0 { 1.0 } else { 0.0 });
        assert_eq!(verdict.n, 8);
    }

    #[test]
    fn correlation_report_skips_constant_clips() {
        let gan = build_tiny_gan(GenId::G3, 5);
        let mut reals: Vec<Waveform> = (0..3).map(|i| tiny_clip(i, Label::Real).waveform).collect();
        reals.push(Waveform::new(vec![0.25; 256], SAMPLE_RATE_HZ));
        let attacked: Vec<Waveform> = (0..3)
            .map(|i| apply_attack(&gan, &tiny_clip(100 + i, Label::Fake).waveform).unwrap())
            .collect();
        let report = run_correlation_report(&gan, &reals, &attacked, "synth", &meta()).unwrap();
        assert_eq!(
            report.get("real", "synth", "corr_mean").unwrap().n,
            3,
            "constant clip must be excluded from n"
        );
    }

    #[test]
    fn for_each_cell_propagates_errors() {
        let out: Result<Vec<usize>> = for_each_cell(4, 2, |i| {
            if i == 2 {
                Err(Error::Internal("boom".into()))
            } else {
                Ok(i)
            }
        });
        assert!(out.is_err());
    }
}
