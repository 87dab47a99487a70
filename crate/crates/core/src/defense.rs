//! Collaborative defense: pair every clip with its defense-generator
//! reconstruction, embed the pair with a triplet-trained encoder, and
//! classify real vs attacked with a small fully-connected head.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::afgan::{apply_attack, GanBundle, GenId};
use crate::audio::{Label, LabeledClip, Waveform, CLIP_LEN};
use crate::detectors::{cross_entropy, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::{
    flat_params, param_count, set_flat_params, softmax2, zero_grad, Adam, Conv1d, GlobalAvgPool,
    GlobalRmsNorm, Layer, LeakyRelu, Linear, Sequential, Tensor,
};

/// Default embedding dimension.
pub const EMBED_DIM: usize = 128;

pub type EmbeddingVec = Vec<f64>;

/// Class of a paired clip; the head maps these to {0: attacked, 1: real}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairLabel {
    RealPair,
    AttackedPair,
}

impl PairLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            PairLabel::RealPair => "real_pair",
            PairLabel::AttackedPair => "attacked_pair",
        }
    }

    /// Index into the head's softmax, mirroring the detector convention.
    pub fn class_index(&self) -> usize {
        match self {
            PairLabel::RealPair => 1,
            PairLabel::AttackedPair => 0,
        }
    }
}

/// How plain (unattacked) fake clips are mapped during pairing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PairPolicy {
    /// Reject plain fakes: the defense trains and evaluates on real vs
    /// attacked only.
    #[default]
    Strict,
    /// Map plain fakes to the attacked class.
    IncludePlainFakes,
}

/// A clip concatenated in time with its defense-generator reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedClip {
    /// 2T samples: source clip followed by its reconstruction.
    pub payload: Vec<f64>,
    pub pair_label: PairLabel,
    pub defense_gen_id: GenId,
}

/// Run the defense generator on a clip, producing its reconstruction.
pub fn apply_defense_generator(defense: &GanBundle, clip: &Waveform) -> Result<Waveform> {
    apply_attack(defense, clip)
}

fn paired_payload(defense: &GanBundle, clip: &Waveform) -> Result<Vec<f64>> {
    let recon = apply_defense_generator(defense, clip)?;
    let mut payload = clip.samples.clone();
    payload.extend_from_slice(&recon.samples);
    Ok(payload)
}

/// Concatenate a labeled clip with its reconstruction.
///
/// Plain fakes are rejected under the default policy so that mixing them
/// into a real-vs-attacked defense is always an explicit choice.
pub fn make_pair(clip: &LabeledClip, defense: &GanBundle, policy: PairPolicy) -> Result<PairedClip> {
    let pair_label = match (clip.label, policy) {
        (Label::Real, _) => PairLabel::RealPair,
        (Label::Attacked, _) => PairLabel::AttackedPair,
        (Label::Fake, PairPolicy::IncludePlainFakes) => PairLabel::AttackedPair,
        (Label::Fake, PairPolicy::Strict) => {
            return Err(Error::InvalidArgument(
                "plain fake clip in defense pairing; pass the include-plain-fakes policy to map \
                 fakes to the attacked class"
                    .into(),
            ))
        }
    };
    Ok(PairedClip {
        payload: paired_payload(defense, &clip.waveform)?,
        pair_label,
        defense_gen_id: defense.gen_id,
    })
}

/// Embedder + classifier head over paired clips.
pub struct ShieldModel {
    pub defense_gen_id: GenId,
    pub seed: u64,
    /// Payload length the embedder expects (2T).
    pub input_len: usize,
    pub embed_dim: usize,
    pub embedder: Sequential,
    pub head: Sequential,
}

impl ShieldModel {
    pub fn embedder_params(&self) -> Vec<f64> {
        flat_params(&self.embedder)
    }

    pub fn head_params(&self) -> Vec<f64> {
        flat_params(&self.head)
    }

    pub fn set_embedder_params(&mut self, values: &[f64]) {
        set_flat_params(&mut self.embedder, values);
    }

    pub fn set_head_params(&mut self, values: &[f64]) {
        set_flat_params(&mut self.head, values);
    }

    pub fn embedder_param_count(&self) -> usize {
        param_count(&self.embedder)
    }

    pub fn head_param_count(&self) -> usize {
        param_count(&self.head)
    }
}

fn conv_rms_block(c_in: usize, c_out: usize, k: usize, s: usize, rng: &mut ChaCha8Rng) -> Vec<Box<dyn Layer>> {
    vec![
        Box::new(Conv1d::new(c_in, c_out, k, s, (k - s) / 2, rng)),
        Box::new(GlobalRmsNorm::new(c_out)),
        Box::new(LeakyRelu::new(0.2)),
    ]
}

/// Full-size model: embeds 2T = 32000-sample payloads into 128 dimensions.
pub fn build_shield(defense_gen_id: GenId, seed: u64) -> ShieldModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let mut layers: Vec<Box<dyn Layer>> = Vec::new();
    layers.extend(conv_rms_block(1, 8, 9, 4, &mut rng));
    layers.extend(conv_rms_block(8, 16, 9, 4, &mut rng));
    layers.extend(conv_rms_block(16, 32, 9, 4, &mut rng));
    layers.extend(conv_rms_block(32, 64, 5, 4, &mut rng));
    layers.extend(conv_rms_block(64, EMBED_DIM, 5, 4, &mut rng));
    layers.push(Box::new(GlobalAvgPool::new()));
    let embedder = Sequential::new(layers);
    let head = Sequential::new(vec![Box::new(Linear::new(EMBED_DIM, 2, &mut rng)) as Box<dyn Layer>]);
    ShieldModel {
        defense_gen_id,
        seed,
        input_len: 2 * CLIP_LEN,
        embed_dim: EMBED_DIM,
        embedder,
        head,
    }
}

/// Scaled-down model (512-sample payload, 8-dim embedding) for gradient
/// checks; pairs with `build_tiny_gan` whose clips are 256 samples.
pub fn build_tiny_shield(defense_gen_id: GenId, seed: u64) -> ShieldModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let mut layers: Vec<Box<dyn Layer>> = Vec::new();
    layers.extend(conv_rms_block(1, 2, 9, 4, &mut rng));
    layers.extend(conv_rms_block(2, 4, 5, 4, &mut rng));
    layers.extend(conv_rms_block(4, 8, 5, 4, &mut rng));
    layers.push(Box::new(GlobalAvgPool::new()));
    let embedder = Sequential::new(layers);
    let head = Sequential::new(vec![Box::new(Linear::new(8, 2, &mut rng)) as Box<dyn Layer>]);
    ShieldModel {
        defense_gen_id,
        seed,
        input_len: 512,
        embed_dim: 8,
        embedder,
        head,
    }
}

/// Embed one paired clip.
pub fn embed(model: &ShieldModel, pair: &PairedClip) -> Result<EmbeddingVec> {
    if pair.payload.len() != model.input_len {
        return Err(Error::LengthMismatch {
            expected: model.input_len,
            got: pair.payload.len(),
        });
    }
    Ok(model.embedder.infer(&Tensor::from_signal(&pair.payload)).data)
}

/// Squared Euclidean distances (d_ap, d_an) for one triplet.
pub fn triplet_distances(
    fa: &EmbeddingVec,
    fp: &EmbeddingVec,
    fn_: &EmbeddingVec,
) -> Result<(f64, f64)> {
    if fa.len() != fp.len() || fa.len() != fn_.len() {
        return Err(Error::DimensionMismatch {
            expected: fa.len(),
            got: if fa.len() != fp.len() { fp.len() } else { fn_.len() },
        });
    }
    let d_ap = fa.iter().zip(fp.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    let d_an = fa.iter().zip(fn_.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((d_ap, d_an))
}

/// Margin ranking loss max(0, y (d_ap − d_an) + m); defaults y=+1, m=0.
pub fn margin_ranking_loss(d_ap: f64, d_an: f64, y: f64, m: f64) -> f64 {
    (y * (d_ap - d_an) + m).max(0.0)
}

/// Index triplets into a slice of paired clips.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletBatch {
    pub anchors: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

fn class_indices(pairs: &[PairedClip]) -> (Vec<usize>, Vec<usize>) {
    let mut real = Vec::new();
    let mut attacked = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        match p.pair_label {
            PairLabel::RealPair => real.push(i),
            PairLabel::AttackedPair => attacked.push(i),
        }
    }
    (real, attacked)
}

/// Sample `n` triplets: uniform anchor, positive from the anchor's class
/// excluding the anchor, negative from the other class.
pub fn mine_triplets(pairs: &[PairedClip], seed: u64, n: usize) -> Result<TripletBatch> {
    let (real, attacked) = class_indices(pairs);
    if real.len() < 2 || attacked.len() < 2 {
        return Err(Error::SingleClass);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = TripletBatch {
        anchors: Vec::with_capacity(n),
        positives: Vec::with_capacity(n),
        negatives: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let anchor = rng.gen_range(0..pairs.len());
        let (own, other) = match pairs[anchor].pair_label {
            PairLabel::RealPair => (&real, &attacked),
            PairLabel::AttackedPair => (&attacked, &real),
        };
        let positive = loop {
            let cand = own[rng.gen_range(0..own.len())];
            if cand != anchor {
                break cand;
            }
        };
        let negative = other[rng.gen_range(0..other.len())];
        batch.anchors.push(anchor);
        batch.positives.push(positive);
        batch.negatives.push(negative);
    }
    Ok(batch)
}

/// Triplet-loss gradients w.r.t. the three embeddings, `None` when the
/// hinge is inactive.
pub fn triplet_grads(
    fa: &[f64],
    fp: &[f64],
    fn_: &[f64],
    y: f64,
    m: f64,
) -> Option<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let (d_ap, d_an) = triplet_distances(&fa.to_vec(), &fp.to_vec(), &fn_.to_vec()).ok()?;
    if y * (d_ap - d_an) + m <= 0.0 {
        return None;
    }
    let dim = fa.len();
    let mut ga = vec![0.0; dim];
    let mut gp = vec![0.0; dim];
    let mut gn = vec![0.0; dim];
    for i in 0..dim {
        ga[i] = y * 2.0 * ((fa[i] - fp[i]) - (fa[i] - fn_[i]));
        gp[i] = y * -2.0 * (fa[i] - fp[i]);
        gn[i] = y * 2.0 * (fa[i] - fn_[i]);
    }
    Some((ga, gp, gn))
}

/// Mean margin-ranking loss of mined triplets under the current embedder.
pub fn triplet_loss_on(model: &ShieldModel, pairs: &[PairedClip], batch: &TripletBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("triplet batch"));
    }
    let mut sum = 0.0;
    for t in 0..batch.len() {
        let fa = embed(model, &pairs[batch.anchors[t]])?;
        let fp = embed(model, &pairs[batch.positives[t]])?;
        let fn_ = embed(model, &pairs[batch.negatives[t]])?;
        let (d_ap, d_an) = triplet_distances(&fa, &fp, &fn_)?;
        sum += margin_ranking_loss(d_ap, d_an, 1.0, 0.0);
    }
    Ok(sum / batch.len() as f64)
}

/// Stage 1: train the embedder on mined triplets with margin ranking loss.
pub fn train_shield_stage1(
    model: ShieldModel,
    pairs: &[PairedClip],
    cfg: &TrainConfig,
) -> Result<ShieldModel> {
    stage1_with_history(model, pairs, cfg).map(|(model, _)| model)
}

fn stage1_with_history(
    mut model: ShieldModel,
    pairs: &[PairedClip],
    cfg: &TrainConfig,
) -> Result<(ShieldModel, Vec<f64>)> {
    cfg.validate()?;
    let inputs: Vec<Tensor> = pairs
        .iter()
        .map(|p| {
            if p.payload.len() != model.input_len {
                return Err(Error::LengthMismatch {
                    expected: model.input_len,
                    got: p.payload.len(),
                });
            }
            Ok(Tensor::from_signal(&p.payload))
        })
        .collect::<Result<_>>()?;
    let mut opt = Adam::new(&model.embedder, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let batch_seed = rng.gen::<u64>();
        let triplets = mine_triplets(pairs, batch_seed, pairs.len())?;
        let mut epoch_loss = 0.0;
        let mut active = 0usize;
        for chunk_start in (0..triplets.len()).step_by(cfg.batch_size) {
            let chunk_end = (chunk_start + cfg.batch_size).min(triplets.len());
            let scale = 1.0 / (chunk_end - chunk_start) as f64;
            zero_grad(&mut model.embedder);
            for t in chunk_start..chunk_end {
                let (ia, ip, in_) = (
                    &inputs[triplets.anchors[t]],
                    &inputs[triplets.positives[t]],
                    &inputs[triplets.negatives[t]],
                );
                let fa = model.embedder.infer(ia).data;
                let fp = model.embedder.infer(ip).data;
                let fn_ = model.embedder.infer(in_).data;
                let (d_ap, d_an) = triplet_distances(&fa, &fp, &fn_)?;
                epoch_loss += margin_ranking_loss(d_ap, d_an, 1.0, 0.0);
                if let Some((ga, gp, gn)) = triplet_grads(&fa, &fp, &fn_, 1.0, 0.0) {
                    active += 1;
                    for (input, grad) in [(ia, ga), (ip, gp), (in_, gn)] {
                        model.embedder.forward_train(input);
                        let mut g = grad;
                        for v in g.iter_mut() {
                            *v *= scale;
                        }
                        model
                            .embedder
                            .backward(&Tensor::from_vec(&[model.embed_dim], g));
                    }
                }
            }
            opt.step(&mut model.embedder);
        }
        let mean_loss = epoch_loss / triplets.len() as f64;
        history.push(mean_loss);
        log::debug!(
            "shield stage1 epoch {epoch}: mean triplet loss {mean_loss:.4}, active {active}/{}",
            triplets.len()
        );
    }
    Ok((model, history))
}

/// Head training schedule. The head is a linear probe on frozen
/// embeddings — a convex problem — so unlike the embedder it is always
/// trained to convergence rather than on the caller's epoch budget.
pub const HEAD_LEARNING_RATE: f64 = 1e-2;
pub const HEAD_EPOCHS: usize = 100;

/// Stage 2: freeze the embedder, train the head with cross-entropy.
pub fn train_shield_stage2(
    model: ShieldModel,
    pairs: &[PairedClip],
    cfg: &TrainConfig,
) -> Result<ShieldModel> {
    stage2_with_history(model, pairs, cfg).map(|(model, _)| model)
}

fn stage2_with_history(
    mut model: ShieldModel,
    pairs: &[PairedClip],
    cfg: &TrainConfig,
) -> Result<(ShieldModel, Vec<f64>)> {
    cfg.validate()?;
    let (real, attacked) = class_indices(pairs);
    if real.is_empty() || attacked.is_empty() {
        return Err(Error::SingleClass);
    }
    let embeddings: Vec<Tensor> = pairs
        .iter()
        .map(|p| embed(&model, p).map(|e| Tensor::from_vec(&[model.embed_dim], e)))
        .collect::<Result<_>>()?;
    let classes: Vec<usize> = pairs.iter().map(|p| p.pair_label.class_index()).collect();
    let mut opt = Adam::new(&model.head, HEAD_LEARNING_RATE);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut history = Vec::with_capacity(HEAD_EPOCHS);
    for epoch in 0..HEAD_EPOCHS {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            zero_grad(&mut model.head);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let out = model.head.forward_train(&embeddings[i]);
                let (loss, mut grad) = cross_entropy([out.data[0], out.data[1]], classes[i]);
                grad[0] *= scale;
                grad[1] *= scale;
                model.head.backward(&Tensor::from_vec(&[2], grad.to_vec()));
                epoch_loss += loss;
            }
            opt.step(&mut model.head);
        }
        let mean_ce = epoch_loss / pairs.len() as f64;
        history.push(mean_ce);
        log::debug!("shield stage2 epoch {epoch}: mean ce {mean_ce:.4}");
    }
    Ok((model, history))
}

/// One row of the two-stage shield training history.
#[derive(Debug, Clone, PartialEq)]
pub struct ShieldLossRow {
    /// "triplet" for the embedder stage, "head" for the classifier stage.
    pub stage: &'static str,
    pub epoch: usize,
    pub loss: f64,
}

/// Two-stage training: embedder on triplets, then frozen-embedder + head.
pub fn train_shield(model: ShieldModel, pairs: &[PairedClip], cfg: &TrainConfig) -> Result<ShieldModel> {
    train_shield_with_history(model, pairs, cfg).map(|(model, _)| model)
}

/// Like [`train_shield`], also returning the per-epoch mean loss of each stage.
pub fn train_shield_with_history(
    model: ShieldModel,
    pairs: &[PairedClip],
    cfg: &TrainConfig,
) -> Result<(ShieldModel, Vec<ShieldLossRow>)> {
    let (real, attacked) = class_indices(pairs);
    if real.len() < 2 || attacked.len() < 2 {
        return Err(Error::SingleClass);
    }
    let (model, stage1) = stage1_with_history(model, pairs, cfg)?;
    let (model, stage2) = stage2_with_history(model, pairs, cfg)?;
    let mut rows = Vec::with_capacity(stage1.len() + stage2.len());
    for (epoch, loss) in stage1.into_iter().enumerate() {
        rows.push(ShieldLossRow { stage: "triplet", epoch, loss });
    }
    for (epoch, loss) in stage2.into_iter().enumerate() {
        rows.push(ShieldLossRow { stage: "head", epoch, loss });
    }
    Ok((model, rows))
}

/// Probability that a clip is real under the paired defense.
pub fn shield_detect(model: &ShieldModel, defense: &GanBundle, clip: &Waveform) -> Result<f64> {
    let payload = paired_payload(defense, clip)?;
    let pair = PairedClip {
        payload,
        pair_label: PairLabel::RealPair, // placeholder, unused by embed
        defense_gen_id: defense.gen_id,
    };
    let e = embed(model, &pair)?;
    let out = model.head.infer(&Tensor::from_vec(&[model.embed_dim], e));
    Ok(softmax2(&[out.data[0], out.data[1]])[1])
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean silhouette score of embeddings grouped by label (Euclidean).
pub fn silhouette(embeddings: &[EmbeddingVec], labels: &[PairLabel]) -> Result<f64> {
    if embeddings.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: embeddings.len(),
            got: labels.len(),
        });
    }
    let n = embeddings.len();
    let reals: Vec<usize> = (0..n).filter(|&i| labels[i] == PairLabel::RealPair).collect();
    let attacked: Vec<usize> = (0..n)
        .filter(|&i| labels[i] == PairLabel::AttackedPair)
        .collect();
    if reals.len() < 2 || attacked.len() < 2 {
        return Err(Error::SingleClass);
    }
    let mean_dist = |i: usize, members: &[usize], exclude_self: bool| -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for &j in members {
            if exclude_self && j == i {
                continue;
            }
            sum += euclidean(&embeddings[i], &embeddings[j]);
            count += 1;
        }
        sum / count as f64
    };
    let mut total = 0.0;
    for i in 0..n {
        let (own, other) = if labels[i] == PairLabel::RealPair {
            (&reals, &attacked)
        } else {
            (&attacked, &reals)
        };
        let a = mean_dist(i, own, true);
        let b = mean_dist(i, other, false);
        let denom = a.max(b);
        total += if denom == 0.0 { 0.0 } else { (b - a) / denom };
    }
    Ok(total / n as f64)
}

/// Mean pairwise distances (intra-class, inter-class), Euclidean.
pub fn intra_inter_distances(
    embeddings: &[EmbeddingVec],
    labels: &[PairLabel],
) -> Result<(f64, f64)> {
    if embeddings.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: embeddings.len(),
            got: labels.len(),
        });
    }
    let n = embeddings.len();
    let (mut intra, mut n_intra) = (0.0, 0usize);
    let (mut inter, mut n_inter) = (0.0, 0usize);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = euclidean(&embeddings[i], &embeddings[j]);
            if labels[i] == labels[j] {
                intra += d;
                n_intra += 1;
            } else {
                inter += d;
                n_inter += 1;
            }
        }
    }
    if n_intra == 0 || n_inter == 0 {
        return Err(Error::SingleClass);
    }
    Ok((intra / n_intra as f64, inter / n_inter as f64))
}

/// Write embeddings as CSV `clip_id,pair_label,e_0,...,e_{E-1}`.
pub fn export_embeddings(
    model: &ShieldModel,
    pairs: &[PairedClip],
    ids: &[String],
    path: &Path,
) -> Result<()> {
    if pairs.len() != ids.len() {
        return Err(Error::LengthMismatch {
            expected: pairs.len(),
            got: ids.len(),
        });
    }
    let mut out = String::from("clip_id,pair_label");
    for e in 0..model.embed_dim {
        out.push_str(&format!(",e_{e}"));
    }
    out.push('\n');
    for (pair, id) in pairs.iter().zip(ids.iter()) {
        let emb = embed(model, pair)?;
        out.push_str(&format!("{id},{}", pair.pair_label.as_str()));
        for v in emb {
            out.push_str(&format!(",{v:.5e}"));
        }
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}
