//! Toy deepfake detectors (attack victims and surrogates): a raw-waveform
//! CNN and a log-mel-spectrogram CNN, plus a supervised cross-entropy trainer.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{Label, LabeledClip, Waveform, CLIP_LEN, SAMPLE_RATE_HZ};
use crate::dsp::MelAnalyzer;
use crate::error::{Error, Result};
use crate::nn::{
    flat_params, param_count, set_flat_params, softmax2, zero_grad, Adam, AvgPool1d, AvgPool2d,
    ChannelNorm, Conv1d, Conv2d, GlobalAvgPool, GlobalRmsNorm, Layer, LeakyRelu, Linear,
    Sequential, Tensor,
};

/// Clamp for every log-of-probability in the project.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DetectorArch {
    RawCnn,
    SpecCnn,
}

impl DetectorArch {
    pub fn as_str(self) -> &'static str {
        match self {
            DetectorArch::RawCnn => "raw_cnn",
            DetectorArch::SpecCnn => "spec_cnn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "raw_cnn" => Some(DetectorArch::RawCnn),
            "spec_cnn" => Some(DetectorArch::SpecCnn),
            _ => None,
        }
    }
}

/// Shared training hyperparameters (Adam is the only optimizer).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-4,
            seed: 0,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Class convention, fixed project-wide: 0 = fake/attacked, 1 = real.
pub fn class_index(label: Label) -> usize {
    match label {
        Label::Real => 1,
        Label::Fake | Label::Attacked => 0,
    }
}

pub struct DetectorModel {
    pub arch: DetectorArch,
    pub seed: u64,
    pub input_len: usize,
    pub net: Sequential,
    mel: Option<MelAnalyzer>,
}

impl DetectorModel {
    pub fn param_count(&self) -> usize {
        param_count(&self.net)
    }

    pub fn params(&self) -> Vec<f64> {
        flat_params(&self.net)
    }

    pub fn set_params(&mut self, values: &[f64]) {
        set_flat_params(&mut self.net, values);
    }

    fn check_len(&self, w: &Waveform) -> Result<()> {
        if w.len() != self.input_len {
            return Err(Error::LengthMismatch {
                expected: self.input_len,
                got: w.len(),
            });
        }
        Ok(())
    }

    fn to_input(&self, w: &Waveform) -> Result<Tensor> {
        match self.arch {
            DetectorArch::RawCnn => Ok(Tensor::from_signal(&w.samples)),
            DetectorArch::SpecCnn => {
                let mel = self.mel.as_ref().expect("spec arch carries an analyzer");
                let s = mel.transform(w)?;
                Ok(Tensor::from_vec(&[1, s.n_mels, s.frames], s.bins))
            }
        }
    }

    /// Pure inference: class logits `[fake, real]`.
    pub fn logits(&self, w: &Waveform) -> Result<[f64; 2]> {
        self.check_len(w)?;
        let out = self.net.infer(&self.to_input(w)?);
        Ok([out.data[0], out.data[1]])
    }

    /// Training-path forward from a waveform, caching for `backward_to_input`.
    pub fn forward_train(&mut self, w: &Waveform) -> Result<[f64; 2]> {
        self.check_len(w)?;
        let input = match self.arch {
            DetectorArch::RawCnn => Tensor::from_signal(&w.samples),
            DetectorArch::SpecCnn => {
                let mel = self.mel.as_mut().expect("spec arch carries an analyzer");
                let s = mel.forward_train(w)?;
                Tensor::from_vec(&[1, s.n_mels, s.frames], s.bins)
            }
        };
        let out = self.net.forward_train(&input);
        Ok([out.data[0], out.data[1]])
    }

    /// Backprop logit gradients all the way to d loss / d waveform samples.
    pub fn backward_to_input(&mut self, grad_logits: [f64; 2]) -> Vec<f64> {
        let grad = Tensor::from_vec(&[2], grad_logits.to_vec());
        let gin = self.net.backward(&grad);
        match self.arch {
            DetectorArch::RawCnn => gin.data,
            DetectorArch::SpecCnn => {
                let mel = self.mel.as_mut().expect("spec arch carries an analyzer");
                mel.backward(&gin.data)
            }
        }
    }

    /// Forward on a precomputed input tensor (training fast path).
    fn net_forward_train(&mut self, input: &Tensor) -> [f64; 2] {
        let out = self.net.forward_train(input);
        [out.data[0], out.data[1]]
    }

    fn net_backward(&mut self, grad_logits: [f64; 2]) {
        self.net.backward(&Tensor::from_vec(&[2], grad_logits.to_vec()));
    }
}

/// Build a standard full-size detector, deterministically from the seed.
pub fn build_detector(arch: DetectorArch, seed: u64) -> DetectorModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = match arch {
        DetectorArch::RawCnn => raw_net(&[8, 16, 32, 32], &mut rng),
        DetectorArch::SpecCnn => spec_net(&[8, 16, 32, 32], &mut rng),
    };
    let mel = match arch {
        DetectorArch::RawCnn => None,
        DetectorArch::SpecCnn => Some(MelAnalyzer::new(
            crate::dsp::WIN,
            crate::dsp::HOP,
            crate::dsp::N_MELS,
            SAMPLE_RATE_HZ,
        )),
    };
    DetectorModel {
        arch,
        seed,
        input_len: CLIP_LEN,
        net,
        mel,
    }
}

/// A ≤ 1k-parameter instance on short clips, for gradient oracles.
pub fn build_tiny_detector(arch: DetectorArch, seed: u64) -> DetectorModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match arch {
        DetectorArch::RawCnn => {
            let net = Sequential::new(vec![
                Box::new(Conv1d::new(1, 2, 9, 4, 4, &mut rng)),
                Box::new(GlobalRmsNorm::new(2)),
                Box::new(LeakyRelu::relu()),
                Box::new(AvgPool1d::new(2)),
                Box::new(Conv1d::new(2, 4, 5, 2, 2, &mut rng)),
                Box::new(GlobalRmsNorm::new(4)),
                Box::new(LeakyRelu::relu()),
                Box::new(GlobalAvgPool::new()),
                Box::new(Linear::new(4, 2, &mut rng)),
            ]);
            DetectorModel {
                arch,
                seed,
                input_len: 256,
                net,
                mel: None,
            }
        }
        DetectorArch::SpecCnn => {
            let net = Sequential::new(vec![
                Box::new(Conv2d::new(1, 2, 3, 1, 1, &mut rng)),
                Box::new(ChannelNorm::new(2)),
                Box::new(LeakyRelu::relu()),
                Box::new(AvgPool2d::new(2)),
                Box::new(GlobalAvgPool::new()),
                Box::new(Linear::new(2, 2, &mut rng)),
            ]);
            DetectorModel {
                arch,
                seed,
                input_len: 256,
                net,
                mel: Some(MelAnalyzer::new(64, 32, 8, SAMPLE_RATE_HZ)),
            }
        }
    }
}

fn raw_net(widths: &[usize; 4], rng: &mut ChaCha8Rng) -> Sequential {
    // 16000 -> 4000 -> 1000 -> 250 -> 125 -> 63 -> 31 -> 16 -> 8 -> GAP
    // Global-RMS norm (not per-channel) so per-clip band energies — the main
    // artifact signature in the raw domain — survive normalization.
    let [c1, c2, c3, c4] = *widths;
    Sequential::new(vec![
        Box::new(Conv1d::new(1, c1, 9, 4, 4, rng)),
        Box::new(GlobalRmsNorm::new(c1)),
        Box::new(LeakyRelu::relu()),
        Box::new(AvgPool1d::new(4)),
        Box::new(Conv1d::new(c1, c2, 9, 4, 4, rng)),
        Box::new(GlobalRmsNorm::new(c2)),
        Box::new(LeakyRelu::relu()),
        Box::new(AvgPool1d::new(2)),
        Box::new(Conv1d::new(c2, c3, 5, 2, 2, rng)),
        Box::new(GlobalRmsNorm::new(c3)),
        Box::new(LeakyRelu::relu()),
        Box::new(AvgPool1d::new(2)),
        Box::new(Conv1d::new(c3, c4, 5, 2, 2, rng)),
        Box::new(GlobalRmsNorm::new(c4)),
        Box::new(LeakyRelu::relu()),
        Box::new(AvgPool1d::new(2)),
        Box::new(GlobalAvgPool::new()),
        Box::new(Linear::new(c4, 2, rng)),
    ])
}

fn spec_net(widths: &[usize; 4], rng: &mut ChaCha8Rng) -> Sequential {
    // 64x59 -> 32x29 -> 16x14 -> 8x7 -> 4x3 -> GAP
    let [c1, c2, c3, c4] = *widths;
    Sequential::new(vec![
        Box::new(Conv2d::new(1, c1, 3, 1, 1, rng)),
        Box::new(ChannelNorm::new(c1)),
        Box::new(LeakyRelu::relu()),
        Box::new(AvgPool2d::new(2)),
        Box::new(Conv2d::new(c1, c2, 3, 1, 1, rng)),
        Box::new(ChannelNorm::new(c2)),
        Box::new(LeakyRelu::relu()),
        Box::new(AvgPool2d::new(2)),
        Box::new(Conv2d::new(c2, c3, 3, 1, 1, rng)),
        Box::new(ChannelNorm::new(c3)),
        Box::new(LeakyRelu::relu()),
        Box::new(AvgPool2d::new(2)),
        Box::new(Conv2d::new(c3, c4, 3, 1, 1, rng)),
        Box::new(ChannelNorm::new(c4)),
        Box::new(LeakyRelu::relu()),
        Box::new(AvgPool2d::new(2)),
        Box::new(GlobalAvgPool::new()),
        Box::new(Linear::new(c4, 2, rng)),
    ])
}

/// Cross-entropy of the true class; returns (loss, d loss / d logits).
pub fn cross_entropy(logits: [f64; 2], class: usize) -> (f64, [f64; 2]) {
    let p = softmax2(&logits);
    let loss = -p[class].max(PROB_EPS).ln();
    let mut grad = [p[0], p[1]];
    grad[class] -= 1.0;
    (loss, grad)
}

/// Supervised training with Adam; deterministic for a fixed config.
pub fn train_detector(
    model: DetectorModel,
    data: &[LabeledClip],
    cfg: &TrainConfig,
) -> Result<DetectorModel> {
    train_detector_with_history(model, data, cfg).map(|(model, _)| model)
}

/// Like [`train_detector`], also returning the mean training loss per epoch.
pub fn train_detector_with_history(
    mut model: DetectorModel,
    data: &[LabeledClip],
    cfg: &TrainConfig,
) -> Result<(DetectorModel, Vec<f64>)> {
    cfg.validate()?;
    let classes: Vec<usize> = data.iter().map(|c| class_index(c.label)).collect();
    if classes.iter().all(|&c| c == 0) || classes.iter().all(|&c| c == 1) {
        return Err(Error::SingleClass);
    }
    // Precompute network inputs once; the mel front end has no parameters.
    let inputs: Vec<Tensor> = data
        .iter()
        .map(|c| model.to_input(&c.waveform))
        .collect::<Result<_>>()?;

    let mut opt = Adam::new(&model.net, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            zero_grad(&mut model.net);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let logits = model.net_forward_train(&inputs[i]);
                let (loss, mut grad) = cross_entropy(logits, classes[i]);
                grad[0] *= scale;
                grad[1] *= scale;
                model.net_backward(grad);
                epoch_loss += loss;
            }
            opt.step(&mut model.net);
        }
        let mean_ce = epoch_loss / data.len() as f64;
        history.push(mean_ce);
        log::debug!(
            "detector {} epoch {epoch}: mean ce {mean_ce:.4}",
            model.arch.as_str(),
        );
    }
    Ok((model, history))
}

/// Probability that the clip is real; decision threshold is 0.5.
pub fn detect(model: &DetectorModel, clip: &Waveform) -> Result<f64> {
    let logits = model.logits(clip)?;
    Ok(softmax2(&logits)[1])
}

/// Fraction of clips whose thresholded decision matches the label.
pub fn accuracy(model: &DetectorModel, data: &[LabeledClip]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput("accuracy"));
    }
    let mut correct = 0usize;
    for clip in data {
        let p_real = detect(model, &clip.waveform)?;
        let predicted_real = p_real > 0.5;
        if predicted_real == (class_index(clip.label) == 1) {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{synth_fake, synth_real};
    use rand::Rng;

    fn tiny_clip(seed: u64, len: usize) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new(
            (0..len).map(|_| rng.gen_range(-0.9..0.9)).collect(),
            SAMPLE_RATE_HZ,
        )
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        for arch in [DetectorArch::RawCnn, DetectorArch::SpecCnn] {
            let a = build_detector(arch, 1);
            let b = build_detector(arch, 1);
            let c = build_detector(arch, 2);
            assert_eq!(a.params(), b.params());
            assert_ne!(a.params(), c.params());
        }
    }

    #[test]
    fn parameter_budget_respected() {
        for arch in [DetectorArch::RawCnn, DetectorArch::SpecCnn] {
            let model = build_detector(arch, 0);
            assert!(
                model.param_count() <= 100_000,
                "{}: {} params",
                arch.as_str(),
                model.param_count()
            );
        }
        for arch in [DetectorArch::RawCnn, DetectorArch::SpecCnn] {
            let tiny = build_tiny_detector(arch, 0);
            assert!(
                tiny.param_count() <= 1000,
                "tiny {}: {} params",
                arch.as_str(),
                tiny.param_count()
            );
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        let real = synth_real(2, 1).remove(0);
        for arch in [DetectorArch::RawCnn, DetectorArch::SpecCnn] {
            let model = build_detector(arch, 3);
            let p_real = detect(&model, &real.waveform).unwrap();
            let logits = model.logits(&real.waveform).unwrap();
            let p = softmax2(&logits);
            assert!(p_real > 0.0 && p_real < 1.0);
            assert!((p[0] + p[1] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn wrong_length_is_rejected() {
        let model = build_detector(DetectorArch::RawCnn, 0);
        let short = tiny_clip(0, 100);
        assert!(matches!(
            detect(&model, &short),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn single_class_training_is_rejected() {
        let reals = synth_real(1, 4);
        let model = build_detector(DetectorArch::RawCnn, 0);
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train_detector(model, &reals, &cfg),
            Err(Error::SingleClass)
        ));
    }

    #[test]
    fn zero_epochs_leaves_parameters_unchanged() {
        let mut data = synth_real(1, 2);
        data.extend(synth_fake(1, 2));
        let model = build_detector(DetectorArch::RawCnn, 0);
        let before = model.params();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let model = train_detector(model, &data, &cfg).unwrap();
        assert_eq!(model.params(), before);
    }

    #[test]
    fn training_is_deterministic() {
        let mut data = synth_real(1, 8);
        data.extend(synth_fake(1, 8));
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 1e-3,
            seed: 9,
            optimizer: OptimizerKind::Adam,
        };
        let run = || {
            let model = build_detector(DetectorArch::RawCnn, 5);
            train_detector(model, &data, &cfg).unwrap().params()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn accuracy_matches_brute_force_recount() {
        let mut data = synth_real(4, 6);
        data.extend(synth_fake(4, 6));
        let model = build_detector(DetectorArch::RawCnn, 1);
        let acc = accuracy(&model, &data).unwrap();
        // Independent tally, one clip at a time.
        let mut correct = 0;
        for clip in &data {
            let p = detect(&model, &clip.waveform).unwrap();
            let says_real = p > 0.5;
            let is_real = clip.label == Label::Real;
            if says_real == is_real {
                correct += 1;
            }
        }
        assert!((acc - correct as f64 / data.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn detector_is_locally_smooth_in_its_input() {
        let model = build_detector(DetectorArch::RawCnn, 7);
        let clip = synth_real(7, 1).remove(0).waveform;
        let p0 = detect(&model, &clip).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let nudged = Waveform::new(
            clip.samples
                .iter()
                .map(|&s| s + rng.gen_range(-9e-8..9e-8))
                .collect(),
            SAMPLE_RATE_HZ,
        );
        let p1 = detect(&model, &nudged).unwrap();
        assert!(
            (p0 - p1).abs() < 1e-3,
            "tiny perturbation moved p by {}",
            (p0 - p1).abs()
        );
    }

    #[test]
    fn detector_ce_gradients_match_finite_differences() {
        // Tiny instances keep the full-parameter sweep under a second per arch.
        for arch in [DetectorArch::RawCnn, DetectorArch::SpecCnn] {
            let mut model = build_tiny_detector(arch, 21);
            let clip = tiny_clip(22, model.input_len);
            let loss_of = |m: &mut DetectorModel| -> f64 {
                let logits = m.forward_train(&clip).unwrap();
                let (loss, grad) = cross_entropy(logits, 1);
                m.backward_to_input(grad);
                loss
            };
            zero_grad(&mut model.net);
            let _ = loss_of(&mut model);
            let analytic = crate::nn::flat_grads(&model.net);
            let theta = model.params();
            let step = 1e-5;
            let mut worst = 0.0f64;
            for i in 0..theta.len() {
                let mut probe = theta.clone();
                probe[i] = theta[i] + step;
                model.set_params(&probe);
                zero_grad(&mut model.net);
                let lp = loss_of(&mut model);
                probe[i] = theta[i] - step;
                model.set_params(&probe);
                zero_grad(&mut model.net);
                let lm = loss_of(&mut model);
                let fd = (lp - lm) / (2.0 * step);
                let err = (analytic[i] - fd).abs() / (analytic[i].abs() + fd.abs()).max(1e-5);
                worst = worst.max(err);
            }
            model.set_params(&theta);
            assert!(
                worst <= 1e-4,
                "{}: max rel grad err {worst:.3e}",
                arch.as_str()
            );
        }
    }
}
