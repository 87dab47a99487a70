//! Min-max attack training: alternating discriminator and generator steps.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{LabeledClip, Waveform};
use crate::detectors::{DetectorModel, TrainConfig, PROB_EPS};
use crate::error::{Error, Result};
use crate::nn::{softmax2, zero_grad, Adam, Layer, Sequential, Tensor};

use super::losses::{adversarial_loss, discriminator_loss, DLossForm};
use super::nets::Generator;
use super::GanBundle;

/// Per-step loss record; `g_loss` is always the exact sum p + a + s.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackLossReport {
    pub epoch: usize,
    pub step: usize,
    pub p_loss: f64,
    pub a_loss: f64,
    pub s_loss: f64,
    pub g_loss: f64,
    pub d_loss: f64,
}

impl AttackLossReport {
    pub fn new(epoch: usize, step: usize, p_loss: f64, a_loss: f64, s_loss: f64, d_loss: f64) -> Self {
        AttackLossReport {
            epoch,
            step,
            p_loss,
            a_loss,
            s_loss,
            g_loss: p_loss + a_loss + s_loss,
            d_loss,
        }
    }
}

/// Write the loss history as `epoch,step,p_loss,a_loss,s_loss,g_loss,d_loss`.
pub fn write_loss_history(path: &Path, reports: &[AttackLossReport]) -> Result<()> {
    let mut out = String::from("epoch,step,p_loss,a_loss,s_loss,g_loss,d_loss\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.step, r.p_loss, r.a_loss, r.s_loss, r.g_loss, r.d_loss
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn ln_clamped(x: f64) -> f64 {
    x.clamp(PROB_EPS, 1.0).ln()
}

/// One generator-side pass on a single fake clip: forward through the
/// generator, compute (perceptual, adversarial, surrogate) losses, and
/// backpropagate their combined sample gradient scaled by `scale` into the
/// generator's parameter gradients. Discriminator and surrogate parameters
/// receive gradients too but are never stepped by the caller's generator
/// optimizer.
pub fn generator_step(
    gen: &mut Generator,
    disc: &mut Sequential,
    surrogates: &mut [DetectorModel],
    fake: &Waveform,
    scale: f64,
) -> Result<(f64, f64, f64)> {
    let len = fake.len();
    let attacked = gen.forward_train_samples(&fake.samples);
    let attacked_w = Waveform::new(attacked.clone(), fake.sample_rate_hz);

    // Perceptual: mean |fake - attacked|.
    let mut p = 0.0;
    let mut gy = vec![0.0; len];
    for i in 0..len {
        let diff = attacked[i] - fake.samples[i];
        p += diff.abs();
        gy[i] = diff.signum() / len as f64;
    }
    p /= len as f64;

    // Adversarial: log(1 - D(attacked)), pushed toward D(attacked) = 1.
    let d_out = disc.forward_train(&Tensor::from_signal(&attacked)).data[0];
    let a = adversarial_loss(d_out);
    let da = if 1.0 - d_out > PROB_EPS {
        -1.0 / (1.0 - d_out)
    } else {
        0.0
    };
    let ga = disc.backward(&Tensor::from_vec(&[1], vec![da]));
    for i in 0..len {
        gy[i] += ga.data[i];
    }

    // Surrogate: mean cross-entropy toward the real class. The reported
    // loss is log-clamped for finite values, but the gradient is the exact
    // softmax cross-entropy gradient: a confident surrogate (p_real below
    // the clamp) must still produce a training signal.
    let mut s = 0.0;
    let k = surrogates.len() as f64;
    for surr in surrogates.iter_mut() {
        let logits = surr.forward_train(&attacked_w)?;
        let probs = softmax2(&logits);
        s += -ln_clamped(probs[1]) / k;
        let grad = [probs[0] / k, (probs[1] - 1.0) / k];
        let gs = surr.backward_to_input(grad);
        for i in 0..len {
            gy[i] += gs[i];
        }
    }

    for g in gy.iter_mut() {
        *g *= scale;
    }
    gen.backward_samples(&gy);
    Ok((p, a, s))
}

/// Train the generator/discriminator pair against frozen surrogates.
///
/// Per batch: one discriminator step on (real, attacked) pairs, then one
/// generator step on the combined perceptual + adversarial + surrogate
/// loss. Surrogate parameters are never updated.
pub fn train_attack(
    mut gan: GanBundle,
    reals: &[LabeledClip],
    fakes: &[LabeledClip],
    surrogates: &mut [DetectorModel],
    cfg: &TrainConfig,
    d_loss_form: DLossForm,
) -> Result<(GanBundle, Vec<AttackLossReport>)> {
    cfg.validate()?;
    if reals.is_empty() {
        return Err(Error::EmptyInput("attack training real clips"));
    }
    if fakes.is_empty() {
        return Err(Error::EmptyInput("attack training fake clips"));
    }
    if surrogates.is_empty() {
        return Err(Error::EmptyInput("surrogate ensemble"));
    }
    for clip in reals.iter().chain(fakes.iter()) {
        if clip.waveform.len() != gan.input_len {
            return Err(Error::LengthMismatch {
                expected: gan.input_len,
                got: clip.waveform.len(),
            });
        }
    }

    let mut opt_g = Adam::new(&gan.gen, cfg.learning_rate);
    let mut opt_d = Adam::new(&gan.disc, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..fakes.len()).collect();
    let mut reports = Vec::new();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let scale = 1.0 / batch.len() as f64;

            // Discriminator step: real clips toward 1, attacked toward 0.
            zero_grad(&mut gan.disc);
            let mut d_sum = 0.0;
            for &i in batch {
                let attacked = gan.gen.infer_samples(&fakes[i].waveform.samples);
                let real = &reals[rng.gen_range(0..reals.len())];

                let d_r = gan
                    .disc
                    .forward_train(&Tensor::from_signal(&real.waveform.samples))
                    .data[0];
                let g_r = match d_loss_form {
                    DLossForm::Standard => {
                        if d_r > PROB_EPS {
                            -1.0 / d_r
                        } else {
                            0.0
                        }
                    }
                    DLossForm::AsPrinted => {
                        if 1.0 - d_r > PROB_EPS {
                            -1.0 / (1.0 - d_r)
                        } else {
                            0.0
                        }
                    }
                };
                gan.disc
                    .backward(&Tensor::from_vec(&[1], vec![g_r * scale]));

                let d_a = gan.disc.forward_train(&Tensor::from_signal(&attacked)).data[0];
                let g_a = if 1.0 - d_a > PROB_EPS {
                    match d_loss_form {
                        DLossForm::Standard => 1.0 / (1.0 - d_a),
                        DLossForm::AsPrinted => -1.0 / (1.0 - d_a),
                    }
                } else {
                    0.0
                };
                gan.disc
                    .backward(&Tensor::from_vec(&[1], vec![g_a * scale]));

                d_sum += discriminator_loss(d_r, d_a, d_loss_form);
            }
            opt_d.step(&mut gan.disc);

            // Generator step against the just-updated, now-fixed discriminator.
            zero_grad(&mut gan.gen);
            let (mut p_sum, mut a_sum, mut s_sum) = (0.0, 0.0, 0.0);
            for &i in batch {
                let (p, a, s) = generator_step(
                    &mut gan.gen,
                    &mut gan.disc,
                    surrogates,
                    &fakes[i].waveform,
                    scale,
                )?;
                p_sum += p;
                a_sum += a;
                s_sum += s;
            }
            opt_g.step(&mut gan.gen);

            let n = batch.len() as f64;
            reports.push(AttackLossReport::new(
                epoch,
                step,
                p_sum / n,
                a_sum / n,
                s_sum / n,
                d_sum / n,
            ));
        }
        if let Some(last) = reports.last() {
            log::debug!(
                "attack {} epoch {epoch}: g {:.4} (p {:.4} a {:.4} s {:.4}) d {:.4}",
                gan.gen_id.as_str(),
                last.g_loss,
                last.p_loss,
                last.a_loss,
                last.s_loss,
                last.d_loss
            );
        }
    }
    Ok((gan, reports))
}
