//! Central-difference gradient verification for any `Layer`.

use super::layers::{flat_grads, flat_params, set_flat_params, zero_grad, Layer};

/// Compare analytic parameter gradients against central finite differences.
///
/// `loss` must run a full forward/backward pass (accumulating gradients) and
/// return the scalar loss; it is also used value-only during perturbation.
/// Returns the worst relative error over all parameters, where the error for
/// parameter i is `|a_i - f_i| / max(1e-5, |a_i| + |f_i|)`.
pub fn max_rel_grad_err<L: Layer + ?Sized>(
    model: &mut L,
    step: f64,
    loss: &mut dyn FnMut(&mut L) -> f64,
) -> f64 {
    zero_grad(model);
    let _ = loss(model);
    let analytic = flat_grads(model);
    let theta = flat_params(model);
    let mut worst = 0.0_f64;
    let mut probe = theta.clone();
    for i in 0..theta.len() {
        probe[i] = theta[i] + step;
        set_flat_params(model, &probe);
        let l_plus = loss(model);
        probe[i] = theta[i] - step;
        set_flat_params(model, &probe);
        let l_minus = loss(model);
        probe[i] = theta[i];
        let fd = (l_plus - l_minus) / (2.0 * step);
        let a = analytic[i];
        let err = (a - fd).abs() / (a.abs() + fd.abs()).max(1e-5);
        if err > worst {
            worst = err;
        }
    }
    set_flat_params(model, &theta);
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::*;
    use crate::nn::tensor::Tensor;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Scalar loss: sum of squared outputs (smooth, exercises all outputs).
    fn sq_loss<L: Layer>(model: &mut L, x: &Tensor) -> f64 {
        let y = model.forward_train(x);
        let grad = Tensor::from_vec(&y.shape, y.data.iter().map(|&v| 2.0 * v).collect());
        model.backward(&grad);
        y.data.iter().map(|&v| v * v).sum()
    }

    fn check<L: Layer>(model: &mut L, x: &Tensor) {
        let err = max_rel_grad_err(model, STEP, &mut |m| sq_loss(m, x));
        assert!(err <= TOL, "gradient mismatch: max rel err {err:.3e}");
    }

    #[test]
    fn conv1d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&[2, 17], &mut rng);
        for (stride, pad) in [(1, 0), (1, 2), (2, 1), (3, 2)] {
            let mut layer = Conv1d::new(2, 3, 5, stride, pad, &mut rng);
            check(&mut layer, &x);
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_tensor(&[2, 7, 9], &mut rng);
        for (stride, pad) in [(1, 1), (2, 1)] {
            let mut layer = Conv2d::new(2, 3, 3, stride, pad, &mut rng);
            check(&mut layer, &x);
        }
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = rand_tensor(&[6], &mut rng);
        let mut layer = Linear::new(6, 4, &mut rng);
        check(&mut layer, &x);
    }

    #[test]
    fn channel_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = rand_tensor(&[3, 11], &mut rng);
        let mut layer = ChannelNorm::new(3);
        // Nudge gamma/beta off their init so gradients are generic.
        layer.visit_mut(&mut |p, _| {
            for v in p.iter_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        });
        check(&mut layer, &x);
    }

    #[test]
    fn global_rms_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let x = rand_tensor(&[3, 11], &mut rng);
        let mut layer = GlobalRmsNorm::new(3);
        layer.visit_mut(&mut |p, _| {
            for v in p.iter_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        });
        check(&mut layer, &x);
    }

    #[test]
    fn stacked_network_gradients_match_finite_differences() {
        // A miniature of the real blocks: conv -> norm -> leaky relu ->
        // pool -> conv -> tanh, checked end to end through the chain rule.
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = rand_tensor(&[1, 24], &mut rng);
        let mut net = Sequential::new(vec![
            Box::new(Conv1d::new(1, 3, 4, 2, 1, &mut rng)),
            Box::new(ChannelNorm::new(3)),
            Box::new(LeakyRelu::new(0.2)),
            Box::new(AvgPool1d::new(2)),
            Box::new(Conv1d::new(3, 2, 3, 1, 1, &mut rng)),
            Box::new(Tanh::new()),
        ]);
        check(&mut net, &x);
    }

    #[test]
    fn upsample_and_sigmoid_network_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = rand_tensor(&[2, 6], &mut rng);
        let mut net = Sequential::new(vec![
            Box::new(Upsample1d::new(3)),
            Box::new(Conv1d::new(2, 2, 3, 1, 1, &mut rng)),
            Box::new(Sigmoid::new()),
            Box::new(GlobalAvgPool::new()),
            Box::new(Linear::new(2, 2, &mut rng)),
        ]);
        check(&mut net, &x);
    }

    #[test]
    fn conv2d_pool_network_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = rand_tensor(&[1, 8, 10], &mut rng);
        let mut net = Sequential::new(vec![
            Box::new(Conv2d::new(1, 2, 3, 1, 1, &mut rng)),
            Box::new(ChannelNorm::new(2)),
            Box::new(LeakyRelu::relu()),
            Box::new(AvgPool2d::new(2)),
            Box::new(GlobalAvgPool::new()),
            Box::new(Linear::new(2, 3, &mut rng)),
        ]);
        check(&mut net, &x);
    }

    #[test]
    fn infer_matches_forward_train() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let x = rand_tensor(&[1, 20], &mut rng);
        let mut net = Sequential::new(vec![
            Box::new(Conv1d::new(1, 4, 5, 2, 2, &mut rng)),
            Box::new(ChannelNorm::new(4)),
            Box::new(LeakyRelu::new(0.2)),
            Box::new(Conv1d::new(4, 1, 3, 1, 1, &mut rng)),
            Box::new(Tanh::new()),
        ]);
        let y_train = net.forward_train(&x);
        let y_infer = net.infer(&x);
        assert_eq!(y_train.shape, y_infer.shape);
        for (a, b) in y_train.data.iter().zip(y_infer.data.iter()) {
            assert_eq!(a, b, "train and infer paths disagree");
        }
    }

    #[test]
    fn adam_step_decreases_simple_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x = rand_tensor(&[5], &mut rng);
        let mut layer = Linear::new(5, 3, &mut rng);
        let mut opt = crate::nn::adam::Adam::new(&layer, 1e-2);
        let mut last = f64::INFINITY;
        for _ in 0..50 {
            zero_grad(&mut layer);
            let loss = sq_loss(&mut layer, &x);
            opt.step(&mut layer);
            last = loss;
        }
        zero_grad(&mut layer);
        let final_loss = sq_loss(&mut layer, &x);
        assert!(
            final_loss < 1e-2 && final_loss <= last,
            "optimizer failed to shrink loss: {final_loss}"
        );
    }
}
