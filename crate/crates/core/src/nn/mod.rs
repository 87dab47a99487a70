//! Minimal f64 neural-net engine: tensors, layers with hand-written
//! backward passes, Adam, and finite-difference gradient verification.

pub mod adam;
pub mod gradcheck;
pub mod layers;
pub mod tensor;

pub use adam::Adam;
pub use gradcheck::max_rel_grad_err;
pub use layers::{
    conv1d_out_len, flat_grads, flat_params, param_count, set_flat_params, zero_grad, AvgPool1d,
    AvgPool2d, ChannelNorm, Conv1d, Conv2d, GlobalAvgPool, GlobalRmsNorm, Layer, LeakyRelu,
    Linear, Sequential, Sigmoid, Tanh, Upsample1d,
};
pub use tensor::{concat_channels, split_channels, Tensor};

/// Numerically stable two-class softmax over `[logit_fake, logit_real]`.
pub fn softmax2(logits: &[f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let z = e0 + e1;
    [e0 / z, e1 / z]
}
