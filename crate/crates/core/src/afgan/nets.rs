//! Attack generator architectures and the shared discriminator recipe.
//!
//! All generators compute a residual in atanh space and then pass through a
//! fixed band-limiting stage: output = tanh(S(atanh(clamp(input)) +
//! net(input))) where S is a shared low-pass FIR. The trainable head is
//! zero-initialized, so an untrained generator reduces to the band-limit
//! alone, outputs always stay in (-1, 1), and re-applying a generator to its
//! own output changes it far less than processing fresh audio does.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::nn::{
    concat_channels, split_channels, ChannelNorm, Conv1d, GlobalAvgPool, Layer, LeakyRelu,
    Linear, Sequential, Sigmoid, Tensor, Upsample1d,
};

/// Margin keeping atanh finite at the [-1, 1] endpoints.
const ATANH_CLAMP: f64 = 1.0 - 1e-4;

/// Cutoff of the fixed output band-limit shared by every generator.
const OUTPUT_CUTOFF_HZ: f64 = 600.0;
const OUTPUT_FILTER_TAPS: usize = 63;

fn down_stage(c_in: usize, c_out: usize, k: usize, s: usize, rng: &mut ChaCha8Rng) -> Sequential {
    // p = (k - s) / 2 keeps output length exactly input / s.
    Sequential::new(vec![
        Box::new(Conv1d::new(c_in, c_out, k, s, (k - s) / 2, rng)),
        Box::new(ChannelNorm::new(c_out)),
        Box::new(LeakyRelu::new(0.2)),
    ])
}

fn up_stage(
    c_in: usize,
    c_out: usize,
    factor: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Sequential {
    Sequential::new(vec![
        Box::new(Upsample1d::new(factor)),
        Box::new(Conv1d::new(c_in, c_out, k, 1, (k - 1) / 2, rng)),
        Box::new(ChannelNorm::new(c_out)),
        Box::new(LeakyRelu::new(0.2)),
    ])
}

fn zeroed_head(c_in: usize, k: usize, rng: &mut ChaCha8Rng) -> Conv1d {
    let mut conv = Conv1d::new(c_in, 1, k, 1, (k - 1) / 2, rng);
    conv.zero_params();
    conv
}

// ---------------------------------------------------------------------------
// G1: U-Net (4 down / 4 up, skip connections)
// ---------------------------------------------------------------------------

pub struct UNet1d {
    downs: Vec<Sequential>,
    ups: Vec<Sequential>,
    final_conv: Conv1d,
    /// Conv output channels of each up stage, for splitting cat gradients.
    up_out_ch: Vec<usize>,
    skips: Option<Vec<Tensor>>,
}

impl UNet1d {
    /// `down_specs`: (c_out, kernel, stride) per encoder stage;
    /// `up_specs`: (c_out, factor, kernel) per decoder stage, mirrored order.
    pub fn new(
        down_specs: &[(usize, usize, usize)],
        up_specs: &[(usize, usize, usize)],
        head_kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let n = down_specs.len();
        assert_eq!(n, up_specs.len(), "encoder/decoder depth mismatch");
        let mut downs = Vec::new();
        let mut c = 1;
        let mut down_ch = Vec::new();
        for &(c_out, k, s) in down_specs {
            downs.push(down_stage(c, c_out, k, s, rng));
            c = c_out;
            down_ch.push(c_out);
        }
        let mut ups = Vec::new();
        let mut up_out_ch = Vec::new();
        let mut c_in = c; // bottleneck channels
        for (i, &(c_out, factor, k)) in up_specs.iter().enumerate() {
            ups.push(up_stage(c_in, c_out, factor, k, rng));
            up_out_ch.push(c_out);
            // next stage consumes this output concatenated with a skip
            c_in = if i + 1 < n {
                c_out + down_ch[n - 2 - i]
            } else {
                c_out
            };
        }
        let head_in = up_out_ch[n - 1];
        UNet1d {
            downs,
            ups,
            final_conv: zeroed_head(head_in, head_kernel, rng),
            up_out_ch,
            skips: None,
        }
    }
}

impl Layer for UNet1d {
    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let n = self.downs.len();
        let mut skips = Vec::with_capacity(n - 1);
        let mut h = x.clone();
        for (i, d) in self.downs.iter_mut().enumerate() {
            h = d.forward_train(&h);
            if i + 1 < n {
                skips.push(h.clone());
            }
        }
        for (i, u) in self.ups.iter_mut().enumerate() {
            if i > 0 {
                h = concat_channels(&h, &skips[n - 1 - i]);
            }
            h = u.forward_train(&h);
        }
        self.skips = Some(skips);
        self.final_conv.forward_train(&h)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let n = self.downs.len();
        let _ = self.skips.take().expect("unet backward without forward");
        let mut gh = self.final_conv.backward(grad);
        let mut gskips: Vec<Option<Tensor>> = (0..n - 1).map(|_| None).collect();
        for i in (0..n).rev() {
            gh = self.ups[i].backward(&gh);
            if i > 0 {
                let (g_up, g_skip) = split_channels(&gh, self.up_out_ch[i - 1]);
                gskips[n - 1 - i] = Some(g_skip);
                gh = g_up;
            }
        }
        for i in (0..n).rev() {
            if i < n - 1 {
                let g_skip = gskips[i].take().expect("skip gradient missing");
                for (a, b) in gh.data.iter_mut().zip(g_skip.data.iter()) {
                    *a += b;
                }
            }
            gh = self.downs[i].backward(&gh);
        }
        gh
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let n = self.downs.len();
        let mut skips = Vec::with_capacity(n - 1);
        let mut h = x.clone();
        for (i, d) in self.downs.iter().enumerate() {
            h = d.infer(&h);
            if i + 1 < n {
                skips.push(h.clone());
            }
        }
        for (i, u) in self.ups.iter().enumerate() {
            if i > 0 {
                h = concat_channels(&h, &skips[n - 1 - i]);
            }
            h = u.infer(&h);
        }
        self.final_conv.infer(&h)
    }

    fn visit(&self, f: &mut dyn FnMut(&[f64], &[f64])) {
        for d in &self.downs {
            d.visit(f);
        }
        for u in &self.ups {
            u.visit(f);
        }
        self.final_conv.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Vec<f64>, &mut Vec<f64>)) {
        for d in &mut self.downs {
            d.visit_mut(f);
        }
        for u in &mut self.ups {
            u.visit_mut(f);
        }
        self.final_conv.visit_mut(f);
    }
}

// ---------------------------------------------------------------------------
// G2: strided encoder-decoder, no skips, seeded latent at the bottleneck
// ---------------------------------------------------------------------------

pub struct Segan1d {
    encs: Vec<Sequential>,
    mid: Sequential,
    decs: Vec<Sequential>,
    final_conv: Conv1d,
    bottleneck_ch: usize,
    latent_ch: usize,
    latent_len: usize,
    latent_seed: u64,
}

impl Segan1d {
    pub fn new(
        enc_specs: &[(usize, usize, usize)],
        dec_specs: &[(usize, usize, usize)],
        latent_ch: usize,
        latent_len: usize,
        head_kernel: usize,
        latent_seed: u64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut encs = Vec::new();
        let mut c = 1;
        for &(c_out, k, s) in enc_specs {
            encs.push(down_stage(c, c_out, k, s, rng));
            c = c_out;
        }
        let bottleneck_ch = c;
        let mid = Sequential::new(vec![
            Box::new(Conv1d::new(c + latent_ch, c, 3, 1, 1, rng)),
            Box::new(ChannelNorm::new(c)),
            Box::new(LeakyRelu::new(0.2)),
        ]);
        let mut decs = Vec::new();
        let mut c_in = c;
        for &(c_out, factor, k) in dec_specs {
            decs.push(up_stage(c_in, c_out, factor, k, rng));
            c_in = c_out;
        }
        Segan1d {
            encs,
            mid,
            decs,
            final_conv: zeroed_head(c_in, head_kernel, rng),
            bottleneck_ch,
            latent_ch,
            latent_len,
            latent_seed,
        }
    }

    /// Deterministic per-clip latent: seeded by a hash of the input samples,
    /// so the generator stays a pure function.
    fn latent_for(&self, x: &Tensor) -> Tensor {
        let mut hasher = Sha256::new();
        for &s in &x.data {
            hasher.update(s.to_le_bytes());
        }
        hasher.update(self.latent_seed.to_le_bytes());
        let digest = hasher.finalize();
        let seed = u64::from_le_bytes(digest[..8].try_into().expect("8-byte slice"));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.latent_ch * self.latent_len;
        Tensor::from_vec(
            &[self.latent_ch, self.latent_len],
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
    }
}

impl Layer for Segan1d {
    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let z = self.latent_for(x);
        let mut h = x.clone();
        for e in self.encs.iter_mut() {
            h = e.forward_train(&h);
        }
        h = self.mid.forward_train(&concat_channels(&h, &z));
        for d in self.decs.iter_mut() {
            h = d.forward_train(&h);
        }
        self.final_conv.forward_train(&h)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mut gh = self.final_conv.backward(grad);
        for d in self.decs.iter_mut().rev() {
            gh = d.backward(&gh);
        }
        let gcat = self.mid.backward(&gh);
        let (mut gh, _gz) = split_channels(&gcat, self.bottleneck_ch);
        for e in self.encs.iter_mut().rev() {
            gh = e.backward(&gh);
        }
        gh
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let z = self.latent_for(x);
        let mut h = x.clone();
        for e in self.encs.iter() {
            h = e.infer(&h);
        }
        h = self.mid.infer(&concat_channels(&h, &z));
        for d in self.decs.iter() {
            h = d.infer(&h);
        }
        self.final_conv.infer(&h)
    }

    fn visit(&self, f: &mut dyn FnMut(&[f64], &[f64])) {
        for e in &self.encs {
            e.visit(f);
        }
        self.mid.visit(f);
        for d in &self.decs {
            d.visit(f);
        }
        self.final_conv.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Vec<f64>, &mut Vec<f64>)) {
        for e in &mut self.encs {
            e.visit_mut(f);
        }
        self.mid.visit_mut(f);
        for d in &mut self.decs {
            d.visit_mut(f);
        }
        self.final_conv.visit_mut(f);
    }
}

// ---------------------------------------------------------------------------
// G3: compact residual stack, no resampling
// ---------------------------------------------------------------------------

pub struct ResStack1d {
    stem: Sequential,
    blocks: Vec<Sequential>,
    final_conv: Conv1d,
}

impl ResStack1d {
    pub fn new(channels: usize, n_blocks: usize, k: usize, head_kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        let stem = Sequential::new(vec![
            Box::new(Conv1d::new(1, channels, k, 1, (k - 1) / 2, rng)),
            Box::new(ChannelNorm::new(channels)),
            Box::new(LeakyRelu::new(0.2)),
        ]);
        let blocks = (0..n_blocks)
            .map(|_| {
                Sequential::new(vec![
                    Box::new(Conv1d::new(channels, channels, k, 1, (k - 1) / 2, rng))
                        as Box<dyn Layer>,
                    Box::new(ChannelNorm::new(channels)),
                    Box::new(LeakyRelu::new(0.2)),
                ])
            })
            .collect();
        ResStack1d {
            stem,
            blocks,
            final_conv: zeroed_head(channels, head_kernel, rng),
        }
    }
}

impl Layer for ResStack1d {
    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let mut h = self.stem.forward_train(x);
        for b in self.blocks.iter_mut() {
            let r = b.forward_train(&h);
            for (hv, rv) in h.data.iter_mut().zip(r.data.iter()) {
                *hv += rv;
            }
        }
        self.final_conv.forward_train(&h)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mut gh = self.final_conv.backward(grad);
        for b in self.blocks.iter_mut().rev() {
            let gr = b.backward(&gh);
            for (gv, rv) in gh.data.iter_mut().zip(gr.data.iter()) {
                *gv += rv;
            }
        }
        self.stem.backward(&gh)
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let mut h = self.stem.infer(x);
        for b in self.blocks.iter() {
            let r = b.infer(&h);
            for (hv, rv) in h.data.iter_mut().zip(r.data.iter()) {
                *hv += rv;
            }
        }
        self.final_conv.infer(&h)
    }

    fn visit(&self, f: &mut dyn FnMut(&[f64], &[f64])) {
        self.stem.visit(f);
        for b in &self.blocks {
            b.visit(f);
        }
        self.final_conv.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Vec<f64>, &mut Vec<f64>)) {
        self.stem.visit_mut(f);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        self.final_conv.visit_mut(f);
    }
}

// ---------------------------------------------------------------------------
// Generator wrapper: residual in atanh space, fixed band-limit, tanh output
// ---------------------------------------------------------------------------

/// Hamming-windowed sinc low-pass, normalized to unit DC gain.
fn output_filter_kernel() -> Vec<f64> {
    let taps = OUTPUT_FILTER_TAPS;
    let center = (taps / 2) as isize;
    let fc = OUTPUT_CUTOFF_HZ / crate::audio::SAMPLE_RATE_HZ as f64;
    let mut h: Vec<f64> = (0..taps)
        .map(|m| {
            let k = m as isize - center;
            let sinc = if k == 0 {
                2.0 * fc
            } else {
                (TAU * fc * k as f64).sin() / (PI * k as f64)
            };
            let window = 0.54 - 0.46 * (TAU * m as f64 / (taps - 1) as f64).cos();
            sinc * window
        })
        .collect();
    let gain: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= gain);
    h
}

/// Same-length zero-padded convolution with a centered kernel.
fn convolve_same(x: &[f64], h: &[f64]) -> Vec<f64> {
    let n = x.len() as isize;
    let center = (h.len() / 2) as isize;
    (0..x.len())
        .map(|t| {
            let mut acc = 0.0;
            for (m, &hv) in h.iter().enumerate() {
                let idx = t as isize + center - m as isize;
                if idx >= 0 && idx < n {
                    acc += hv * x[idx as usize];
                }
            }
            acc
        })
        .collect()
}

pub struct Generator {
    net: Box<dyn Layer>,
    /// Fixed (non-trainable) band-limit applied before the output tanh.
    kernel: Vec<f64>,
    cache: Option<(Vec<f64>, Vec<f64>)>, // clamped input, output
}

impl Generator {
    pub fn new(net: Box<dyn Layer>) -> Self {
        Generator { net, kernel: output_filter_kernel(), cache: None }
    }

    pub fn forward_train_samples(&mut self, x: &[f64]) -> Vec<f64> {
        self.forward_train(&Tensor::from_signal(x)).data
    }

    pub fn backward_samples(&mut self, gy: &[f64]) -> Vec<f64> {
        self.backward(&Tensor::from_vec(&[1, gy.len()], gy.to_vec()))
            .data
    }

    pub fn infer_samples(&self, x: &[f64]) -> Vec<f64> {
        self.infer(&Tensor::from_signal(x)).data
    }
}

impl Layer for Generator {
    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let f = self.net.forward_train(x);
        let xc: Vec<f64> = x.data.iter().map(|&v| v.clamp(-ATANH_CLAMP, ATANH_CLAMP)).collect();
        let z: Vec<f64> = xc
            .iter()
            .zip(f.data.iter())
            .map(|(&v, &fv)| v.atanh() + fv)
            .collect();
        let y: Vec<f64> = convolve_same(&z, &self.kernel).iter().map(|v| v.tanh()).collect();
        self.cache = Some((xc, y.clone()));
        Tensor::from_vec(&x.shape, y)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (xc, y) = self.cache.take().expect("generator backward without forward");
        let gs: Vec<f64> = grad
            .data
            .iter()
            .zip(y.iter())
            .map(|(&g, &yv)| g * (1.0 - yv * yv))
            .collect();
        // The kernel is symmetric, so the filter's adjoint is itself.
        let gf = convolve_same(&gs, &self.kernel);
        let gx_net = self
            .net
            .backward(&Tensor::from_vec(&grad.shape, gf.clone()));
        let gx: Vec<f64> = gx_net
            .data
            .iter()
            .zip(gf.iter())
            .zip(xc.iter())
            .map(|((&gn, &gfv), &v)| {
                if v.abs() < ATANH_CLAMP {
                    gn + gfv / (1.0 - v * v)
                } else {
                    gn
                }
            })
            .collect();
        Tensor::from_vec(&grad.shape, gx)
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let f = self.net.infer(x);
        let z: Vec<f64> = x
            .data
            .iter()
            .zip(f.data.iter())
            .map(|(&v, &fv)| v.clamp(-ATANH_CLAMP, ATANH_CLAMP).atanh() + fv)
            .collect();
        let y = convolve_same(&z, &self.kernel).iter().map(|v| v.tanh()).collect();
        Tensor::from_vec(&x.shape, y)
    }

    fn visit(&self, f: &mut dyn FnMut(&[f64], &[f64])) {
        self.net.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Vec<f64>, &mut Vec<f64>)) {
        self.net.visit_mut(f);
    }
}

// ---------------------------------------------------------------------------
// Shared discriminator recipe: strided conv stack -> scalar sigmoid
// ---------------------------------------------------------------------------

pub fn full_discriminator(rng: &mut ChaCha8Rng) -> Sequential {
    Sequential::new(vec![
        Box::new(Conv1d::new(1, 8, 9, 4, 4, rng)),
        Box::new(LeakyRelu::new(0.2)),
        Box::new(Conv1d::new(8, 16, 9, 4, 4, rng)),
        Box::new(LeakyRelu::new(0.2)),
        Box::new(Conv1d::new(16, 24, 9, 4, 4, rng)),
        Box::new(LeakyRelu::new(0.2)),
        Box::new(Conv1d::new(24, 24, 5, 2, 2, rng)),
        Box::new(LeakyRelu::new(0.2)),
        Box::new(GlobalAvgPool::new()),
        Box::new(Linear::new(24, 1, rng)),
        Box::new(Sigmoid::new()),
    ])
}

pub fn tiny_discriminator(rng: &mut ChaCha8Rng) -> Sequential {
    Sequential::new(vec![
        Box::new(Conv1d::new(1, 2, 9, 4, 4, rng)),
        Box::new(LeakyRelu::new(0.2)),
        Box::new(Conv1d::new(2, 4, 5, 4, 2, rng)),
        Box::new(LeakyRelu::new(0.2)),
        Box::new(GlobalAvgPool::new()),
        Box::new(Linear::new(4, 1, rng)),
        Box::new(Sigmoid::new()),
    ])
}

/// Replace every exactly-zero parameter with a small random value, so
/// gradient checks exercise paths that zero-initialized heads would block.
pub fn nudge_zero_params(net: &mut dyn Layer, seed: u64) {
    use crate::nn::{flat_params, set_flat_params};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = flat_params(net);
    for p in params.iter_mut() {
        if *p == 0.0 {
            *p = rng.gen_range(-0.3..0.3);
        }
    }
    set_flat_params(net, &params);
}
