//! Layers with explicit forward/backward passes and cached activations.
//!
//! The training path (`forward_train` + `backward`) mutates per-layer caches
//! and accumulates parameter gradients. The inference path (`infer`) is pure
//! and safe to share across threads on a frozen model.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;

/// A differentiable computation node; whole nets implement this too.
pub trait Layer: Send + Sync {
    fn forward_train(&mut self, x: &Tensor) -> Tensor;
    /// Propagate d loss / d output; accumulates parameter gradients and
    /// returns d loss / d input.
    fn backward(&mut self, grad: &Tensor) -> Tensor;
    /// Cache-free forward on `&self`.
    fn infer(&self, x: &Tensor) -> Tensor;
    /// Visit (params, grads) slices in a fixed order.
    fn visit(&self, f: &mut dyn FnMut(&[f64], &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Vec<f64>, &mut Vec<f64>));
}

pub fn param_count<L: Layer + ?Sized>(layer: &L) -> usize {
    let mut n = 0;
    layer.visit(&mut |p, _| n += p.len());
    n
}

pub fn flat_params<L: Layer + ?Sized>(layer: &L) -> Vec<f64> {
    let mut out = Vec::new();
    layer.visit(&mut |p, _| out.extend_from_slice(p));
    out
}

pub fn flat_grads<L: Layer + ?Sized>(layer: &L) -> Vec<f64> {
    let mut out = Vec::new();
    layer.visit(&mut |_, g| out.extend_from_slice(g));
    out
}

pub fn set_flat_params<L: Layer + ?Sized>(layer: &mut L, values: &[f64]) {
    let mut off = 0;
    layer.visit_mut(&mut |p, _| {
        let n = p.len();
        p.copy_from_slice(&values[off..off + n]);
        off += n;
    });
    assert_eq!(off, values.len(), "flat parameter length mismatch");
}

pub fn zero_grad<L: Layer + ?Sized>(layer: &mut L) {
    layer.visit_mut(&mut |_, g| g.iter_mut().for_each(|v| *v = 0.0));
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

pub fn conv1d_out_len(l_in: usize, k: usize, stride: usize, pad: usize) -> usize {
    (l_in + 2 * pad - k) / stride + 1
}

// ---------------------------------------------------------------------------
// Conv1d
// ---------------------------------------------------------------------------

pub struct Conv1d {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    w: Vec<f64>,
    b: Vec<f64>,
    gw: Vec<f64>,
    gb: Vec<f64>,
    cache: Option<(Vec<f64>, usize)>, // padded input, l_pad
}

impl Conv1d {
    pub fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = (1.0 / (c_in * k) as f64).sqrt();
        Conv1d {
            c_in,
            c_out,
            k,
            stride,
            pad,
            w: uniform(rng, c_out * c_in * k, bound),
            b: uniform(rng, c_out, bound),
            gw: vec![0.0; c_out * c_in * k],
            gb: vec![0.0; c_out],
            cache: None,
        }
    }

    /// Zero all weights and biases (identity-at-init residual heads).
    pub fn zero_params(&mut self) {
        self.w.iter_mut().for_each(|v| *v = 0.0);
        self.b.iter_mut().for_each(|v| *v = 0.0);
    }

    fn pad_input(&self, x: &Tensor) -> (Vec<f64>, usize) {
        let l_in = x.shape[1];
        let l_pad = l_in + 2 * self.pad;
        let mut xp = vec![0.0; self.c_in * l_pad];
        for c in 0..self.c_in {
            xp[c * l_pad + self.pad..c * l_pad + self.pad + l_in]
                .copy_from_slice(&x.data[c * l_in..(c + 1) * l_in]);
        }
        (xp, l_pad)
    }

    fn run(&self, xp: &[f64], l_pad: usize) -> Tensor {
        let l_out = (l_pad - self.k) / self.stride + 1;
        let mut out = vec![0.0; self.c_out * l_out];
        for oc in 0..self.c_out {
            let out_oc = &mut out[oc * l_out..(oc + 1) * l_out];
            out_oc.iter_mut().for_each(|v| *v = self.b[oc]);
            for ic in 0..self.c_in {
                let xi = &xp[ic * l_pad..(ic + 1) * l_pad];
                let wrow = &self.w[(oc * self.c_in + ic) * self.k..][..self.k];
                for (kk, &wv) in wrow.iter().enumerate() {
                    if self.stride == 1 {
                        let src = &xi[kk..kk + l_out];
                        for (o, &s) in out_oc.iter_mut().zip(src.iter()) {
                            *o += wv * s;
                        }
                    } else {
                        let mut idx = kk;
                        for o in out_oc.iter_mut() {
                            *o += wv * xi[idx];
                            idx += self.stride;
                        }
                    }
                }
            }
        }
        Tensor::from_vec(&[self.c_out, l_out], out)
    }
}

impl Layer for Conv1d {
    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        assert_eq!(x.shape[0], self.c_in, "conv1d channel mismatch");
        let (xp, l_pad) = self.pad_input(x);
        let out = self.run(&xp, l_pad);
        self.cache = Some((xp, l_pad));
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (xp, l_pad) = self.cache.take().expect("conv1d backward without forward");
        let l_out = grad.shape[1];
        let mut gxp = vec![0.0; self.c_in * l_pad];
        for oc in 0..self.c_out {
            let gy = &grad.data[oc * l_out..(oc + 1) * l_out];
            self.gb[oc] += gy.iter().sum::<f64>();
            for ic in 0..self.c_in {
                let xi = &xp[ic * l_pad..(ic + 1) * l_pad];
                let gxi = &mut gxp[ic * l_pad..(ic + 1) * l_pad];
                for kk in 0..self.k {
                    let widx = (oc * self.c_in + ic) * self.k + kk;
                    let wv = self.w[widx];
                    let mut acc = 0.0;
                    if self.stride == 1 {
                        let src = &xi[kk..kk + l_out];
                        let dst = &mut gxi[kk..kk + l_out];
                        for ((&g, &s), d) in gy.iter().zip(src.iter()).zip(dst.iter_mut()) {
                            acc += g * s;
                            *d += wv * g;
                        }
                    } else {
                        let mut idx = kk;
                        for &g in gy.iter() {
                            acc += g * xi[idx];
                            gxi[idx] += wv * g;
                            idx += self.stride;
                        }
                    }
                    self.gw[widx] += acc;
                }
            }
        }
        // crop padding
        let l_in = l_pad - 2 * self.pad;
        let mut gx = vec![0.0; self.c_in * l_in];
        for c in 0..self.c_in {
            gx[c * l_in..(c + 1) * l_in]
                .copy_from_slice(&gxp[c * l_pad + self.pad..c * l_pad + self.pad + l_in]);
        }
        Tensor::from_vec(&[self.c_in, l_in], gx)
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.shape[0], self.c_in, "conv1d channel mismatch");
        let (xp, l_pad) = self.pad_input(x);
        self.run(&xp, l_pad)
    }

    fn visit(&self, f: &mut dyn FnMut(&[f64], &[f64])) {
        f(&self.w, &self.gw);
        f(&self.b, &self.gb);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Vec<f64>, &mut Vec<f64>)) {
        f(&mut self.w, &mut self.gw);
        f(&mut self.b, &mut self.gb);
    }
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

pub struct Conv2d {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    w: Vec<f64>,
    b: Vec<f64>,
    gw: Vec<f64>,
    gb: Vec<f64>,
    cache: Option<(Vec<f64>, usize, usize)>, // padded input, h_pad, w_pad
}

impl Conv2d {
    pub fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = (1.0 / (c_in * k * k) as f64).sqrt();
        Conv2d {
            c_in,
            c_out,
            k,
            stride,
            pad,
            w: uniform(rng, c_out * c_in * k * k, bound),
            b: uniform(rng, c_out, bound),
            gw: vec![0.0; c_out * c_in * k * k],
            gb: vec![0.0; c_out],
            cache: None,
        }
    }

    fn pad_input(&self, x: &Tensor) -> (Vec<f64>, usize, usize) {
        let (h, w) = (x.shape[1], x.shape[2]);
        let (hp, wp) = (h + 2 * self.pad, w + 2 * self.pad);
        let mut xp = vec![0.0; self.c_in * hp * wp];
        for c in 0..self.c_in {
            for row in 0..h {
                let src = &x.data[(c * h + row) * w..(c * h + row + 1) * w];
                let dst_off = c * hp * wp + (row + self.pad) * wp + self.pad;
                xp[dst_off..dst_off + w].copy_from_slice(src);
            }
        }
        (xp, hp, wp)
    }

    fn run(&self, xp: &[f64], hp: usize, wp: usize) -> Tensor {
        let h_out = (hp - self.k) / self.stride + 1;
        let w_out = (wp - self.k) / self.stride + 1;
        let mut out = vec![0.0; self.c_out * h_out * w_out];
        for oc in 0..self.c_out {
            let out_oc = &mut out[oc * h_out * w_out..(oc + 1) * h_out * w_out];
            out_oc.iter_mut().for_each(|v| *v = self.b[oc]);
            for ic in 0..self.c_in {
                let xi = &xp[ic * hp * wp..(ic + 1) * hp * wp];
                for kh in 0..self.k {
                    for kw in 0..self.k {
                        let wv =
                            self.w[((oc * self.c_in + ic) * self.k + kh) * self.k + kw];
                        for oh in 0..h_out {
                            let row = &xi[(oh * self.stride + kh) * wp + kw..];
                            let dst = &mut out_oc[oh * w_out..(oh + 1) * w_out];
                            if self.stride == 1 {
                                for (o, &s) in dst.iter_mut().zip(row.iter()) {
                                    *o += wv * s;
                                }
                            } else {
                                let mut idx = 0;
                                for o in dst.iter_mut() {
                                    *o += wv * row[idx];
                                    idx += self.stride;
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor::from_vec(&[self.c_out, h_out, w_out], out)
    }
}

impl Layer for Conv2d {
    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        assert_eq!(x.shape[0], self.c_in, "conv2d channel mismatch");
        let (xp, hp, wp) = self.pad_input(x);
        let out = self.run(&xp, hp, wp);
        self.cache = Some((xp, hp, wp));
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (xp, hp, wp) = self.cache.take().expect("conv2d backward without forward");
        let (h_out, w_out) = (grad.shape[1], grad.shape[2]);
        let mut gxp = vec![0.0; self.c_in * hp * wp];
        for oc in 0..self.c_out {
            let gy = &grad.data[oc * h_out * w_out..(oc + 1) * h_out * w_out];
            self.gb[oc] += gy.iter().sum::<f64>();
            for ic in 0..self.c_in {
                let xi = &xp[ic * hp * wp..(ic + 1) * hp * wp];
                let gxi = &mut gxp[ic * hp * wp..(ic + 1) * hp * wp];
                for kh in 0..self.k {
                    for kw in 0..self.k {
                        let widx = ((oc * self.c_in + ic) * self.k + kh) * self.k + kw;
                        let wv = self.w[widx];
                        let mut acc = 0.0;
                        for oh in 0..h_out {
                            let base = (oh * self.stride + kh) * wp + kw;
                            let gy_row = &gy[oh * w_out..(oh + 1) * w_out];
                            let mut idx = base;
                            for &g in gy_row.iter() {
                                acc += g * xi[idx];
                                gxi[idx] += wv * g;
                                idx += self.stride;
                            }
                        }
                        self.gw[widx] += acc;
                    }
                }
            }
        }
        let (h_in, w_in) = (hp - 2 * self.pad, wp - 2 * self.pad);
        let mut gx = vec![0.0; self.c_in * h_in * w_in];
        for c in 0..self.c_in {
            for row in 0..h_in {
                let src_off = c * hp * wp + (row + self.pad) * wp + self.pad;
                gx[(c * h_in + row) * w_in..(c * h_in + row + 1) * w_in]
                    .copy_from_slice(&gxp[src_off..src_off + w_in]);
            }
        }
        Tensor::from_vec(&[self.c_in, h_in, w_in], gx)
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.shape[0], self.c_in, "conv2d channel mismatch");
        let (xp, hp, wp) = self.pad_input(x);
        self.run(&xp, hp, wp)
    }

    fn visit(&self, f: &mut dyn FnMut(&[f64], &[f64])) {
        f(&self.w, &self.gw);
        f(&self.b, &self.gb);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Vec<f64>, &mut Vec<f64>)) {
        f(&mut self.w, &mut self.gw);
        f(&mut self.b, &mut self.gb);
    }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

pub struct Linear {
    pub n_in: usize,
    pub n_out: usize,
    w: Vec<f64>,
    b: Vec<f64>,
    gw: Vec<f64>,
    gb: Vec<f64>,
    cache: Option<Vec<f64>>,
}

impl Linear {
    pub fn new(n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (1.0 / n_in as f64).sqrt();
        Linear {
            n_in,
            n_out,
            w: uniform(rng, n_out * n_in, bound),
            b: uniform(rng, n_out, bound),
            gw: vec![0.0; n_out * n_in],
            gb: vec![0.0; n_out],
            cache: None,
        }
    }

    fn run(&self, x: &[f64]) -> Tensor {
        let mut y = vec![0.0; self.n_out];
        for o in 0..self.n_out {
            let wrow = &self.w[o * self.n_in..(o + 1) * self.n_in];
            y[o] = self.b[o]
                + wrow
                    .iter()
                    .zip(x.iter())
                    .map(|(&w, &xi)| w * xi)
                    .sum::<f64>();
        }
        Tensor::from_vec(&[self.n_out], y)
    }
}

impl Layer for Linear {
    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        assert_eq!(x.numel(), self.n_in, "linear input mismatch");
        let out = self.run(&x.data);
        self.cache = Some(x.data.clone());
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.cache.take().expect("linear backward without forward");
        let mut gx = vec![0.0; self.n_in];
        for o in 0..self.n_out {
            let g = grad.data[o];
            self.gb[o] += g;
            let wrow = &self.w[o * self.n_in..(o + 1) * self.n_in];
            let gwrow = &mut self.gw[o * self.n_in..(o + 1) * self.n_in];
            for i in 0..self.n_in {
                gwrow[i] += g * x[i];
                gx[i] += g * wrow[i];
            }
        }
        Tensor::from_vec(&[self.n_in], gx)
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.numel(), self.n_in, "linear input mismatch");
        self.run(&x.data)
    }

    fn visit(&self, f: &mut dyn FnMut(&[f64], &[f64])) {
        f(&self.w, &self.gw);
        f(&self.b, &self.gb);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Vec<f64>, &mut Vec<f64>)) {
        f(&mut self.w, &mut self.gw);
        f(&mut self.b, &mut self.gb);
    }
}

// ---------------------------------------------------------------------------
// ChannelNorm (instance normalization over spatial dims, per channel)
// ---------------------------------------------------------------------------

pub struct ChannelNorm {
    pub c: usize,
    eps: f64,
    gamma: Vec<f64>,
    beta: Vec<f64>,
    gg: Vec<f64>,
    gb: Vec<f64>,
    cache: Option<(Vec<f64>, Vec<f64>)>, // xhat, inv_std per channel
}

impl ChannelNorm {
    pub fn new(c: usize) -> Self {
        ChannelNorm {
            c,
            eps: 1e-5,
            gamma: vec![1.0; c],
            beta: vec![0.0; c],
            gg: vec![0.0; c],
            gb: vec![0.0; c],
            cache: None,
        }
    }

    fn stats(&self, x: &[f64]) -> (f64, f64) {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, 1.0 / (var + self.eps).sqrt())
    }
}

impl Layer for ChannelNorm {
    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        assert_eq!(x.shape[0], self.c, "channel norm channel mismatch");
        let sp = x.spatial();
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_stds = vec![0.0; self.c];
        let mut y = vec![0.0; x.numel()];
        for c in 0..self.c {
            let xs = &x.data[c * sp..(c + 1) * sp];
            let (mean, inv_std) = self.stats(xs);
            inv_stds[c] = inv_std;
            for (i, &v) in xs.iter().enumerate() {
                let xh = (v - mean) * inv_std;
                xhat[c * sp + i] = xh;
                y[c * sp + i] = self.gamma[c] * xh + self.beta[c];
            }
        }
        self.cache = Some((xhat, inv_stds));
        Tensor::from_vec(&x.shape, y)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (xhat, inv_stds) = self.cache.take().expect("norm backward without forward");
        let sp = grad.spatial();
        let n = sp as f64;
        let mut gx = vec![0.0; grad.numel()];
        for c in 0..self.c {
            let gy = &grad.data[c * sp..(c + 1) * sp];
            let xh = &xhat[c * sp..(c + 1) * sp];
            let s1: f64 = gy.iter().sum();
            let s2: f64 = gy.iter().zip(xh.iter()).map(|(&g, &h)| g * h).sum();
            self.gb[c] += s1;
            self.gg[c] += s2;
            let scale = self.gamma[c] * inv_stds[c];
            for i in 0..sp {
                gx[c * sp + i] = scale * (gy[i] - s1 / n - xh[i] * s2 / n);
            }
        }
        Tensor::from_vec(&grad.shape, gx)
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.shape[0], self.c, "channel norm channel mismatch");
        let sp = x.spatial();
        let mut y = vec![0.0; x.numel()];
        for c in 0..self.c {
            let xs = &x.data[c * sp..(c + 1) * sp];
            let (mean, inv_std) = self.stats(xs);
            for (i, &v) in xs.iter().enumerate() {
                y[c * sp + i] = self.gamma[c] * (v - mean) * inv_std + self.beta[c];
            }
        }
        Tensor::from_vec(&x.shape, y)
    }

    fn visit(&self, f: &mut dyn FnMut(&[f64], &[f64])) {
        f(&self.gamma, &self.gg);
        f(&self.beta, &self.gb);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Vec<f64>, &mut Vec<f64>)) {
        f(&mut self.gamma, &mut self.gg);
        f(&mut self.beta, &mut self.gb);
    }
}

// ---------------------------------------------------------------------------
// GlobalRmsNorm (divide by whole-tensor RMS; per-channel gain and bias)
// ---------------------------------------------------------------------------

/// Unlike `ChannelNorm`, this preserves relative energy between channels,
/// which raw-waveform detectors rely on.
pub struct GlobalRmsNorm {
    pub c: usize,
    eps: f64,
    gamma: Vec<f64>,
    beta: Vec<f64>,
    gg: Vec<f64>,
    gb: Vec<f64>,
    cache: Option<(Vec<f64>, f64)>, // input, rms
}

impl GlobalRmsNorm {
    pub fn new(c: usize) -> Self {
        GlobalRmsNorm {
            c,
            eps: 1e-5,
            gamma: vec![1.0; c],
            beta: vec![0.0; c],
            gg: vec![0.0; c],
            gb: vec![0.0; c],
            cache: None,
        }
    }

    fn rms(&self, x: &[f64]) -> f64 {
        (x.iter().map(|&v| v * v).sum::<f64>() / x.len() as f64 + self.eps).sqrt()
    }
}

impl Layer for GlobalRmsNorm {
    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        assert_eq!(x.shape[0], self.c, "rms norm channel mismatch");
        let r = self.rms(&x.data);
        let sp = x.spatial();
        let mut y = vec![0.0; x.numel()];
        for c in 0..self.c {
            for i in 0..sp {
                y[c * sp + i] = self.gamma[c] * x.data[c * sp + i] / r + self.beta[c];
            }
        }
        self.cache = Some((x.data.clone(), r));
        Tensor::from_vec(&x.shape, y)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (x, r) = self.cache.take().expect("rms norm backward without forward");
        let sp = grad.spatial();
        let n = x.len() as f64;
        // S = Σ g_i γ_{c(i)} x_i, the coupling through the shared RMS.
        let mut s = 0.0;
        for c in 0..self.c {
            for i in 0..sp {
                let j = c * sp + i;
                let g = grad.data[j];
                s += g * self.gamma[c] * x[j];
                self.gg[c] += g * x[j] / r;
                self.gb[c] += g;
            }
        }
        let mut gx = vec![0.0; x.len()];
        for c in 0..self.c {
            for i in 0..sp {
                let j = c * sp + i;
                gx[j] = self.gamma[c] * grad.data[j] / r - s * x[j] / (n * r * r * r);
            }
        }
        Tensor::from_vec(&grad.shape, gx)
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.shape[0], self.c, "rms norm channel mismatch");
        let r = self.rms(&x.data);
        let sp = x.spatial();
        let mut y = vec![0.0; x.numel()];
        for c in 0..self.c {
            for i in 0..sp {
                y[c * sp + i] = self.gamma[c] * x.data[c * sp + i] / r + self.beta[c];
            }
        }
        Tensor::from_vec(&x.shape, y)
    }

    fn visit(&self, f: &mut dyn FnMut(&[f64], &[f64])) {
        f(&self.gamma, &self.gg);
        f(&self.beta, &self.gb);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Vec<f64>, &mut Vec<f64>)) {
        f(&mut self.gamma, &mut self.gg);
        f(&mut self.beta, &mut self.gb);
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

/// Leaky ReLU; `alpha = 0` gives plain ReLU.
pub struct LeakyRelu {
    alpha: f64,
    cache: Option<Vec<f64>>, // per-element slope
}

impl LeakyRelu {
    pub fn new(alpha: f64) -> Self {
        LeakyRelu { alpha, cache: None }
    }

    pub fn relu() -> Self {
        Self::new(0.0)
    }
}

impl Layer for LeakyRelu {
    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let mut slope = vec![0.0; x.numel()];
        let mut y = vec![0.0; x.numel()];
        for (i, &v) in x.data.iter().enumerate() {
            let s = if v > 0.0 { 1.0 } else { self.alpha };
            slope[i] = s;
            y[i] = s * v;
        }
        self.cache = Some(slope);
        Tensor::from_vec(&x.shape, y)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let slope = self.cache.take().expect("relu backward without forward");
        let gx = grad
            .data
            .iter()
            .zip(slope.iter())
            .map(|(&g, &s)| g * s)
            .collect();
        Tensor::from_vec(&grad.shape, gx)
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let y = x
            .data
            .iter()
            .map(|&v| if v > 0.0 { v } else { self.alpha * v })
            .collect();
        Tensor::from_vec(&x.shape, y)
    }

    fn visit(&self, _f: &mut dyn FnMut(&[f64], &[f64])) {}
    fn visit_mut(&mut self, _f: &mut dyn FnMut(&mut Vec<f64>, &mut Vec<f64>)) {}
}

pub struct Tanh {
    cache: Option<Vec<f64>>, // y
}

impl Tanh {
    pub fn new() -> Self {
        Tanh { cache: None }
    }
}

impl Default for Tanh {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for Tanh {
    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let y: Vec<f64> = x.data.iter().map(|&v| v.tanh()).collect();
        self.cache = Some(y.clone());
        Tensor::from_vec(&x.shape, y)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let y = self.cache.take().expect("tanh backward without forward");
        let gx = grad
            .data
            .iter()
            .zip(y.iter())
            .map(|(&g, &yv)| g * (1.0 - yv * yv))
            .collect();
        Tensor::from_vec(&grad.shape, gx)
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        Tensor::from_vec(&x.shape, x.data.iter().map(|&v| v.tanh()).collect())
    }

    fn visit(&self, _f: &mut dyn FnMut(&[f64], &[f64])) {}
    fn visit_mut(&mut self, _f: &mut dyn FnMut(&mut Vec<f64>, &mut Vec<f64>)) {}
}

pub struct Sigmoid {
    cache: Option<Vec<f64>>, // y
}

impl Sigmoid {
    pub fn new() -> Self {
        Sigmoid { cache: None }
    }
}

impl Default for Sigmoid {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl Layer for Sigmoid {
    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let y: Vec<f64> = x.data.iter().map(|&v| sigmoid(v)).collect();
        self.cache = Some(y.clone());
        Tensor::from_vec(&x.shape, y)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let y = self.cache.take().expect("sigmoid backward without forward");
        let gx = grad
            .data
            .iter()
            .zip(y.iter())
            .map(|(&g, &yv)| g * yv * (1.0 - yv))
            .collect();
        Tensor::from_vec(&grad.shape, gx)
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        Tensor::from_vec(&x.shape, x.data.iter().map(|&v| sigmoid(v)).collect())
    }

    fn visit(&self, _f: &mut dyn FnMut(&[f64], &[f64])) {}
    fn visit_mut(&mut self, _f: &mut dyn FnMut(&mut Vec<f64>, &mut Vec<f64>)) {}
}

// ---------------------------------------------------------------------------
// Pooling and resampling
// ---------------------------------------------------------------------------

/// Non-overlapping average pooling over the last axis of `[C, L]`.
/// Trailing samples that do not fill a window are dropped.
pub struct AvgPool1d {
    pub k: usize,
    cache: Option<usize>, // l_in
}

impl AvgPool1d {
    pub fn new(k: usize) -> Self {
        AvgPool1d { k, cache: None }
    }
}

impl Layer for AvgPool1d {
    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        self.cache = Some(x.shape[1]);
        self.infer(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let l_in = self.cache.take().expect("pool backward without forward");
        let (c, l_out) = (grad.shape[0], grad.shape[1]);
        let mut gx = vec![0.0; c * l_in];
        let inv = 1.0 / self.k as f64;
        for ch in 0..c {
            for t in 0..l_out {
                let g = grad.data[ch * l_out + t] * inv;
                for j in 0..self.k {
                    gx[ch * l_in + t * self.k + j] = g;
                }
            }
        }
        Tensor::from_vec(&[c, l_in], gx)
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let (c, l_in) = (x.shape[0], x.shape[1]);
        let l_out = l_in / self.k;
        let inv = 1.0 / self.k as f64;
        let mut y = vec![0.0; c * l_out];
        for ch in 0..c {
            for t in 0..l_out {
                let xs = &x.data[ch * l_in + t * self.k..ch * l_in + (t + 1) * self.k];
                y[ch * l_out + t] = xs.iter().sum::<f64>() * inv;
            }
        }
        Tensor::from_vec(&[c, l_out], y)
    }

    fn visit(&self, _f: &mut dyn FnMut(&[f64], &[f64])) {}
    fn visit_mut(&mut self, _f: &mut dyn FnMut(&mut Vec<f64>, &mut Vec<f64>)) {}
}

/// Non-overlapping 2-D average pooling over `[C, H, W]`.
pub struct AvgPool2d {
    pub k: usize,
    cache: Option<(usize, usize)>, // h_in, w_in
}

impl AvgPool2d {
    pub fn new(k: usize) -> Self {
        AvgPool2d { k, cache: None }
    }
}

impl Layer for AvgPool2d {
    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        self.cache = Some((x.shape[1], x.shape[2]));
        self.infer(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (h_in, w_in) = self.cache.take().expect("pool backward without forward");
        let (c, h_out, w_out) = (grad.shape[0], grad.shape[1], grad.shape[2]);
        let mut gx = vec![0.0; c * h_in * w_in];
        let inv = 1.0 / (self.k * self.k) as f64;
        for ch in 0..c {
            for oh in 0..h_out {
                for ow in 0..w_out {
                    let g = grad.data[(ch * h_out + oh) * w_out + ow] * inv;
                    for jh in 0..self.k {
                        for jw in 0..self.k {
                            gx[(ch * h_in + oh * self.k + jh) * w_in + ow * self.k + jw] = g;
                        }
                    }
                }
            }
        }
        Tensor::from_vec(&[c, h_in, w_in], gx)
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let (c, h_in, w_in) = (x.shape[0], x.shape[1], x.shape[2]);
        let (h_out, w_out) = (h_in / self.k, w_in / self.k);
        let inv = 1.0 / (self.k * self.k) as f64;
        let mut y = vec![0.0; c * h_out * w_out];
        for ch in 0..c {
            for oh in 0..h_out {
                for ow in 0..w_out {
                    let mut acc = 0.0;
                    for jh in 0..self.k {
                        for jw in 0..self.k {
                            acc += x.data
                                [(ch * h_in + oh * self.k + jh) * w_in + ow * self.k + jw];
                        }
                    }
                    y[(ch * h_out + oh) * w_out + ow] = acc * inv;
                }
            }
        }
        Tensor::from_vec(&[c, h_out, w_out], y)
    }

    fn visit(&self, _f: &mut dyn FnMut(&[f64], &[f64])) {}
    fn visit_mut(&mut self, _f: &mut dyn FnMut(&mut Vec<f64>, &mut Vec<f64>)) {}
}

/// Mean over all spatial dims: `[C, ...]` -> `[C]`.
pub struct GlobalAvgPool {
    cache: Option<Vec<usize>>, // input shape
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        GlobalAvgPool { cache: None }
    }
}

impl Default for GlobalAvgPool {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for GlobalAvgPool {
    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        self.cache = Some(x.shape.clone());
        self.infer(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let shape = self.cache.take().expect("gap backward without forward");
        let sp: usize = shape[1..].iter().product();
        let inv = 1.0 / sp as f64;
        let mut gx = vec![0.0; shape.iter().product()];
        for c in 0..shape[0] {
            let g = grad.data[c] * inv;
            gx[c * sp..(c + 1) * sp].iter_mut().for_each(|v| *v = g);
        }
        Tensor::from_vec(&shape, gx)
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let sp = x.spatial();
        let inv = 1.0 / sp as f64;
        let y = (0..x.shape[0])
            .map(|c| x.data[c * sp..(c + 1) * sp].iter().sum::<f64>() * inv)
            .collect();
        Tensor::from_vec(&[x.shape[0]], y)
    }

    fn visit(&self, _f: &mut dyn FnMut(&[f64], &[f64])) {}
    fn visit_mut(&mut self, _f: &mut dyn FnMut(&mut Vec<f64>, &mut Vec<f64>)) {}
}

/// Nearest-neighbour upsampling along the last axis of `[C, L]`.
pub struct Upsample1d {
    pub factor: usize,
}

impl Upsample1d {
    pub fn new(factor: usize) -> Self {
        Upsample1d { factor }
    }
}

impl Layer for Upsample1d {
    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        self.infer(x)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (c, l_out) = (grad.shape[0], grad.shape[1]);
        let l_in = l_out / self.factor;
        let mut gx = vec![0.0; c * l_in];
        for ch in 0..c {
            for i in 0..l_in {
                let gs = &grad.data[ch * l_out + i * self.factor..][..self.factor];
                gx[ch * l_in + i] = gs.iter().sum();
            }
        }
        Tensor::from_vec(&[c, l_in], gx)
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let (c, l_in) = (x.shape[0], x.shape[1]);
        let l_out = l_in * self.factor;
        let mut y = vec![0.0; c * l_out];
        for ch in 0..c {
            for i in 0..l_in {
                let v = x.data[ch * l_in + i];
                y[ch * l_out + i * self.factor..ch * l_out + (i + 1) * self.factor]
                    .iter_mut()
                    .for_each(|o| *o = v);
            }
        }
        Tensor::from_vec(&[c, l_out], y)
    }

    fn visit(&self, _f: &mut dyn FnMut(&[f64], &[f64])) {}
    fn visit_mut(&mut self, _f: &mut dyn FnMut(&mut Vec<f64>, &mut Vec<f64>)) {}
}

// ---------------------------------------------------------------------------
// Sequential
// ---------------------------------------------------------------------------

pub struct Sequential {
    pub layers: Vec<Box<dyn Layer>>,
}

impl Sequential {
    pub fn new(layers: Vec<Box<dyn Layer>>) -> Self {
        Sequential { layers }
    }
}

impl Layer for Sequential {
    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let mut cur = x.clone();
        for layer in self.layers.iter_mut() {
            cur = layer.forward_train(&cur);
        }
        cur
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mut cur = grad.clone();
        for layer in self.layers.iter_mut().rev() {
            cur = layer.backward(&cur);
        }
        cur
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let mut cur = x.clone();
        for layer in self.layers.iter() {
            cur = layer.infer(&cur);
        }
        cur
    }

    fn visit(&self, f: &mut dyn FnMut(&[f64], &[f64])) {
        for layer in self.layers.iter() {
            layer.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Vec<f64>, &mut Vec<f64>)) {
        for layer in self.layers.iter_mut() {
            layer.visit_mut(f);
        }
    }
}
