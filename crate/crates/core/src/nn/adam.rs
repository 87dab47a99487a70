//! Adam optimizer over the flat parameter vector of a model.

use super::layers::{param_count, Layer};

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new<L: Layer + ?Sized>(model: &L, lr: f64) -> Self {
        let n = param_count(model);
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One update from the gradients currently accumulated in the model.
    pub fn step<L: Layer + ?Sized>(&mut self, model: &mut L) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut off = 0;
        let (m, v) = (&mut self.m, &mut self.v);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        model.visit_mut(&mut |p, g| {
            for i in 0..p.len() {
                let j = off + i;
                m[j] = b1 * m[j] + (1.0 - b1) * g[i];
                v[j] = b2 * v[j] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            off += p.len();
        });
        assert_eq!(off, m.len(), "optimizer state drifted from model size");
    }
}
