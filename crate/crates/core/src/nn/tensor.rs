//! Minimal dense tensor used by the training kernels.
//!
//! Shapes are channels-first: `[C, L]` for 1-D signals, `[C, H, W]` for
//! spectrogram inputs, `[N]` for flat vectors. Everything is f64 so the
//! finite-difference gradient oracles have headroom.

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data mismatch"
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Wrap a mono signal as a single-channel `[1, L]` tensor.
    pub fn from_signal(samples: &[f64]) -> Self {
        Tensor {
            shape: vec![1, samples.len()],
            data: samples.to_vec(),
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Product of all dimensions after the first (spatial extent per channel).
    pub fn spatial(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }
}

/// Concatenate along the channel axis. Spatial shapes must agree.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape[1..], b.shape[1..], "spatial shape mismatch");
    let mut shape = a.shape.clone();
    shape[0] += b.shape[0];
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor { shape, data }
}

/// Split a channel-concatenated tensor back into its two parts.
pub fn split_channels(t: &Tensor, c_first: usize) -> (Tensor, Tensor) {
    let spatial: usize = t.shape[1..].iter().product();
    let cut = c_first * spatial;
    let mut shape_a = t.shape.clone();
    shape_a[0] = c_first;
    let mut shape_b = t.shape.clone();
    shape_b[0] = t.shape[0] - c_first;
    (
        Tensor::from_vec(&shape_a, t.data[..cut].to_vec()),
        Tensor::from_vec(&shape_b, t.data[cut..].to_vec()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_and_split_roundtrip() {
        let a = Tensor::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::from_vec(&[1, 3], vec![7., 8., 9.]);
        let c = concat_channels(&a, &b);
        assert_eq!(c.shape, vec![3, 3]);
        let (a2, b2) = split_channels(&c, 2);
        assert_eq!(a2, a);
        assert_eq!(b2, b);
    }

    #[test]
    fn spatial_of_3d() {
        let t = Tensor::zeros(&[4, 5, 6]);
        assert_eq!(t.spatial(), 30);
        assert_eq!(t.channels(), 4);
    }
}
