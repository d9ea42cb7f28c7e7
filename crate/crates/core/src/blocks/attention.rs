use mogan_autograd::{SparseMap, Tensor};

use super::layers::check_rank3;
use crate::error::Result;
use crate::params::{Init, Module};

/// Efficient channel attention: global average pool, a 3-tap convolution
/// across neighbouring channels, sigmoid, per-channel rescale.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    /// Taps applied to channels `c - 1`, `c`, `c + 1`.
    pub taps: Tensor,
    pub bias: Tensor,
    channels: usize,
    neighbours: SparseMap,
}

impl ChannelAttention {
    pub fn new(init: &mut Init, channels: usize) -> Self {
        Self::with_params(channels, init.normal(&[3], 0.0, 0.02), init.zeros(&[1]))
    }

    pub fn with_params(channels: usize, taps: Tensor, bias: Tensor) -> Self {
        // Row (c, j) reads channel c + j - 1, or nothing past either end.
        let rows: Vec<Vec<(usize, f64)>> = (0..channels)
            .flat_map(|c| (0..3).map(move |j| (c + j).checked_sub(1).filter(|&s| s < channels).map(|s| vec![(s, 1.0)]).unwrap_or_default()))
            .collect();
        ChannelAttention { taps, bias, channels, neighbours: SparseMap::from_rows(channels, &rows) }
    }

    /// The per-channel gates in `(0, 1)`.
    pub fn gates(&self, x: &Tensor) -> Result<Tensor> {
        check_rank3(x, self.channels)?;
        let c = self.channels;
        let pooled = x.channel_mean().reshape(&[1, c]);
        let windows = pooled.apply_sparse(&self.neighbours).reshape(&[c, 3]);
        let z = windows.matmul(&self.taps.reshape(&[3, 1])).reshape(&[c]).add(&self.bias.expand_scalar(&[c]));
        Ok(z.sigmoid())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.mul_channel(&self.gates(x)?))
    }
}

impl Module for ChannelAttention {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        f(&self.taps);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.taps);
        f(&mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::check_module_gradients;

    fn sigmoid(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    #[test]
    fn saturated_gates_are_identity() {
        let a = ChannelAttention::with_params(4, Tensor::zeros(&[3]), Tensor::new(vec![60.0], &[1]));
        let x = Tensor::new((0..36).map(|i| (i as f64).cos()).collect(), &[4, 3, 3]);
        assert_eq!(a.forward(&x).unwrap().data(), x.data());
    }

    #[test]
    fn zero_in_zero_out() {
        let a = ChannelAttention::new(&mut Init::new(3), 5);
        let y = a.forward(&Tensor::zeros(&[5, 4, 4])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_channel_scalar_path() {
        let (w0, w1, w2, b) = (0.3, -0.8, 0.5, 0.1);
        let a = ChannelAttention::with_params(2, Tensor::new(vec![w0, w1, w2], &[3]), Tensor::new(vec![b], &[1]));
        // Channel 0 mean 1.0, channel 1 mean 3.0.
        let x = Tensor::new(vec![0.5, 1.5, 1.0, 1.0, 2.0, 4.0, 3.0, 3.0], &[2, 2, 2]);
        let (m0, m1) = (1.0, 3.0);
        let g0 = sigmoid(w1 * m0 + w2 * m1 + b);
        let g1 = sigmoid(w0 * m0 + w1 * m1 + b);
        let gates = a.gates(&x).unwrap();
        assert!((gates.data()[0] - g0).abs() < 1e-12);
        assert!((gates.data()[1] - g1).abs() < 1e-12);
        assert!((g0 - g1).abs() > 0.1);
        let y = a.forward(&x).unwrap();
        assert!((y.data()[1] - 1.5 * g0).abs() < 1e-12);
        assert!((y.data()[5] - 4.0 * g1).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let a = ChannelAttention::with_params(4, Tensor::param(vec![0.4, -0.2, 0.7], &[3]), Tensor::param(vec![0.1], &[1]));
        let x = Tensor::new((0..64).map(|i| (i as f64 * 0.3).sin() + 0.2).collect(), &[4, 4, 4]);
        let probe = Tensor::new((0..64).map(|i| (i as f64 * 0.7).cos()).collect(), &[4, 4, 4]);
        let r = check_module_gradients(&a, |m| m.forward(&x).unwrap().dot(&probe));
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }
}
