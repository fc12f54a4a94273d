use rand::Rng;

use super::{check_cols, Activation};
use crate::error::{Error, Result};
use crate::numcore::{ParamId, ParamStore, Tape, Tensor, Var};

/// Left padding and output length for "same"-style padding at `stride`:
/// the output has `ceil(len / stride)` rows.
pub fn same_padding(len: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = len.div_ceil(stride);
    let needed = ((out.saturating_sub(1)) * stride + kernel).saturating_sub(len);
    (needed / 2, out)
}

/// Length after `layers` stride-2 convolutions with same padding.
pub fn downsampled_len(len: usize, layers: usize) -> usize {
    (0..layers).fold(len, |l, _| l.div_ceil(2))
}

#[derive(Clone, Debug)]
pub struct Conv1dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Conv1dLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / ((in_dim * kernel) + out_dim) as f64).sqrt();
        Conv1dLayer {
            weight: store.register_normal(
                format!("{name}.weight"),
                &[kernel, in_dim, out_dim],
                std,
                rng,
            ),
            bias: store.register(format!("{name}.bias"), Tensor::zeros(&[out_dim])),
            kernel,
            stride,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, t: &Tape, s: &ParamStore, x: Var) -> Result<Var> {
        check_cols(t, x, self.in_dim, "conv1d input")?;
        let len = t.shape(x)[0];
        if len == 0 {
            return Err(Error::TooShort { len, required: 1 });
        }
        let (pad_left, out_len) = same_padding(len, self.kernel, self.stride);
        let w = t.param(s, self.weight);
        let b = t.param(s, self.bias);
        Ok(t.conv1d(x, w, b, self.stride, pad_left, out_len))
    }
}

/// Stack of stride-2 convolutions, each followed by GELU.
///
/// With same padding every layer halves the length (rounding up), so `n`
/// layers compress by `2^n`.
#[derive(Clone, Debug)]
pub struct ConvSubsampler {
    pub layers: Vec<Conv1dLayer>,
}

impl ConvSubsampler {
    pub const KERNEL: usize = 3;

    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        num_layers: usize,
        rng: &mut R,
    ) -> Self {
        let layers = (0..num_layers)
            .map(|i| Conv1dLayer::new(store, &format!("{name}.conv{i}"), dim, dim, Self::KERNEL, 2, rng))
            .collect();
        ConvSubsampler { layers }
    }

    pub fn min_len(&self) -> usize {
        1 << self.layers.len()
    }

    pub fn output_len(&self, len: usize) -> usize {
        downsampled_len(len, self.layers.len())
    }

    pub fn forward(&self, t: &Tape, s: &ParamStore, x: Var) -> Result<Var> {
        let len = t.shape(x)[0];
        if len < self.min_len() {
            return Err(Error::TooShort {
                len,
                required: self.min_len(),
            });
        }
        let mut h = x;
        for layer in &self.layers {
            h = Activation::Gelu.apply(t, layer.forward(t, s, h)?);
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn lengths() {
        assert_eq!(downsampled_len(64, 3), 8);
        assert_eq!(downsampled_len(10, 1), 5);
        assert_eq!(downsampled_len(37, 0), 37);
        assert_eq!(downsampled_len(9, 3), 2);
    }

    #[test]
    fn eight_fold_compression() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let sub = ConvSubsampler::new(&mut store, "sub", 4, 3, &mut rng);
        let t = Tape::no_grad();
        let x = t.constant(random(64, 4, &mut rng));
        let y = sub.forward(&t, &store, x).unwrap();
        assert_eq!(t.shape(y), vec![8, 4]);
        let short = t.constant(random(7, 4, &mut rng));
        assert!(matches!(
            sub.forward(&t, &store, short),
            Err(Error::TooShort { len: 7, required: 8 })
        ));
    }

    #[test]
    fn zero_layers_is_identity_on_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let sub = ConvSubsampler::new(&mut store, "sub", 4, 0, &mut rng);
        let t = Tape::no_grad();
        let xv = random(13, 4, &mut rng);
        let x = t.constant(xv.clone());
        let y = sub.forward(&t, &store, x).unwrap();
        assert_eq!(*t.value(y), xv);
    }

    /// Index-by-index reference against the im2col implementation.
    #[test]
    fn matches_reference_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for len in [1usize, 2, 5, 10, 17] {
            let mut store = ParamStore::new();
            let conv = Conv1dLayer::new(&mut store, "c", 3, 5, 3, 2, &mut rng);
            let xv = random(len, 3, &mut rng);
            let t = Tape::no_grad();
            let y = conv.forward(&t, &store, t.constant(xv.clone())).unwrap();
            let y = t.value(y);
            let out_len = len.div_ceil(2);
            assert_eq!(y.shape(), &[out_len, 5]);
            let total_pad = ((out_len - 1) * 2 + 3).saturating_sub(len);
            let pad_left = total_pad / 2;
            let w = store.value(conv.weight);
            for o in 0..out_len {
                for co in 0..5 {
                    let mut acc = 0.0;
                    for k in 0..3 {
                        let src = (2 * o + k) as isize - pad_left as isize;
                        if src < 0 || src as usize >= len {
                            continue;
                        }
                        for ci in 0..3 {
                            acc += xv.get(src as usize, ci) * w.data()[(k * 3 + ci) * 5 + co];
                        }
                    }
                    assert!((y.get(o, co) - acc).abs() < 1e-12);
                }
            }
        }
    }
}
