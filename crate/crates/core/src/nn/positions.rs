use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Sinusoidal position table, `len x dim`, with sine on even columns and
/// cosine on odd ones.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Result<Tensor> {
    if dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "position embedding dim must be even, got {dim}"
        )));
    }
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            let angle = pos as f64 * freq;
            data[pos * dim + 2 * i] = angle.sin();
            data[pos * dim + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::matrix(len, dim, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_position_alternates() {
        let p = sinusoidal_positions(5, 8).unwrap();
        assert_eq!(p.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn bounded_and_deterministic() {
        let a = sinusoidal_positions(40, 16).unwrap();
        let b = sinusoidal_positions(40, 16).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn odd_dim_rejected() {
        assert!(sinusoidal_positions(3, 5).is_err());
    }
}
