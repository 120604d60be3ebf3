use alloc::format;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Sinusoidal timestep embedding: `dim/2` sines followed by `dim/2` cosines of
/// `t * f_i`, with frequencies `f_i = max_period^(-i/(dim/2))` spaced
/// geometrically from 1 down to `1/max_period`.
pub fn sinusoidal_embedding(t: usize, dim: usize, max_period: f32) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "sinusoidal embedding dim must be even and positive, got {dim}"
        )));
    }
    if !(max_period > 1.0) {
        return Err(Error::Config("sinusoidal embedding max_period must exceed 1".into()));
    }
    let half = dim / 2;
    let ln_p = libm::log(max_period as f64);
    Ok(Tensor::from_fn(&[dim], |i| {
        let k = i % half;
        let freq = libm::exp(-ln_p * k as f64 / half as f64);
        let phase = t as f64 * freq;
        if i < half {
            libm::sin(phase) as f32
        } else {
            libm::cos(phase) as f32
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_phase() {
        let e = sinusoidal_embedding(0, 8, 10_000.0).unwrap();
        assert_eq!(&e.data()[..4], &[0.0; 4]);
        assert_eq!(&e.data()[4..], &[1.0; 4]);
    }

    #[test]
    fn bounded_and_distinct() {
        for t in [1usize, 2, 17, 999] {
            let e = sinusoidal_embedding(t, 32, 10_000.0).unwrap();
            assert!(e.max_abs() <= 1.0);
        }
        let a = sinusoidal_embedding(1, 32, 10_000.0).unwrap();
        let b = sinusoidal_embedding(2, 32, 10_000.0).unwrap();
        // The sine of every frequency, down to the lowest, moves between t=1 and t=2.
        for i in 0..16 {
            assert_ne!(a.data()[i], b.data()[i], "coordinate {i}");
        }
    }

    #[test]
    fn odd_dim_rejected() {
        assert!(matches!(sinusoidal_embedding(3, 7, 10_000.0), Err(Error::Config(_))));
    }
}
