use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    Xavier,
}

/// `(fan_in, fan_out)`: `kh*kw*Cin` and `kh*kw*Cout` for `[kh, kw, Cin, Cout]`
/// kernels, the two extents for matrices, and the length for vectors.
pub fn fans(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [n] => Ok((n, n)),
        [i, o] => Ok((i, o)),
        [kh, kw, cin, cout] => Ok((kh * kw * cin, kh * kw * cout)),
        _ => Err(Error::Shape(format!("no fan convention for shape {shape:?}"))),
    }
}

pub fn xavier_bound(shape: &[usize]) -> Result<f64> {
    let (fi, fo) = fans(shape)?;
    Ok((6.0 / (fi + fo) as f64).sqrt())
}

/// Uniform in `[-b, b]` with `b = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<T: Scalar>(shape: &[usize], seed: u64) -> Result<Tensor<T>> {
    let bound = xavier_bound(shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::c(rng.random_range(-bound..=bound))).collect();
    Tensor::new(shape, data)
}
