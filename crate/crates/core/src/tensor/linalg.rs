use super::{gemm, Scalar, Tensor};
use crate::error::{Error, Result};

/// Batch/row/column extents of a (possibly batched) matrix product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatmulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

fn split_matrix(shape: &[usize]) -> Result<(Vec<usize>, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::Shape(format!("matmul operand must be at least rank 2, got {shape:?}")));
    }
    let r = shape.len();
    Ok((shape[..r - 2].to_vec(), shape[r - 2], shape[r - 1]))
}

pub fn matmul_dims(a: &[usize], b: &[usize], trans_a: bool, trans_b: bool) -> Result<(MatmulDims, Vec<usize>)> {
    let (ba, ar, ac) = split_matrix(a)?;
    let (bb, br, bc) = split_matrix(b)?;
    if ba != bb {
        return Err(Error::Shape(format!("matmul batch dims differ: {a:?} vs {b:?}")));
    }
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(Error::Shape(format!("matmul inner dimensions differ: {a:?} x {b:?}")));
    }
    let batch = ba.iter().product();
    let mut out = ba;
    out.extend([m, n]);
    Ok((MatmulDims { batch, m, k, n }, out))
}

/// Batched `op(a) * op(b)`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, trans_a: bool, trans_b: bool) -> Result<Tensor<T>> {
    let (d, shape) = matmul_dims(a.shape(), b.shape(), trans_a, trans_b)?;
    let mut out = vec![T::zero(); d.batch * d.m * d.n];
    for bi in 0..d.batch {
        let ab = &a.data()[bi * d.m * d.k..(bi + 1) * d.m * d.k];
        let bb = &b.data()[bi * d.k * d.n..(bi + 1) * d.k * d.n];
        let ob = &mut out[bi * d.m * d.n..(bi + 1) * d.m * d.n];
        gemm(trans_a, trans_b, d.m, d.k, d.n, ab, bb, ob, false);
    }
    Ok(Tensor::from_parts(shape, out))
}

/// Gradients of `op(a) * op(b)` given the output gradient.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dy: &Tensor<T>,
    trans_a: bool,
    trans_b: bool,
    need: [bool; 2],
) -> Result<[Option<Tensor<T>>; 2]> {
    // C = A B       : dA = dC B^T,  dB = A^T dC
    // C = A^T B     : dA = B dC^T,  dB = A dC
    // C = A B^T     : dA = dC B,    dB = dC^T A
    // C = A^T B^T   : dA = B^T dC^T, dB = dC^T A^T
    let da = if need[0] {
        Some(match trans_a {
            false => matmul(dy, b, false, !trans_b)?,
            true => matmul(b, dy, trans_b, true)?,
        })
    } else {
        None
    };
    let db = if need[1] {
        Some(match trans_b {
            false => matmul(a, dy, !trans_a, false)?,
            true => matmul(dy, a, true, trans_a)?,
        })
    } else {
        None
    };
    Ok([da, db])
}

/// Row-wise softmax over the last axis with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.last_dim();
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks_exact(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut sum = T::zero();
        for &v in row {
            let e = (v - max).exp();
            sum += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= sum);
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub fn softmax_rows_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let n = y.last_dim();
    let mut dx = Vec::with_capacity(y.numel());
    for (yr, dr) in y.data().chunks_exact(n).zip(dy.data().chunks_exact(n)) {
        let s: T = yr.iter().zip(dr).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        dx.extend(yr.iter().zip(dr).map(|(&yv, &dv)| yv * (dv - s)));
    }
    Tensor::from_parts(y.shape().to_vec(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn two_by_two_product() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(matmul(&a, &b, false, false).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn identity_right_multiplication() {
        let a = t(&[2, 3], &[1.0, -2.0, 3.5, 0.0, 4.0, -1.0]);
        let i = t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(matmul(&a, &i, false, false).unwrap(), a);
    }

    #[test]
    fn transpose_flags_agree() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3, 2], &[0.5, -1.0, 2.0, 0.25, -3.0, 1.5]);
        let ab = matmul(&a, &b, false, false).unwrap();
        // (A B)^T = B^T A^T
        let btat = matmul(&b, &a, true, true).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((ab.data()[i * 2 + j] - btat.data()[j * 2 + i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn inner_mismatch_is_rejected() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 2]);
        assert!(matmul(&a, &b, false, false).is_err());
    }

    #[test]
    fn softmax_basic_values() {
        let y = softmax_rows(&t(&[1, 2], &[0.0, 0.0]));
        assert_eq!(y.data(), &[0.5, 0.5]);
        let y = softmax_rows(&t(&[1, 3], &[1.0, 2.0, 3.0]));
        // exp(k - 3) / sum, evaluated in extended precision offline.
        let expect = [0.090_030_573_170_380_46, 0.244_728_471_054_797_64, 0.665_240_955_774_821_9];
        for (a, b) in y.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_is_stable_and_shift_invariant() {
        let x = t(&[2, 3], &[1000.0, 1001.0, 999.0, -5.0, 0.0, 3.0]);
        let y = softmax_rows(&x);
        assert!(y.all_finite());
        let shifted = t(&[2, 3], &[1000.0 + 7.5, 1001.0 + 7.5, 999.0 + 7.5, 2.5, 7.5, 10.5]);
        assert!(softmax_rows(&shifted).max_abs_diff(&y) < 1e-12);
        for row in y.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
