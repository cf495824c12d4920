//! Per-channel batch normalization and PReLU over channel-last tensors.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;
pub const PRELU_INIT: f64 = 0.25;

/// Statistics saved by a batch-norm forward pass for its backward pass.
#[derive(Debug, Clone)]
pub struct BnSaved<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
}

fn check_channels<T: Scalar>(x: &Tensor<T>, p: &Tensor<T>, what: &str) -> Result<usize> {
    let c = x.last_dim();
    if p.shape() != [c] {
        return Err(Error::Shape(format!("{what}: expected [{c}], got {:?}", p.shape())));
    }
    Ok(c)
}

/// Train mode: normalizes with the batch's population mean and variance per channel.
pub fn batch_norm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, BnSaved<T>)> {
    let c = check_channels(x, gamma, "batch_norm gamma")?;
    check_channels(x, beta, "batch_norm beta")?;
    let n = x.numel() / c;
    let mut mean = vec![T::zero(); c];
    for row in x.data().chunks_exact(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let nn = T::c(n as f64);
    mean.iter_mut().for_each(|m| *m /= nn);
    let mut var = vec![T::zero(); c];
    for row in x.data().chunks_exact(c) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= nn);
    let eps = T::c(BN_EPS);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let y = affine_normalize(x, &mean, &inv_std, gamma.data(), beta.data());
    Ok((y, BnSaved { mean, var, inv_std }))
}

/// Infer mode: normalizes with supplied running statistics.
pub fn batch_norm_infer<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
) -> Result<(Tensor<T>, BnSaved<T>)> {
    check_channels(x, gamma, "batch_norm gamma")?;
    check_channels(x, beta, "batch_norm beta")?;
    check_channels(x, running_mean, "batch_norm running mean")?;
    check_channels(x, running_var, "batch_norm running var")?;
    let eps = T::c(BN_EPS);
    let inv_std: Vec<T> = running_var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mean = running_mean.data().to_vec();
    let y = affine_normalize(x, &mean, &inv_std, gamma.data(), beta.data());
    let var = running_var.data().to_vec();
    Ok((y, BnSaved { mean, var, inv_std }))
}

fn affine_normalize<T: Scalar>(x: &Tensor<T>, mean: &[T], inv_std: &[T], gamma: &[T], beta: &[T]) -> Tensor<T> {
    let c = mean.len();
    let scale: Vec<T> = inv_std.iter().zip(gamma).map(|(&s, &g)| s * g).collect();
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks_exact(c) {
        for i in 0..c {
            out.push((row[i] - mean[i]) * scale[i] + beta[i]);
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Backward of batch norm. `train` selects whether the statistics depend on `x`.
pub fn batch_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    saved: &BnSaved<T>,
    dy: &Tensor<T>,
    train: bool,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = gamma.numel();
    let n = x.numel() / c;
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (xr, dr) in x.data().chunks_exact(c).zip(dy.data().chunks_exact(c)) {
        for i in 0..c {
            let xhat = (xr[i] - saved.mean[i]) * saved.inv_std[i];
            dgamma[i] += dr[i] * xhat;
            dbeta[i] += dr[i];
        }
    }
    let g = gamma.data();
    let mut dx = Vec::with_capacity(x.numel());
    if train {
        // dx = g*inv_std/N * (N*dy - sum(dy) - xhat*sum(dy*xhat))
        let nn = T::c(n as f64);
        for (xr, dr) in x.data().chunks_exact(c).zip(dy.data().chunks_exact(c)) {
            for i in 0..c {
                let xhat = (xr[i] - saved.mean[i]) * saved.inv_std[i];
                let k = g[i] * saved.inv_std[i] / nn;
                dx.push(k * (nn * dr[i] - dbeta[i] - xhat * dgamma[i]));
            }
        }
    } else {
        for dr in dy.data().chunks_exact(c) {
            for i in 0..c {
                dx.push(dr[i] * g[i] * saved.inv_std[i]);
            }
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    )
}

/// Exponential moving average update of running statistics.
pub fn update_running_stats<T: Scalar>(running_mean: &mut Tensor<T>, running_var: &mut Tensor<T>, saved: &BnSaved<T>) {
    let m = T::c(BN_MOMENTUM);
    let one_minus = T::one() - m;
    for (r, &b) in running_mean.data_mut().iter_mut().zip(&saved.mean) {
        *r = m * *r + one_minus * b;
    }
    for (r, &b) in running_var.data_mut().iter_mut().zip(&saved.var) {
        *r = m * *r + one_minus * b;
    }
}

pub fn prelu<T: Scalar>(x: &Tensor<T>, slope: &Tensor<T>) -> Result<Tensor<T>> {
    let c = check_channels(x, slope, "prelu slope")?;
    let a = slope.data();
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks_exact(c) {
        for i in 0..c {
            let v = row[i];
            out.push(if v > T::zero() { v } else { a[i] * v });
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub fn prelu_backward<T: Scalar>(x: &Tensor<T>, slope: &Tensor<T>, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let c = slope.numel();
    let a = slope.data();
    let mut dx = Vec::with_capacity(x.numel());
    let mut da = vec![T::zero(); c];
    for (xr, dr) in x.data().chunks_exact(c).zip(dy.data().chunks_exact(c)) {
        for i in 0..c {
            if xr[i] > T::zero() {
                dx.push(dr[i]);
            } else {
                dx.push(a[i] * dr[i]);
                da[i] += xr[i] * dr[i];
            }
        }
    }
    (Tensor::from_parts(x.shape().to_vec(), dx), Tensor::from_parts(vec![c], da))
}
