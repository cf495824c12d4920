//! 2-D convolution over channel-last feature maps `[B, H, W, C]`.
//!
//! Kernels are stored as `[kh, kw, Cin, Cout]`, which is exactly the row-major
//! `[kh*kw*Cin, Cout]` matrix multiplied against im2col patches. Padding is
//! "same": output extent is `ceil(in / stride)`, zero padding split
//! symmetrically with the odd pixel on the trailing side.

use super::{gemm, Scalar, Tensor};
use crate::error::{Error, Result};

/// Output extent and leading pad for a same-padded axis.
pub fn same_padding(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let needed = ((out.saturating_sub(1)) * stride + kernel).saturating_sub(input);
    (out, needed / 2)
}

/// Geometry of a convolution from an `(h, w, cin)` map to an `(ho, wo, cout)` map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub ho: usize,
    pub wo: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub pad_t: usize,
    pub pad_l: usize,
}

impl ConvGeom {
    pub fn forward(x_shape: &[usize], w_shape: &[usize], stride: (usize, usize)) -> Result<Self> {
        let [batch, h, w, cin] = rank4(x_shape, "conv2d input")?;
        let [kh, kw, wcin, cout] = rank4(w_shape, "conv2d kernel")?;
        check_kernel(kh, kw, stride)?;
        if wcin != cin {
            return Err(Error::Shape(format!(
                "conv2d: input has {cin} channels but kernel expects {wcin}"
            )));
        }
        let (ho, pad_t) = same_padding(h, kh, stride.0);
        let (wo, pad_l) = same_padding(w, kw, stride.1);
        Ok(Self { batch, h, w, cin, ho, wo, cout, kh, kw, sh: stride.0, sw: stride.1, pad_t, pad_l })
    }

    /// Geometry of the convolution whose adjoint maps `y_shape` up to
    /// `(Hi*sh, Wi*sw)`. The kernel `[kh, kw, Cout_t, Cy]` is read with the
    /// transposed convolution's output channels in the `Cin` slot.
    pub fn transpose(y_shape: &[usize], w_shape: &[usize], stride: (usize, usize)) -> Result<Self> {
        let [batch, hi, wi, cy] = rank4(y_shape, "conv_transpose2d input")?;
        let [kh, kw, cout_t, wcy] = rank4(w_shape, "conv_transpose2d kernel")?;
        check_kernel(kh, kw, stride)?;
        if wcy != cy {
            return Err(Error::Shape(format!(
                "conv_transpose2d: input has {cy} channels but kernel expects {wcy}"
            )));
        }
        let (h, w) = (hi * stride.0, wi * stride.1);
        let (ho, pad_t) = same_padding(h, kh, stride.0);
        let (wo, pad_l) = same_padding(w, kw, stride.1);
        if ho != hi || wo != wi {
            return Err(Error::Shape(format!(
                "conv_transpose2d: output extent ({h},{w}) inconsistent with stride {stride:?}"
            )));
        }
        Ok(Self { batch, h, w, cin: cout_t, ho, wo, cout: cy, kh, kw, sh: stride.0, sw: stride.1, pad_t, pad_l })
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn in_len(&self) -> usize {
        self.h * self.w * self.cin
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo * self.cout
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1
    }
}

fn rank4(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    shape
        .try_into()
        .map_err(|_| Error::Shape(format!("{what} must be rank 4, got {shape:?}")))
}

fn check_kernel(kh: usize, kw: usize, stride: (usize, usize)) -> Result<()> {
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Shape(format!("kernel extents must be odd, got ({kh},{kw})")));
    }
    if !(1..=2).contains(&stride.0) || !(1..=2).contains(&stride.1) {
        return Err(Error::Shape(format!("stride components must be 1 or 2, got {stride:?}")));
    }
    Ok(())
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let cin = g.cin;
    let row_len = g.kw * cin;
    let mut o = 0;
    for ho in 0..g.ho {
        for wo in 0..g.wo {
            for i in 0..g.kh {
                let r = (ho * g.sh + i) as isize - g.pad_t as isize;
                let dst = &mut cols[o..o + row_len];
                o += row_len;
                if r < 0 || r >= g.h as isize {
                    dst.fill(T::zero());
                    continue;
                }
                let base = r as usize * g.w * cin;
                for j in 0..g.kw {
                    let c = (wo * g.sw + j) as isize - g.pad_l as isize;
                    let d = &mut dst[j * cin..(j + 1) * cin];
                    if c < 0 || c >= g.w as isize {
                        d.fill(T::zero());
                    } else {
                        let s = base + c as usize * cin;
                        d.copy_from_slice(&x[s..s + cin]);
                    }
                }
            }
        }
    }
}

/// Scatter-adds patch columns back into an input-shaped buffer.
fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], x: &mut [T]) {
    let cin = g.cin;
    let row_len = g.kw * cin;
    let mut o = 0;
    for ho in 0..g.ho {
        for wo in 0..g.wo {
            for i in 0..g.kh {
                let r = (ho * g.sh + i) as isize - g.pad_t as isize;
                let src = &cols[o..o + row_len];
                o += row_len;
                if r < 0 || r >= g.h as isize {
                    continue;
                }
                let base = r as usize * g.w * cin;
                for j in 0..g.kw {
                    let c = (wo * g.sw + j) as isize - g.pad_l as isize;
                    if c < 0 || c >= g.w as isize {
                        continue;
                    }
                    let s = base + c as usize * cin;
                    for (d, &v) in x[s..s + cin].iter_mut().zip(&src[j * cin..(j + 1) * cin]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// `out[b] (+)= conv(x[b]) * W` without bias.
fn conv_apply<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], out: &mut [T], cols: &mut Vec<T>) {
    let (p, k) = (g.positions(), g.patch());
    for b in 0..g.batch {
        let xb = &x[b * g.in_len()..(b + 1) * g.in_len()];
        let ob = &mut out[b * g.out_len()..(b + 1) * g.out_len()];
        if g.is_pointwise() {
            gemm(false, false, p, k, g.cout, xb, w, ob, false);
        } else {
            cols.resize(p * k, T::zero());
            im2col(g, xb, cols);
            gemm(false, false, p, k, g.cout, cols, w, ob, false);
        }
    }
}

/// `dx[b] += col2im(dy[b] * W^T)`.
fn conv_apply_adjoint<T: Scalar>(g: &ConvGeom, dy: &[T], w: &[T], dx: &mut [T], cols: &mut Vec<T>) {
    let (p, k) = (g.positions(), g.patch());
    for b in 0..g.batch {
        let dyb = &dy[b * g.out_len()..(b + 1) * g.out_len()];
        let dxb = &mut dx[b * g.in_len()..(b + 1) * g.in_len()];
        if g.is_pointwise() {
            gemm(false, true, p, g.cout, k, dyb, w, dxb, true);
        } else {
            cols.resize(p * k, T::zero());
            gemm(false, true, p, g.cout, k, dyb, w, cols, false);
            col2im(g, cols, dxb);
        }
    }
}

/// `dw += sum_b im2col(x[b])^T * dy[b]`.
fn conv_kernel_grad<T: Scalar>(g: &ConvGeom, x: &[T], dy: &[T], dw: &mut [T], cols: &mut Vec<T>) {
    let (p, k) = (g.positions(), g.patch());
    for b in 0..g.batch {
        let xb = &x[b * g.in_len()..(b + 1) * g.in_len()];
        let dyb = &dy[b * g.out_len()..(b + 1) * g.out_len()];
        if g.is_pointwise() {
            gemm(true, false, k, p, g.cout, xb, dyb, dw, true);
        } else {
            cols.resize(p * k, T::zero());
            im2col(g, xb, cols);
            gemm(true, false, k, p, g.cout, cols, dyb, dw, true);
        }
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

fn bias_grad<T: Scalar>(dy: &[T], channels: usize) -> Vec<T> {
    let mut db = vec![T::zero(); channels];
    for row in dy.chunks_exact(channels) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    db
}

fn check_bias<T: Scalar>(bias: &Tensor<T>, channels: usize) -> Result<()> {
    if bias.shape() != [channels] {
        return Err(Error::Shape(format!(
            "bias shape {:?} does not match {channels} output channels",
            bias.shape()
        )));
    }
    Ok(())
}

pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, stride: (usize, usize)) -> Result<Tensor<T>> {
    let g = ConvGeom::forward(x.shape(), w.shape(), stride)?;
    check_bias(b, g.cout)?;
    let mut out = vec![T::zero(); g.batch * g.out_len()];
    conv_apply(&g, x.data(), w.data(), &mut out, &mut Vec::new());
    add_bias(&mut out, b.data());
    Ok(Tensor::from_parts(vec![g.batch, g.ho, g.wo, g.cout], out))
}

/// Gradients of `conv2d` with respect to input, kernel and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: (usize, usize),
    need: [bool; 3],
) -> Result<[Option<Tensor<T>>; 3]> {
    let g = ConvGeom::forward(x.shape(), w.shape(), stride)?;
    let mut cols = Vec::new();
    let dx = need[0].then(|| {
        let mut dx = vec![T::zero(); x.numel()];
        conv_apply_adjoint(&g, dy.data(), w.data(), &mut dx, &mut cols);
        Tensor::from_parts(x.shape().to_vec(), dx)
    });
    let dw = need[1].then(|| {
        let mut dw = vec![T::zero(); w.numel()];
        conv_kernel_grad(&g, x.data(), dy.data(), &mut dw, &mut cols);
        Tensor::from_parts(w.shape().to_vec(), dw)
    });
    let db = need[2].then(|| Tensor::from_parts(vec![g.cout], bias_grad(dy.data(), g.cout)));
    Ok([dx, dw, db])
}

/// Transposed convolution: the adjoint of `conv2d` with the same kernel,
/// stride and padding, plus a bias over its output channels (`w.shape()[2]`).
pub fn conv_transpose2d<T: Scalar>(
    y: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: (usize, usize),
) -> Result<Tensor<T>> {
    let g = ConvGeom::transpose(y.shape(), w.shape(), stride)?;
    check_bias(b, g.cin)?;
    let mut out = vec![T::zero(); g.batch * g.in_len()];
    conv_apply_adjoint(&g, y.data(), w.data(), &mut out, &mut Vec::new());
    add_bias(&mut out, b.data());
    Ok(Tensor::from_parts(vec![g.batch, g.h, g.w, g.cin], out))
}

pub fn conv_transpose2d_backward<T: Scalar>(
    y: &Tensor<T>,
    w: &Tensor<T>,
    dout: &Tensor<T>,
    stride: (usize, usize),
    need: [bool; 3],
) -> Result<[Option<Tensor<T>>; 3]> {
    let g = ConvGeom::transpose(y.shape(), w.shape(), stride)?;
    let mut cols = Vec::new();
    let dy = need[0].then(|| {
        let mut dy = vec![T::zero(); y.numel()];
        conv_apply(&g, dout.data(), w.data(), &mut dy, &mut cols);
        Tensor::from_parts(y.shape().to_vec(), dy)
    });
    let dw = need[1].then(|| {
        let mut dw = vec![T::zero(); w.numel()];
        conv_kernel_grad(&g, dout.data(), y.data(), &mut dw, &mut cols);
        Tensor::from_parts(w.shape().to_vec(), dw)
    });
    let db = need[2].then(|| Tensor::from_parts(vec![g.cin], bias_grad(dout.data(), g.cin)));
    Ok([dy, dw, db])
}
