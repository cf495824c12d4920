//! Tape-style computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward pass is a single reverse sweep.

use super::conv::{conv2d, conv2d_backward, conv_transpose2d, conv_transpose2d_backward};
use super::linalg::{matmul, matmul_backward, softmax_rows, softmax_rows_backward};
use super::norm::{
    batch_norm_backward, batch_norm_infer, batch_norm_train, prelu, prelu_backward, BnSaved,
};
use super::{Scalar, Tensor};
use crate::dsp::kernels::{self as dspk, StftConfig, StftPlan};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Magnitude below which a phase pair is treated as degenerate.
pub const PHASE_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, stride: (usize, usize) },
    ConvTranspose2d { x: Var, w: Var, b: Var, stride: (usize, usize) },
    BatchNorm { x: Var, gamma: Var, beta: Var, saved: BnSaved<T>, train: bool },
    Prelu { x: Var, slope: Var },
    Matmul { a: Var, b: Var, trans_a: bool, trans_b: bool },
    Softmax { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    /// `a[..., 1] * b[..., n]` broadcasting the last axis of `a`.
    MulLastBroadcast { a: Var, b: Var },
    Affine { x: Var, scale: T, shift: T },
    Sigmoid { x: Var },
    Softplus { x: Var },
    Mean { x: Var },
    MeanPerBatch { x: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Pad { x: Var, axis: usize, before: usize },
    Reshape { x: Var },
    /// `[B, H, W, C] -> [B, W, H, C]`.
    SwapSpatial { x: Var },
    /// `z |z|^(p-1)` on `(re, im)` pairs along the last axis, stabilized by `eps` inside `|z|^2`.
    PowerCompress { x: Var, power: T, eps: T },
    ComplexMul { a: Var, b: Var },
    /// `p / |p|` on pairs; degenerate pairs map to `(1, 0)`.
    UnitPhase { x: Var },
    Stft { x: Var, cfg: StftConfig },
    Istft { x: Var, cfg: StftConfig },
    Frame { x: Var, cfg: StftConfig },
    OverlapAdd { x: Var, cfg: StftConfig },
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn pair_shape<T: Scalar>(x: &Tensor<T>, what: &str) -> Result<()> {
    if x.last_dim() != 2 || x.shape().is_empty() {
        return Err(Error::Shape(format!("{what}: last axis must hold (re, im), got {:?}", x.shape())));
    }
    Ok(())
}

fn map<T: Scalar>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Scalar>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

/// Power-law compression of one complex value.
pub fn compress_pair<T: Scalar>(re: T, im: T, power: T, eps: T) -> (T, T) {
    let s = re * re + im * im + eps;
    if s <= T::zero() {
        return (T::zero(), T::zero());
    }
    let r = s.powf((power - T::one()) / T::c(2.0));
    (re * r, im * r)
}

fn strides(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn op(&self, v: Var) -> &Op<T> {
        &self.nodes[v.0].op
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that takes no gradient (data, targets, constant masks).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that may receive a gradient.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: (usize, usize)) -> Result<Var> {
        let y = conv2d(self.value(x), self.value(w), self.value(b), stride)?;
        Ok(self.push(Op::Conv2d { x, w, b, stride }, y, &[x, w, b]))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: (usize, usize)) -> Result<Var> {
        let y = conv_transpose2d(self.value(x), self.value(w), self.value(b), stride)?;
        Ok(self.push(Op::ConvTranspose2d { x, w, b, stride }, y, &[x, w, b]))
    }

    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (y, saved) = batch_norm_train(self.value(x), self.value(gamma), self.value(beta))?;
        Ok(self.push(Op::BatchNorm { x, gamma, beta, saved, train: true }, y, &[x, gamma, beta]))
    }

    pub fn batch_norm_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
    ) -> Result<Var> {
        let (y, saved) =
            batch_norm_infer(self.value(x), self.value(gamma), self.value(beta), running_mean, running_var)?;
        Ok(self.push(Op::BatchNorm { x, gamma, beta, saved, train: false }, y, &[x, gamma, beta]))
    }

    /// Statistics saved by a batch-norm node (used to update running averages).
    pub fn bn_saved(&self, v: Var) -> Option<&BnSaved<T>> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { saved, train: true, .. } => Some(saved),
            _ => None,
        }
    }

    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let y = prelu(self.value(x), self.value(slope))?;
        Ok(self.push(Op::Prelu { x, slope }, y, &[x, slope]))
    }

    pub fn matmul(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let y = matmul(self.value(a), self.value(b), trans_a, trans_b)?;
        Ok(self.push(Op::Matmul { a, b, trans_a, trans_b }, y, &[a, b]))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let y = softmax_rows(self.value(x));
        self.push(Op::Softmax { x }, y, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let y = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add { a, b }, y, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let y = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub { a, b }, y, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let y = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul { a, b }, y, &[a, b]))
    }

    pub fn mul_last_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let n = bv.last_dim();
        let ok = av.last_dim() == 1
            && av.shape().len() == bv.shape().len()
            && av.shape()[..av.shape().len() - 1] == bv.shape()[..bv.shape().len() - 1];
        if !ok {
            return Err(Error::Shape(format!("broadcast mul: {:?} vs {:?}", av.shape(), bv.shape())));
        }
        let mut out = Vec::with_capacity(bv.numel());
        for (&s, row) in av.data().iter().zip(bv.data().chunks_exact(n)) {
            out.extend(row.iter().map(|&v| s * v));
        }
        let y = Tensor::from_parts(bv.shape().to_vec(), out);
        Ok(self.push(Op::MulLastBroadcast { a, b }, y, &[a, b]))
    }

    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let y = map(self.value(x), |v| v * scale + shift);
        self.push(Op::Affine { x, scale, shift }, y, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = map(self.value(x), sigmoid);
        self.push(Op::Sigmoid { x }, y, &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let y = map(self.value(x), softplus);
        self.push(Op::Softplus { x }, y, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data().iter().copied().sum::<T>() / T::c(v.numel() as f64);
        self.push(Op::Mean { x }, Tensor::scalar(m), &[x])
    }

    pub fn mean_per_batch(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let b = *v.shape().first().ok_or_else(|| Error::Shape("mean_per_batch on scalar".into()))?;
        let per = v.numel() / b.max(1);
        let out: Vec<T> = v
            .data()
            .chunks_exact(per.max(1))
            .map(|c| c.iter().copied().sum::<T>() / T::c(per as f64))
            .collect();
        Ok(self.push(Op::MeanPerBatch { x }, Tensor::from_parts(vec![b], out), &[x]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(inputs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape(format!("concat: {s:?} incompatible with {first:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = strides(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let len = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(Op::Concat { inputs: inputs.to_vec(), axis }, Tensor::from_parts(shape, out), inputs))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Shape(format!("slice {start}..{} of axis {axis} in {shape:?}", start + len)));
        }
        let (outer, ext, inner) = strides(&shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            out.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        Ok(self.push(Op::Slice { x, axis, start }, Tensor::from_parts(oshape, out), &[x]))
    }

    /// Zero padding along one axis.
    pub fn pad(&mut self, x: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("pad axis {axis} out of range for {shape:?}")));
        }
        let (outer, ext, inner) = strides(&shape, axis);
        let new_ext = ext + before + after;
        let mut out = vec![T::zero(); outer * new_ext * inner];
        for o in 0..outer {
            let src = &v.data()[o * ext * inner..(o + 1) * ext * inner];
            let dst = o * new_ext * inner + before * inner;
            out[dst..dst + ext * inner].copy_from_slice(src);
        }
        let mut oshape = shape;
        oshape[axis] = new_ext;
        Ok(self.push(Op::Pad { x, axis, before }, Tensor::from_parts(oshape, out), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(Op::Reshape { x }, y, &[x]))
    }

    pub fn swap_spatial(&mut self, x: Var) -> Result<Var> {
        let y = swap_spatial(self.value(x))?;
        Ok(self.push(Op::SwapSpatial { x }, y, &[x]))
    }

    pub fn power_compress(&mut self, x: Var, power: T, eps: T) -> Result<Var> {
        let v = self.value(x);
        pair_shape(v, "power_compress")?;
        let mut out = Vec::with_capacity(v.numel());
        for p in v.data().chunks_exact(2) {
            let (re, im) = compress_pair(p[0], p[1], power, eps);
            out.push(re);
            out.push(im);
        }
        let y = Tensor::from_parts(v.shape().to_vec(), out);
        Ok(self.push(Op::PowerCompress { x, power, eps }, y, &[x]))
    }

    pub fn complex_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        pair_shape(av, "complex_mul")?;
        same_shape(av, bv, "complex_mul")?;
        let mut out = Vec::with_capacity(av.numel());
        for (p, q) in av.data().chunks_exact(2).zip(bv.data().chunks_exact(2)) {
            out.push(p[0] * q[0] - p[1] * q[1]);
            out.push(p[0] * q[1] + p[1] * q[0]);
        }
        let y = Tensor::from_parts(av.shape().to_vec(), out);
        Ok(self.push(Op::ComplexMul { a, b }, y, &[a, b]))
    }

    pub fn unit_phase(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        pair_shape(v, "unit_phase")?;
        let eps = T::c(PHASE_EPS);
        let mut out = Vec::with_capacity(v.numel());
        for p in v.data().chunks_exact(2) {
            let norm = (p[0] * p[0] + p[1] * p[1]).sqrt();
            if norm < eps {
                out.extend([T::one(), T::zero()]);
            } else {
                out.extend([p[0] / norm, p[1] / norm]);
            }
        }
        let y = Tensor::from_parts(v.shape().to_vec(), out);
        Ok(self.push(Op::UnitPhase { x }, y, &[x]))
    }

    /// `[B, N]` waveforms to `[B, frames, bins, 2]` spectra.
    pub fn stft(&mut self, x: Var, cfg: StftConfig) -> Result<Var> {
        let v = self.value(x);
        let [b, n] = rank2(v.shape(), "stft")?;
        if n == 0 {
            return Err(Error::Invalid("stft of an empty signal".into()));
        }
        let frames = cfg.frames_for(n);
        let plan = StftPlan::new(cfg);
        let per = frames * cfg.bins() * 2;
        let mut out = vec![T::zero(); b * per];
        for i in 0..b {
            plan.analyze(&v.data()[i * n..(i + 1) * n], frames, &mut out[i * per..(i + 1) * per]);
        }
        let y = Tensor::from_parts(vec![b, frames, cfg.bins(), 2], out);
        Ok(self.push(Op::Stft { x, cfg }, y, &[x]))
    }

    /// `[B, frames, bins, 2]` spectra to `[B, frames * hop]` waveforms.
    pub fn istft(&mut self, x: Var, cfg: StftConfig) -> Result<Var> {
        let v = self.value(x);
        let [b, frames, bins, two] = rank4(v.shape(), "istft")?;
        if bins != cfg.bins() || two != 2 {
            return Err(Error::Shape(format!("istft expects [B, T, {}, 2], got {:?}", cfg.bins(), v.shape())));
        }
        let plan = StftPlan::new(cfg);
        let per = frames * bins * 2;
        let len = frames * cfg.hop;
        let mut out = vec![T::zero(); b * len];
        for i in 0..b {
            plan.synthesize(&v.data()[i * per..(i + 1) * per], frames, &mut out[i * len..(i + 1) * len]);
        }
        let y = Tensor::from_parts(vec![b, len], out);
        Ok(self.push(Op::Istft { x, cfg }, y, &[x]))
    }

    /// `[B, N]` waveforms to `[B, frames, n_fft]` rectangular frames.
    pub fn frame(&mut self, x: Var, cfg: StftConfig) -> Result<Var> {
        let v = self.value(x);
        let [b, n] = rank2(v.shape(), "frame")?;
        let frames = cfg.frames_for(n);
        let per = frames * cfg.n_fft;
        let mut out = vec![T::zero(); b * per];
        for i in 0..b {
            dspk::frame(cfg, &v.data()[i * n..(i + 1) * n], frames, &mut out[i * per..(i + 1) * per]);
        }
        let y = Tensor::from_parts(vec![b, frames, cfg.n_fft], out);
        Ok(self.push(Op::Frame { x, cfg }, y, &[x]))
    }

    /// `[B, frames, n_fft]` frames to `[B, frames * hop]` by normalized Hann overlap-add.
    pub fn overlap_add(&mut self, x: Var, cfg: StftConfig) -> Result<Var> {
        let v = self.value(x);
        let [b, frames, k] = rank3(v.shape(), "overlap_add")?;
        if k != cfg.n_fft {
            return Err(Error::Shape(format!("overlap_add frame size {k} != {}", cfg.n_fft)));
        }
        let coef = dspk::overlap_add_weights::<T>(cfg, frames);
        let per = frames * k;
        let len = frames * cfg.hop;
        let mut out = vec![T::zero(); b * len];
        for i in 0..b {
            dspk::overlap_add(cfg, &v.data()[i * per..(i + 1) * per], frames, &coef, &mut out[i * len..(i + 1) * len]);
        }
        let y = Tensor::from_parts(vec![b, len], out);
        Ok(self.push(Op::OverlapAdd { x, cfg }, y, &[x]))
    }

    /// Reverse sweep from a scalar `root`, seeding its gradient with 1.
    pub fn backward(&self, root: Var) -> Result<Grads<T>> {
        if self.value(root).numel() != 1 {
            return Err(Error::Shape(format!("backward root must be scalar, got {:?}", self.value(root).shape())));
        }
        let seed = Tensor::full(self.value(root).shape(), T::one());
        self.backward_with(root, seed)
    }

    /// Reverse sweep from `root` with an explicit output gradient.
    pub fn backward_with(&self, root: Var, seed: Tensor<T>) -> Result<Grads<T>> {
        same_shape(self.value(root), &seed, "backward seed")?;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            for (var, g) in self.node_backward(node, &dy)? {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(Grads { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, node: &Node<T>, dy: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let mut out = Vec::new();
        let mut put = |v: Var, g: Option<Tensor<T>>| {
            if let Some(g) = g {
                out.push((v, g));
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d { x, w, b, stride } => {
                let need = [self.needs(x), self.needs(w), self.needs(b)];
                let [dx, dw, db] = conv2d_backward(self.value(x), self.value(w), dy, stride, need)?;
                put(x, dx);
                put(w, dw);
                put(b, db);
            }
            &Op::ConvTranspose2d { x, w, b, stride } => {
                let need = [self.needs(x), self.needs(w), self.needs(b)];
                let [dx, dw, db] = conv_transpose2d_backward(self.value(x), self.value(w), dy, stride, need)?;
                put(x, dx);
                put(w, dw);
                put(b, db);
            }
            Op::BatchNorm { x, gamma, beta, saved, train } => {
                let (dx, dg, db) = batch_norm_backward(self.value(*x), self.value(*gamma), saved, dy, *train);
                put(*x, Some(dx));
                put(*gamma, Some(dg));
                put(*beta, Some(db));
            }
            &Op::Prelu { x, slope } => {
                let (dx, da) = prelu_backward(self.value(x), self.value(slope), dy);
                put(x, Some(dx));
                put(slope, Some(da));
            }
            &Op::Matmul { a, b, trans_a, trans_b } => {
                let need = [self.needs(a), self.needs(b)];
                let [da, db] = matmul_backward(self.value(a), self.value(b), dy, trans_a, trans_b, need)?;
                put(a, da);
                put(b, db);
            }
            &Op::Softmax { x } => put(x, Some(softmax_rows_backward(&node.value, dy))),
            &Op::Add { a, b } => {
                put(a, Some(dy.clone()));
                put(b, Some(dy.clone()));
            }
            &Op::Sub { a, b } => {
                put(a, Some(dy.clone()));
                put(b, Some(map(dy, |v| -v)));
            }
            &Op::Mul { a, b } => {
                if self.needs(a) {
                    put(a, Some(zip_map(dy, self.value(b), |d, y| d * y)));
                }
                if self.needs(b) {
                    put(b, Some(zip_map(dy, self.value(a), |d, x| d * x)));
                }
            }
            &Op::MulLastBroadcast { a, b } => {
                let (av, bv) = (self.value(a), self.value(b));
                let n = bv.last_dim();
                if self.needs(a) {
                    let da: Vec<T> = bv
                        .data()
                        .chunks_exact(n)
                        .zip(dy.data().chunks_exact(n))
                        .map(|(r, d)| r.iter().zip(d).fold(T::zero(), |acc, (&x, &y)| acc + x * y))
                        .collect();
                    put(a, Some(Tensor::from_parts(av.shape().to_vec(), da)));
                }
                if self.needs(b) {
                    let mut db = Vec::with_capacity(bv.numel());
                    for (&s, d) in av.data().iter().zip(dy.data().chunks_exact(n)) {
                        db.extend(d.iter().map(|&v| s * v));
                    }
                    put(b, Some(Tensor::from_parts(bv.shape().to_vec(), db)));
                }
            }
            &Op::Affine { x, scale, .. } => put(x, Some(map(dy, |v| v * scale))),
            &Op::Sigmoid { x } => put(x, Some(zip_map(dy, &node.value, |d, y| d * y * (T::one() - y)))),
            &Op::Softplus { x } => put(x, Some(zip_map(dy, self.value(x), |d, v| d * sigmoid(v)))),
            &Op::Mean { x } => {
                let n = self.value(x).numel();
                let g = dy.data()[0] / T::c(n as f64);
                put(x, Some(Tensor::full(self.value(x).shape(), g)));
            }
            &Op::MeanPerBatch { x } => {
                let xv = self.value(x);
                let b = xv.shape()[0];
                let per = xv.numel() / b.max(1);
                let mut g = Vec::with_capacity(xv.numel());
                for &d in dy.data() {
                    g.extend(std::iter::repeat_n(d / T::c(per as f64), per));
                }
                put(x, Some(Tensor::from_parts(xv.shape().to_vec(), g)));
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = strides(shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let ext = self.value(v).shape()[*axis];
                    if self.needs(v) {
                        let mut g = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            g.extend_from_slice(&dy.data()[base..base + ext * inner]);
                        }
                        put(v, Some(Tensor::from_parts(self.value(v).shape().to_vec(), g)));
                    }
                    offset += ext;
                }
            }
            &Op::Slice { x, axis, start } => {
                let xs = self.value(x).shape();
                let (outer, ext, inner) = strides(xs, axis);
                let len = node.value.shape()[axis];
                let mut g = vec![T::zero(); self.value(x).numel()];
                for o in 0..outer {
                    let dst = o * ext * inner + start * inner;
                    g[dst..dst + len * inner].copy_from_slice(&dy.data()[o * len * inner..(o + 1) * len * inner]);
                }
                put(x, Some(Tensor::from_parts(xs.to_vec(), g)));
            }
            &Op::Pad { x, axis, before } => {
                let xs = self.value(x).shape();
                let (outer, ext, inner) = strides(xs, axis);
                let new_ext = node.value.shape()[axis];
                let mut g = Vec::with_capacity(self.value(x).numel());
                for o in 0..outer {
                    let src = o * new_ext * inner + before * inner;
                    g.extend_from_slice(&dy.data()[src..src + ext * inner]);
                }
                put(x, Some(Tensor::from_parts(xs.to_vec(), g)));
            }
            &Op::Reshape { x } => put(x, Some(dy.clone().reshaped(self.value(x).shape())?)),
            &Op::SwapSpatial { x } => put(x, Some(swap_spatial(dy)?)),
            &Op::PowerCompress { x, power, eps } => {
                let xv = self.value(x);
                let q = (power - T::one()) / T::c(2.0);
                let two_q = q + q;
                let mut g = Vec::with_capacity(xv.numel());
                for (p, d) in xv.data().chunks_exact(2).zip(dy.data().chunks_exact(2)) {
                    let (re, im) = (p[0], p[1]);
                    let s = re * re + im * im + eps;
                    if s <= T::zero() {
                        g.extend([T::zero(), T::zero()]);
                        continue;
                    }
                    let r = s.powf(q);
                    let k = two_q * r / s;
                    let cross = k * re * im;
                    g.push(d[0] * (r + k * re * re) + d[1] * cross);
                    g.push(d[0] * cross + d[1] * (r + k * im * im));
                }
                put(x, Some(Tensor::from_parts(xv.shape().to_vec(), g)));
            }
            &Op::ComplexMul { a, b } => {
                let (av, bv) = (self.value(a), self.value(b));
                // d/da = dy * conj(b), d/db = dy * conj(a)
                let conj_mul = |z: &Tensor<T>| {
                    let mut g = Vec::with_capacity(z.numel());
                    for (q, d) in z.data().chunks_exact(2).zip(dy.data().chunks_exact(2)) {
                        g.push(d[0] * q[0] + d[1] * q[1]);
                        g.push(d[1] * q[0] - d[0] * q[1]);
                    }
                    Tensor::from_parts(z.shape().to_vec(), g)
                };
                if self.needs(a) {
                    put(a, Some(conj_mul(bv)));
                }
                if self.needs(b) {
                    put(b, Some(conj_mul(av)));
                }
            }
            &Op::UnitPhase { x } => {
                let xv = self.value(x);
                let eps = T::c(PHASE_EPS);
                let mut g = Vec::with_capacity(xv.numel());
                for ((p, u), d) in xv.data().chunks_exact(2).zip(node.value.data().chunks_exact(2)).zip(dy.data().chunks_exact(2)) {
                    let norm = (p[0] * p[0] + p[1] * p[1]).sqrt();
                    if norm < eps {
                        g.extend([T::zero(), T::zero()]);
                        continue;
                    }
                    let proj = u[0] * d[0] + u[1] * d[1];
                    g.push((d[0] - u[0] * proj) / norm);
                    g.push((d[1] - u[1] * proj) / norm);
                }
                put(x, Some(Tensor::from_parts(xv.shape().to_vec(), g)));
            }
            &Op::Stft { x, cfg } => {
                let xs = self.value(x).shape();
                let (b, n) = (xs[0], xs[1]);
                let frames = node.value.shape()[1];
                let per = frames * cfg.bins() * 2;
                let plan = StftPlan::new(cfg);
                let mut g = vec![T::zero(); b * n];
                for i in 0..b {
                    plan.analyze_adjoint(&dy.data()[i * per..(i + 1) * per], frames, &mut g[i * n..(i + 1) * n]);
                }
                put(x, Some(Tensor::from_parts(xs.to_vec(), g)));
            }
            &Op::Istft { x, cfg } => {
                let xs = self.value(x).shape();
                let (b, frames) = (xs[0], xs[1]);
                let per = frames * cfg.bins() * 2;
                let len = frames * cfg.hop;
                let plan = StftPlan::new(cfg);
                let mut g = vec![T::zero(); b * per];
                for i in 0..b {
                    plan.synthesize_adjoint(&dy.data()[i * len..(i + 1) * len], frames, &mut g[i * per..(i + 1) * per]);
                }
                put(x, Some(Tensor::from_parts(xs.to_vec(), g)));
            }
            &Op::Frame { x, cfg } => {
                let xs = self.value(x).shape();
                let (b, n) = (xs[0], xs[1]);
                let frames = node.value.shape()[1];
                let per = frames * cfg.n_fft;
                let mut g = vec![T::zero(); b * n];
                for i in 0..b {
                    dspk::frame_adjoint(cfg, &dy.data()[i * per..(i + 1) * per], frames, &mut g[i * n..(i + 1) * n]);
                }
                put(x, Some(Tensor::from_parts(xs.to_vec(), g)));
            }
            &Op::OverlapAdd { x, cfg } => {
                let xs = self.value(x).shape();
                let (b, frames) = (xs[0], xs[1]);
                let per = frames * cfg.n_fft;
                let len = frames * cfg.hop;
                let coef = dspk::overlap_add_weights::<T>(cfg, frames);
                let mut g = vec![T::zero(); b * per];
                for i in 0..b {
                    dspk::overlap_add_adjoint(cfg, &dy.data()[i * len..(i + 1) * len], frames, &coef, &mut g[i * per..(i + 1) * per]);
                }
                put(x, Some(Tensor::from_parts(xs.to_vec(), g)));
            }
        }
        Ok(out)
    }
}

fn swap_spatial<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, h, w, c] = rank4(x.shape(), "swap_spatial")?;
    let mut out = vec![T::zero(); x.numel()];
    let d = x.data();
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let src = ((bi * h + i) * w + j) * c;
                let dst = ((bi * w + j) * h + i) * c;
                out[dst..dst + c].copy_from_slice(&d[src..src + c]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, w, h, c], out))
}

fn rank2(shape: &[usize], what: &str) -> Result<[usize; 2]> {
    shape.try_into().map_err(|_| Error::Shape(format!("{what} expects rank 2, got {shape:?}")))
}

fn rank3(shape: &[usize], what: &str) -> Result<[usize; 3]> {
    shape.try_into().map_err(|_| Error::Shape(format!("{what} expects rank 3, got {shape:?}")))
}

fn rank4(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    shape.try_into().map_err(|_| Error::Shape(format!("{what} expects rank 4, got {shape:?}")))
}
