//! Building blocks shared by both branches: encoder, residual and attention
//! blocks, the cross-branch interaction, gated decoder blocks, and the
//! gain/phase output layer. Feature maps are channel-last `[B, T, F, C]`.

use super::config::{attn_width, ENCODER_KERNEL, POINTWISE, RESIDUAL_KERNEL};
use crate::error::{Error, Result};
use crate::nn::{declare_conv, declare_conv_bn_prelu, declare_deconv, Ctx, ParamStore};
use crate::tensor::{Scalar, Tensor, Var};

fn shape4<T: Scalar>(ctx: &Ctx<T>, v: Var) -> Result<[usize; 4]> {
    ctx.value(v)
        .shape()
        .try_into()
        .map_err(|_| Error::Shape(format!("expected a [B, T, F, C] feature map, got {:?}", ctx.value(v).shape())))
}

/// A constant tensor with the given shape, for forced masks.
fn constant_like<T: Scalar>(ctx: &mut Ctx<T>, shape: &[usize], value: f64) -> Var {
    ctx.input(Tensor::full(shape, T::c(value)))
}

pub fn declare_encoder<T: Scalar>(store: &mut ParamStore<T>, p: &str, channels: [usize; 3]) -> Result<()> {
    let mut cin = 2;
    for (i, &c) in channels.iter().enumerate() {
        declare_conv_bn_prelu(store, &format!("{p}.{i}"), ENCODER_KERNEL, cin, c)?;
        cin = c;
    }
    Ok(())
}

/// Three strided conv units; returns every layer's activation, the last
/// being the encoder output with a quarter of the input frequency bins.
pub fn encoder<T: Scalar>(ctx: &mut Ctx<T>, p: &str, x: Var) -> Result<[Var; 3]> {
    let f = shape4(ctx, x)?[2];
    if f % 4 != 0 {
        return Err(Error::Shape(format!("encoder input has {f} bins, which is not divisible by 4")));
    }
    let e1 = ctx.conv_bn_prelu(&format!("{p}.0"), x, (1, 1))?;
    let e2 = ctx.conv_bn_prelu(&format!("{p}.1"), e1, (1, 2))?;
    let e3 = ctx.conv_bn_prelu(&format!("{p}.2"), e2, (1, 2))?;
    Ok([e1, e2, e3])
}

pub fn declare_residual<T: Scalar>(store: &mut ParamStore<T>, p: &str, c: usize) -> Result<()> {
    declare_conv_bn_prelu(store, &format!("{p}.conv1"), RESIDUAL_KERNEL, c, c)?;
    declare_conv_bn_prelu(store, &format!("{p}.conv2"), RESIDUAL_KERNEL, c, c)
}

pub fn residual<T: Scalar>(ctx: &mut Ctx<T>, p: &str, x: Var) -> Result<Var> {
    let y = ctx.conv_bn_prelu(&format!("{p}.conv1"), x, (1, 1))?;
    let y = ctx.conv_bn_prelu(&format!("{p}.conv2"), y, (1, 1))?;
    ctx.g.add(x, y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Attention across frames: a `T x T` matrix.
    Time,
    /// Attention across frequency bins: an `F x F` matrix.
    Freq,
}

pub fn declare_attention<T: Scalar>(store: &mut ParamStore<T>, p: &str, c: usize, divisor: usize) -> Result<()> {
    let h = attn_width(c, divisor);
    for name in ["q", "k", "v"] {
        declare_conv_bn_prelu(store, &format!("{p}.{name}"), POINTWISE, c, h)?;
    }
    declare_conv_bn_prelu(store, &format!("{p}.o"), POINTWISE, h, c)
}

/// Scaled dot-product self-attention along one axis, with the other axis
/// folded into the feature vector. Returns `x + reproject(attend(V))` and
/// the row-stochastic attention matrix `[B, L, L]`.
pub fn attention<T: Scalar>(ctx: &mut Ctx<T>, p: &str, x: Var, axis: Axis) -> Result<(Var, Var)> {
    let q = ctx.conv_bn_prelu(&format!("{p}.q"), x, (1, 1))?;
    let k = ctx.conv_bn_prelu(&format!("{p}.k"), x, (1, 1))?;
    let v = ctx.conv_bn_prelu(&format!("{p}.v"), x, (1, 1))?;
    let [b, t, f, h] = shape4(ctx, q)?;
    let (q, k, v) = match axis {
        Axis::Time => (q, k, v),
        Axis::Freq => (ctx.g.swap_spatial(q)?, ctx.g.swap_spatial(k)?, ctx.g.swap_spatial(v)?),
    };
    let (len, other) = match axis {
        Axis::Time => (t, f),
        Axis::Freq => (f, t),
    };
    let row = other * h;
    let q = ctx.g.reshape(q, &[b, len, row])?;
    let k = ctx.g.reshape(k, &[b, len, row])?;
    let v = ctx.g.reshape(v, &[b, len, row])?;
    let scores = ctx.g.matmul(q, k, false, true)?;
    let scores = ctx.g.affine(scores, T::c(1.0 / (row as f64).sqrt()), T::zero());
    let sa = ctx.g.softmax(scores);
    let att = ctx.g.matmul(sa, v, false, false)?;
    let att = ctx.g.reshape(att, &[b, len, other, h])?;
    let att = match axis {
        Axis::Time => att,
        Axis::Freq => ctx.g.swap_spatial(att)?,
    };
    let o = ctx.conv_bn_prelu(&format!("{p}.o"), att, (1, 1))?;
    Ok((ctx.g.add(x, o)?, sa))
}

pub fn declare_ra_block<T: Scalar>(store: &mut ParamStore<T>, p: &str, c: usize, divisor: usize) -> Result<()> {
    declare_residual(store, &format!("{p}.res.0"), c)?;
    declare_residual(store, &format!("{p}.res.1"), c)?;
    declare_attention(store, &format!("{p}.tatt"), c, divisor)?;
    declare_attention(store, &format!("{p}.fatt"), c, divisor)?;
    declare_conv(store, &format!("{p}.fuse"), POINTWISE, 3 * c, c)
}

/// Outputs of one RA block.
#[derive(Debug, Clone, Copy)]
pub struct RaOut {
    pub out: Var,
    pub residual: Var,
    pub sa_time: Var,
    pub sa_freq: Var,
}

/// Two residual blocks, then temporal and frequency attention in parallel,
/// fused by a pointwise conv over the concatenation `[res, temp, freq]`.
pub fn ra_block<T: Scalar>(ctx: &mut Ctx<T>, p: &str, x: Var) -> Result<RaOut> {
    let r = residual(ctx, &format!("{p}.res.0"), x)?;
    let r = residual(ctx, &format!("{p}.res.1"), r)?;
    let (temp, sa_time) = attention(ctx, &format!("{p}.tatt"), r, Axis::Time)?;
    let (freq, sa_freq) = attention(ctx, &format!("{p}.fatt"), r, Axis::Freq)?;
    let cat = ctx.g.concat(&[r, temp, freq], 3)?;
    let out = ctx.conv(&format!("{p}.fuse"), cat, (1, 1))?;
    Ok(RaOut { out, residual: r, sa_time, sa_freq })
}

pub fn declare_interaction<T: Scalar>(store: &mut ParamStore<T>, p: &str, c: usize) -> Result<()> {
    declare_conv(store, &format!("{p}.n2s"), POINTWISE, 2 * c, c)?;
    declare_conv(store, &format!("{p}.s2n"), POINTWISE, 2 * c, c)
}

/// Outputs of one interaction module.
#[derive(Debug, Clone, Copy)]
pub struct InteractOut {
    pub speech: Var,
    pub noise: Var,
    /// Mask applied to noise features on their way into the speech branch.
    pub mask_n2s: Var,
    pub mask_s2n: Var,
    /// Masked transfers `F_N * M` and `F_S * M'` that are added to each branch.
    pub transfer_n2s: Var,
    pub transfer_s2n: Var,
}

/// `F_S + F_N * sigmoid(conv([F_N, F_S]))` and the mirror for the noise
/// branch, each direction with its own parameters. `forced_mask` replaces
/// both masks by a constant.
pub fn interaction<T: Scalar>(
    ctx: &mut Ctx<T>,
    p: &str,
    speech: Var,
    noise: Var,
    forced_mask: Option<f64>,
) -> Result<InteractOut> {
    let (ss, ns) = (shape4(ctx, speech)?, shape4(ctx, noise)?);
    if ss != ns {
        return Err(Error::Shape(format!("interaction branch shapes differ: {ss:?} vs {ns:?}")));
    }
    let direction = |ctx: &mut Ctx<T>, name: &str, from: Var, to: Var| -> Result<(Var, Var, Var)> {
        let mask = match forced_mask {
            Some(m) => constant_like(ctx, &ss, m),
            None => {
                let cat = ctx.g.concat(&[from, to], 3)?;
                let logits = ctx.conv(&format!("{p}.{name}"), cat, (1, 1))?;
                ctx.g.sigmoid(logits)
            }
        };
        let transfer = ctx.g.mul(from, mask)?;
        Ok((ctx.g.add(to, transfer)?, mask, transfer))
    };
    let (s_out, mask_n2s, transfer_n2s) = direction(ctx, "n2s", noise, speech)?;
    let (n_out, mask_s2n, transfer_s2n) = direction(ctx, "s2n", speech, noise)?;
    Ok(InteractOut { speech: s_out, noise: n_out, mask_n2s, mask_s2n, transfer_n2s, transfer_s2n })
}

/// Per gated block: frequency stride and the encoder activation (0-based)
/// that supplies the skip feature. Deconv widths run the encoder ladder in
/// reverse, so each skip matches the up-sampled resolution.
pub const GATED_LAYOUT: [(usize, usize); 3] = [(2, 1), (2, 0), (1, 0)];

fn gated_widths(channels: [usize; 3]) -> [usize; 3] {
    [channels[2], channels[1], channels[0]]
}

pub fn declare_gated<T: Scalar>(
    store: &mut ParamStore<T>,
    p: &str,
    cin: usize,
    cout: usize,
    skip_c: usize,
) -> Result<()> {
    declare_deconv(store, &format!("{p}.up.conv"), ENCODER_KERNEL, cin, cout)?;
    crate::nn::declare_bn(store, &format!("{p}.up.bn"), cout)?;
    crate::nn::declare_prelu(store, &format!("{p}.up.prelu"), cout)?;
    declare_conv(store, &format!("{p}.gate"), POINTWISE, cout, skip_c)?;
    declare_conv_bn_prelu(store, &format!("{p}.fuse"), POINTWISE, cout + skip_c, cout)
}

/// Deconv up-sampling, a sigmoid gate computed from the deconv feature and
/// applied to the encoder skip, then a pointwise fusion of both.
pub fn gated_block<T: Scalar>(
    ctx: &mut Ctx<T>,
    p: &str,
    x: Var,
    skip: Var,
    stride_f: usize,
    forced_mask: Option<f64>,
) -> Result<Var> {
    let d = ctx.deconv(&format!("{p}.up.conv"), x, (1, stride_f))?;
    let d = ctx.bn(&format!("{p}.up.bn"), d)?;
    let d = ctx.prelu(&format!("{p}.up.prelu"), d)?;
    let (ds, ss) = (shape4(ctx, d)?, shape4(ctx, skip)?);
    if ds[..3] != ss[..3] {
        return Err(Error::Shape(format!("gated block: deconv {ds:?} incompatible with skip {ss:?}")));
    }
    let mask = match forced_mask {
        Some(m) => constant_like(ctx, &ss, m),
        None => {
            let logits = ctx.conv(&format!("{p}.gate"), d, (1, 1))?;
            ctx.g.sigmoid(logits)
        }
    };
    let gated = ctx.g.mul(skip, mask)?;
    let cat = ctx.g.concat(&[d, gated], 3)?;
    ctx.conv_bn_prelu(&format!("{p}.fuse"), cat, (1, 1))
}

pub fn declare_decoder<T: Scalar>(store: &mut ParamStore<T>, p: &str, channels: [usize; 3]) -> Result<()> {
    let mut cin = channels[2];
    for (j, ((_, skip), cout)) in GATED_LAYOUT.into_iter().zip(gated_widths(channels)).enumerate() {
        declare_gated(store, &format!("{p}.{j}"), cin, cout, channels[skip])?;
        cin = cout;
    }
    declare_conv(store, &format!("{p}.out"), POINTWISE, cin, 3)
}

/// Gated blocks back to full frequency resolution, then a pointwise conv to
/// three channels `(g, p_re, p_im)`. Returns the estimate
/// `softplus(g) * X * (p / |p|)`: the input spectrum scaled by a nonnegative
/// gain and rotated by a unit phasor. Degenerate phasors leave the phase alone.
pub fn decoder<T: Scalar>(
    ctx: &mut Ctx<T>,
    p: &str,
    x: Var,
    skips: [Var; 3],
    spec_in: Var,
    forced_gate: Option<f64>,
) -> Result<Var> {
    let mut h = x;
    for (j, (stride_f, skip)) in GATED_LAYOUT.into_iter().enumerate() {
        h = gated_block(ctx, &format!("{p}.{j}"), h, skips[skip], stride_f, forced_gate)?;
    }
    let out = ctx.conv(&format!("{p}.out"), h, (1, 1))?;
    apply_gain_phase(ctx, out, spec_in)
}

/// `softplus(raw[..., 0]) * X * unit(raw[..., 1..3])` for a 3-channel `raw`.
pub fn apply_gain_phase<T: Scalar>(ctx: &mut Ctx<T>, raw: Var, spec_in: Var) -> Result<Var> {
    let g = ctx.g.slice(raw, 3, 0, 1)?;
    let phase = ctx.g.slice(raw, 3, 1, 2)?;
    let gain = ctx.g.softplus(g);
    let unit = ctx.g.unit_phase(phase)?;
    let rotated = ctx.g.complex_mul(spec_in, unit)?;
    ctx.g.mul_last_broadcast(gain, rotated)
}
