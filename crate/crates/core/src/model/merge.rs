//! Time-domain merge of the two branch estimates.

use super::blocks::{attention, declare_attention, Axis};
use super::config::MERGE_KERNEL;
use crate::dsp::StftConfig;
use crate::error::{Error, Result};
use crate::nn::{declare_conv, declare_conv_bn_prelu, Ctx, ParamStore};
use crate::tensor::{Scalar, Tensor, Var};

const MERGE_CHANNELS: usize = 3;

pub fn declare_merge<T: Scalar>(store: &mut ParamStore<T>, p: &str, attn_divisor: usize) -> Result<()> {
    declare_conv_bn_prelu(store, &format!("{p}.conv0"), MERGE_KERNEL, 3, MERGE_CHANNELS)?;
    declare_attention(store, &format!("{p}.att"), MERGE_CHANNELS, attn_divisor)?;
    declare_conv_bn_prelu(store, &format!("{p}.conv1"), MERGE_KERNEL, MERGE_CHANNELS, MERGE_CHANNELS)?;
    declare_conv(store, &format!("{p}.out"), MERGE_KERNEL, MERGE_CHANNELS, 1)?;
    Ok(())
}

/// Outputs of the merge stage.
#[derive(Debug, Clone, Copy)]
pub struct MergeOut {
    /// Enhanced waveform `[B, len]`.
    pub wave: Var,
    /// Mask `[B, T, K]` in (0, 1).
    pub mask: Var,
    /// Temporal attention matrix `[B, T, T]`, absent when the mask is forced.
    pub sa_time: Option<Var>,
}

/// Frames the speech estimate, the noise estimate, and the noisy input,
/// predicts a per-sample mask `m`, and overlap-adds
/// `m * s + (1 - m) * (x - n)` back to `len` samples.
pub fn merge<T: Scalar>(
    ctx: &mut Ctx<T>,
    p: &str,
    speech: Var,
    noise: Var,
    noisy: Var,
    len: usize,
    cfg: StftConfig,
    forced_mask: Option<f64>,
) -> Result<MergeOut> {
    let s = ctx.g.frame(speech, cfg)?;
    let n = ctx.g.frame(noise, cfg)?;
    let x = ctx.g.frame(noisy, cfg)?;
    let shape = ctx.value(s).shape().to_vec();
    for v in [n, x] {
        if ctx.value(v).shape() != shape.as_slice() {
            return Err(Error::Shape(format!(
                "merge inputs frame differently: {:?} vs {shape:?}",
                ctx.value(v).shape()
            )));
        }
    }
    let (b, t, k) = (shape[0], shape[1], shape[2]);
    let (mask, sa_time) = match forced_mask {
        Some(m) => (ctx.input(Tensor::full(&shape, T::c(m))), None),
        None => {
            let as_channel = |ctx: &mut Ctx<T>, v: Var| ctx.g.reshape(v, &[b, t, k, 1]);
            let planes = [as_channel(ctx, s)?, as_channel(ctx, n)?, as_channel(ctx, x)?];
            let h = ctx.g.concat(&planes, 3)?;
            let h = ctx.conv_bn_prelu(&format!("{p}.conv0"), h, (1, 1))?;
            let (h, sa) = attention(ctx, &format!("{p}.att"), h, Axis::Time)?;
            let h = ctx.conv_bn_prelu(&format!("{p}.conv1"), h, (1, 1))?;
            let logits = ctx.conv(&format!("{p}.out"), h, (1, 1))?;
            let m = ctx.g.sigmoid(logits);
            (ctx.g.reshape(m, &[b, t, k])?, Some(sa))
        }
    };
    let speech_part = ctx.g.mul(mask, s)?;
    let residual = ctx.g.sub(x, n)?;
    let keep = ctx.g.affine(mask, -T::one(), T::one());
    let residual_part = ctx.g.mul(keep, residual)?;
    let frames = ctx.g.add(speech_part, residual_part)?;
    let wave = ctx.g.overlap_add(frames, cfg)?;
    let wave = ctx.g.slice(wave, 1, 0, len)?;
    Ok(MergeOut { wave, mask, sa_time })
}
