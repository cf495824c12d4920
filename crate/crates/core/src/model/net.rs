use super::blocks::{
    declare_decoder, declare_encoder, declare_interaction, declare_ra_block, decoder, encoder, interaction, ra_block,
    InteractOut, RaOut,
};
use super::config::ModelConfig;
use super::merge::{declare_merge, merge, MergeOut};
use crate::dsp::StftPlan;
use crate::error::{Error, Result};
use crate::nn::{BnMode, Ctx, ParamStore};
use crate::tensor::{Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Speech,
    Noise,
}

impl Branch {
    pub const BOTH: [Branch; 2] = [Branch::Speech, Branch::Noise];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Speech => "speech",
            Branch::Noise => "noise",
        }
    }
}

/// Constant replacements for learned masks, used to probe structural identities.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub interaction_mask: Option<f64>,
    pub gate_mask: Option<f64>,
    pub merge_mask: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    pub branch_bn: BnMode,
    pub merge_bn: BnMode,
    pub overrides: Overrides,
}

impl ForwardOptions {
    pub fn train() -> Self {
        Self { branch_bn: BnMode::Train, merge_bn: BnMode::Train, overrides: Overrides::default() }
    }

    pub fn infer() -> Self {
        Self { branch_bn: BnMode::Infer, merge_bn: BnMode::Infer, overrides: Overrides::default() }
    }
}

/// One branch's estimate as a full one-sided spectrum `[B, T, F + 1, 2]`
/// and its inverse STFT `[B, T * hop]`.
#[derive(Debug, Clone, Copy)]
pub struct BranchOut {
    pub spec: Var,
    pub wave: Var,
}

/// Per-RA-block handles kept for inspection, indexed `[speech, noise]`.
#[derive(Debug, Clone, Copy)]
pub struct BlockInternals {
    pub ra: [RaOut; 2],
    pub interaction: Option<InteractOut>,
}

#[derive(Debug, Clone)]
pub struct NetOut {
    pub speech: BranchOut,
    pub noise: BranchOut,
    pub merged: Option<MergeOut>,
    /// Input length in samples.
    pub len: usize,
    /// Encoder outputs `[speech, noise]`.
    pub encoded: [Var; 2],
    pub blocks: Vec<BlockInternals>,
}

/// The two-branch network. With `merge` false it is the two-output
/// separation variant without the merge stage.
#[derive(Debug, Clone, PartialEq)]
pub struct SnNet {
    pub cfg: ModelConfig,
    pub merge: bool,
}

impl SnNet {
    pub fn enhancement(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, merge: true })
    }

    pub fn separation(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, merge: false })
    }

    pub fn declare<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let c = self.cfg.width();
        for b in Branch::BOTH {
            self.declare_branch(store, b)?;
        }
        if self.cfg.interaction {
            for i in 0..self.cfg.ra_blocks {
                declare_interaction(store, &format!("interact.{i}"), c)?;
            }
        }
        if self.merge {
            declare_merge(store, "merge", self.cfg.attn_divisor)?;
        }
        Ok(())
    }

    fn declare_branch<T: Scalar>(&self, store: &mut ParamStore<T>, b: Branch) -> Result<()> {
        let p = b.name();
        declare_encoder(store, &format!("{p}.enc"), self.cfg.channels)?;
        for i in 0..self.cfg.ra_blocks {
            declare_ra_block(store, &format!("{p}.ra.{i}"), self.cfg.width(), self.cfg.attn_divisor)?;
        }
        declare_decoder(store, &format!("{p}.dec"), self.cfg.channels)
    }

    pub fn init<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new(seed);
        self.declare(&mut store)?;
        Ok(store)
    }

    /// STFT of `[B, N]` waveforms: returns the full spectrum and the
    /// model-facing version without the Nyquist bin.
    pub fn analysis<T: Scalar>(&self, ctx: &mut Ctx<T>, wave: Var) -> Result<(Var, Var)> {
        let spec = ctx.g.stft(wave, self.cfg.stft())?;
        let model_in = ctx.g.slice(spec, 2, 0, self.cfg.freq_bins())?;
        Ok((spec, model_in))
    }

    /// Inverse STFT of a branch estimate, faded in over the leading samples
    /// that a single window edge covers (see [`StftPlan::synthesis_taper`]).
    fn synthesis<T: Scalar>(&self, ctx: &mut Ctx<T>, est: Var) -> Result<BranchOut> {
        let spec = ctx.g.pad(est, 2, 0, 1)?;
        let wave = ctx.g.istft(spec, self.cfg.stft())?;
        let [b, t] = [ctx.value(spec).shape()[0], ctx.value(spec).shape()[1]];
        let taper = StftPlan::<T>::new(self.cfg.stft()).synthesis_taper(t);
        let taper = ctx.input(Tensor::new(&[b, taper.len()], taper.repeat(b))?);
        let wave = ctx.g.mul(wave, taper)?;
        Ok(BranchOut { spec, wave })
    }

    fn check_input<T: Scalar>(&self, ctx: &Ctx<T>, noisy: Var) -> Result<usize> {
        match *ctx.value(noisy).shape() {
            [_, n] if n > 0 => Ok(n),
            ref s => Err(Error::Shape(format!("expected non-empty [B, N] waveforms, got {s:?}"))),
        }
    }

    /// The full network on noisy waveforms `[B, N]`.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<T>, noisy: Var, opts: &ForwardOptions) -> Result<NetOut> {
        let len = self.check_input(ctx, noisy)?;
        ctx.bn_mode = opts.branch_bn;
        let (_, x) = self.analysis(ctx, noisy)?;
        let mut skips = Vec::with_capacity(2);
        for b in Branch::BOTH {
            skips.push(encoder(ctx, &format!("{}.enc", b.name()), x)?);
        }
        let encoded = [skips[0][2], skips[1][2]];
        let (mut s, mut n) = (encoded[0], encoded[1]);
        let mut blocks = Vec::with_capacity(self.cfg.ra_blocks);
        for i in 0..self.cfg.ra_blocks {
            let rs = ra_block(ctx, &format!("speech.ra.{i}"), s)?;
            let rn = ra_block(ctx, &format!("noise.ra.{i}"), n)?;
            (s, n) = (rs.out, rn.out);
            let inter = if self.cfg.interaction {
                let io = interaction(ctx, &format!("interact.{i}"), s, n, opts.overrides.interaction_mask)?;
                (s, n) = (io.speech, io.noise);
                Some(io)
            } else {
                None
            };
            blocks.push(BlockInternals { ra: [rs, rn], interaction: inter });
        }
        let mut outs = Vec::with_capacity(2);
        for (b, (h, sk)) in Branch::BOTH.into_iter().zip([(s, skips[0]), (n, skips[1])]) {
            let est = decoder(ctx, &format!("{}.dec", b.name()), h, sk, x, opts.overrides.gate_mask)?;
            outs.push(self.synthesis(ctx, est)?);
        }
        let (speech, noise) = (outs[0], outs[1]);
        let merged = if self.merge {
            Some(self.merge_stage(ctx, speech.wave, noise.wave, noisy, opts)?)
        } else {
            None
        };
        Ok(NetOut { speech, noise, merged, len, encoded, blocks })
    }

    /// One branch on its own: encoder, RA blocks without any interaction, decoder.
    pub fn branch_alone<T: Scalar>(
        &self,
        ctx: &mut Ctx<T>,
        b: Branch,
        noisy: Var,
        opts: &ForwardOptions,
    ) -> Result<BranchOut> {
        self.check_input(ctx, noisy)?;
        ctx.bn_mode = opts.branch_bn;
        let (_, x) = self.analysis(ctx, noisy)?;
        let p = b.name();
        let skips = encoder(ctx, &format!("{p}.enc"), x)?;
        let mut h = skips[2];
        for i in 0..self.cfg.ra_blocks {
            h = ra_block(ctx, &format!("{p}.ra.{i}"), h)?.out;
        }
        let est = decoder(ctx, &format!("{p}.dec"), h, skips, x, opts.overrides.gate_mask)?;
        self.synthesis(ctx, est)
    }

    /// The merge stage alone, given branch waveforms `[B, T * hop]` and the
    /// noisy input `[B, N]`.
    pub fn merge_stage<T: Scalar>(
        &self,
        ctx: &mut Ctx<T>,
        speech_wave: Var,
        noise_wave: Var,
        noisy: Var,
        opts: &ForwardOptions,
    ) -> Result<MergeOut> {
        if !self.merge {
            return Err(Error::Invalid("the separation network has no merge stage".into()));
        }
        let len = self.check_input(ctx, noisy)?;
        ctx.bn_mode = opts.merge_bn;
        merge(ctx, "merge", speech_wave, noise_wave, noisy, len, self.cfg.stft(), opts.overrides.merge_mask)
    }

    /// Branch waveforms cut to the input length: `(speech, noise)`, each `[B, N]`.
    pub fn branch_waves<T: Scalar>(&self, ctx: &mut Ctx<T>, out: &NetOut) -> Result<(Var, Var)> {
        let s = ctx.g.slice(out.speech.wave, 1, 0, out.len)?;
        let n = ctx.g.slice(out.noise.wave, 1, 0, out.len)?;
        Ok((s, n))
    }
}
