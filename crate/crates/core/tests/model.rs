mod common;

use common::{tiny_config, uniform};
use snnet_core::dsp::{frame_signal, overlap_add, StftConfig, Waveform};
use snnet_core::model::blocks::{
    apply_gain_phase, attention, declare_attention, declare_encoder, declare_gated, declare_interaction,
    declare_ra_block, declare_residual, encoder, gated_block, interaction, ra_block, residual, Axis,
};
use snnet_core::model::{Branch, ForwardOptions, ModelConfig, Overrides, SnNet};
use snnet_core::nn::{BnMode, Ctx, ParamStore};
use snnet_core::tensor::{Tensor, Var};

fn zero(store: &mut ParamStore<f64>, name: &str) {
    let shape = store.get(name).unwrap().shape().to_vec();
    store.set(name, Tensor::zeros(&shape)).unwrap();
}

fn train_ctx(store: &ParamStore<f64>) -> Ctx<'_, f64> {
    let mut ctx = Ctx::new(store, false);
    ctx.bn_mode = BnMode::Train;
    ctx
}

fn rows_sum_to_one(t: &Tensor<f64>) {
    let n = *t.shape().last().unwrap();
    assert_eq!(t.shape()[t.shape().len() - 2], n, "attention matrices are square");
    for row in t.data().chunks(n) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|v| *v >= 0.0));
    }
}

#[test]
fn encoder_quarters_frequency_and_keeps_time() {
    for (channels, t, f) in [([16, 32, 64], 200, 160), ([4, 8, 16], 50, 32), ([2, 3, 4], 7, 4)] {
        let mut store = ParamStore::<f64>::new(1);
        declare_encoder(&mut store, "enc", channels).unwrap();
        let mut ctx = train_ctx(&store);
        let x = ctx.input(uniform(&[1, t, f, 2], -1.0, 1.0, 2));
        let [e1, e2, e3] = encoder(&mut ctx, "enc", x).unwrap();
        assert_eq!(ctx.value(e1).shape(), [1, t, f, channels[0]]);
        assert_eq!(ctx.value(e2).shape(), [1, t, f / 2, channels[1]]);
        assert_eq!(ctx.value(e3).shape(), [1, t, f / 4, channels[2]]);
    }
}

#[test]
fn residual_with_zero_convs_is_identity() {
    let mut store = ParamStore::<f64>::new(3);
    declare_residual(&mut store, "res", 6).unwrap();
    zero(&mut store, "res.conv1.conv.weight");
    zero(&mut store, "res.conv2.conv.weight");
    let x = uniform(&[2, 5, 4, 6], -1.0, 1.0, 4);
    let mut ctx = train_ctx(&store);
    let xv = ctx.input(x.clone());
    let y = residual(&mut ctx, "res", xv).unwrap();
    assert_eq!(ctx.value(y), &x);
}

#[test]
fn residual_gradient_has_identity_component() {
    // With the second conv zeroed the block is x + 0, so d out / d x = I.
    let mut store = ParamStore::<f64>::new(5);
    declare_residual(&mut store, "res", 3).unwrap();
    zero(&mut store, "res.conv2.conv.weight");
    let x = uniform(&[1, 4, 4, 3], -1.0, 1.0, 6);
    let r = snnet_core::nn::check_inputs(&[x.clone()], 1e-6, 1, |g, v| {
        let mut ctx = Ctx::new(&store, true);
        ctx.bn_mode = BnMode::Train;
        ctx.g = std::mem::take(g);
        let y = residual(&mut ctx, "res", v[0]);
        *g = std::mem::take(&mut ctx.g);
        y
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6);
    let mut ctx = Ctx::new(&store, true);
    ctx.bn_mode = BnMode::Train;
    let xv = ctx.g.leaf(x.clone(), true);
    let y = residual(&mut ctx, "res", xv).unwrap();
    let seed = uniform(&[1, 4, 4, 3], -1.0, 1.0, 7);
    let grads = ctx.g.backward_with(y, seed.clone()).unwrap();
    assert_eq!(grads.get(xv).unwrap(), &seed);
}

fn attention_case(axis: Axis, shape: [usize; 4], zero_value: bool) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let mut store = ParamStore::<f64>::new(8);
    declare_attention(&mut store, "att", shape[3], 2).unwrap();
    if zero_value {
        zero(&mut store, "att.v.conv.weight");
    }
    let x = uniform(&shape, -1.0, 1.0, 9);
    let mut ctx = train_ctx(&store);
    let xv = ctx.input(x.clone());
    let (y, sa) = attention(&mut ctx, "att", xv, axis).unwrap();
    (x, ctx.value(y).clone(), ctx.value(sa).clone())
}

#[test]
fn attention_matrices_are_row_stochastic() {
    let (_, y, sa) = attention_case(Axis::Time, [2, 6, 4, 4], false);
    assert_eq!(y.shape(), [2, 6, 4, 4]);
    assert_eq!(sa.shape(), [2, 6, 6]);
    rows_sum_to_one(&sa);
    let (_, y, sa) = attention_case(Axis::Freq, [2, 6, 4, 4], false);
    assert_eq!(y.shape(), [2, 6, 4, 4]);
    assert_eq!(sa.shape(), [2, 4, 4]);
    rows_sum_to_one(&sa);
}

#[test]
fn zero_value_projection_makes_attention_an_identity() {
    for axis in [Axis::Time, Axis::Freq] {
        let (x, y, _) = attention_case(axis, [2, 5, 4, 4], true);
        assert_eq!(x, y);
    }
}

#[test]
fn single_position_attention_is_trivial() {
    let (_, _, sa) = attention_case(Axis::Time, [2, 1, 4, 4], false);
    assert_eq!(sa.data(), [1.0, 1.0]);
    let (_, _, sa) = attention_case(Axis::Freq, [2, 5, 1, 4], false);
    assert_eq!(sa.data(), [1.0, 1.0]);
}

#[test]
fn ra_block_reduces_to_residual_path() {
    let c = 4;
    let mut store = ParamStore::<f64>::new(10);
    declare_ra_block(&mut store, "ra", c, 2).unwrap();
    zero(&mut store, "ra.tatt.v.conv.weight");
    zero(&mut store, "ra.fatt.v.conv.weight");
    let mut fuse = Tensor::zeros(&[1, 1, 3 * c, c]);
    for i in 0..c {
        fuse.data_mut()[i * c + i] = 1.0;
    }
    store.set("ra.fuse.weight", fuse).unwrap();
    let x = uniform(&[2, 5, 4, c], -1.0, 1.0, 11);
    let mut ctx = train_ctx(&store);
    let xv = ctx.input(x);
    let out = ra_block(&mut ctx, "ra", xv).unwrap();
    let r = residual(&mut ctx, "ra.res.0", xv).unwrap();
    let r = residual(&mut ctx, "ra.res.1", r).unwrap();
    assert_eq!(ctx.value(out.out).shape(), [2, 5, 4, c]);
    assert!(ctx.value(out.out).max_abs_diff(ctx.value(r)) < 1e-12);
    rows_sum_to_one(ctx.value(out.sa_time));
    rows_sum_to_one(ctx.value(out.sa_freq));
}

fn interaction_inputs(ctx: &mut Ctx<f64>) -> (Var, Var, Tensor<f64>, Tensor<f64>) {
    let s = uniform(&[2, 3, 4, 4], -1.0, 1.0, 12);
    let n = uniform(&[2, 3, 4, 4], -1.0, 1.0, 13);
    (ctx.input(s.clone()), ctx.input(n.clone()), s, n)
}

#[test]
fn interaction_mask_boundaries() {
    let mut store = ParamStore::<f64>::new(14);
    declare_interaction(&mut store, "int", 4).unwrap();
    let mut ctx = train_ctx(&store);
    let (sv, nv, s, n) = interaction_inputs(&mut ctx);
    let off = interaction(&mut ctx, "int", sv, nv, Some(0.0)).unwrap();
    assert_eq!(ctx.value(off.speech), &s);
    assert_eq!(ctx.value(off.noise), &n);
    let on = interaction(&mut ctx, "int", sv, nv, Some(1.0)).unwrap();
    let mut sum = s.clone();
    sum.add_assign(&n);
    assert_eq!(ctx.value(on.speech), &sum);
    assert_eq!(ctx.value(on.noise), &sum);
}

#[test]
fn interaction_with_saturated_negative_bias_decouples() {
    let mut store = ParamStore::<f64>::new(15);
    declare_interaction(&mut store, "int", 4).unwrap();
    for dir in ["n2s", "s2n"] {
        zero(&mut store, &format!("int.{dir}.weight"));
        store.set(&format!("int.{dir}.bias"), Tensor::full(&[4], -40.0)).unwrap();
    }
    let mut ctx = train_ctx(&store);
    let (sv, nv, s, n) = interaction_inputs(&mut ctx);
    let out = interaction(&mut ctx, "int", sv, nv, None).unwrap();
    assert!(ctx.value(out.speech).max_abs_diff(&s) < 1e-6);
    assert!(ctx.value(out.noise).max_abs_diff(&n) < 1e-6);
    assert!(ctx.value(out.mask_n2s).data().iter().all(|m| *m > 0.0 && *m < 1e-6));
}

#[test]
fn interaction_is_symmetric_under_branch_swap() {
    let mut store = ParamStore::<f64>::new(16);
    declare_interaction(&mut store, "int", 4).unwrap();
    let mut swapped = store.clone();
    for (a, b) in [("n2s", "s2n"), ("s2n", "n2s")] {
        for p in ["weight", "bias"] {
            let v = store.get(&format!("int.{a}.{p}")).unwrap().clone();
            swapped.set(&format!("int.{b}.{p}"), v).unwrap();
        }
    }
    let mut ctx = train_ctx(&store);
    let (sv, nv, _, _) = interaction_inputs(&mut ctx);
    let out = interaction(&mut ctx, "int", sv, nv, None).unwrap();
    let mut ctx2 = train_ctx(&swapped);
    let (sv2, nv2, _, _) = interaction_inputs(&mut ctx2);
    let out2 = interaction(&mut ctx2, "int", nv2, sv2, None).unwrap();
    assert_eq!(ctx.value(out.speech), ctx2.value(out2.noise));
    assert_eq!(ctx.value(out.noise), ctx2.value(out2.speech));
}

#[test]
fn gated_block_shapes_and_closed_gate() {
    let mut store = ParamStore::<f64>::new(17);
    declare_gated(&mut store, "g", 8, 6, 3).unwrap();
    let x = uniform(&[1, 4, 5, 8], -1.0, 1.0, 18);
    let skip_a = uniform(&[1, 4, 10, 3], -1.0, 1.0, 19);
    let skip_b = uniform(&[1, 4, 10, 3], -1.0, 1.0, 20);
    let run = |skip: &Tensor<f64>, stride: usize, mask: Option<f64>| {
        let mut ctx = train_ctx(&store);
        let xv = ctx.input(x.clone());
        let sv = ctx.input(skip.clone());
        let y = gated_block(&mut ctx, "g", xv, sv, stride, mask).unwrap();
        ctx.value(y).clone()
    };
    let open = run(&skip_a, 2, None);
    assert_eq!(open.shape(), [1, 4, 10, 6]);
    assert_ne!(open, run(&skip_b, 2, None));
    assert_eq!(run(&skip_a, 2, Some(0.0)), run(&skip_b, 2, Some(0.0)));
    let same = run(&uniform(&[1, 4, 5, 3], -1.0, 1.0, 21), 1, None);
    assert_eq!(same.shape(), [1, 4, 5, 6]);
}

fn gain_phase(raw: Tensor<f64>, spec: Tensor<f64>) -> Tensor<f64> {
    let store = ParamStore::<f64>::new(0);
    let mut ctx = Ctx::new(&store, false);
    let r = ctx.input(raw);
    let s = ctx.input(spec);
    let y = apply_gain_phase(&mut ctx, r, s).unwrap();
    ctx.value(y).clone()
}

#[test]
fn decoder_output_layer_formulas() {
    let (t, f) = (3, 4);
    let spec = uniform(&[1, t, f, 2], -1.0, 1.0, 22);
    // softplus(ln(e - 1)) = 1 and the pair (1, 0) is the identity rotation.
    let mut raw = Tensor::zeros(&[1, t, f, 3]);
    for px in raw.data_mut().chunks_mut(3) {
        px.copy_from_slice(&[(std::f64::consts::E - 1.0).ln(), 1.0, 0.0]);
    }
    assert!(gain_phase(raw.clone(), spec.clone()).max_abs_diff(&spec) < 1e-15);

    for px in raw.data_mut().chunks_mut(3) {
        px[0] = -50.0;
    }
    assert!(gain_phase(raw, spec.clone()).data().iter().all(|v| v.abs() < 1e-21));

    let raw = uniform(&[1, t, f, 3], -2.0, 2.0, 23);
    let out = gain_phase(raw.clone(), spec.clone());
    for i in 0..t * f {
        let g = raw.data()[3 * i].exp().ln_1p();
        let mag_in = spec.data()[2 * i].hypot(spec.data()[2 * i + 1]);
        let mag_out = out.data()[2 * i].hypot(out.data()[2 * i + 1]);
        assert!((mag_out - g * mag_in).abs() < 1e-12);
    }
}

fn desk_net() -> (SnNet, ParamStore<f64>) {
    let net = SnNet::enhancement(tiny_config()).unwrap();
    let store = net.init(24).unwrap();
    (net, store)
}

#[test]
fn merge_mask_boundaries() {
    let (net, store) = desk_net();
    let cfg = net.cfg.stft();
    let len = 45;
    let s = uniform(&[1, len], -1.0, 1.0, 25);
    let n = uniform(&[1, len], -1.0, 1.0, 26);
    let x = uniform(&[1, len], -1.0, 1.0, 27);
    let run = |m: f64, noise: &Tensor<f64>| {
        let mut ctx = Ctx::new(&store, false);
        let (sv, nv, xv) = (ctx.input(s.clone()), ctx.input(noise.clone()), ctx.input(x.clone()));
        let opts = ForwardOptions { overrides: Overrides { merge_mask: Some(m), ..Overrides::default() }, ..ForwardOptions::train() };
        let out = net.merge_stage(&mut ctx, sv, nv, xv, &opts).unwrap();
        ctx.value(out.wave).data().to_vec()
    };
    let ola = |frames: Vec<f64>| {
        let m = snnet_core::dsp::FrameMatrix { frames: cfg.frames_for(len), frame_len: cfg.n_fft, data: frames };
        overlap_add(&m, cfg).unwrap().samples()[..len].to_vec()
    };
    let frames = |t: &Tensor<f64>| frame_signal(&Waveform::new(t.data().to_vec()).unwrap(), cfg).data;

    assert_eq!(run(1.0, &n), ola(frames(&s)));
    let residual: Vec<f64> = frames(&x).iter().zip(frames(&n)).map(|(a, b)| a - b).collect();
    assert_eq!(run(0.0, &n), ola(residual));
    let half: Vec<f64> = frames(&s).iter().zip(frames(&x)).map(|(a, b)| (a + b) / 2.0).collect();
    let got = run(0.5, &Tensor::zeros(&[1, len]));
    for (a, b) in got.iter().zip(ola(half)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn zero_interaction_masks_decouple_the_branches() {
    let (net, store) = desk_net();
    let x = uniform(&[2, 64], -0.5, 0.5, 28);
    for mode in [BnMode::Train, BnMode::Infer] {
        let opts = ForwardOptions {
            branch_bn: mode,
            merge_bn: mode,
            overrides: Overrides { interaction_mask: Some(0.0), ..Overrides::default() },
        };
        let mut ctx = Ctx::new(&store, false);
        let xv = ctx.input(x.clone());
        let full = net.forward(&mut ctx, xv, &opts).unwrap();
        for (b, out) in [(Branch::Speech, full.speech), (Branch::Noise, full.noise)] {
            let mut alone_ctx = Ctx::new(&store, false);
            let xa = alone_ctx.input(x.clone());
            let alone = net.branch_alone(&mut alone_ctx, b, xa, &opts).unwrap();
            assert_eq!(ctx.value(out.wave), alone_ctx.value(alone.wave), "{b:?} {mode:?}");
            assert_eq!(ctx.value(out.spec), alone_ctx.value(alone.spec));
        }
    }
}

#[test]
fn forward_exposes_consistent_internals() {
    let (net, store) = desk_net();
    let len = 61;
    let mut ctx = Ctx::new(&store, false);
    let xv = ctx.input(uniform(&[2, len], -0.5, 0.5, 29));
    let out = net.forward(&mut ctx, xv, &ForwardOptions::train()).unwrap();
    let cfg = net.cfg.stft();
    let t = cfg.frames_for(len);
    assert_eq!(ctx.value(out.speech.spec).shape(), [2, t, cfg.bins(), 2]);
    assert_eq!(ctx.value(out.speech.wave).shape(), [2, t * cfg.hop]);
    let merged = out.merged.unwrap();
    assert_eq!(ctx.value(merged.wave).shape(), [2, len]);
    assert!(ctx.value(merged.mask).data().iter().all(|m| *m > 0.0 && *m < 1.0));
    rows_sum_to_one(ctx.value(merged.sa_time.unwrap()));
    // The Nyquist bin of each estimate is zero.
    let spec = ctx.value(out.speech.spec);
    for px in spec.data().chunks(2 * cfg.bins()) {
        assert_eq!(&px[2 * cfg.bins() - 2..], [0.0, 0.0]);
    }
    assert_eq!(out.blocks.len(), net.cfg.ra_blocks);
    for blk in &out.blocks {
        for ra in blk.ra {
            rows_sum_to_one(ctx.value(ra.sa_time));
            rows_sum_to_one(ctx.value(ra.sa_freq));
        }
        let inter = blk.interaction.unwrap();
        for m in [inter.mask_n2s, inter.mask_s2n] {
            assert!(ctx.value(m).data().iter().all(|v| *v > 0.0 && *v < 1.0));
        }
    }
}

#[test]
fn full_size_forward_keeps_length_and_is_deterministic() {
    let net = SnNet::enhancement(ModelConfig::default()).unwrap();
    let run = || {
        let store: ParamStore<f32> = net.init(30).unwrap();
        let mut ctx = Ctx::new(&store, false);
        let xv = ctx.input(uniform(&[1, 32_000], -0.5, 0.5, 31).cast());
        let out = net.forward(&mut ctx, xv, &ForwardOptions::infer()).unwrap();
        assert_eq!(ctx.value(out.encoded[0]).shape(), [1, 200, 40, 64]);
        ctx.value(out.merged.unwrap().wave).clone()
    };
    let a = run();
    assert_eq!(a.shape(), [1, 32_000]);
    assert!(a.all_finite());
    assert_eq!(a, run());
}

#[test]
fn separation_branches_are_disjoint_twins() {
    let net = SnNet::separation(tiny_config()).unwrap();
    let store: ParamStore<f64> = net.init(32).unwrap();
    assert!(!store.names().any(|n| n.starts_with("merge.")));
    let speech: Vec<_> = store.params().filter(|(n, _)| n.starts_with("speech.")).collect();
    let noise: Vec<_> = store.params().filter(|(n, _)| n.starts_with("noise.")).collect();
    assert_eq!(speech.len(), noise.len());
    for ((a, ta), (b, tb)) in speech.iter().zip(&noise) {
        assert_eq!(a.strip_prefix("speech."), b.strip_prefix("noise."));
        assert_eq!(ta.shape(), tb.shape());
    }
    let mut ctx = Ctx::new(&store, false);
    let xv = ctx.input(Tensor::zeros(&[1, 50]));
    let out = net.forward(&mut ctx, xv, &ForwardOptions::train()).unwrap();
    assert!(out.merged.is_none());
    for w in [out.speech.wave, out.noise.wave] {
        assert!(ctx.value(w).data().iter().all(|v| *v == 0.0));
    }
}

#[test]
fn stft_config_follows_model_config() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.stft(), StftConfig { n_fft: 320, hop: 160 });
    assert_eq!(cfg.freq_bins(), 160);
}
