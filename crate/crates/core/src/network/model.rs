use alloc::format;
use alloc::vec::Vec;

use super::{NetConfig, OUT_SCALE};
use crate::error::{shape_err, Result};
use crate::ftvp::{ftvp_block_named, init_ftvp, CvtTrace};
use crate::params::{Ctx, ParamStore};
use crate::raster::ClassMask;
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::{Tensor, Var};

fn conv_init<T: Real>(store: &mut ParamStore<T>, name: &str, cout: usize, cin: usize, k: usize, rng: &mut Rng) {
    let fan_in = (cin * k * k) as f64;
    store.init_normal(name, &[cout, cin, k, k], libm::sqrt(2.0 / fan_in), rng);
}

fn norm_init<T: Real>(store: &mut ParamStore<T>, prefix: &str, c: usize) {
    store.init_const(&format!("{prefix}.gamma"), &[c], 1.0);
    store.init_const(&format!("{prefix}.beta"), &[c], 0.0);
}

fn decoder_in(cfg: &NetConfig, scale: usize) -> usize {
    let up = if scale == cfg.deepest() { cfg.widths[scale] } else { cfg.widths[scale + 1] };
    let skip = if cfg.skip_scales().contains(&scale) { cfg.widths[scale] } else { 0 };
    up + skip
}

/// Fresh parameters for `cfg`, deterministic in `seed`.
pub fn init_params<T: Real>(cfg: &NetConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = Rng::derive(seed, 1);
    let w = &cfg.widths;
    conv_init(&mut store, "enc.stem.conv", w[0], 3, 3, &mut rng);
    norm_init(&mut store, "enc.stem.bn", w[0]);
    for i in 0..cfg.num_scales() {
        let cin = if i == 0 { w[0] } else { w[i - 1] };
        let p = format!("enc.s{i}");
        conv_init(&mut store, &format!("{p}.conv1"), w[i], cin, 3, &mut rng);
        norm_init(&mut store, &format!("{p}.bn1"), w[i]);
        conv_init(&mut store, &format!("{p}.conv2"), w[i], w[i], 3, &mut rng);
        norm_init(&mut store, &format!("{p}.bn2"), w[i]);
        if cin != w[i] {
            conv_init(&mut store, &format!("{p}.short"), w[i], cin, 1, &mut rng);
        }
    }
    // Block parameters draw from their own stream so that toggling one
    // block leaves every other initial value untouched.
    if let Some(fc) = &cfg.ftvp {
        for &s in &cfg.ftvp_scales {
            let side = cfg.side(s);
            init_ftvp(&mut store, &format!("ftvp{s}"), (w[s], side, side), fc, &mut Rng::derive(seed, 100 + s as u64))?;
        }
    }
    for s in OUT_SCALE..cfg.num_scales() {
        conv_init(&mut store, &format!("dec.s{s}.conv"), w[s], decoder_in(cfg, s), 3, &mut rng);
        norm_init(&mut store, &format!("dec.s{s}.bn"), w[s]);
    }
    for s in cfg.head_scales() {
        conv_init(&mut store, &format!("head.s{s}.w"), cfg.num_classes, w[s], 1, &mut rng);
        store.init_const(&format!("head.s{s}.b"), &[cfg.num_classes], 0.0);
    }
    Ok(store)
}

fn conv_norm<T: Real>(ctx: &mut Ctx<'_, T>, x: Var, conv: &str, bn: &str, relu: bool) -> Result<Var> {
    let k = ctx.p(conv)?;
    let pad = ctx.params().get(conv)?.shape()[2] / 2;
    let y = ctx.tape.conv2d(x, k, 1, pad)?;
    let (g, b) = (ctx.p(&format!("{bn}.gamma"))?, ctx.p(&format!("{bn}.beta"))?);
    let y = ctx.tape.batchnorm(y, g, b)?;
    if relu {
        ctx.tape.relu(y)
    } else {
        Ok(y)
    }
}

fn residual_block<T: Real>(ctx: &mut Ctx<'_, T>, x: Var, p: &str) -> Result<Var> {
    let y = conv_norm(ctx, x, &format!("{p}.conv1"), &format!("{p}.bn1"), true)?;
    let y = conv_norm(ctx, y, &format!("{p}.conv2"), &format!("{p}.bn2"), false)?;
    let short = format!("{p}.short");
    let s = if ctx.params().contains(&short) {
        let k = ctx.p(&short)?;
        ctx.tape.conv2d(x, k, 1, 0)?
    } else {
        x
    };
    let y = ctx.tape.add(y, s)?;
    ctx.tape.relu(y)
}

/// Encoder features `[X_0 … X_{n-1}]`, halving the side at every scale.
pub fn encode<T: Real>(ctx: &mut Ctx<'_, T>, image: Var, cfg: &NetConfig) -> Result<Vec<Var>> {
    let s = cfg.input_size;
    if ctx.tape.shape(image) != [3, s, s] {
        return Err(shape_err("encode", format!("image {:?}, expected [3,{s},{s}]", ctx.tape.shape(image))));
    }
    let mut x = conv_norm(ctx, image, "enc.stem.conv", "enc.stem.bn", true)?;
    let mut feats = Vec::with_capacity(cfg.num_scales());
    for i in 0..cfg.num_scales() {
        x = ctx.tape.maxpool2x2(x)?;
        x = residual_block(ctx, x, &format!("enc.s{i}"))?;
        feats.push(x);
    }
    Ok(feats)
}

pub struct NetOutput {
    /// `(scale, logits [K, side, side])` for every head, finest first.
    pub logits: Vec<(usize, Var)>,
    /// One cycle loss per projection block that cycles, by ascending scale.
    pub cycle_losses: Vec<Var>,
    /// Attention traces of the blocks, by ascending scale.
    pub traces: Vec<(usize, CvtTrace)>,
}

impl NetOutput {
    pub fn final_logits(&self) -> Var {
        self.logits[0].1
    }
}

/// Full forward pass on one `[3, S, S]` image.
pub fn forward<T: Real>(ctx: &mut Ctx<'_, T>, image: Var, cfg: &NetConfig) -> Result<NetOutput> {
    cfg.validate()?;
    let feats = encode(ctx, image, cfg)?;
    let mut projected: Vec<Option<Var>> = alloc::vec![None; cfg.num_scales()];
    let mut cycle_losses = Vec::new();
    let mut traces = Vec::new();
    if let Some(fc) = &cfg.ftvp {
        let mut scales = cfg.ftvp_scales.clone();
        scales.sort_unstable();
        for s in scales {
            let out = ftvp_block_named(ctx, &format!("ftvp{s}"), feats[s], fc)?;
            projected[s] = Some(out.out);
            cycle_losses.extend(out.cycle_loss);
            if let Some(t) = out.trace {
                traces.push((s, t));
            }
        }
    }

    let heads = cfg.head_scales();
    let deepest = cfg.deepest();
    let mut logits = Vec::with_capacity(heads.len());
    let mut f = projected[deepest].unwrap_or(feats[deepest]);
    for s in (OUT_SCALE..=deepest).rev() {
        if s != deepest {
            f = ctx.tape.upsample2x(f)?;
            if let (true, Some(skip)) = (cfg.skip_scales().contains(&s), projected[s]) {
                f = ctx.tape.concat_channels(skip, f)?;
            }
        }
        f = conv_norm(ctx, f, &format!("dec.s{s}.conv"), &format!("dec.s{s}.bn"), true)?;
        if heads.contains(&s) {
            let (w, b) = (ctx.p(&format!("head.s{s}.w"))?, ctx.p(&format!("head.s{s}.b"))?);
            let y = ctx.tape.conv2d(f, w, 1, 0)?;
            logits.push((s, ctx.tape.add_channel_bias(y, b)?));
        }
    }
    logits.sort_by_key(|&(s, _)| s);
    Ok(NetOutput { logits, cycle_losses, traces })
}

/// Per-pixel argmax over the class axis of `[K, h, w]` logits; ties go to
/// the lowest class id.
pub fn predict_mask<T: Real>(logits: &Tensor<T>) -> Result<ClassMask> {
    let (k, h, w) = logits.dims3()?;
    let n = h * w;
    let d = logits.data();
    let ids = (0..n)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if d[c * n + p] > d[best * n + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    ClassMask::new(w, h, ids)
}
