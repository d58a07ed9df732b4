//! Finite-difference verification of every differentiable primitive and of
//! the composed projection block, at double precision.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::ftvp::{ftvp_block, CvpMode, CvpVars, CvtVars, FtvpConfig, MlpVars};
use crate::rng::Rng;
use crate::tensor::{finite_diff_check, GradCheck, Tape, Tensor, Var};

pub const PRIMITIVE_TOL: f64 = 1e-5;
pub const COMPOSED_TOL: f64 = 1e-4;
pub const STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: &'static str,
    pub composed: bool,
    pub report: GradCheck,
}

impl GradCase {
    pub fn tolerance(&self) -> f64 {
        if self.composed {
            COMPOSED_TOL
        } else {
            PRIMITIVE_TOL
        }
    }

    pub fn passed(&self) -> bool {
        self.report.max_rel_error < self.tolerance() && self.report.checked > 0
    }
}

type CaseFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

fn rand(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.range(-scale, scale))
}

fn positive(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.range(0.5, 1.5))
}

#[allow(clippy::vec_init_then_push)]
fn cases(rng: &mut Rng) -> Vec<(&'static str, bool, Vec<Tensor<f64>>, CaseFn)> {
    let mut out: Vec<(&'static str, bool, Vec<Tensor<f64>>, CaseFn)> = Vec::new();
    out.push((
        "matmul",
        false,
        vec![rand(rng, &[3, 4], 1.0), rand(rng, &[4, 3], 1.0)],
        Box::new(|t, v| t.matmul(v[0], v[1])),
    ));
    out.push((
        "add_row_bias",
        false,
        vec![rand(rng, &[3, 4], 1.0), rand(rng, &[4], 1.0)],
        Box::new(|t, v| t.add_row_bias(v[0], v[1])),
    ));
    out.push((
        "add",
        false,
        vec![rand(rng, &[2, 3, 2], 1.0), rand(rng, &[2, 3, 2], 1.0)],
        Box::new(|t, v| t.add(v[0], v[1])),
    ));
    out.push(("relu", false, vec![rand(rng, &[3, 4, 4], 1.0)], Box::new(|t, v| t.relu(v[0]))));
    out.push((
        "conv2d",
        false,
        vec![rand(rng, &[2, 5, 5], 1.0), rand(rng, &[3, 2, 3, 3], 1.0)],
        Box::new(|t, v| t.conv2d(v[0], v[1], 1, 1)),
    ));
    out.push((
        "conv2d_strided",
        false,
        vec![rand(rng, &[2, 5, 5], 1.0), rand(rng, &[3, 2, 3, 3], 1.0)],
        Box::new(|t, v| t.conv2d(v[0], v[1], 2, 0)),
    ));
    out.push((
        "conv2d_pointwise",
        false,
        vec![rand(rng, &[3, 3, 4], 1.0), rand(rng, &[2, 3, 1, 1], 1.0)],
        Box::new(|t, v| t.conv2d(v[0], v[1], 1, 0)),
    ));
    out.push((
        "add_channel_bias",
        false,
        vec![rand(rng, &[3, 2, 2], 1.0), rand(rng, &[3], 1.0)],
        Box::new(|t, v| t.add_channel_bias(v[0], v[1])),
    ));
    out.push((
        "mul_broadcast",
        false,
        vec![rand(rng, &[3, 3, 2], 1.0), rand(rng, &[1, 3, 2], 1.0)],
        Box::new(|t, v| t.mul_broadcast(v[0], v[1])),
    ));
    out.push((
        "concat_channels",
        false,
        vec![rand(rng, &[2, 2, 3], 1.0), rand(rng, &[3, 2, 3], 1.0)],
        Box::new(|t, v| t.concat_channels(v[0], v[1])),
    ));
    out.push(("upsample2x", false, vec![rand(rng, &[2, 2, 3], 1.0)], Box::new(|t, v| t.upsample2x(v[0]))));
    out.push(("maxpool2x2", false, vec![rand(rng, &[2, 4, 4], 1.0)], Box::new(|t, v| t.maxpool2x2(v[0]))));
    out.push((
        "batchnorm",
        false,
        vec![rand(rng, &[3, 3, 3], 1.0), positive(rng, &[3]), rand(rng, &[3], 1.0)],
        Box::new(|t, v| t.batchnorm(v[0], v[1], v[2])),
    ));
    out.push((
        "l2_normalize_channel",
        false,
        vec![rand(rng, &[4, 3, 2], 1.0)],
        Box::new(|t, v| t.l2_normalize_channel(v[0], 1e-12)),
    ));
    out.push((
        "rowwise_max",
        false,
        vec![rand(rng, &[5, 6], 1.0)],
        Box::new(|t, v| t.rowwise_max_argmax(v[0]).map(|(w, _)| w)),
    ));
    let idx: Vec<usize> = (0..7).map(|_| rng.int_inclusive(0, 3)).collect();
    out.push(("gather_rows", false, vec![rand(rng, &[4, 3], 1.0)], Box::new(move |t, v| t.gather_rows(v[0], &idx))));
    out.push((
        "l1_loss",
        false,
        vec![rand(rng, &[3, 4], 1.0), rand(rng, &[3, 4], 1.0)],
        Box::new(|t, v| t.l1_loss(v[0], v[1])),
    ));
    let target: Vec<u8> = (0..12).map(|_| rng.int_inclusive(0, 3) as u8).collect();
    let weights: Vec<f64> = (0..4).map(|_| rng.range(0.5, 2.0)).collect();
    out.push((
        "weighted_cross_entropy",
        false,
        vec![rand(rng, &[4, 3, 4], 2.0)],
        Box::new(move |t, v| t.weighted_cross_entropy(v[0], &target, &weights)),
    ));
    out.push(("reshape", false, vec![rand(rng, &[2, 3, 2], 1.0)], Box::new(|t, v| t.reshape(v[0], &[3, 4]))));
    out.push(("transpose", false, vec![rand(rng, &[3, 5], 1.0)], Box::new(|t, v| t.transpose(v[0]))));
    out.push(("scale", false, vec![rand(rng, &[4], 1.0)], Box::new(|t, v| t.scale(v[0], -1.75))));
    out.push((
        "sum",
        false,
        vec![rand(rng, &[1], 1.0), rand(rng, &[1], 1.0)],
        Box::new(|t, v| t.sum(&[v[0], v[1], v[0]])),
    ));
    out.push((
        "cross_view_relevance",
        false,
        vec![rand(rng, &[3, 2, 2], 1.0), rand(rng, &[3, 2, 2], 1.0)],
        Box::new(|t, v| crate::ftvp::cross_view_relevance(t, v[0], v[1])),
    ));

    // Composed block on a 2x4x4 toy; inputs are X followed by every parameter.
    let (c, h, w) = (2, 4, 4);
    let cfg = FtvpConfig { cvp_mode: CvpMode::Spatial, ..FtvpConfig::default() };
    let (_, width, hidden) = cfg.mlp_dims(c, h, w);
    let mut block_inputs = vec![rand(rng, &[c, h, w], 1.0)];
    for _ in 0..2 {
        block_inputs.push(rand(rng, &[width, hidden], 0.5));
        block_inputs.push(rand(rng, &[hidden], 0.5));
        block_inputs.push(rand(rng, &[hidden, width], 0.5));
        block_inputs.push(rand(rng, &[width], 0.5));
    }
    for _ in 0..3 {
        block_inputs.push(rand(rng, &[c, c, 1, 1], 1.0));
    }
    block_inputs.push(rand(rng, &[c, 2 * c, 3, 3], 0.5));
    block_inputs.push(rand(rng, &[c], 0.5));
    out.push((
        "ftvp_block",
        true,
        block_inputs,
        Box::new(move |t, v| {
            let mlp = |o: usize| MlpVars { w1: v[o], b1: v[o + 1], w2: v[o + 2], b2: v[o + 3] };
            let cvp = CvpVars { fwd: mlp(1), bwd: Some(mlp(5)) };
            let cvt = CvtVars { proj_k: v[9], proj_q: v[10], proj_v: v[11], fuse_w: v[12], fuse_b: v[13] };
            let out = ftvp_block(t, v[0], &cvp, Some(&cvt), &cfg)?;
            let coeffs: Vec<f64> = (0..t.value(out.out).len()).map(|i| libm::cos(i as f64 * 1.3)).collect();
            let s = t.weighted_sum(out.out, &coeffs)?;
            let cyc = out.cycle_loss.expect("cycle enabled");
            t.sum(&[s, cyc])
        }),
    ));
    out
}

/// Run every check with inputs drawn from `seed`.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = Rng::derive(seed, 0x6772_6164);
    cases(&mut rng)
        .into_iter()
        .map(|(name, composed, inputs, f)| {
            let report = finite_diff_check(|t, v| f(t, v), &inputs, STEP)?;
            Ok(GradCase { name, composed, report })
        })
        .collect()
}
