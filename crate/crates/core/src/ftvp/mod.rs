//! The front-to-top view projection block: a cycled MLP projection
//! ([`cvp`]) followed by hard cross-view attention ([`cvt`]).
//!
//! Parameters live in a [`ParamStore`] under a per-block prefix:
//!
//! | name                     | shape            |
//! |--------------------------|------------------|
//! | `{p}.cvp.fwd.w1` / `b1`  | `[in, hidden]` / `[hidden]` |
//! | `{p}.cvp.fwd.w2` / `b2`  | `[hidden, in]` / `[in]` |
//! | `{p}.cvp.bwd.*`          | same as `fwd` (absent when tied or without cycle) |
//! | `{p}.cvt.proj_k/q/v`     | `[C, C, 1, 1]`   |
//! | `{p}.cvt.fuse.w` / `b`   | `[C, 2C, 3, 3]` / `[C]` |

pub mod cvp;
pub mod cvt;

use alloc::format;
use alloc::string::String;

use serde::{Deserialize, Serialize};

pub use cvp::{cvp_forward, cycle_loss, mlp, CvpMode, CvpVars, MlpVars};
pub use cvt::{cross_view_relevance, cvt_forward, CvtIntermediates, CvtOptions, CvtTrace, CvtVars, KvMode};

use crate::error::{Error, Result};
use crate::params::{Ctx, ParamStore};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::{Tape, Var};

/// Which parts of the block are active. The defaults give the complete
/// block; switching parts off yields the ablation variants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FtvpConfig {
    pub cvp_mode: CvpMode,
    /// MLP hidden width; `None` means half of the MLP input width.
    pub hidden: Option<usize>,
    /// Share one MLP between the forward and the cycled projection.
    pub tie_mlp: bool,
    /// Cycle the projection back and compute the cycle loss.
    pub cycle: bool,
    /// Cross-view attention; `None` leaves the plain MLP projection.
    pub cvt: Option<CvtOptions>,
}

impl Default for FtvpConfig {
    fn default() -> Self {
        Self { cvp_mode: CvpMode::Spatial, hidden: None, tie_mlp: false, cycle: true, cvt: Some(CvtOptions::default()) }
    }
}

impl FtvpConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(cvt) = &self.cvt {
            if !self.cycle && cvt.kv.reads_cycled() {
                return Err(Error::Config(format!(
                    "cross-view mode `{}` reads the cycled features but the cycle is disabled",
                    cvt.kv.label()
                )));
            }
        }
        if self.hidden == Some(0) {
            return Err(Error::Config(String::from("cvp hidden width must be positive")));
        }
        Ok(())
    }

    /// (rows, width, hidden) of the MLP attached to a `[c, h, w]` map.
    pub fn mlp_dims(&self, c: usize, h: usize, w: usize) -> (usize, usize, usize) {
        let (rows, width) = match self.cvp_mode {
            CvpMode::Flatten => (1, c * h * w),
            CvpMode::Spatial => (c, h * w),
        };
        (rows, width, self.hidden.unwrap_or((width / 2).max(1)))
    }

    fn has_bwd_mlp(&self) -> bool {
        self.cycle && !self.tie_mlp
    }
}

fn mlp_names(prefix: &str, dir: &str) -> [String; 4] {
    ["w1", "b1", "w2", "b2"].map(|n| format!("{prefix}.cvp.{dir}.{n}"))
}

fn init_mlp<T: Real>(store: &mut ParamStore<T>, prefix: &str, dir: &str, width: usize, hidden: usize, rng: &mut Rng) {
    let [w1, b1, w2, b2] = mlp_names(prefix, dir);
    store.init_normal(&w1, &[width, hidden], libm::sqrt(2.0 / width as f64), rng);
    store.init_const(&b1, &[hidden], 0.0);
    store.init_normal(&w2, &[hidden, width], libm::sqrt(1.0 / hidden as f64), rng);
    store.init_const(&b2, &[width], 0.0);
}

/// Create the block's parameters for a `[c, h, w]` input map.
pub fn init_ftvp<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    (c, h, w): (usize, usize, usize),
    cfg: &FtvpConfig,
    rng: &mut Rng,
) -> Result<()> {
    cfg.validate()?;
    let (_, width, hidden) = cfg.mlp_dims(c, h, w);
    init_mlp(store, prefix, "fwd", width, hidden, rng);
    if cfg.has_bwd_mlp() {
        init_mlp(store, prefix, "bwd", width, hidden, rng);
    }
    if cfg.cvt.is_some() {
        let std = libm::sqrt(1.0 / c as f64);
        for n in ["proj_k", "proj_q", "proj_v"] {
            store.init_normal(&format!("{prefix}.cvt.{n}"), &[c, c, 1, 1], std, rng);
        }
        store.init_normal(&format!("{prefix}.cvt.fuse.w"), &[c, 2 * c, 3, 3], libm::sqrt(1.0 / (18 * c) as f64), rng);
        store.init_const(&format!("{prefix}.cvt.fuse.b"), &[c], 0.0);
    }
    Ok(())
}

fn bind_mlp<T: Real>(ctx: &mut Ctx<'_, T>, prefix: &str, dir: &str) -> Result<MlpVars> {
    let [w1, b1, w2, b2] = mlp_names(prefix, dir);
    Ok(MlpVars { w1: ctx.p(&w1)?, b1: ctx.p(&b1)?, w2: ctx.p(&w2)?, b2: ctx.p(&b2)? })
}

/// Bind the block's parameters onto the tape.
pub fn bind_ftvp<T: Real>(ctx: &mut Ctx<'_, T>, prefix: &str, cfg: &FtvpConfig) -> Result<(CvpVars, Option<CvtVars>)> {
    let fwd = bind_mlp(ctx, prefix, "fwd")?;
    let bwd = if !cfg.cycle {
        None
    } else if cfg.tie_mlp {
        Some(fwd)
    } else {
        Some(bind_mlp(ctx, prefix, "bwd")?)
    };
    let cvt = match cfg.cvt {
        Some(_) => Some(CvtVars {
            proj_k: ctx.p(&format!("{prefix}.cvt.proj_k"))?,
            proj_q: ctx.p(&format!("{prefix}.cvt.proj_q"))?,
            proj_v: ctx.p(&format!("{prefix}.cvt.proj_v"))?,
            fuse_w: ctx.p(&format!("{prefix}.cvt.fuse.w"))?,
            fuse_b: ctx.p(&format!("{prefix}.cvt.fuse.b"))?,
        }),
        None => None,
    };
    Ok((CvpVars { fwd, bwd }, cvt))
}

pub struct FtvpOutput {
    /// Enhanced top-view features, same shape as the input.
    pub out: Var,
    /// Projected features X′.
    pub projected: Var,
    /// Cycled features X″, when the cycle is enabled.
    pub cycled: Option<Var>,
    /// Mean absolute difference between the input and X″.
    pub cycle_loss: Option<Var>,
    pub trace: Option<CvtTrace>,
}

/// Projection followed by cross-view attention on one feature map.
pub fn ftvp_block<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    cvp: &CvpVars,
    cvt: Option<&CvtVars>,
    cfg: &FtvpConfig,
) -> Result<FtvpOutput> {
    cfg.validate()?;
    let (projected, cycled) = cvp_forward(tape, x, cvp, cfg.cvp_mode)?;
    let cycle = match cycled {
        Some(x2) => Some(cycle_loss(tape, x, x2)?),
        None => None,
    };
    let (out, trace) = match (cfg.cvt, cvt) {
        (Some(opts), Some(vars)) => {
            let (out, trace) = cvt_forward(tape, x, projected, cycled, vars, &opts)?;
            (out, Some(trace))
        }
        (Some(_), None) => return Err(Error::Config(String::from("cross-view attention enabled without parameters"))),
        (None, _) => (projected, None),
    };
    Ok(FtvpOutput { out, projected, cycled, cycle_loss: cycle, trace })
}

/// Bind and run the block stored under `prefix`.
pub fn ftvp_block_named<T: Real>(ctx: &mut Ctx<'_, T>, prefix: &str, x: Var, cfg: &FtvpConfig) -> Result<FtvpOutput> {
    let (cvp, cvt) = bind_ftvp(ctx, prefix, cfg)?;
    ftvp_block(&mut ctx.tape, x, &cvp, cvt.as_ref(), cfg)
}
