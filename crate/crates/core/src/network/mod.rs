//! Encoder, multi-scale projection blocks and decoder with per-scale
//! segmentation heads.
//!
//! Scale `i` of the encoder has side `S / 2^(i+1)`; the output mask lives at
//! scale 1 (side `S / 4`). Parameter names:
//!
//! | prefix          | contents |
//! |-----------------|----------|
//! | `enc.stem`      | full-resolution 3×3 conv + norm |
//! | `enc.s{i}`      | residual block of scale `i` |
//! | `ftvp{i}`       | projection block at scale `i` |
//! | `dec.s{i}`      | decoder conv block at scale `i` |
//! | `head.s{i}`     | 1×1 segmentation head at scale `i` |

mod loss;
mod model;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use loss::{class_weights, downsample_targets, total_loss, LossParts, MIN_FREQ};
pub use model::{encode, forward, init_params, predict_mask, NetOutput};

use crate::error::{Error, Result};
use crate::ftvp::FtvpConfig;

/// Scale index of the output mask.
pub const OUT_SCALE: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Side of the square input image.
    pub input_size: usize,
    pub num_classes: usize,
    /// Encoder channels per scale; its length is the number of scales.
    pub widths: Vec<usize>,
    /// Encoder scales that get a projection block.
    pub ftvp_scales: Vec<usize>,
    /// `None` gives the plain encoder–decoder.
    pub ftvp: Option<FtvpConfig>,
    pub lambda_cycle: f64,
    pub deep_supervision: bool,
    /// Put a head on every decoder scale instead of only the skip scales.
    pub supervise_all_scales: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            input_size: 256,
            num_classes: 3,
            widths: vec![16, 32, 64, 128, 128, 128],
            ftvp_scales: vec![3, 4, 5],
            ftvp: Some(FtvpConfig::default()),
            lambda_cycle: 0.001,
            deep_supervision: true,
            supervise_all_scales: false,
        }
    }
}

impl NetConfig {
    /// Input 1024, ResNet-18 widths.
    pub fn paper_kitti() -> Self {
        Self { input_size: 1024, widths: vec![64, 64, 128, 256, 512, 512], ..Self::default() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" | "default" => Ok(Self::default()),
            "paper-kitti" => Ok(Self::paper_kitti()),
            _ => Err(Error::Config(format!("unknown network preset `{name}`"))),
        }
    }

    pub fn num_scales(&self) -> usize {
        self.widths.len()
    }

    pub fn deepest(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn side(&self, scale: usize) -> usize {
        self.input_size >> (scale + 1)
    }

    pub fn output_side(&self) -> usize {
        self.side(OUT_SCALE)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_scales();
        if n < 2 {
            return Err(Error::Config(String::from("at least two encoder scales are needed")));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config(String::from("encoder widths must be positive")));
        }
        if self.input_size == 0 || n >= usize::BITS as usize || !self.input_size.is_multiple_of(1 << n) {
            return Err(Error::Config(format!("input size {} is not divisible by 2^{n}", self.input_size)));
        }
        if !(2..=255).contains(&self.num_classes) {
            return Err(Error::Config(format!("num_classes {} outside 2..=255", self.num_classes)));
        }
        if !(self.lambda_cycle >= 0.0 && self.lambda_cycle.is_finite()) {
            return Err(Error::Config(format!("lambda_cycle {} must be finite and non-negative", self.lambda_cycle)));
        }
        if let Some(f) = &self.ftvp {
            f.validate()?;
            if self.ftvp_scales.is_empty() {
                return Err(Error::Config(String::from("ftvp_scales is empty")));
            }
        }
        let mut seen = vec![false; n];
        for &s in &self.ftvp_scales {
            if !(OUT_SCALE..n).contains(&s) {
                return Err(Error::Config(format!("ftvp scale {s} outside {OUT_SCALE}..{n}")));
            }
            if core::mem::replace(&mut seen[s], true) {
                return Err(Error::Config(format!("ftvp scale {s} listed twice")));
            }
        }
        Ok(())
    }

    /// Scales whose projected features enter the decoder by concatenation.
    pub fn skip_scales(&self) -> Vec<usize> {
        match self.ftvp {
            Some(_) => {
                let mut s: Vec<usize> = self.ftvp_scales.iter().copied().filter(|&s| s != self.deepest()).collect();
                s.sort_unstable();
                s
            }
            None => Vec::new(),
        }
    }

    /// Scales carrying a segmentation head, finest first. The first entry
    /// is always the output scale.
    pub fn head_scales(&self) -> Vec<usize> {
        if self.supervise_all_scales {
            return (OUT_SCALE..self.num_scales()).collect();
        }
        let mut s = vec![OUT_SCALE];
        s.extend(self.skip_scales().into_iter().filter(|&x| x != OUT_SCALE));
        s
    }

    /// Heads that enter the loss.
    pub fn supervised_heads(&self) -> usize {
        if self.deep_supervision {
            self.head_scales().len()
        } else {
            1
        }
    }

    pub fn has_ftvp(&self, scale: usize) -> bool {
        self.ftvp.is_some() && self.ftvp_scales.contains(&scale)
    }
}
