use alloc::format;
use alloc::vec::Vec;

use super::NetConfig;
use crate::error::{shape_err, Result};
use crate::raster::ClassMask;
use crate::real::Real;
use crate::tensor::{Tape, Var};

/// Frequencies below this are clamped before weighting.
pub const MIN_FREQ: f64 = 1e-6;

/// `sqrt(1 / freq)` per class, rescaled to mean 1.
pub fn class_weights(freqs: &[f64]) -> Vec<f64> {
    let raw: Vec<f64> = freqs
        .iter()
        .enumerate()
        .map(|(c, &f)| {
            let f = if f.is_nan() || f < MIN_FREQ {
                log::warn!("class {c} frequency {f} clamped to {MIN_FREQ}");
                MIN_FREQ
            } else {
                f
            };
            libm::sqrt(1.0 / f)
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len().max(1) as f64;
    raw.iter().map(|w| w / mean).collect()
}

/// The output-scale mask reduced to every head scale of `cfg`, finest first.
pub fn downsample_targets(mask: &ClassMask, cfg: &NetConfig) -> Result<Vec<ClassMask>> {
    let side = cfg.output_side();
    if mask.width() != side || mask.height() != side {
        return Err(shape_err(
            "downsample_targets",
            format!("mask {}x{}, expected {side}x{side}", mask.width(), mask.height()),
        ));
    }
    cfg.head_scales().iter().map(|&s| mask.downsample(side / cfg.side(s))).collect()
}

pub struct LossParts {
    pub total: Var,
    /// Weighted cross-entropy per head, in the order given.
    pub seg: Vec<Var>,
    /// Sum of the cycle losses, when there are any.
    pub cycle: Option<Var>,
}

/// `Σ_i seg_i + λ Σ cycle`. Every head in `logits` enters the sum.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: &[Var],
    targets: &[ClassMask],
    cycle_losses: &[Var],
    weights: &[T],
    lambda: T,
) -> Result<LossParts> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(shape_err("total_loss", format!("{} logit maps for {} targets", logits.len(), targets.len())));
    }
    let seg = logits
        .iter()
        .zip(targets)
        .map(|(&l, t)| tape.weighted_cross_entropy(l, t.data(), weights))
        .collect::<Result<Vec<_>>>()?;
    let mut terms = seg.clone();
    let cycle = if cycle_losses.is_empty() {
        None
    } else {
        let c = tape.sum(cycle_losses)?;
        terms.push(tape.scale(c, lambda)?);
        Some(c)
    };
    let total = tape.sum(&terms)?;
    Ok(LossParts { total, seg, cycle })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_example() {
        let w = class_weights(&[0.25, 0.75]);
        let raw = [2.0, (4.0f64 / 3.0).sqrt()];
        let mean = (raw[0] + raw[1]) / 2.0;
        assert!((w[0] - raw[0] / mean).abs() < 1e-12);
        assert!((w[0] - 1.268).abs() < 1e-3 && (w[1] - 0.732).abs() < 1e-3);
        assert!(class_weights(&[0.2; 5]).iter().all(|w| (w - 1.0).abs() < 1e-15));
        assert!(class_weights(&[0.0, 1.0]).iter().all(|w| w.is_finite()));
    }
}
