//! Optimization, evaluation metrics, the ablation runner and map stitching.

mod ablation;
mod metrics;
mod optim;
mod stitch;
mod trainer;

use alloc::vec::Vec;

pub use ablation::{run_ablation, AblationRow, Suite, Variant};
pub use metrics::{average_precision, one_hot, softmax_channels, Confusion, EvalReport, Evaluator};
pub use optim::{clip_grad_norm, poly_lr, Adam, AdamConfig};
pub use stitch::{stitch_panorama, Panorama};
pub use trainer::{evaluate, train, train_from, Best, EpochEnd, LossRecord, TrainConfig, TrainOutcome, TrainSample};

/// Order-preserving map, spread over the thread pool when `parallel` is on.
#[cfg(feature = "parallel")]
pub(crate) fn par_map<I: Sync, O: Send>(items: &[I], f: impl Fn(&I) -> O + Sync + Send) -> Vec<O> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn par_map<I, O>(items: &[I], f: impl Fn(&I) -> O) -> Vec<O> {
    items.iter().map(f).collect()
}
