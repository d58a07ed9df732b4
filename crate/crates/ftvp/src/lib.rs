//! File formats, dataset IO, run artifacts and the `ftvp` command-line
//! workflows built on `ftvp-core`.

pub mod artifacts;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod png;
pub mod tensor_io;

use ftvp_core::network::{forward, predict_mask, NetConfig};
use ftvp_core::params::{Ctx, ParamStore};
use ftvp_core::raster::{ClassMask, RgbImage};
use ftvp_core::synth::{
    drive, make_sample, sample_id, sample_seed, sample_world, DriveConfig, Pose, SceneSample, SynthConfig,
};
use ftvp_core::train::TrainSample;
use rayon::prelude::*;

pub use error::{AppError, Result};

/// Independent scenes, rendered in parallel; identical to
/// `ftvp_core::synth::generate`.
pub fn generate_samples(seed: u64, count: usize, cfg: &SynthConfig) -> Result<Vec<SceneSample>> {
    cfg.validate()?;
    (0..count)
        .into_par_iter()
        .map(|i| {
            let scene = sample_world(sample_seed(seed, i), cfg);
            Ok(make_sample(sample_id(i), &scene, Pose::default(), cfg)?)
        })
        .collect()
}

/// Consecutive frames of one drive through a static world.
pub fn drive_samples(seed: u64, cfg: &SynthConfig, dc: &DriveConfig) -> Result<Vec<SceneSample>> {
    cfg.validate()?;
    let d = drive(seed, cfg, dc);
    d.poses.par_iter().enumerate().map(|(k, &pose)| Ok(make_sample(sample_id(k), &d.scene, pose, cfg)?)).collect()
}

pub fn to_train(samples: &[SceneSample]) -> Vec<TrainSample> {
    samples.par_iter().map(TrainSample::from_scene).collect()
}

/// Predicted top-view mask of one image.
pub fn predict(params: &ParamStore<f32>, net: &NetConfig, image: &RgbImage) -> Result<ClassMask> {
    let s = net.input_size;
    if (image.width(), image.height()) != (s, s) {
        return Err(AppError::data(format!(
            "image is {}x{}, the network expects {s}x{s}",
            image.width(),
            image.height()
        )));
    }
    let mut ctx = Ctx::new(params);
    let x = ctx.tape.constant(image.to_tensor::<f32>());
    let out = forward(&mut ctx, x, net)?;
    Ok(predict_mask(ctx.tape.value(out.final_logits()))?)
}

/// Display colours for `k` classes; the synthetic palettes when they fit.
pub fn palette_for(k: usize) -> Vec<[u8; 3]> {
    match ftvp_core::synth::ClassSet::from_count(k) {
        Ok(set) => set.palette().to_vec(),
        Err(_) => (0..k)
            .map(|i| {
                let h = (i as u32).wrapping_mul(2_654_435_761);
                [(h >> 24) as u8, (h >> 16) as u8, (h >> 8) as u8]
            })
            .collect(),
    }
}
