//! Deterministic synthetic road scenes: a flat world with a curved road and
//! box-shaped vehicles, rendered from a pinhole camera and rasterized onto a
//! metric top-view grid.
//!
//! Frames: the ego frame has x forward and y to the left, the ground is
//! `z = 0`. Top-view masks put the far edge in row 0 and the left edge in
//! column 0.

mod bev;
mod camera;
mod drive;
mod scene;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use bev::{rasterize_bev, GridConfig};
pub use camera::{render_front_view, Camera};
pub use drive::{drive, Drive, DriveConfig};
pub use scene::{sample_world, wrap_angle, GenConfig, Pose, Road, Scene, Vehicle, EGO_CLEARANCE, VEHICLE_MARGIN};

use crate::error::{Error, Result};
use crate::raster::{ClassMask, RgbImage};
use crate::rng::Rng;

/// Class ids shared by both class sets.
pub mod class {
    pub const BACKGROUND: u8 = 0;
    pub const ROAD: u8 = 1;
    pub const VEHICLE: u8 = 2;
    pub const SIDEWALK: u8 = 3;
    pub const CROSSING: u8 = 4;
    pub const BUS: u8 = 5;
    pub const TRUCK: u8 = 6;
    pub const PEDESTRIAN: u8 = 7;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassSet {
    /// background, road, vehicle
    #[default]
    Basic,
    /// adds sidewalk, crossing, bus, truck, pedestrian
    Extended,
}

const NAMES: [&str; 8] = ["background", "road", "vehicle", "sidewalk", "crossing", "bus", "truck", "pedestrian"];

const PALETTE: [[u8; 3]; 8] = [
    [40, 40, 40],
    [128, 64, 128],
    [0, 0, 142],
    [244, 35, 232],
    [255, 255, 255],
    [0, 60, 100],
    [0, 0, 70],
    [220, 20, 60],
];

impl ClassSet {
    pub fn from_count(n: usize) -> Result<Self> {
        match n {
            3 => Ok(ClassSet::Basic),
            8 => Ok(ClassSet::Extended),
            _ => Err(Error::Config(format!("class count {n} is not one of 3, 8"))),
        }
    }

    pub fn count(self) -> usize {
        match self {
            ClassSet::Basic => 3,
            ClassSet::Extended => 8,
        }
    }

    pub fn names(self) -> &'static [&'static str] {
        &NAMES[..self.count()]
    }

    /// Display colours for masks.
    pub fn palette(self) -> &'static [[u8; 3]] {
        &PALETTE[..self.count()]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub classes: ClassSet,
    pub camera: Camera,
    pub grid: GridConfig,
    pub gen: GenConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::for_image(256)
    }
}

impl SynthConfig {
    /// Camera of `side`×`side` pixels and a grid of `side/4` cells.
    pub fn for_image(side: usize) -> Self {
        Self {
            classes: ClassSet::Basic,
            camera: Camera::for_image(side),
            grid: GridConfig { side: side / 4, ..GridConfig::default() },
            gen: GenConfig::default(),
        }
    }

    pub fn with_classes(mut self, classes: ClassSet) -> Self {
        self.classes = classes;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        self.grid.validate()?;
        let g = &self.gen;
        if g.lanes[0] == 0 || g.lanes[0] > g.lanes[1] || g.vehicles[0] > g.vehicles[1] {
            return Err(Error::Config(format!("bad ranges lanes {:?} vehicles {:?}", g.lanes, g.vehicles)));
        }
        if !(g.lane_width > 0.0) || g.max_curvature < 0.0 || g.attempts == 0 {
            return Err(Error::Config(String::from(
                "lane width and attempts must be positive, curvature non-negative",
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub id: String,
    pub image: RgbImage,
    pub mask: ClassMask,
    pub pose: Pose,
}

/// Render one scene seen from `pose`.
pub fn make_sample(id: String, scene: &Scene, pose: Pose, cfg: &SynthConfig) -> Result<SceneSample> {
    let image = render_front_view(scene, &cfg.camera, pose)?;
    let mask = rasterize_bev(scene, &cfg.grid, pose);
    Ok(SceneSample { id, image, mask, pose })
}

pub fn sample_id(index: usize) -> String {
    format!("{index:06}")
}

/// Seed of sample `index` in the stream of `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    Rng::derive(seed, index as u64).next_u64()
}

/// `count` independent scenes, each a pure function of `(seed, index)`.
pub fn generate(seed: u64, count: usize, cfg: &SynthConfig) -> Result<Vec<SceneSample>> {
    cfg.validate()?;
    (0..count)
        .map(|i| {
            let scene = sample_world(sample_seed(seed, i), cfg);
            make_sample(sample_id(i), &scene, Pose::default(), cfg)
        })
        .collect()
}

/// Pixel frequency of each class over `masks`.
pub fn class_frequencies<'a>(masks: impl IntoIterator<Item = &'a ClassMask>, num_classes: usize) -> Vec<f64> {
    let mut counts = alloc::vec![0u64; num_classes];
    for m in masks {
        for (c, n) in counts.iter_mut().zip(m.histogram(num_classes)) {
            *c += n;
        }
    }
    let total: u64 = counts.iter().sum();
    counts.iter().map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 }).collect()
}
