use alloc::vec::Vec;
use core::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use super::scene::{build_road, place_vehicles};
use super::{class, GenConfig, Pose, Scene, SynthConfig};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriveConfig {
    pub frames: usize,
    /// Distance between consecutive frames along the road (m).
    pub step: f64,
    /// Straight road with poses rounded to whole grid cells and yaw to
    /// quarter turns, so every frame's cells coincide with global cells.
    pub snap: bool,
    pub vehicles_per_100m: f64,
}

impl Default for DriveConfig {
    fn default() -> Self {
        Self { frames: 20, step: 2.5, snap: true, vehicles_per_100m: 12.0 }
    }
}

/// One static world and the ego poses of a drive through it.
#[derive(Clone, Debug, PartialEq)]
pub struct Drive {
    pub scene: Scene,
    pub poses: Vec<Pose>,
}

/// The ego keeps to the rightmost lane; parked and oncoming boxes occupy the
/// other lanes.
pub fn drive(seed: u64, cfg: &SynthConfig, dc: &DriveConfig) -> Drive {
    let mut rng = Rng::derive(seed, 11);
    let gen = GenConfig { lanes: [cfg.gen.lanes[0].max(2), cfg.gen.lanes[1].max(2)], ..cfg.gen.clone() };
    let (heading, curvature) = if dc.snap {
        (0.0, 0.0)
    } else {
        (rng.range(-gen.max_heading, gen.max_heading), rng.range(-gen.max_curvature, gen.max_curvature) / 4.0)
    };
    let length = 10.0 + dc.frames as f64 * dc.step + cfg.grid.near + cfg.grid.forward + 40.0;
    let road = build_road(&mut rng, &gen, cfg.classes, [-10.0, 0.0], heading, length + 10.0, curvature);
    let count = libm::round(dc.vehicles_per_100m * length / 100.0) as usize;
    let vehicles =
        place_vehicles(&mut rng, &road, &gen, cfg.classes, count, [0.0, road.length()], [1, road.lanes - 1], |_| true);
    let res = cfg.grid.resolution();
    let lane = road.lane_offset(0);
    let poses = (0..dc.frames)
        .map(|k| {
            let (p, t) = road.at(20.0 + k as f64 * dc.step);
            let pos = [p[0] - t[1] * lane, p[1] + t[0] * lane];
            let yaw = libm::atan2(t[1], t[0]);
            if dc.snap {
                let snap = |v: f64| libm::round(v / res) * res;
                Pose::new(snap(pos[0]), snap(pos[1]), libm::round(yaw / FRAC_PI_2) * FRAC_PI_2)
            } else {
                Pose::new(pos[0], pos[1], yaw)
            }
        })
        .collect();
    Drive {
        scene: Scene {
            road,
            vehicles,
            background: class::BACKGROUND,
            classes: cfg.classes,
            texture_seed: rng.next_u64(),
        },
        poses,
    }
}
