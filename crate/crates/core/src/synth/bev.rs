use alloc::format;
use alloc::string::String;

use serde::{Deserialize, Serialize};

use super::{Pose, Scene};
use crate::error::{Error, Result};
use crate::raster::ClassMask;

/// Square top-view grid in the ego frame covering
/// `x ∈ [near, near + forward]`, `y ∈ [-lateral/2, lateral/2]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub side: usize,
    pub forward: f64,
    pub lateral: f64,
    pub near: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { side: 64, forward: 40.0, lateral: 40.0, near: 0.0 }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.side == 0 || !(self.forward > 0.0) || !(self.lateral > 0.0) {
            return Err(Error::Config(format!("grid {self:?} must have positive size and extent")));
        }
        if self.forward != self.lateral {
            return Err(Error::Config(String::from("grid cells must be square (forward == lateral)")));
        }
        Ok(())
    }

    /// Metres per cell.
    pub fn resolution(&self) -> f64 {
        self.forward / self.side as f64
    }

    /// Ego-frame centre of cell `(col, row)`.
    pub fn cell_center(&self, col: usize, row: usize) -> [f64; 2] {
        let r = self.resolution();
        [self.near + (self.side as f64 - row as f64 - 0.5) * r, self.lateral / 2.0 - (col as f64 + 0.5) * r]
    }

    /// Cell containing an ego-frame point.
    pub fn cell_of(&self, p: [f64; 2]) -> Option<(usize, usize)> {
        let r = self.resolution();
        let row = libm::floor((self.near + self.forward - p[0]) / r);
        let col = libm::floor((self.lateral / 2.0 - p[1]) / r);
        let n = self.side as f64;
        if (0.0..n).contains(&row) && (0.0..n).contains(&col) {
            Some((col as usize, row as usize))
        } else {
            None
        }
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.near && p[0] <= self.near + self.forward && libm::fabs(p[1]) <= self.lateral / 2.0
    }
}

/// Class of the topmost shape under every cell centre, seen from `pose`.
pub fn rasterize_bev(scene: &Scene, grid: &GridConfig, pose: Pose) -> ClassMask {
    let mut mask = ClassMask::filled(grid.side, grid.side, scene.background);
    for row in 0..grid.side {
        for col in 0..grid.side {
            mask.set(col, row, scene.class_at(pose.apply(grid.cell_center(col, row))));
        }
    }
    mask
}
