use alloc::format;
use alloc::vec::Vec;

use super::par_map;
use crate::error::{shape_err, Error, Result};
use crate::raster::{ClassMask, UNOBSERVED};
use crate::synth::{GridConfig, Pose};

/// Global top-view map laid out like a frame mask seen at zero yaw: rows
/// run along world −x and columns along world −y. Cell edges sit on whole
/// multiples of the resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Panorama {
    /// World position of the outer corner of cell `(0, 0)`, at the largest
    /// x and y.
    pub origin: [f64; 2],
    pub resolution: f64,
    /// Class per cell, [`UNOBSERVED`] where no frame reached.
    pub mask: ClassMask,
}

impl Panorama {
    pub fn cell_center(&self, col: usize, row: usize) -> [f64; 2] {
        [self.origin[0] - (row as f64 + 0.5) * self.resolution, self.origin[1] - (col as f64 + 0.5) * self.resolution]
    }

    /// Number of cells some frame observed.
    pub fn observed(&self) -> usize {
        self.mask.data().iter().filter(|&&c| c != UNOBSERVED).count()
    }
}

/// World-frame axis-aligned bounds `[min_x, min_y, max_x, max_y]` of a
/// frame footprint.
fn footprint(grid: &GridConfig, pose: Pose) -> [f64; 4] {
    let (x0, x1, y) = (grid.near, grid.near + grid.forward, grid.lateral / 2.0);
    let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for p in [[x0, -y], [x0, y], [x1, -y], [x1, y]] {
        let w = pose.apply(p);
        b = [b[0].min(w[0]), b[1].min(w[1]), b[2].max(w[0]), b[3].max(w[1])];
    }
    b
}

/// Composite per-frame masks into one map. Every global cell centre is
/// mapped into each frame by the inverse pose and takes the class of the
/// frame cell it lands in; the latest frame covering a cell wins.
pub fn stitch_panorama(masks: &[ClassMask], poses: &[Pose], grid: &GridConfig) -> Result<Panorama> {
    if masks.is_empty() {
        return Err(Error::Empty("frame sequence"));
    }
    if masks.len() != poses.len() {
        return Err(shape_err("stitch_panorama", format!("{} masks for {} poses", masks.len(), poses.len())));
    }
    grid.validate()?;
    if let Some(m) = masks.iter().find(|m| (m.width(), m.height()) != (grid.side, grid.side)) {
        return Err(shape_err("stitch_panorama", format!("mask {}x{} on a {} grid", m.width(), m.height(), grid.side)));
    }
    let res = grid.resolution();
    let boxes: Vec<[f64; 4]> = poses.iter().map(|&p| footprint(grid, p)).collect();
    let bounds = boxes.iter().fold([f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY], |a, b| {
        [a[0].min(b[0]), a[1].min(b[1]), a[2].max(b[2]), a[3].max(b[3])]
    });
    // Footprint edges of grid-aligned poses fall on cell edges; the slack
    // keeps rounding from adding an empty border.
    let slack = 1e-6;
    let (x0, x1) = (libm::floor(bounds[0] / res + slack), libm::ceil(bounds[2] / res - slack));
    let (y0, y1) = (libm::floor(bounds[1] / res + slack), libm::ceil(bounds[3] / res - slack));
    let (width, height) = ((y1 - y0).max(1.0) as usize, (x1 - x0).max(1.0) as usize);
    let origin = [x1 * res, y1 * res];
    let probe = Panorama { origin, resolution: res, mask: ClassMask::filled(1, 1, UNOBSERVED) };

    let rows: Vec<usize> = (0..height).collect();
    let lines = par_map(&rows, |&row| {
        let mut line = alloc::vec![UNOBSERVED; width];
        for (col, cell) in line.iter_mut().enumerate() {
            let c = probe.cell_center(col, row);
            for (i, b) in boxes.iter().enumerate().rev() {
                if c[0] < b[0] || c[0] > b[2] || c[1] < b[1] || c[1] > b[3] {
                    continue;
                }
                if let Some((fc, fr)) = grid.cell_of(poses[i].apply_inverse(c)) {
                    *cell = masks[i].get(fc, fr);
                    break;
                }
            }
        }
        line
    });
    let mask = ClassMask::new(width, height, lines.concat())?;
    Ok(Panorama { mask, ..probe })
}
