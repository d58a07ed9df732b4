use alloc::format;

use serde::{Deserialize, Serialize};

use super::{class, Pose, Scene, Vehicle};
use crate::error::{Error, Result};
use crate::raster::RgbImage;

/// Pinhole camera at height `height` above the ego origin, looking along
/// the ego x axis and pitched down by `pitch`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub height: f64,
    pub pitch: f64,
    /// Focal length in pixels.
    pub focal: f64,
    /// Principal point `(u, v)` in pixels.
    pub principal: [f64; 2],
    /// Side of the square image.
    pub image_size: usize,
}

pub const SKY: [u8; 3] = [170, 200, 230];

const ALBEDO: [[f64; 3]; 8] = [
    [92.0, 110.0, 60.0],
    [70.0, 70.0, 76.0],
    [175.0, 40.0, 35.0],
    [150.0, 150.0, 145.0],
    [225.0, 225.0, 225.0],
    [230.0, 170.0, 30.0],
    [40.0, 90.0, 170.0],
    [240.0, 120.0, 180.0],
];

impl Camera {
    /// 90° field of view, 3 m high, pitched 0.25 rad down.
    pub fn for_image(side: usize) -> Self {
        let c = side as f64 / 2.0;
        Self { height: 3.0, pitch: 0.25, focal: c, principal: [c, c], image_size: side }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.height > 0.0) || !(self.focal > 0.0) || self.image_size == 0 || !self.pitch.is_finite() {
            return Err(Error::Config(format!("camera {self:?}: height, focal and image size must be positive")));
        }
        Ok(())
    }

    /// `(forward, right, down)` unit axes in the ego frame.
    fn axes(&self) -> [[f64; 3]; 3] {
        let (s, c) = libm::sincos(self.pitch);
        [[c, 0.0, -s], [0.0, -1.0, 0.0], [-s, 0.0, -c]]
    }

    /// Ray direction (ego frame) through image point `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> [f64; 3] {
        let [f, r, d] = self.axes();
        let a = (u - self.principal[0]) / self.focal;
        let b = (v - self.principal[1]) / self.focal;
        [f[0] + a * r[0] + b * d[0], f[1] + a * r[1] + b * d[1], f[2] + a * r[2] + b * d[2]]
    }

    /// Image point of an ego-frame 3-D point, if it lies in front.
    pub fn project(&self, p: [f64; 3]) -> Option<[f64; 2]> {
        let [f, r, d] = self.axes();
        let rel = [p[0], p[1], p[2] - self.height];
        let dot = |a: [f64; 3]| a[0] * rel[0] + a[1] * rel[1] + a[2] * rel[2];
        let z = dot(f);
        if z <= 0.0 {
            return None;
        }
        Some([self.principal[0] + self.focal * dot(r) / z, self.principal[1] + self.focal * dot(d) / z])
    }

    /// Ego-frame ground point seen at `(u, v)`; `None` on and above the
    /// horizon.
    pub fn ground_point(&self, u: f64, v: f64) -> Option<[f64; 2]> {
        let dir = self.ray(u, v);
        if !(dir[2] < 0.0) {
            return None;
        }
        let t = self.height / -dir[2];
        Some([t * dir[0], t * dir[1]])
    }

    /// Image row of the horizon.
    pub fn horizon(&self) -> f64 {
        self.principal[1] - self.focal * libm::tan(self.pitch)
    }
}

/// Parameter `t` where the ray enters the box, and the axis of the entry
/// face (0 length, 1 width, 2 top).
fn hit_box(origin: [f64; 3], dir: [f64; 3], v: &Vehicle) -> Option<(f64, usize)> {
    let local_o = v.to_local([origin[0], origin[1]]);
    let (s, c) = libm::sincos(v.heading);
    let local_d = [c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1]];
    let o = [local_o[0], local_o[1], origin[2]];
    let d = [local_d[0], local_d[1], dir[2]];
    let lo = [-v.length / 2.0, -v.width / 2.0, 0.0];
    let hi = [v.length / 2.0, v.width / 2.0, v.height];
    let (mut t0, mut t1, mut axis) = (0.0f64, f64::INFINITY, 0);
    for k in 0..3 {
        if d[k] == 0.0 {
            if o[k] < lo[k] || o[k] > hi[k] {
                return None;
            }
            continue;
        }
        let (mut a, mut b) = ((lo[k] - o[k]) / d[k], (hi[k] - o[k]) / d[k]);
        if a > b {
            core::mem::swap(&mut a, &mut b);
        }
        if a > t0 {
            t0 = a;
            axis = k;
        }
        t1 = t1.min(b);
        if t0 > t1 {
            return None;
        }
    }
    (t0 > 0.0).then_some((t0, axis))
}

/// Deterministic value noise in `[-1, 1]` on an integer lattice.
fn lattice_noise(seed: u64, x: i64, y: i64) -> f64 {
    let mut h = seed ^ (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 52) as f64 - 1.0
}

fn shade(albedo: [f64; 3], factor: f64, noise: f64) -> [f64; 3] {
    albedo.map(|a| a * factor + 14.0 * noise)
}

fn to_rgb(c: [f64; 3]) -> [u8; 3] {
    c.map(|v| libm::round(v.clamp(0.0, 255.0)) as u8)
}

/// Flat-ground ray casting from the camera at `pose`: sky above the horizon,
/// otherwise the nearest of ground and vehicle boxes, with per-class albedo,
/// per-scene texture noise and distance haze.
pub fn render_front_view(scene: &Scene, camera: &Camera, pose: Pose) -> Result<RgbImage> {
    camera.validate()?;
    let n = camera.image_size;
    let last = n as f64 - 0.5;
    if camera.ground_point(camera.principal[0], last).is_none() {
        return Err(Error::NoGroundVisible);
    }
    let (sy, cy) = libm::sincos(pose.yaw);
    let origin = [pose.x, pose.y, camera.height];
    let seed = scene.texture_seed;
    let mut img = RgbImage::filled(n, n, SKY);
    for v in 0..n {
        for u in 0..n {
            let ego = camera.ray(u as f64 + 0.5, v as f64 + 0.5);
            let dir = [cy * ego[0] - sy * ego[1], sy * ego[0] + cy * ego[1], ego[2]];
            let ground_t = if dir[2] < 0.0 { camera.height / -dir[2] } else { f64::INFINITY };
            let mut best: Option<(f64, &Vehicle, usize)> = None;
            for veh in &scene.vehicles {
                if let Some((t, axis)) = hit_box(origin, dir, veh) {
                    if t < ground_t && best.is_none_or(|b| t < b.0) {
                        best = Some((t, veh, axis));
                    }
                }
            }
            let (t, color) = match best {
                Some((t, veh, axis)) => {
                    let p = [origin[0] + t * dir[0], origin[1] + t * dir[1], origin[2] + t * dir[2]];
                    let noise = lattice_noise(
                        seed ^ 0x5eed,
                        libm::floor(p[2] * 6.0) as i64,
                        libm::floor((p[0] + p[1]) * 2.0) as i64,
                    );
                    let factor = [0.8, 0.62, 1.0][axis];
                    (t, shade(ALBEDO[veh.class as usize % 8], factor, 0.5 * noise))
                }
                None if ground_t.is_finite() => {
                    let p = [origin[0] + ground_t * dir[0], origin[1] + ground_t * dir[1]];
                    let k = scene.ground_class(p);
                    let coarse = lattice_noise(seed, libm::floor(p[0] * 0.5) as i64, libm::floor(p[1] * 0.5) as i64);
                    let fine = lattice_noise(
                        seed.rotate_left(17),
                        libm::floor(p[0] * 4.0) as i64,
                        libm::floor(p[1] * 4.0) as i64,
                    );
                    let albedo = if k == class::CROSSING && libm::floor(p[0] + p[1]) as i64 % 2 == 0 {
                        ALBEDO[class::ROAD as usize]
                    } else {
                        ALBEDO[k as usize % 8]
                    };
                    (ground_t, shade(albedo, 1.0, 0.6 * coarse + 0.4 * fine))
                }
                None => continue,
            };
            let dist = t * libm::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
            let haze = 1.0 - libm::exp(-dist / 150.0);
            let sky = SKY.map(f64::from);
            let mixed = [0, 1, 2].map(|i| color[i] * (1.0 - haze) + sky[i] * haze);
            img.set(u, v, to_rgb(mixed));
        }
    }
    Ok(img)
}
