use alloc::vec::Vec;
use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{class, ClassSet, SynthConfig};
use crate::rng::Rng;

/// Planar rigid transform from the ego frame (x forward, y left) to the
/// world frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self { x, y, yaw }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = libm::sincos(self.yaw);
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }

    pub fn apply_inverse(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = libm::sincos(self.yaw);
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        [c * dx + s * dy, -s * dx + c * dy]
    }
}

/// Angle mapped into `[-π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let t = libm::fmod(a + PI, 2.0 * PI);
    let t = if t < 0.0 { t + 2.0 * PI } else { t };
    let w = t - PI;
    if w >= PI {
        -PI
    } else {
        w
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Road {
    pub centerline: Vec<[f64; 2]>,
    pub width: f64,
    pub lanes: usize,
    /// Sidewalk band width on each side; 0 for none.
    pub sidewalk: f64,
    /// Arc-length interval painted as a crossing.
    pub crossing: Option<[f64; 2]>,
}

impl Road {
    /// Distance to the centerline and arc length of the closest point.
    pub fn locate(&self, p: [f64; 2]) -> (f64, f64) {
        let mut best = (f64::INFINITY, 0.0);
        let mut s0 = 0.0;
        for seg in self.centerline.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let d = [b[0] - a[0], b[1] - a[1]];
            let len2 = d[0] * d[0] + d[1] * d[1];
            let len = libm::sqrt(len2);
            let t =
                if len2 > 0.0 { (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let q = [a[0] + t * d[0], a[1] + t * d[1]];
            let dist = libm::hypot(p[0] - q[0], p[1] - q[1]);
            if dist < best.0 {
                best = (dist, s0 + t * len);
            }
            s0 += len;
        }
        best
    }

    pub fn length(&self) -> f64 {
        self.centerline.windows(2).map(|s| libm::hypot(s[1][0] - s[0][0], s[1][1] - s[0][1])).sum()
    }

    /// Point and unit tangent at arc length `s`, clamped to the polyline.
    pub fn at(&self, s: f64) -> ([f64; 2], [f64; 2]) {
        let mut rest = s.max(0.0);
        let n = self.centerline.len();
        for (i, seg) in self.centerline.windows(2).enumerate() {
            let (a, b) = (seg[0], seg[1]);
            let len = libm::hypot(b[0] - a[0], b[1] - a[1]);
            if rest <= len || i + 2 == n {
                let t = if len > 0.0 { (rest / len).min(1.0) } else { 0.0 };
                let dir = if len > 0.0 { [(b[0] - a[0]) / len, (b[1] - a[1]) / len] } else { [1.0, 0.0] };
                return ([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])], dir);
            }
            rest -= len;
        }
        (self.centerline[0], [1.0, 0.0])
    }

    /// Signed lateral offset of the centre of `lane` (0 is the rightmost).
    pub fn lane_offset(&self, lane: usize) -> f64 {
        let lw = self.width / self.lanes as f64;
        -self.width / 2.0 + (lane as f64 + 0.5) * lw
    }
}

/// A ground-aligned box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vehicle {
    pub center: [f64; 2],
    pub length: f64,
    pub width: f64,
    pub heading: f64,
    pub height: f64,
    pub class: u8,
}

impl Vehicle {
    pub fn to_local(&self, p: [f64; 2]) -> [f64; 2] {
        Pose::new(self.center[0], self.center[1], self.heading).apply_inverse(p)
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        let l = self.to_local(p);
        libm::fabs(l[0]) <= self.length / 2.0 && libm::fabs(l[1]) <= self.width / 2.0
    }

    /// Corners in counter-clockwise order.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let pose = Pose::new(self.center[0], self.center[1], self.heading);
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]].map(|c| pose.apply(c))
    }

    /// Separating-axis test on the two rectangles grown by `margin`.
    pub fn overlaps(&self, other: &Vehicle, margin: f64) -> bool {
        let grow = |v: &Vehicle| Vehicle { length: v.length + margin, width: v.width + margin, ..*v };
        let (a, b) = (grow(self), grow(other));
        let (ca, cb) = (a.corners(), b.corners());
        for h in [a.heading, b.heading] {
            let (s, c) = libm::sincos(h);
            for axis in [[c, s], [-s, c]] {
                let proj = |cs: &[[f64; 2]; 4]| {
                    cs.iter()
                        .map(|p| p[0] * axis[0] + p[1] * axis[1])
                        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
                };
                let (pa, pb) = (proj(&ca), proj(&cb));
                if pa.1 < pb.0 || pb.1 < pa.0 {
                    return false;
                }
            }
        }
        true
    }
}

/// Ground layout and boxes in world coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub road: Road,
    pub vehicles: Vec<Vehicle>,
    pub background: u8,
    pub classes: ClassSet,
    pub texture_seed: u64,
}

impl Scene {
    /// Class of the ground surface at `p`, ignoring vehicles.
    pub fn ground_class(&self, p: [f64; 2]) -> u8 {
        let (d, s) = self.road.locate(p);
        let half = self.road.width / 2.0;
        if d <= half {
            match self.road.crossing {
                Some([a, b]) if s >= a && s <= b => class::CROSSING,
                _ => class::ROAD,
            }
        } else if self.road.sidewalk > 0.0 && d <= half + self.road.sidewalk {
            class::SIDEWALK
        } else {
            self.background
        }
    }

    /// Topmost class at `p`: vehicles over markings over road over
    /// background.
    pub fn class_at(&self, p: [f64; 2]) -> u8 {
        match self.vehicles.iter().rev().find(|v| v.contains(p)) {
            Some(v) => v.class,
            None => self.ground_class(p),
        }
    }
}

/// Ranges the world sampler draws from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    /// Inclusive lane-count range.
    pub lanes: [usize; 2],
    pub lane_width: f64,
    /// Inclusive vehicle-count range.
    pub vehicles: [usize; 2],
    /// Largest absolute centerline curvature (1/m).
    pub max_curvature: f64,
    /// Largest lateral offset of the road start (m).
    pub max_offset: f64,
    /// Largest initial road heading (rad).
    pub max_heading: f64,
    pub sidewalk: f64,
    pub crossing_prob: f64,
    /// Placement attempts per vehicle before giving up on it.
    pub attempts: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            lanes: [1, 3],
            lane_width: 3.5,
            vehicles: [2, 8],
            max_curvature: 0.02,
            max_offset: 6.0,
            max_heading: 0.3,
            sidewalk: 2.0,
            crossing_prob: 0.5,
            attempts: 200,
        }
    }
}

/// Clearance kept between sampled boxes.
pub const VEHICLE_MARGIN: f64 = 0.3;

/// Boxes of a sampled world start this far ahead of the camera.
pub const EGO_CLEARANCE: f64 = 6.0;

pub(crate) fn build_road(
    rng: &mut Rng,
    gen: &GenConfig,
    classes: ClassSet,
    start: [f64; 2],
    heading: f64,
    length: f64,
    curvature: f64,
) -> Road {
    let lanes = rng.int_inclusive(gen.lanes[0], gen.lanes[1].max(gen.lanes[0])).max(1);
    let mut pts = Vec::new();
    let (mut p, mut h) = (start, heading);
    let steps = libm::ceil(length) as usize;
    for _ in 0..=steps {
        pts.push(p);
        p = [p[0] + libm::cos(h), p[1] + libm::sin(h)];
        h += curvature;
    }
    let extended = classes == ClassSet::Extended;
    let mut road = Road { centerline: pts, width: lanes as f64 * gen.lane_width, lanes, sidewalk: 0.0, crossing: None };
    if extended {
        road.sidewalk = gen.sidewalk;
        if rng.uniform() < gen.crossing_prob {
            let s = rng.range(12.0, 40.0);
            road.crossing = Some([s, s + 3.0]);
        }
    }
    road
}

fn draw_vehicle(rng: &mut Rng, road: &Road, classes: ClassSet, s_range: [f64; 2], lanes: [usize; 2]) -> Vehicle {
    let kind = match classes {
        ClassSet::Basic => class::VEHICLE,
        ClassSet::Extended => match rng.uniform() {
            u if u < 0.6 => class::VEHICLE,
            u if u < 0.7 => class::BUS,
            u if u < 0.85 => class::TRUCK,
            _ => class::PEDESTRIAN,
        },
    };
    let s = rng.range(s_range[0], s_range[1]);
    let (p, t) = road.at(s);
    let normal = [-t[1], t[0]];
    let tangent = libm::atan2(t[1], t[0]);
    let (length, width, height, lateral, heading) = if kind == class::PEDESTRIAN {
        let side = if rng.uniform() < 0.5 { 1.0 } else { -1.0 };
        let lateral = side * (road.width / 2.0 + road.sidewalk / 2.0);
        (0.6, 0.6, 1.7, lateral, rng.range(-PI, PI))
    } else {
        let lane = rng.int_inclusive(lanes[0], lanes[1]);
        let oncoming = lane >= road.lanes.div_ceil(2) && road.lanes > 1;
        let (l, w, h) = match kind {
            class::BUS => (rng.range(10.0, 12.0), 2.5, 3.2),
            class::TRUCK => (rng.range(7.0, 9.0), 2.4, 3.0),
            _ => (rng.range(3.8, 4.8), rng.range(1.7, 2.0), 1.5),
        };
        let heading = tangent + if oncoming { PI } else { 0.0 } + 0.05 * rng.normal();
        (l, w, h, road.lane_offset(lane), heading)
    };
    Vehicle {
        center: [p[0] + lateral * normal[0], p[1] + lateral * normal[1]],
        length,
        width,
        heading: wrap_angle(heading),
        height,
        class: kind,
    }
}

/// Place up to `count` non-overlapping boxes; `accept` filters candidate
/// positions.
#[allow(clippy::too_many_arguments)]
pub(crate) fn place_vehicles(
    rng: &mut Rng,
    road: &Road,
    gen: &GenConfig,
    classes: ClassSet,
    count: usize,
    s_range: [f64; 2],
    lanes: [usize; 2],
    accept: impl Fn(&Vehicle) -> bool,
) -> Vec<Vehicle> {
    let mut placed: Vec<Vehicle> = Vec::with_capacity(count);
    for _ in 0..count {
        let found = (0..gen.attempts)
            .map(|_| draw_vehicle(rng, road, classes, s_range, lanes))
            .find(|v| accept(v) && placed.iter().all(|o| !v.overlaps(o, VEHICLE_MARGIN)));
        match found {
            Some(v) => placed.push(v),
            None => {
                log::warn!("placed {} of {count} vehicles before the attempt budget ran out", placed.len());
                break;
            }
        }
    }
    placed
}

/// A random road scene around the ego origin, reproducible from `seed`.
pub fn sample_world(seed: u64, cfg: &SynthConfig) -> Scene {
    let mut rng = Rng::derive(seed, 7);
    let gen = &cfg.gen;
    let start = [-10.0, rng.range(-gen.max_offset, gen.max_offset)];
    let heading = rng.range(-gen.max_heading, gen.max_heading);
    let curvature = rng.range(-gen.max_curvature, gen.max_curvature);
    let length = cfg.grid.near + cfg.grid.forward + 40.0;
    let road = build_road(&mut rng, gen, cfg.classes, start, heading, length, curvature);
    let count = rng.int_inclusive(gen.vehicles[0], gen.vehicles[1].max(gen.vehicles[0]));
    let grid = cfg.grid;
    let vehicles =
        place_vehicles(&mut rng, &road, gen, cfg.classes, count, [0.0, road.length()], [0, road.lanes - 1], |v| {
            grid.contains(v.center) && v.center[0] >= EGO_CLEARANCE
        });
    Scene { road, vehicles, background: class::BACKGROUND, classes: cfg.classes, texture_seed: rng.next_u64() }
}
