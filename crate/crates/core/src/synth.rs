//! Synthetic worlds of vertical structures (poles, wall segments, boxes)
//! and simulated scans of them, for tests and demos.
//!
//! Scans are occlusion-free: every surface sample within range of the
//! sensor is returned.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::geom::{Point3, PointCloud, Se2Pose};
use crate::math::{cos, sin, sqrt, TAU};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Landmark {
    Pole { x: f64, y: f64, radius: f64, height: f64 },
    Wall { x0: f64, y0: f64, x1: f64, y1: f64, height: f64 },
    /// Axis `yaw`, half sizes `hx` by `hy`.
    Box { x: f64, y: f64, hx: f64, hy: f64, yaw: f64, height: f64 },
}

impl Landmark {
    /// Horizontal distance from `(px, py)` to the nearest point of the
    /// footprint.
    pub fn distance_to(&self, px: f64, py: f64) -> f64 {
        match *self {
            Landmark::Pole { x, y, radius, .. } => (libm::hypot(px - x, py - y) - radius).max(0.0),
            Landmark::Wall { x0, y0, x1, y1, .. } => segment_distance(px, py, [x0, y0], [x1, y1]),
            Landmark::Box { .. } => self
                .box_edges()
                .iter()
                .map(|(a, b)| segment_distance(px, py, *a, *b))
                .fold(f64::INFINITY, f64::min),
        }
    }

    fn box_edges(&self) -> [([f64; 2], [f64; 2]); 4] {
        let Landmark::Box { x, y, hx, hy, yaw, .. } = *self else {
            return [([0.0; 2], [0.0; 2]); 4];
        };
        let (s, c) = (sin(yaw), cos(yaw));
        let corner = |a: f64, b: f64| [x + c * a - s * b, y + s * a + c * b];
        let k = [corner(hx, hy), corner(-hx, hy), corner(-hx, -hy), corner(hx, -hy)];
        [(k[0], k[1]), (k[1], k[2]), (k[2], k[3]), (k[3], k[0])]
    }

    pub fn height(&self) -> f64 {
        match *self {
            Landmark::Pole { height, .. } | Landmark::Wall { height, .. } | Landmark::Box { height, .. } => height,
        }
    }
}

fn segment_distance(px: f64, py: f64, a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - a[0]) * dx + (py - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    libm::hypot(px - (a[0] + t * dx), py - (a[1] + t * dy))
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub seed: u64,
    pub landmarks: Vec<Landmark>,
}

/// Landmarks placed uniformly in the square `[-area/2, area/2]^2`.
pub fn generate_world(seed: u64, area: f64, n_landmarks: usize) -> Result<World> {
    if n_landmarks == 0 {
        return Err(invalid("a world needs at least one landmark"));
    }
    if !(area > 0.0 && area.is_finite()) {
        return Err(invalid("world area must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = area / 2.0;
    let landmarks = (0..n_landmarks)
        .map(|_| {
            let (x, y) = (rng.gen_range(-h..h), rng.gen_range(-h..h));
            let height = rng.gen_range(1.0..5.0);
            match rng.gen_range(0..3) {
                0 => Landmark::Pole {
                    x,
                    y,
                    radius: rng.gen_range(0.1..0.4),
                    height,
                },
                1 => {
                    let len = rng.gen_range(2.0..10.0);
                    let a: f64 = rng.gen_range(0.0..TAU);
                    Landmark::Wall {
                        x0: x,
                        y0: y,
                        x1: x + len * cos(a),
                        y1: y + len * sin(a),
                        height,
                    }
                }
                _ => Landmark::Box {
                    x,
                    y,
                    hx: rng.gen_range(1.0..3.0),
                    hy: rng.gen_range(1.0..3.0),
                    yaw: rng.gen_range(0.0..TAU),
                    height,
                },
            }
        })
        .collect();
    Ok(World { seed, landmarks })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanParams {
    /// Horizontal range limit, meters.
    pub range: f64,
    /// Surface samples per square meter.
    pub density: f64,
    pub noise_sigma: f64,
    /// Probability of dropping each sample.
    pub dropout: f64,
}

impl Default for ScanParams {
    fn default() -> Self {
        Self {
            range: 40.0,
            density: 40.0,
            noise_sigma: 0.03,
            dropout: 0.0,
        }
    }
}

fn frame_seed(world_seed: u64, pose: &Se2Pose) -> u64 {
    // splitmix-style mixing of the pose bits.
    let mut h = world_seed ^ 0x9e37_79b9_7f4a_7c15;
    for bits in [pose.x.to_bits(), pose.y.to_bits(), pose.yaw().to_bits()] {
        h ^= bits;
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    h
}

/// Simulated scan from `pose`, in the sensor frame. Identical poses in the
/// same world give identical clouds.
pub fn scan(world: &World, pose: &Se2Pose, params: &ScanParams) -> Result<PointCloud> {
    if !(params.range > 0.0 && params.density > 0.0 && params.noise_sigma >= 0.0 && (0.0..1.0).contains(&params.dropout)) {
        return Err(invalid("scan parameters out of range"));
    }
    if !pose.is_finite() {
        return Err(invalid("non-finite scan pose"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(world.seed, pose));
    let noise = Normal::new(0.0, params.noise_sigma).map_err(|_| invalid("bad noise sigma"))?;
    let inv = pose.inverse();
    let step = 1.0 / sqrt(params.density);
    let reach = params.range + 4.0 * params.noise_sigma;
    let mut surface: Vec<[f64; 3]> = Vec::new();
    for lm in &world.landmarks {
        if lm.distance_to(pose.x, pose.y) > reach {
            continue;
        }
        match *lm {
            Landmark::Pole { x, y, radius, height } => {
                let (na, nh) = ((TAU * radius / step) as usize + 3, (height / step) as usize + 1);
                for i in 0..na {
                    let a = (i as f64 + rng.gen::<f64>()) / na as f64 * TAU;
                    for j in 0..nh {
                        let z = (j as f64 + rng.gen::<f64>()) / nh as f64 * height;
                        surface.push([x + radius * cos(a), y + radius * sin(a), z]);
                    }
                }
            }
            Landmark::Wall { x0, y0, x1, y1, height } => sample_wall(&mut rng, [x0, y0], [x1, y1], height, step, &mut surface),
            Landmark::Box { height, .. } => {
                for (a, b) in lm.box_edges() {
                    sample_wall(&mut rng, a, b, height, step, &mut surface);
                }
            }
        }
    }
    let mut pts = Vec::with_capacity(surface.len());
    for [wx, wy, z] in surface {
        if params.dropout > 0.0 && rng.gen_bool(params.dropout) {
            continue;
        }
        let (x, y) = inv.apply(wx, wy);
        let (x, y, z) = (x + noise.sample(&mut rng), y + noise.sample(&mut rng), z + noise.sample(&mut rng));
        if x * x + y * y <= params.range * params.range {
            pts.push(Point3::new(x, y, z));
        }
    }
    PointCloud::new(pts)
}

fn sample_wall(rng: &mut ChaCha8Rng, a: [f64; 2], b: [f64; 2], h: f64, step: f64, out: &mut Vec<[f64; 3]>) {
    let len = libm::hypot(b[0] - a[0], b[1] - a[1]);
    let (nl, nh) = ((len / step) as usize + 1, (h / step) as usize + 1);
    for i in 0..nl {
        let t = (i as f64 + rng.gen::<f64>()) / nl as f64;
        let (wx, wy) = (a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]));
        for j in 0..nh {
            let z = (j as f64 + rng.gen::<f64>()) / nh as f64 * h;
            out.push([wx, wy, z]);
        }
    }
}

/// Scans of `world` along a trajectory.
pub fn synthetic_sequence(world: &World, trajectory: &[Se2Pose], params: &ScanParams) -> Result<Vec<(PointCloud, Se2Pose)>> {
    trajectory.iter().map(|p| Ok((scan(world, p, params)?, *p))).collect()
}

/// Convenience wrapper: generate a world and scan it along `trajectory`.
pub fn gen_synthetic_scene(
    seed: u64,
    area: f64,
    n_landmarks: usize,
    trajectory: &[Se2Pose],
    params: &ScanParams,
) -> Result<Vec<(PointCloud, Se2Pose)>> {
    let world = generate_world(seed, area, n_landmarks)?;
    synthetic_sequence(&world, trajectory, params)
}
