//! Normalized point-density bird's-eye-view images.
//!
//! Pixel convention: column `u = floor((x + D) / g)`, row
//! `v = floor((D - y) / g)`, so row 0 holds the largest y. Points exactly on
//! the `x = +D` or `y = -D` edge fall into the last column/row.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::geom::PointCloud;
use crate::math::{ceil, floor};

/// Square grid of densities in `[0, 1]`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BevImage {
    size: usize,
    pixels: Vec<f32>,
    grid: f64,
    half_extent: f64,
}

/// Side length in pixels for a window of half extent `d` at resolution `g`.
pub fn image_size(grid: f64, half_extent: f64) -> usize {
    // 2D/g is often an integer up to rounding; don't let 200.00000001 become 201.
    let s = ceil(2.0 * half_extent / grid - 1e-9);
    if s < 1.0 {
        1
    } else {
        s as usize
    }
}

impl BevImage {
    pub fn zeros(size: usize, grid: f64, half_extent: f64) -> Self {
        Self {
            size,
            pixels: vec![0.0; size * size],
            grid,
            half_extent,
        }
    }

    /// Wraps raw pixels; values are clamped to `[0, 1]`.
    pub fn from_pixels(size: usize, mut pixels: Vec<f32>, grid: f64, half_extent: f64) -> Result<Self> {
        if pixels.len() != size * size {
            return Err(invalid("pixel count must be size * size"));
        }
        for p in pixels.iter_mut() {
            *p = if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) };
        }
        Ok(Self {
            size,
            pixels,
            grid,
            half_extent,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn grid(&self) -> f64 {
        self.grid
    }

    pub fn half_extent(&self) -> f64 {
        self.half_extent
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.size + col]
    }

    pub fn is_blank(&self) -> bool {
        self.pixels.iter().all(|&p| p == 0.0)
    }

    /// Pixel coordinates relative to the image center, with the row axis
    /// kept pointing down. Metric position is `(g * cu, -g * cv)`.
    pub fn centered(&self, u: f64, v: f64) -> (f64, f64) {
        let c = (self.size as f64 - 1.0) / 2.0;
        (u - c, v - c)
    }

    /// Zeros every pixel whose center lies outside the inscribed disk.
    pub fn mask_disk(&self) -> BevImage {
        let mut out = self.clone();
        let c = (self.size as f64 - 1.0) / 2.0;
        let r2 = (self.size as f64 / 2.0) * (self.size as f64 / 2.0);
        for row in 0..self.size {
            for col in 0..self.size {
                let (dx, dy) = (col as f64 - c, row as f64 - c);
                if dx * dx + dy * dy > r2 {
                    out.pixels[row * self.size + col] = 0.0;
                }
            }
        }
        out
    }
}

/// Projects a (voxel-filtered, cropped) cloud into `min(N, n_m) / n_m`
/// densities. Points outside the window are ignored.
pub fn project_bev(cloud: &PointCloud, grid: f64, half_extent: f64, max_density: u32) -> Result<BevImage> {
    if !(grid > 0.0 && grid.is_finite()) {
        return Err(invalid("grid size must be positive"));
    }
    if !(half_extent > 0.0 && half_extent.is_finite()) {
        return Err(invalid("half extent must be positive"));
    }
    if max_density == 0 {
        return Err(invalid("max density must be at least 1"));
    }
    let size = image_size(grid, half_extent);
    let mut counts = vec![0u32; size * size];
    let span = 2.0 * half_extent;
    for p in cloud.points() {
        let (fx, fy) = (p.x + half_extent, half_extent - p.y);
        if !(0.0..=span).contains(&fx) || !(0.0..=span).contains(&fy) {
            continue;
        }
        let u = (floor(fx / grid) as usize).min(size - 1);
        let v = (floor(fy / grid) as usize).min(size - 1);
        counts[v * size + u] += 1;
    }
    let norm = max_density as f32;
    let pixels = counts
        .into_iter()
        .map(|n| n.min(max_density) as f32 / norm)
        .collect();
    Ok(BevImage {
        size,
        pixels,
        grid,
        half_extent,
    })
}

/// Separable Gaussian low-pass with standard deviation `sigma` pixels and
/// zero padding outside the image. `sigma = 0` returns a copy.
pub fn gaussian_blur(img: &BevImage, sigma: f64) -> Result<BevImage> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(invalid("blur sigma must be non-negative"));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let n = img.size;
    let r = ceil(3.0 * sigma) as usize;
    let mut kernel: Vec<f64> = (0..=2 * r)
        .map(|i| {
            let d = i as f64 - r as f64;
            libm::exp(-d * d / (2.0 * sigma * sigma))
        })
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0f64; n * n];
        for a in 0..n {
            for b in 0..n {
                let mut acc = 0.0;
                for (j, &k) in kernel.iter().enumerate() {
                    let t = b as isize + j as isize - r as isize;
                    if t < 0 || t >= n as isize {
                        continue;
                    }
                    let t = t as usize;
                    acc += k * if horizontal { src[a * n + t] } else { src[t * n + a] };
                }
                if horizontal {
                    out[a * n + b] = acc;
                } else {
                    out[b * n + a] = acc;
                }
            }
        }
        out
    };
    let src: Vec<f64> = img.pixels.iter().map(|&p| p as f64).collect();
    let out = pass(&pass(&src, true), false);
    Ok(BevImage {
        size: n,
        pixels: out.into_iter().map(|v| v as f32).collect(),
        grid: img.grid,
        half_extent: img.half_extent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{transform_cloud, Point3, Se2Pose};
    use crate::math::PI;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(seed: u64, n: usize, d: f64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| Point3::new(rng.gen_range(-d..d), rng.gen_range(-d..d), rng.gen_range(0.0..2.0)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn empty_cloud_gives_200_square_zero_image() {
        let img = project_bev(&PointCloud::empty(), 0.4, 40.0, 10).unwrap();
        assert_eq!(img.size(), 200);
        assert!(img.is_blank());
    }

    #[test]
    fn saturated_cell_is_one() {
        let pts = (0..10).map(|i| Point3::new(0.1, 0.1, i as f64 * 0.1)).collect();
        let img = project_bev(&PointCloud::new(pts).unwrap(), 0.4, 40.0, 10).unwrap();
        // x = 0.1 -> column 100; y = 0.1 -> row floor(39.9/0.4) = 99
        assert_eq!(img.get(99, 100), 1.0);
        assert_eq!(img.pixels().iter().filter(|&&p| p > 0.0).count(), 1);
    }

    #[test]
    fn boundary_points_clamp_into_last_cell() {
        let pts = vec![Point3::new(40.0, -40.0, 0.0), Point3::new(-40.0, 40.0, 0.0)];
        let img = project_bev(&PointCloud::new(pts).unwrap(), 0.4, 40.0, 1).unwrap();
        assert_eq!(img.get(199, 199), 1.0);
        assert_eq!(img.get(0, 0), 1.0);
    }

    #[test]
    fn parameter_errors() {
        let c = PointCloud::empty();
        assert!(project_bev(&c, 0.0, 40.0, 10).is_err());
        assert!(project_bev(&c, 0.4, -1.0, 10).is_err());
        assert!(project_bev(&c, 0.4, 40.0, 0).is_err());
    }

    #[test]
    fn matches_double_loop_count_oracle() {
        let (g, d, nm) = (0.5, 8.0, 4u32);
        let cloud = random_cloud(21, 3000, d);
        let img = project_bev(&cloud, g, d, nm).unwrap();
        let s = img.size();
        assert_eq!(s, 32);
        for row in 0..s {
            for col in 0..s {
                let (x0, x1) = (-d + col as f64 * g, -d + (col + 1) as f64 * g);
                let (y1, y0) = (d - row as f64 * g, d - (row + 1) as f64 * g);
                let n = cloud
                    .points()
                    .iter()
                    .filter(|p| p.x >= x0 && p.x < x1 && p.y > y0 && p.y <= y1)
                    .count() as u32;
                assert_eq!(img.get(row, col), n.min(nm) as f32 / nm as f32, "cell ({row},{col})");
            }
        }
    }

    #[test]
    fn independent_of_point_order() {
        let cloud = random_cloud(4, 1000, 10.0);
        let mut rev = cloud.points().to_vec();
        rev.reverse();
        let a = project_bev(&cloud, 0.4, 10.0, 10).unwrap();
        let b = project_bev(&PointCloud::new(rev).unwrap(), 0.4, 10.0, 10).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adding_a_point_never_decreases_density() {
        let cloud = random_cloud(8, 500, 5.0);
        let a = project_bev(&cloud, 0.5, 5.0, 3).unwrap();
        let mut pts = cloud.points().to_vec();
        pts.push(Point3::new(1.1, -2.3, 0.0));
        let b = project_bev(&PointCloud::new(pts).unwrap(), 0.5, 5.0, 3).unwrap();
        assert!(a.pixels().iter().zip(b.pixels()).all(|(x, y)| y >= x));
    }

    #[test]
    fn blur_matches_direct_2d_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = 24;
            let px: Vec<f32> = (0..n * n).map(|_| if rng.gen_bool(0.2) { rng.gen_range(0.0..1.0) } else { 0.0 }).collect();
            let img = BevImage::from_pixels(n, px.clone(), 0.4, 4.8).unwrap();
            let sigma = rng.gen_range(0.5..3.0);
            let out = gaussian_blur(&img, sigma).unwrap();
            let r = (3.0 * sigma).ceil() as i64;
            let w = |d: i64| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp();
            let norm: f64 = (-r..=r).map(w).sum::<f64>().powi(2);
            for y in 0..n as i64 {
                for x in 0..n as i64 {
                    let mut acc = 0.0;
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (yy, xx) = (y + dy, x + dx);
                            if (0..n as i64).contains(&yy) && (0..n as i64).contains(&xx) {
                                acc += w(dx) * w(dy) * px[(yy * n as i64 + xx) as usize] as f64;
                            }
                        }
                    }
                    let got = out.get(y as usize, x as usize) as f64;
                    assert!((got - acc / norm).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn blur_basics() {
        let img = BevImage::from_pixels(20, (0..400).map(|i| (i % 7) as f32 / 7.0).collect(), 0.4, 4.0).unwrap();
        assert_eq!(gaussian_blur(&img, 0.0).unwrap(), img);
        assert!(gaussian_blur(&img, -1.0).is_err());
        // A constant image keeps its value away from the zero-padded border.
        let flat = BevImage::from_pixels(40, vec![0.5; 1600], 0.4, 8.0).unwrap();
        let b = gaussian_blur(&flat, 2.0).unwrap();
        assert!((b.get(20, 20) - 0.5).abs() < 1e-6);
        assert!(b.get(0, 0) < 0.5);
    }

    #[test]
    fn quarter_turn_of_cloud_rotates_image() {
        // Points at cell centers so the rotation never lands on a boundary.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (g, d) = (0.5, 10.0);
        let pts = (0..600)
            .map(|_| {
                let i = rng.gen_range(0..40) as f64;
                let j = rng.gen_range(0..40) as f64;
                Point3::new(-d + (i + 0.5) * g, -d + (j + 0.5) * g, 0.0)
            })
            .collect();
        let cloud = PointCloud::new(pts).unwrap();
        let img = project_bev(&cloud, g, d, 3).unwrap();
        let rotated = transform_cloud(&cloud, &Se2Pose::new(0.0, 0.0, PI / 2.0));
        let rimg = project_bev(&rotated, g, d, 3).unwrap();
        let s = img.size();
        // Counter-clockwise quarter turn: out[r][c] = in[c][s-1-r].
        for r in 0..s {
            for c in 0..s {
                assert_eq!(rimg.get(r, c), img.get(c, s - 1 - r));
            }
        }
    }
}
