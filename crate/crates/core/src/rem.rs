//! Rotation-equivariant feature maps: the element-wise max over `n_r` image
//! rotations of `rotate_back(extract(rotate(image)))`.

use alloc::vec;
use alloc::vec::Vec;

use crate::backbone::{forward, forward_tensor, rotate_tensor, sample_into, BackboneSpec, Interpolation, Tensor, WeightSet};
use crate::bev::BevImage;
use crate::error::{invalid, shape, Error, Result};
use crate::math::{normalize, sq, sqrt, TAU};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub tensor: Tensor,
    /// Downsampling factor relative to the source BEV image.
    pub stride: usize,
    pub rotations: usize,
    /// Side length of the BEV image the map was computed from.
    pub source_size: usize,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.tensor.channels()
    }

    pub fn side(&self) -> usize {
        self.tensor.height()
    }

    /// Feature-grid coordinate of BEV pixel coordinate `p` under the
    /// half-pixel-center convention of bilinear upsampling, clamped to the grid.
    pub fn grid_coord(&self, p: f64) -> f64 {
        let f = (p + 0.5) / self.stride as f64 - 0.5;
        f.clamp(0.0, (self.side() - 1) as f64)
    }
}

/// A unit-length local feature attached to a BEV pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalDescriptor {
    pub values: Vec<f32>,
    pub u: f64,
    pub v: f64,
    /// The sampled feature was zero; `values` is all zeros.
    pub degenerate: bool,
}

/// The rotation angles `{0, 2pi/n, ..., (n-1) 2pi/n}`.
pub fn rotation_set(n_r: usize) -> Vec<f64> {
    (0..n_r).map(|k| TAU * k as f64 / n_r as f64).collect()
}

pub fn rem_forward(img: &BevImage, spec: &BackboneSpec, w: &WeightSet, n_r: usize) -> Result<FeatureMap> {
    if n_r == 0 {
        return Err(invalid("rotation count must be at least 1"));
    }
    w.check(spec)?;
    let stride = spec.total_stride();
    if n_r == 1 {
        return Ok(FeatureMap {
            tensor: forward(img, spec, w)?,
            stride,
            rotations: 1,
            source_size: img.size(),
        });
    }
    let input = Tensor::from_image(img);
    let mut pooled: Option<Tensor> = None;
    for angle in rotation_set(n_r) {
        let rotated = rotate_tensor(&input, angle, Interpolation::Bilinear)?;
        let features = forward_tensor(&rotated, w)?;
        let back = rotate_tensor(&features, -angle, Interpolation::Bilinear)?;
        match pooled.as_mut() {
            None => pooled = Some(back),
            Some(p) => p.max_assign(&back)?,
        }
    }
    Ok(FeatureMap {
        tensor: pooled.expect("n_r >= 1"),
        stride,
        rotations: n_r,
        source_size: img.size(),
    })
}

/// Bilinearly interpolated, L2-normalized feature at BEV pixel `(u, v)`.
pub fn descriptor_at(map: &FeatureMap, u: f64, v: f64) -> Result<LocalDescriptor> {
    let max = (map.source_size - 1) as f64;
    if !(u >= 0.0 && v >= 0.0 && u <= max && v <= max) {
        return Err(Error::OutOfRange { u, v, max_u: max, max_v: max });
    }
    let mut values = vec![0.0; map.channels()];
    sample_into(&map.tensor, map.grid_coord(u), map.grid_coord(v), &mut values);
    let degenerate = !normalize(&mut values);
    Ok(LocalDescriptor {
        values,
        u,
        v,
        degenerate,
    })
}

/// Normalized descriptors for every BEV pixel, row-major, `C` floats each.
pub fn dense_descriptors(map: &FeatureMap) -> Vec<f32> {
    let (n, c) = (map.source_size, map.channels());
    let mut out = vec![0.0f32; n * n * c];
    for v in 0..n {
        let fv = map.grid_coord(v as f64);
        for u in 0..n {
            let fu = map.grid_coord(u as f64);
            let cell = &mut out[(v * n + u) * c..(v * n + u + 1) * c];
            sample_into(&map.tensor, fu, fv, cell);
            normalize(cell);
        }
    }
    out
}

/// Mean descriptor distance between pixels `(u, v)` and `(u + d, v + d)`
/// for each displacement `d`, over anchors at least `margin` pixels from
/// the border (for every displacement the same anchor set is used).
pub fn distance_profile(map: &FeatureMap, displacements: &[usize], margin: usize) -> Result<Vec<(usize, f64)>> {
    let n = map.source_size;
    let max_d = displacements.iter().copied().max().unwrap_or(0);
    if 2 * margin + max_d >= n {
        return Err(shape("displacements and margin leave no anchor inside the map"));
    }
    let c = map.channels();
    let dense = dense_descriptors(map);
    let at = |u: usize, v: usize| &dense[(v * n + u) * c..(v * n + u + 1) * c];
    let span = margin..n - margin - max_d;
    let anchors = (span.len() * span.len()) as f64;
    Ok(displacements
        .iter()
        .map(|&d| {
            let mut sum = 0.0f64;
            for v in span.clone() {
                for u in span.clone() {
                    let (a, b) = (at(u, v), at(u + d, v + d));
                    let s2: f64 = a.iter().zip(b).map(|(x, y)| sq((x - y) as f64)).sum();
                    sum += sqrt(s2);
                }
            }
            (d, sum / anchors)
        })
        .collect())
}

/// Computes the REM map of `img` and its displacement/distance profile.
pub fn feature_distance_profile(
    img: &BevImage,
    spec: &BackboneSpec,
    w: &WeightSet,
    n_r: usize,
    displacements: &[usize],
    margin: usize,
) -> Result<Vec<(usize, f64)>> {
    let map = rem_forward(img, spec, w, n_r)?;
    distance_profile(&map, displacements, margin)
}
