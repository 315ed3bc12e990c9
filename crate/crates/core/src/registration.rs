//! Keypoints, descriptor matching and planar rigid registration of BEV
//! images, plus conversion of the pixel transform to a metric pose.
//!
//! Pixel transforms act on image-centered coordinates `(u~, v~)` (row axis
//! pointing down) as
//!
//! ```text
//! u~' =  cos(t) u~ + sin(t) v~ + t_u
//! v~' = -sin(t) u~ + cos(t) v~ + t_v
//! ```
//!
//! mapping a query keypoint onto its match in the database image.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bev::BevImage;
use crate::error::{invalid, shape, Error, Result};
use crate::geom::Se2Pose;
use crate::math::{atan2, ceil, cos, ln, round, sin, sq, sq_dist, sqrt, wrap_angle};
use crate::rem::{descriptor_at, FeatureMap, LocalDescriptor};

pub use crate::geom::compose_global;

/// Ring of 16 pixels at radius 3, clockwise from 12 o'clock, as (dr, dc).
pub const FAST_RING: [(i32, i32); 16] = [
    (-3, 0),
    (-3, 1),
    (-2, 2),
    (-1, 3),
    (0, 3),
    (1, 3),
    (2, 2),
    (3, 1),
    (3, 0),
    (3, -1),
    (2, -2),
    (1, -3),
    (0, -3),
    (-1, -3),
    (-2, -2),
    (-3, -1),
];

/// Contiguous arc length of the segment test.
pub const FAST_ARC: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    /// Column.
    pub u: f64,
    /// Row.
    pub v: f64,
    pub score: f32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FastParams {
    pub threshold: f32,
    pub nms_radius: f64,
    pub max_keypoints: usize,
}

impl Default for FastParams {
    fn default() -> Self {
        Self {
            threshold: 0.06,
            nms_radius: 3.0,
            max_keypoints: 500,
        }
    }
}

/// Segment-test corner score at an interior pixel: the best margin over
/// all arcs of 9 ring pixels that are uniformly brighter or darker than the
/// center. Snapped to a 1e-6 grid so that a constant intensity offset does
/// not change the result through rounding.
pub fn fast_score(img: &BevImage, row: usize, col: usize) -> f32 {
    let s = img.size();
    debug_assert!(row >= 3 && col >= 3 && row + 3 < s && col + 3 < s);
    let p = img.get(row, col) as f64;
    let mut diff = [0.0f64; 16];
    for (d, &(dr, dc)) in diff.iter_mut().zip(FAST_RING.iter()) {
        let r = (row as i32 + dr) as usize;
        let c = (col as i32 + dc) as usize;
        *d = img.get(r, c) as f64 - p;
    }
    let mut best = f64::NEG_INFINITY;
    for start in 0..16 {
        let (mut bright, mut dark) = (f64::INFINITY, f64::INFINITY);
        for k in 0..FAST_ARC {
            let d = diff[(start + k) % 16];
            bright = bright.min(d);
            dark = dark.min(-d);
        }
        best = best.max(bright.max(dark));
    }
    (round(best * 1e6) / 1e6) as f32
}

/// Every pixel passing the segment test (score above `threshold`), before
/// suppression, in row-major order.
pub fn fast_candidates(img: &BevImage, threshold: f32) -> Vec<Keypoint> {
    let s = img.size();
    let mut out = Vec::new();
    if s < 7 {
        return out;
    }
    for row in 3..s - 3 {
        for col in 3..s - 3 {
            let score = fast_score(img, row, col);
            if score > threshold {
                out.push(Keypoint {
                    u: col as f64,
                    v: row as f64,
                    score,
                });
            }
        }
    }
    out
}

/// FAST-9 corners with greedy non-maximum suppression, strongest first
/// (ties in row-major order), at most `max_keypoints`.
pub fn detect_fast(img: &BevImage, params: &FastParams) -> Result<Vec<Keypoint>> {
    if !(params.threshold > 0.0 && params.threshold <= 1.0) {
        return Err(invalid("FAST threshold must be in (0, 1]"));
    }
    if !(params.nms_radius >= 0.0) {
        return Err(invalid("NMS radius must be non-negative"));
    }
    let mut cands = fast_candidates(img, params.threshold);
    // Stable sort keeps row-major order among equal scores.
    cands.sort_by(|a, b| b.score.total_cmp(&a.score));
    let r2 = params.nms_radius * params.nms_radius;
    let mut kept: Vec<Keypoint> = Vec::new();
    for c in cands {
        if kept.len() == params.max_keypoints {
            break;
        }
        let suppressed = kept.iter().any(|k| {
            let (du, dv) = (k.u - c.u, k.v - c.v);
            du * du + dv * dv <= r2
        });
        if !suppressed {
            kept.push(c);
        }
    }
    Ok(kept)
}

/// Local descriptors sampled from `map` at each keypoint.
pub fn keypoint_descriptors(map: &FeatureMap, keypoints: &[Keypoint]) -> Result<Vec<LocalDescriptor>> {
    keypoints.iter().map(|k| descriptor_at(map, k.u, k.v)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescriptorMatch {
    pub query: usize,
    pub db: usize,
    pub distance: f32,
}

fn nearest(d: &[f32], cols: usize, row: usize) -> usize {
    let r = &d[row * cols..(row + 1) * cols];
    let mut best = 0;
    for j in 1..cols {
        if r[j] < r[best] {
            best = j;
        }
    }
    best
}

/// Mutual nearest neighbours under L2; ties go to the lower index. Pairs
/// are ordered by query index.
pub fn match_descriptors(query: &[LocalDescriptor], db: &[LocalDescriptor]) -> Result<Vec<DescriptorMatch>> {
    if query.is_empty() || db.is_empty() {
        return Ok(Vec::new());
    }
    let dim = query[0].values.len();
    if query.iter().chain(db).any(|d| d.values.len() != dim) {
        return Err(shape("descriptors differ in dimension"));
    }
    let (n, m) = (query.len(), db.len());
    let mut d2 = vec![0.0f32; n * m];
    for (i, q) in query.iter().enumerate() {
        for (j, t) in db.iter().enumerate() {
            d2[i * m + j] = sq_dist(&q.values, &t.values);
        }
    }
    let mut back = vec![0usize; m];
    for (j, b) in back.iter_mut().enumerate() {
        let mut best = 0;
        for i in 1..n {
            if d2[i * m + j] < d2[best * m + j] {
                best = i;
            }
        }
        *b = best;
    }
    let mut out = Vec::new();
    for i in 0..n {
        let j = nearest(&d2, m, i);
        if back[j] == i {
            out.push(DescriptorMatch {
                query: i,
                db: j,
                distance: sqrt(d2[i * m + j] as f64) as f32,
            });
        }
    }
    Ok(out)
}

/// Rotation and translation in image-centered pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelTransform {
    pub tu: f64,
    pub tv: f64,
    /// Always in `[-pi, pi)`.
    pub theta: f64,
}

impl PixelTransform {
    pub fn identity() -> Self {
        Self {
            tu: 0.0,
            tv: 0.0,
            theta: 0.0,
        }
    }

    pub fn new(tu: f64, tv: f64, theta: f64) -> Self {
        Self {
            tu,
            tv,
            theta: wrap_angle(theta),
        }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = (sin(self.theta), cos(self.theta));
        [c * p[0] + s * p[1] + self.tu, -s * p[0] + c * p[1] + self.tv]
    }
}

/// A matched keypoint pair in image-centered pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub query: usize,
    pub db: usize,
    pub distance: f32,
    pub src: [f64; 2],
    pub dst: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchSet {
    pub pairs: Vec<Correspondence>,
    pub inliers: Vec<bool>,
    pub transform: PixelTransform,
    /// Sampling iterations actually run.
    pub iterations: usize,
}

impl MatchSet {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }

    /// Root-mean-square inlier residual in pixels.
    pub fn rms_residual(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (p, _) in self.pairs.iter().zip(&self.inliers).filter(|(_, &b)| b) {
            let q = self.transform.apply(p.src);
            sum += sq(q[0] - p.dst[0]) + sq(q[1] - p.dst[1]);
            n += 1;
        }
        if n == 0 {
            0.0
        } else {
            sqrt(sum / n as f64)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacParams {
    pub inlier_tol: f64,
    pub max_iters: usize,
    /// Draws always made before the adaptive bound may stop the search.
    pub min_iters: usize,
    pub confidence: f64,
    pub seed: u64,
    pub min_inliers: usize,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            inlier_tol: 2.0,
            max_iters: 1000,
            min_iters: 100,
            confidence: 0.99,
            seed: 0,
            min_inliers: 4,
        }
    }
}

/// Least-squares rigid fit (no scale) of `dst ~ transform(src)` over the
/// selected pairs.
pub fn fit_rigid(pairs: &[Correspondence], select: impl Fn(usize) -> bool) -> Option<PixelTransform> {
    let mut n = 0.0;
    let (mut sa, mut sb) = ([0.0f64; 2], [0.0f64; 2]);
    for (_, p) in pairs.iter().enumerate().filter(|(i, _)| select(*i)) {
        n += 1.0;
        sa[0] += p.src[0];
        sa[1] += p.src[1];
        sb[0] += p.dst[0];
        sb[1] += p.dst[1];
    }
    if n < 2.0 {
        return None;
    }
    let ma = [sa[0] / n, sa[1] / n];
    let mb = [sb[0] / n, sb[1] / n];
    let (mut dot, mut cross) = (0.0, 0.0);
    for (_, p) in pairs.iter().enumerate().filter(|(i, _)| select(*i)) {
        let a = [p.src[0] - ma[0], p.src[1] - ma[1]];
        let b = [p.dst[0] - mb[0], p.dst[1] - mb[1]];
        dot += a[0] * b[0] + a[1] * b[1];
        cross += b[0] * a[1] - b[1] * a[0];
    }
    if dot == 0.0 && cross == 0.0 {
        return None;
    }
    let theta = atan2(cross, dot);
    let (s, c) = (sin(theta), cos(theta));
    Some(PixelTransform::new(
        mb[0] - (c * ma[0] + s * ma[1]),
        mb[1] - (-s * ma[0] + c * ma[1]),
        theta,
    ))
}

fn inlier_mask(pairs: &[Correspondence], t: &PixelTransform, tol: f64) -> Vec<bool> {
    let tol2 = tol * tol;
    pairs
        .iter()
        .map(|p| {
            let q = t.apply(p.src);
            sq(q[0] - p.dst[0]) + sq(q[1] - p.dst[1]) <= tol2
        })
        .collect()
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    sqrt(sq(a[0] - b[0]) + sq(a[1] - b[1]))
}

/// RANSAC over 2-pair minimal samples with an adaptive iteration bound,
/// followed by a least-squares refit on the inliers.
pub fn ransac_se2(pairs: &[Correspondence], params: &RansacParams) -> Result<MatchSet> {
    if !(params.inlier_tol > 0.0) {
        return Err(invalid("inlier tolerance must be positive"));
    }
    if !(params.confidence > 0.0 && params.confidence < 1.0) {
        return Err(invalid("confidence must be in (0, 1)"));
    }
    let n = pairs.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("{n} correspondences, need at least 2")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(usize, PixelTransform)> = None;
    let mut bound = params.max_iters;
    let mut iterations = 0;
    while iterations < bound.max(params.min_iters).min(params.max_iters) {
        iterations += 1;
        let i = rng.gen_range(0..n);
        let mut j = rng.gen_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let (a, b) = (&pairs[i], &pairs[j]);
        // Coincident points leave the rotation unobservable.
        if dist(a.src, b.src) < 1.0 || dist(a.dst, b.dst) < 1.0 {
            continue;
        }
        let Some(model) = fit_rigid(pairs, |k| k == i || k == j) else {
            continue;
        };
        let count = inlier_mask(pairs, &model, params.inlier_tol).iter().filter(|&&b| b).count();
        if best.is_none_or(|(c, _)| count > c) {
            best = Some((count, model));
            let w = count as f64 / n as f64;
            bound = if w >= 1.0 {
                0
            } else {
                let denom = ln(1.0 - w * w);
                if denom < 0.0 {
                    let need = ceil(ln(1.0 - params.confidence) / denom);
                    if need.is_finite() && need < params.max_iters as f64 {
                        need as usize
                    } else {
                        params.max_iters
                    }
                } else {
                    params.max_iters
                }
            };
        }
    }
    let Some((count, model)) = best else {
        return Err(Error::NoConsensus { inliers: 0 });
    };
    if count < params.min_inliers {
        return Err(Error::NoConsensus { inliers: count });
    }
    // Local optimization: refit on the consensus set until it settles, then
    // once more on the tighter core of that set.
    let mut transform = model;
    let mut mask = inlier_mask(pairs, &transform, params.inlier_tol);
    for _ in 0..10 {
        let Some(refit) = fit_rigid(pairs, |k| mask[k]) else { break };
        let next = inlier_mask(pairs, &refit, params.inlier_tol);
        if next.iter().filter(|&&b| b).count() < params.min_inliers {
            break;
        }
        let settled = next == mask;
        transform = refit;
        mask = next;
        if settled {
            break;
        }
    }
    let core = inlier_mask(pairs, &transform, params.inlier_tol / 2.0);
    if core.iter().filter(|&&b| b).count() >= params.min_inliers {
        if let Some(refit) = fit_rigid(pairs, |k| core[k]) {
            transform = refit;
        }
    }
    let final_mask = inlier_mask(pairs, &transform, params.inlier_tol);
    let inliers = final_mask.iter().filter(|&&b| b).count();
    if inliers < params.min_inliers {
        return Err(Error::NoConsensus { inliers });
    }
    Ok(MatchSet {
        pairs: pairs.to_vec(),
        inliers: final_mask,
        transform,
        iterations,
    })
}

/// Correspondences from descriptor matches between two images of the same
/// side length, in centered pixel coordinates.
pub fn correspondences(matches: &[DescriptorMatch], query_kp: &[Keypoint], db_kp: &[Keypoint], size: usize) -> Vec<Correspondence> {
    let c = (size as f64 - 1.0) / 2.0;
    matches
        .iter()
        .map(|m| {
            let (qu, qv) = (query_kp[m.query].u - c, query_kp[m.query].v - c);
            let (du, dv) = (db_kp[m.db].u - c, db_kp[m.db].v - c);
            Correspondence {
                query: m.query,
                db: m.db,
                distance: m.distance,
                src: [qu, qv],
                dst: [du, dv],
            }
        })
        .collect()
}

/// Metric transform taking query-frame points into the matched frame.
///
/// A query point `(x, y)` sits at centered pixel `(x/g, -y/g)`, so the
/// pixel model corresponds to a rotation by `theta` and a translation of
/// `(g t_u, -g t_v)` in the metric plane.
pub fn recover_metric_pose(transform: &PixelTransform, grid: f64) -> Se2Pose {
    Se2Pose::new(grid * transform.tu, -grid * transform.tv, transform.theta)
}
