//! End-to-end processing of one scan: preprocessing, BEV projection, REM
//! features, keypoints with local descriptors, global descriptor, and
//! registration against a stored frame.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{init_weights, BackboneSpec, WeightSet};
use crate::bev::{gaussian_blur, project_bev, BevImage};
use crate::error::{invalid, Error, Result};
use crate::geom::{crop_cloud, crop_height, voxel_filter, PointCloud, Se2Pose};
use crate::registration::{
    correspondences, detect_fast, keypoint_descriptors, match_descriptors, ransac_se2, recover_metric_pose, FastParams,
    Keypoint, MatchSet, RansacParams,
};
use crate::rem::{rem_forward, FeatureMap, LocalDescriptor};
use crate::vlad::{fit_kmeans, fit_pca, pool_vlad, GlobalDescriptor, KMeansFit, PcaFit, PcaProjection, DEFAULT_SHARPNESS};

/// Every tunable of the pipeline. Defaults reproduce the reference setup.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// BEV cell size, meters.
    pub grid: f64,
    /// Half side of the BEV window, meters.
    pub half_extent: f64,
    /// Point count at which a cell saturates.
    pub max_density: u32,
    pub z_min: f64,
    pub z_max: f64,
    /// Gaussian low-pass (pixels) applied to the BEV before feature
    /// extraction; keypoints are still detected on the unfiltered image.
    pub feature_sigma: f64,
    pub rotations: usize,
    pub clusters: usize,
    pub pca_dim: usize,
    /// Seed for randomly initialized backbone weights.
    pub weight_seed: u64,
    pub kmeans_seed: u64,
    pub kmeans_iters: usize,
    /// Cap on local features sampled for k-means.
    pub kmeans_samples: usize,
    pub fast: FastParams,
    pub ransac: RansacParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            grid: 0.4,
            half_extent: 40.0,
            max_density: 10,
            z_min: -3.0,
            z_max: 10.0,
            feature_sigma: 4.0,
            rotations: 8,
            clusters: 64,
            pca_dim: 512,
            weight_seed: 0,
            kmeans_seed: 0,
            kmeans_iters: 20,
            kmeans_samples: 100_000,
            fast: FastParams::default(),
            ransac: RansacParams::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(format!("{name} must be positive, got {v}")))
            }
        };
        pos(self.grid, "grid")?;
        pos(self.half_extent, "half extent")?;
        if self.max_density == 0 {
            return Err(invalid("max density must be at least 1"));
        }
        if !(self.z_min < self.z_max) {
            return Err(invalid("z_min must be below z_max"));
        }
        if !(self.feature_sigma >= 0.0 && self.feature_sigma.is_finite()) {
            return Err(invalid("feature sigma must be non-negative"));
        }
        if self.rotations == 0 {
            return Err(invalid("rotation count must be at least 1"));
        }
        if self.clusters < 2 {
            return Err(invalid("cluster count must be at least 2"));
        }
        if self.pca_dim == 0 || self.kmeans_samples == 0 {
            return Err(invalid("PCA dimension and k-means sample cap must be positive"));
        }
        if !(self.fast.threshold > 0.0 && self.fast.threshold <= 1.0) {
            return Err(invalid("FAST threshold must be in (0, 1]"));
        }
        pos(self.ransac.inlier_tol, "inlier tolerance")?;
        Ok(())
    }

    /// BEV side length in pixels.
    pub fn image_size(&self) -> usize {
        crate::bev::image_size(self.grid, self.half_extent)
    }

    /// The parameters a stored database depends on, as `(key, value)` text
    /// pairs in a fixed order.
    pub fn identity_fields(&self) -> Vec<(&'static str, String)> {
        alloc::vec![
            ("grid", format!("{}", self.grid)),
            ("half_extent", format!("{}", self.half_extent)),
            ("max_density", format!("{}", self.max_density)),
            ("z_min", format!("{}", self.z_min)),
            ("z_max", format!("{}", self.z_max)),
            ("feature_sigma", format!("{}", self.feature_sigma)),
            ("rotations", format!("{}", self.rotations)),
            ("clusters", format!("{}", self.clusters)),
            ("pca_dim", format!("{}", self.pca_dim)),
            ("weight_seed", format!("{}", self.weight_seed)),
        ]
    }

    /// Error naming every identity field that differs from `other`.
    pub fn check_compatible(&self, other: &PipelineConfig) -> Result<()> {
        let diffs: Vec<String> = self
            .identity_fields()
            .into_iter()
            .zip(other.identity_fields())
            .filter(|(a, b)| a.1 != b.1)
            .map(|(a, b)| format!("{} {} vs {}", a.0, a.1, b.1))
            .collect();
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigMismatch(diffs.join(", ")))
        }
    }
}

/// Maps a function over items, possibly in parallel. Implementations must
/// return results in input order.
pub trait Executor {
    fn map<T, U, F>(&self, items: Vec<T>, f: F) -> Vec<U>
    where
        T: Send,
        U: Send,
        F: Fn(T) -> U + Sync + Send;
}

/// Runs everything on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map<T, U, F>(&self, items: Vec<T>, f: F) -> Vec<U>
    where
        T: Send,
        U: Send,
        F: Fn(T) -> U + Sync + Send,
    {
        items.into_iter().map(f).collect()
    }
}

/// Everything computed from one scan.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameData {
    pub image: BevImage,
    pub keypoints: Vec<Keypoint>,
    pub locals: Vec<LocalDescriptor>,
    pub global: GlobalDescriptor,
}

impl FrameData {
    pub fn features(&self) -> FrameFeatures<'_> {
        FrameFeatures {
            keypoints: &self.keypoints,
            locals: &self.locals,
        }
    }
}

/// Keypoints and descriptors of a frame, borrowed for registration.
#[derive(Debug, Clone, Copy)]
pub struct FrameFeatures<'a> {
    pub keypoints: &'a [Keypoint],
    pub locals: &'a [LocalDescriptor],
}

/// Outcome of registering a query against a stored frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Registration {
    pub matches: MatchSet,
    /// Transform taking query-frame points into the stored frame.
    pub relative: Se2Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub spec: BackboneSpec,
    pub weights: WeightSet,
    pub pca: Option<PcaProjection>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, weights: WeightSet, pca: Option<PcaProjection>) -> Result<Self> {
        config.validate()?;
        let spec = weights.spec();
        weights.check(&spec)?;
        if let Some(v) = &weights.vlad {
            v.check()?;
            if v.channels != spec.output_channels() {
                return Err(Error::Shape(format!(
                    "VLAD expects {} channels, backbone gives {}",
                    v.channels,
                    spec.output_channels()
                )));
            }
        }
        if let (Some(p), Some(v)) = (&pca, &weights.vlad) {
            if p.in_dim != v.output_dim() {
                return Err(Error::Shape(format!("PCA input {} vs VLAD output {}", p.in_dim, v.output_dim())));
            }
        }
        Ok(Self {
            config,
            spec,
            weights,
            pca,
        })
    }

    /// Default backbone with weights drawn from `config.weight_seed`.
    pub fn seeded(config: PipelineConfig) -> Result<Self> {
        let spec = BackboneSpec::default();
        let weights = init_weights(&spec, config.weight_seed)?;
        Self::new(config, weights, None)
    }

    /// Height band, square crop, then voxel filtering at the grid size.
    pub fn preprocess(&self, cloud: &PointCloud) -> Result<PointCloud> {
        let c = &self.config;
        let cloud = crop_height(cloud, c.z_min, c.z_max)?;
        let cloud = crop_cloud(&cloud, c.half_extent)?;
        voxel_filter(&cloud, c.grid)
    }

    pub fn bev(&self, cloud: &PointCloud) -> Result<BevImage> {
        let c = &self.config;
        project_bev(&self.preprocess(cloud)?, c.grid, c.half_extent, c.max_density)
    }

    pub fn feature_map(&self, img: &BevImage) -> Result<FeatureMap> {
        let smooth = gaussian_blur(img, self.config.feature_sigma)?;
        rem_forward(&smooth, &self.spec, &self.weights, self.config.rotations)
    }

    pub fn local_features(&self, img: &BevImage, map: &FeatureMap) -> Result<(Vec<Keypoint>, Vec<LocalDescriptor>)> {
        let kps = detect_fast(img, &self.config.fast)?;
        let locals = keypoint_descriptors(map, &kps)?;
        Ok((kps, locals))
    }

    /// VLAD descriptor of a feature map, reduced when a PCA is loaded.
    pub fn global_descriptor(&self, map: &FeatureMap) -> Result<GlobalDescriptor> {
        let vlad = self
            .weights
            .vlad
            .as_ref()
            .ok_or_else(|| invalid("no VLAD parameters; fit or load them first"))?;
        let mut g = pool_vlad(map, vlad)?;
        if let Some(p) = &self.pca {
            g.reduced = Some(p.reduce(&g.raw)?);
        }
        Ok(g)
    }

    pub fn describe_image(&self, image: BevImage) -> Result<FrameData> {
        let map = self.feature_map(&image)?;
        self.describe_with_map(image, &map)
    }

    pub fn describe_with_map(&self, image: BevImage, map: &FeatureMap) -> Result<FrameData> {
        let (keypoints, locals) = self.local_features(&image, map)?;
        let global = self.global_descriptor(map)?;
        Ok(FrameData {
            image,
            keypoints,
            locals,
            global,
        })
    }

    pub fn describe(&self, cloud: &PointCloud) -> Result<FrameData> {
        self.describe_image(self.bev(cloud)?)
    }

    /// Fits VLAD clusters on local features sampled uniformly (without
    /// replacement) from `maps`, and installs them.
    pub fn fit_vlad(&mut self, maps: &[&FeatureMap]) -> Result<KMeansFit> {
        let c = self.spec.output_channels();
        let total: usize = maps.iter().map(|m| m.side() * m.side()).sum();
        if total == 0 {
            return Err(Error::InsufficientData("no feature maps to fit VLAD on".into()));
        }
        let take = total.min(self.config.kmeans_samples);
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.kmeans_seed);
        let mut picks = sample(&mut rng, total, take).into_vec();
        picks.sort_unstable();
        let mut samples = Vec::with_capacity(take * c);
        let (mut map_i, mut offset) = (0usize, 0usize);
        for p in picks {
            while p >= offset + maps[map_i].side() * maps[map_i].side() {
                offset += maps[map_i].side() * maps[map_i].side();
                map_i += 1;
            }
            let cell = p - offset;
            let start = samples.len();
            samples.extend_from_slice(&maps[map_i].tensor.data()[cell * c..(cell + 1) * c]);
            // Pooling normalizes each feature first; cluster in that space.
            crate::math::normalize(&mut samples[start..]);
        }
        let fit = fit_kmeans(
            &samples,
            c,
            self.config.clusters,
            self.config.kmeans_seed,
            self.config.kmeans_iters,
            DEFAULT_SHARPNESS,
        )?;
        self.weights.vlad = Some(fit.params.clone());
        Ok(fit)
    }

    /// Fits the PCA on raw global descriptors and installs it.
    pub fn fit_pca(&mut self, raws: &[&[f32]]) -> Result<PcaFit> {
        let dim = raws.first().map(|r| r.len()).ok_or_else(|| Error::InsufficientData("no descriptors".into()))?;
        if raws.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("raw descriptors differ in length".into()));
        }
        let flat: Vec<f32> = raws.iter().flat_map(|r| r.iter().copied()).collect();
        let fit = fit_pca(&flat, dim, self.config.pca_dim.min(dim))?;
        self.pca = Some(fit.projection.clone());
        Ok(fit)
    }

    /// Matches query keypoints against a stored frame and estimates the
    /// query-to-stored transform.
    pub fn register(&self, query: &FrameData, stored: FrameFeatures<'_>) -> Result<Registration> {
        self.register_features(query.features(), stored, query.image.size())
    }

    /// [`Pipeline::register`] on bare keypoints and descriptors; `size` is
    /// the BEV side length in pixels.
    pub fn register_features(&self, query: FrameFeatures<'_>, stored: FrameFeatures<'_>, size: usize) -> Result<Registration> {
        let matches = match_descriptors(query.locals, stored.locals)?;
        let pairs = correspondences(&matches, query.keypoints, stored.keypoints, size);
        let set = ransac_se2(&pairs, &self.config.ransac)?;
        let relative = recover_metric_pose(&set.transform, self.config.grid);
        Ok(Registration { matches: set, relative })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{transform_cloud, Point3};
    use crate::synth::{generate_world, scan, ScanParams};

    fn small_config() -> PipelineConfig {
        PipelineConfig {
            half_extent: 16.0,
            rotations: 1,
            clusters: 4,
            pca_dim: 16,
            kmeans_iters: 5,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn validation_rejects_bad_values() {
        assert!(PipelineConfig::default().validate().is_ok());
        for bad in [
            PipelineConfig { grid: 0.0, ..PipelineConfig::default() },
            PipelineConfig { rotations: 0, ..PipelineConfig::default() },
            PipelineConfig { z_min: 5.0, z_max: 1.0, ..PipelineConfig::default() },
            PipelineConfig { clusters: 1, ..PipelineConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        assert_eq!(PipelineConfig::default().image_size(), 200);
    }

    #[test]
    fn compatibility_names_the_differing_field() {
        let a = PipelineConfig::default();
        let b = PipelineConfig { rotations: 4, ..a.clone() };
        match a.check_compatible(&b) {
            Err(Error::ConfigMismatch(m)) => assert!(m.contains("rotations 8 vs 4"), "{m}"),
            other => panic!("{other:?}"),
        }
        // RANSAC settings only affect queries.
        let c = PipelineConfig { ransac: RansacParams { seed: 3, ..a.ransac }, ..a.clone() };
        assert!(a.check_compatible(&c).is_ok());
    }

    #[test]
    fn preprocess_crops_and_filters() {
        let p = Pipeline::seeded(small_config()).unwrap();
        let cloud = PointCloud::new(vec![
            Point3::new(0.01, 0.01, 0.0),
            Point3::new(0.02, 0.02, 0.0),
            Point3::new(20.0, 0.0, 0.0),
            Point3::new(0.0, 0.0, 50.0),
        ])
        .unwrap();
        let out = p.preprocess(&cloud).unwrap();
        assert_eq!(out.len(), 1);
        assert!((out.points()[0].x - 0.015).abs() < 1e-12);
    }

    #[test]
    fn describe_requires_vlad_then_works_end_to_end() {
        let mut p = Pipeline::seeded(small_config()).unwrap();
        let world = generate_world(4, 80.0, 120).unwrap();
        let clouds: Vec<_> = (0..3)
            .map(|i| scan(&world, &Se2Pose::new(i as f64 * 3.0, 0.0, 0.0), &ScanParams { range: 16.0, ..ScanParams::default() }).unwrap())
            .collect();
        assert!(p.describe(&clouds[0]).is_err());
        let imgs: Vec<_> = clouds.iter().map(|c| p.bev(c).unwrap()).collect();
        let maps: Vec<_> = imgs.iter().map(|i| p.feature_map(i).unwrap()).collect();
        let fit = p.fit_vlad(&maps.iter().collect::<Vec<_>>()).unwrap();
        assert_eq!(fit.params.output_dim(), 4 * 128);
        let frames: Vec<_> = imgs.iter().zip(&maps).map(|(i, m)| p.describe_with_map(i.clone(), m).unwrap()).collect();
        let raws: Vec<&[f32]> = frames.iter().map(|f| f.global.raw.as_slice()).collect();
        let pca = p.fit_pca(&raws).unwrap();
        assert!(pca.completed);
        let again = p.describe(&clouds[1]).unwrap();
        assert_eq!(again.global.reduced.as_ref().unwrap().len(), 16);
    }

    #[test]
    fn self_registration_is_identity() {
        let mut p = Pipeline::seeded(small_config()).unwrap();
        let world = generate_world(5, 80.0, 150).unwrap();
        let cloud = scan(&world, &Se2Pose::identity(), &ScanParams { range: 16.0, ..ScanParams::default() }).unwrap();
        let img = p.bev(&cloud).unwrap();
        let map = p.feature_map(&img).unwrap();
        p.fit_vlad(&[&map]).unwrap();
        let f = p.describe_with_map(img, &map).unwrap();
        let r = p.register(&f, FrameFeatures { keypoints: &f.keypoints, locals: &f.locals }).unwrap();
        assert!(r.relative.is_identity(), "{:?}", r.relative);
        assert_eq!(r.matches.inlier_count(), f.keypoints.len());
    }

    #[test]
    fn registration_recovers_a_shift() {
        let mut cfg = small_config();
        cfg.half_extent = 24.0;
        let mut p = Pipeline::seeded(cfg).unwrap();
        let world = generate_world(6, 120.0, 500).unwrap();
        let params = ScanParams { range: 24.0, ..ScanParams::default() };
        let truth = Se2Pose::new(2.0, -1.2, 0.0);
        // Query taken at `truth` in the stored frame.
        let stored = scan(&world, &Se2Pose::identity(), &params).unwrap();
        let query = scan(&world, &truth, &params).unwrap();
        let (si, qi) = (p.bev(&stored).unwrap(), p.bev(&query).unwrap());
        let (sm, qm) = (p.feature_map(&si).unwrap(), p.feature_map(&qi).unwrap());
        p.fit_vlad(&[&sm, &qm]).unwrap();
        let s = p.describe_with_map(si, &sm).unwrap();
        let q = p.describe_with_map(qi, &qm).unwrap();
        let r = p.register(&q, FrameFeatures { keypoints: &s.keypoints, locals: &s.locals }).unwrap();
        assert!(r.relative.translation_distance(&truth) < 0.4, "{:?}", r.relative);
        assert!(r.relative.yaw_distance(&truth) < 1f64.to_radians(), "{:?} {} of {}", r.relative, r.matches.inlier_count(), r.matches.pairs.len());
        // The recovered transform carries query points onto the stored scan.
        let moved = transform_cloud(&query, &r.relative);
        assert_eq!(moved.len(), query.len());
    }
}
