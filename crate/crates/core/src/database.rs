//! The place database: stored frames with poses and descriptors, exact
//! nearest-descriptor retrieval, and full localization of a query scan.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::bev::BevImage;
use crate::error::{invalid, Error, Result};
use crate::geom::{compose_global, PointCloud, Se2Pose};
use crate::pipeline::{Executor, FrameData, FrameFeatures, Pipeline, PipelineConfig, Sequential};
use crate::registration::Keypoint;
use crate::rem::{FeatureMap, LocalDescriptor};

#[derive(Debug, Clone, PartialEq)]
pub struct PlaceEntry {
    pub id: u64,
    pub pose: Se2Pose,
    /// Reduced global descriptor.
    pub descriptor: Vec<f32>,
    pub image: BevImage,
    pub keypoints: Vec<Keypoint>,
    pub locals: Vec<LocalDescriptor>,
}

impl PlaceEntry {
    pub fn features(&self) -> FrameFeatures<'_> {
        FrameFeatures {
            keypoints: &self.keypoints,
            locals: &self.locals,
        }
    }
}

/// One scan handed to the builder. A scan that could not be read is passed
/// as `Err(reason)` and ends up in the build report.
#[derive(Debug, Clone)]
pub struct ScanInput {
    pub id: u64,
    pub pose: Se2Pose,
    pub cloud: core::result::Result<PointCloud, String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BuildReport {
    pub built: usize,
    pub skipped: Vec<(u64, String)>,
    /// Frames whose feature maps fed k-means (0 when VLAD was preloaded).
    pub vlad_frames: usize,
    pub kmeans_inertia: Vec<f64>,
    /// Total explained-variance ratio of the PCA rows (None when preloaded).
    pub pca_explained: Option<f64>,
    pub pca_completed: bool,
    pub pca_degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaceDatabase {
    pub pipeline: Pipeline,
    entries: Vec<PlaceEntry>,
    /// Descriptors of all entries, contiguous, `dim` floats each.
    matrix: Vec<f32>,
    dim: usize,
}

/// Evenly spaced frame indices whose maps supply the k-means sample: just
/// enough frames to reach `cap` cells, all frames if there are fewer.
pub fn vlad_fit_frames(n: usize, cells_per_frame: usize, cap: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let want = cap.div_ceil(cells_per_frame.max(1)).clamp(1, n);
    if want == n {
        return (0..n).collect();
    }
    (0..want).map(|k| k * n / want).collect()
}

/// Describes a batch of BEV images, fitting VLAD clusters and then the PCA
/// on the batch when the pipeline does not carry them yet.
pub fn describe_images<E: Executor>(
    pipeline: &mut Pipeline,
    images: Vec<BevImage>,
    exec: &E,
    report: &mut BuildReport,
) -> Result<Vec<FrameData>> {
    if images.is_empty() {
        return Err(Error::InsufficientData("no frames to describe".into()));
    }
    let n = images.len();
    let mut cached: Vec<Option<FeatureMap>> = (0..n).map(|_| None).collect();
    if pipeline.weights.vlad.is_none() {
        let side = pipeline.config.image_size().div_ceil(pipeline.spec.total_stride());
        let subset = vlad_fit_frames(n, side * side, pipeline.config.kmeans_samples);
        let p: &Pipeline = pipeline;
        let maps = exec.map(subset.clone(), |i| p.feature_map(&images[i]));
        for (i, m) in subset.iter().zip(maps) {
            cached[*i] = Some(m?);
        }
        let refs: Vec<&FeatureMap> = cached.iter().flatten().collect();
        let fit = pipeline.fit_vlad(&refs)?;
        report.vlad_frames = subset.len();
        report.kmeans_inertia = fit.inertia;
    }
    let p: &Pipeline = pipeline;
    let work: Vec<(BevImage, Option<FeatureMap>)> = images.into_iter().zip(cached).collect();
    let frames: Vec<FrameData> = exec
        .map(work, |(img, map)| match map {
            Some(m) => p.describe_with_map(img, &m),
            None => p.describe_image(img),
        })
        .into_iter()
        .collect::<Result<_>>()?;
    let mut frames = frames;
    if pipeline.pca.is_none() {
        let raws: Vec<&[f32]> = frames.iter().map(|f| f.global.raw.as_slice()).collect();
        let fit = pipeline.fit_pca(&raws)?;
        report.pca_explained = Some(fit.explained_variance_ratio.iter().sum());
        report.pca_completed = fit.completed;
        report.pca_degenerate = fit.degenerate;
        for f in frames.iter_mut() {
            f.global.reduced = Some(fit.projection.reduce(&f.global.raw)?);
        }
    }
    Ok(frames)
}

/// Builds a database from scans. Scans that cannot be used are skipped
/// and listed in the report; if none remain the build fails.
pub fn build_database<E: Executor>(
    mut pipeline: Pipeline,
    scans: Vec<ScanInput>,
    exec: &E,
) -> Result<(PlaceDatabase, BuildReport)> {
    let mut report = BuildReport::default();
    let mut seen: Vec<u64> = Vec::new();
    let mut usable = Vec::new();
    for s in scans {
        if seen.contains(&s.id) {
            return Err(invalid(format!("duplicate frame id {}", s.id)));
        }
        seen.push(s.id);
        match s.cloud {
            Err(reason) => report.skipped.push((s.id, reason)),
            Ok(_) if !s.pose.is_finite() => report.skipped.push((s.id, "non-finite pose".into())),
            Ok(cloud) => usable.push((s.id, s.pose, cloud)),
        }
    }
    if usable.is_empty() {
        return Err(Error::InsufficientData(format!(
            "all {} scans were skipped",
            report.skipped.len()
        )));
    }
    let p = &pipeline;
    let images: Vec<BevImage> = exec
        .map(usable.iter().map(|u| &u.2).collect(), |c: &PointCloud| p.bev(c))
        .into_iter()
        .collect::<Result<_>>()?;
    let frames = describe_images(&mut pipeline, images, exec, &mut report)?;
    report.built = frames.len();
    let mut db = PlaceDatabase::new(pipeline)?;
    for ((id, pose, _), frame) in usable.into_iter().zip(frames) {
        db.push(id, pose, frame)?;
    }
    Ok((db, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalizationStatus {
    Ok,
    /// Retrieval succeeded but registration found no consensus; the pose
    /// is the stored pose of the retrieved place.
    RetrievalOnly,
    Failed,
}

impl LocalizationStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            LocalizationStatus::Ok => "ok",
            LocalizationStatus::RetrievalOnly => "retrieval_only",
            LocalizationStatus::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Localization {
    pub status: LocalizationStatus,
    pub pose: Option<Se2Pose>,
    pub match_id: Option<u64>,
    pub descriptor_distance: Option<f32>,
    /// Query-to-match transform when registration succeeded.
    pub relative: Option<Se2Pose>,
    pub inliers: usize,
}

impl Localization {
    fn failed() -> Self {
        Self {
            status: LocalizationStatus::Failed,
            pose: None,
            match_id: None,
            descriptor_distance: None,
            relative: None,
            inliers: 0,
        }
    }
}

impl PlaceDatabase {
    /// An empty database; the pipeline must already carry VLAD and PCA.
    pub fn new(pipeline: Pipeline) -> Result<Self> {
        let pca = pipeline
            .pca
            .as_ref()
            .ok_or_else(|| invalid("database pipeline needs a fitted PCA"))?;
        if pipeline.weights.vlad.is_none() {
            return Err(invalid("database pipeline needs VLAD parameters"));
        }
        let dim = pca.out_dim;
        Ok(Self {
            pipeline,
            entries: Vec::new(),
            matrix: Vec::new(),
            dim,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.pipeline.config
    }

    pub fn entries(&self) -> &[PlaceEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entry(&self, id: u64) -> Option<&PlaceEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Adds a stored entry (used by loaders and the builder).
    pub fn push_entry(&mut self, entry: PlaceEntry) -> Result<()> {
        if entry.descriptor.len() != self.dim {
            return Err(Error::Shape(format!(
                "entry {} has a {}-dim descriptor, database uses {}",
                entry.id,
                entry.descriptor.len(),
                self.dim
            )));
        }
        if !entry.pose.is_finite() {
            return Err(invalid(format!("entry {} has a non-finite pose", entry.id)));
        }
        if self.entry(entry.id).is_some() {
            return Err(invalid(format!("duplicate frame id {}", entry.id)));
        }
        self.matrix.extend_from_slice(&entry.descriptor);
        self.entries.push(entry);
        Ok(())
    }

    fn push(&mut self, id: u64, pose: Se2Pose, frame: FrameData) -> Result<()> {
        let descriptor = frame
            .global
            .reduced
            .ok_or_else(|| invalid("frame has no reduced descriptor"))?;
        self.push_entry(PlaceEntry {
            id,
            pose,
            descriptor,
            image: frame.image,
            keypoints: frame.keypoints,
            locals: frame.locals,
        })
    }

    /// Adds a scan using the frozen VLAD and PCA.
    pub fn append(&mut self, id: u64, pose: Se2Pose, cloud: &PointCloud) -> Result<()> {
        let frame = self.pipeline.describe(cloud)?;
        self.push(id, pose, frame)
    }

    /// Errors unless `config` matches the parameters the database was built
    /// with.
    pub fn check_config(&self, config: &PipelineConfig) -> Result<()> {
        self.pipeline.config.check_compatible(config)
    }

    /// Exact k-nearest entries by L2 distance, ascending, ties by lower id.
    pub fn query(&self, descriptor: &[f32], top_k: usize) -> Result<Vec<(u64, f32)>> {
        if top_k == 0 {
            return Err(invalid("top_k must be at least 1"));
        }
        if descriptor.len() != self.dim {
            return Err(Error::Shape(format!(
                "query descriptor has {} dims, database uses {}",
                descriptor.len(),
                self.dim
            )));
        }
        let mut hits: Vec<(u64, f32)> = self
            .matrix
            .chunks(self.dim.max(1))
            .zip(&self.entries)
            .map(|(row, e)| (e.id, l2(row, descriptor)))
            .collect();
        hits.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        hits.truncate(top_k);
        Ok(hits)
    }

    pub fn localize(&self, cloud: &PointCloud) -> Result<Localization> {
        if self.is_empty() {
            return Err(Error::EmptyDatabase);
        }
        let image = self.pipeline.bev(cloud)?;
        if image.is_blank() {
            return Ok(Localization::failed());
        }
        let frame = self.pipeline.describe_image(image)?;
        self.localize_frame(&frame)
    }

    /// Retrieval and registration for an already described query.
    pub fn localize_frame(&self, frame: &FrameData) -> Result<Localization> {
        if self.is_empty() {
            return Err(Error::EmptyDatabase);
        }
        if frame.image.is_blank() || frame.global.degenerate {
            return Ok(Localization::failed());
        }
        let Some((id, distance)) = self.query(frame.global.vector(), 1)?.first().copied() else {
            return Ok(Localization::failed());
        };
        let entry = self.entry(id).expect("query returns stored ids");
        let retrieval_only = |inliers| Localization {
            status: LocalizationStatus::RetrievalOnly,
            pose: Some(entry.pose),
            match_id: Some(id),
            descriptor_distance: Some(distance),
            relative: None,
            inliers,
        };
        match self.pipeline.register(frame, entry.features()) {
            Ok(reg) => Ok(Localization {
                status: LocalizationStatus::Ok,
                pose: Some(compose_global(&entry.pose, &reg.relative)),
                match_id: Some(id),
                descriptor_distance: Some(distance),
                relative: Some(reg.relative),
                inliers: reg.matches.inlier_count(),
            }),
            Err(Error::NoConsensus { inliers }) => Ok(retrieval_only(inliers)),
            Err(Error::InsufficientData(_)) => Ok(retrieval_only(0)),
            Err(e) => Err(e),
        }
    }

    /// Sequential convenience wrapper around [`build_database`].
    pub fn build(pipeline: Pipeline, scans: Vec<ScanInput>) -> Result<(Self, BuildReport)> {
        build_database(pipeline, scans, &Sequential)
    }
}

fn l2(a: &[f32], b: &[f32]) -> f32 {
    let s: f64 = a.iter().zip(b).map(|(x, y)| ((x - y) as f64) * ((x - y) as f64)).sum();
    libm::sqrt(s) as f32
}
