//! Retrieval and localization metrics, and the loop-closure protocol.

use alloc::vec::Vec;

use crate::database::{describe_images, BuildReport};
use crate::error::{invalid, Result};
use crate::geom::{compose_global, PointCloud, Se2Pose};
use crate::math::PI;
use crate::pipeline::{Executor, Pipeline};

/// Retrievals within this many meters of the query's true position are correct.
pub const POSITIVE_RADIUS: f64 = 5.0;
pub const SUCCESS_TRANSLATION: f64 = 2.0;
pub const SUCCESS_ROTATION_DEG: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    /// Retrieved a place within the positive radius.
    Tp,
    /// Retrieved a place outside the positive radius.
    Fp,
    /// Nothing retrieved though a positive existed.
    Fn,
    /// Nothing retrieved and nothing to find.
    Tn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub query_id: u64,
    pub retrieved_id: Option<u64>,
    pub descriptor_distance: f32,
    /// Distance between the query's true position and the retrieved place.
    pub geo_distance: f64,
    /// Whether any candidate lies within the positive radius.
    pub has_positive: bool,
    pub true_pose: Se2Pose,
    pub estimated_pose: Option<Se2Pose>,
}

impl Outcome {
    pub fn label(&self) -> Label {
        match (self.retrieved_id.is_some(), self.geo_distance <= POSITIVE_RADIUS, self.has_positive) {
            (true, true, _) => Label::Tp,
            (true, false, _) => Label::Fp,
            (false, _, true) => Label::Fn,
            (false, _, false) => Label::Tn,
        }
    }

    fn is_correct(&self) -> bool {
        self.label() == Label::Tp
    }

    /// Translation error in meters and yaw error in degrees.
    pub fn pose_error(&self) -> Option<(f64, f64)> {
        self.estimated_pose.map(|p| {
            (
                p.translation_distance(&self.true_pose),
                p.yaw_distance(&self.true_pose) * 180.0 / PI,
            )
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecallAt1 {
    /// None when no query had a positive.
    pub rate: Option<f64>,
    pub evaluated: usize,
    /// Queries without any candidate in range.
    pub skipped: usize,
}

pub fn recall_at_1(outcomes: &[Outcome]) -> RecallAt1 {
    let evaluated = outcomes.iter().filter(|o| o.has_positive).count();
    let hits = outcomes.iter().filter(|o| o.has_positive && o.is_correct()).count();
    RecallAt1 {
        rate: (evaluated > 0).then(|| hits as f64 / evaluated as f64),
        evaluated,
        skipped: outcomes.len() - evaluated,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f32,
    pub precision: f64,
    pub recall: f64,
}

impl PrPoint {
    pub fn f1(&self) -> f64 {
        if self.precision + self.recall == 0.0 {
            0.0
        } else {
            2.0 * self.precision * self.recall / (self.precision + self.recall)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    /// One point per distinct descriptor distance, ascending threshold.
    pub points: Vec<PrPoint>,
    pub average_precision: f64,
    pub max_f1: f64,
    /// Highest recall among points with precision exactly 1 (0 if none).
    pub max_recall_at_full_precision: f64,
    pub positives: usize,
}

/// Step-function area under a curve given in ascending threshold order:
/// each recall increment is weighted by the precision at its right end.
pub fn step_area(points: &[PrPoint]) -> f64 {
    let mut prev = 0.0;
    let mut area = 0.0;
    for p in points {
        area += (p.recall - prev) * p.precision;
        prev = p.recall;
    }
    area
}

/// Sweeps a threshold over every distinct descriptor distance. A query is
/// predicted positive when its distance is at most the threshold; recall is
/// over queries that have a positive.
pub fn pr_curve(outcomes: &[Outcome]) -> PrCurve {
    let positives = outcomes.iter().filter(|o| o.has_positive).count();
    let mut ranked: Vec<&Outcome> = outcomes.iter().filter(|o| o.retrieved_id.is_some()).collect();
    ranked.sort_by(|a, b| a.descriptor_distance.total_cmp(&b.descriptor_distance));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < ranked.len() {
        let threshold = ranked[i].descriptor_distance;
        while i < ranked.len() && ranked[i].descriptor_distance == threshold {
            if ranked[i].is_correct() {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(PrPoint {
            threshold,
            precision: tp as f64 / (tp + fp) as f64,
            recall: if positives == 0 { 0.0 } else { tp as f64 / positives as f64 },
        });
    }
    let max_f1 = points.iter().map(PrPoint::f1).fold(0.0, f64::max);
    let max_recall_at_full_precision = points
        .iter()
        .filter(|p| p.precision == 1.0)
        .map(|p| p.recall)
        .fold(0.0, f64::max);
    PrCurve {
        average_precision: step_area(&points),
        points,
        max_f1,
        max_recall_at_full_precision,
        positives,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseErrors {
    /// Means over true positives with an estimated pose.
    pub mean_translation: Option<f64>,
    pub mean_rotation_deg: Option<f64>,
    /// Fraction of all queries localized within 2 m and 5 degrees; queries
    /// without an estimate count as failures. None for zero queries.
    pub success_rate: Option<f64>,
}

pub fn pose_errors(outcomes: &[Outcome]) -> PoseErrors {
    let tp: Vec<(f64, f64)> = outcomes
        .iter()
        .filter(|o| o.is_correct())
        .filter_map(Outcome::pose_error)
        .collect();
    let n = tp.len() as f64;
    let ok = outcomes
        .iter()
        .filter_map(Outcome::pose_error)
        .filter(|(t, r)| *t <= SUCCESS_TRANSLATION && *r <= SUCCESS_ROTATION_DEG)
        .count();
    PoseErrors {
        mean_translation: (!tp.is_empty()).then(|| tp.iter().map(|e| e.0).sum::<f64>() / n),
        mean_rotation_deg: (!tp.is_empty()).then(|| tp.iter().map(|e| e.1).sum::<f64>() / n),
        success_rate: (!outcomes.is_empty()).then(|| ok as f64 / outcomes.len() as f64),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub queries: usize,
    pub recall: RecallAt1,
    pub curve: PrCurve,
    pub pose: PoseErrors,
}

pub fn evaluate(outcomes: &[Outcome]) -> EvalReport {
    EvalReport {
        queries: outcomes.len(),
        recall: recall_at_1(outcomes),
        curve: pr_curve(outcomes),
        pose: pose_errors(outcomes),
    }
}

/// Loop-closure retrieval: frame `i` searches frames `[0, i - exclusion)`
/// by exact L2 descriptor distance (ties to the earlier frame). Frames
/// with no candidates are not evaluated.
pub fn loop_outcomes(descriptors: &[&[f32]], poses: &[Se2Pose], exclusion: usize) -> Result<Vec<Outcome>> {
    if descriptors.len() != poses.len() {
        return Err(invalid("descriptor and pose counts differ"));
    }
    let mut out = Vec::new();
    for i in 0..descriptors.len() {
        let Some(end) = i.checked_sub(exclusion).filter(|e| *e > 0) else {
            continue;
        };
        let mut best = (0usize, f32::INFINITY);
        for (j, d) in descriptors[..end].iter().enumerate() {
            let dist = l2(d, descriptors[i]);
            if dist < best.1 {
                best = (j, dist);
            }
        }
        let has_positive = poses[..end]
            .iter()
            .any(|p| p.translation_distance(&poses[i]) <= POSITIVE_RADIUS);
        out.push(Outcome {
            query_id: i as u64,
            retrieved_id: Some(best.0 as u64),
            descriptor_distance: best.1,
            geo_distance: poses[best.0].translation_distance(&poses[i]),
            has_positive,
            true_pose: poses[i],
            estimated_pose: None,
        });
    }
    Ok(out)
}

/// Describes a sequence (fitting VLAD and PCA on it when the pipeline has
/// none), runs loop retrieval, and optionally registers each query to its
/// retrieved frame to estimate a pose.
pub fn loop_protocol<E: Executor>(
    pipeline: &mut Pipeline,
    sequence: Vec<(PointCloud, Se2Pose)>,
    exclusion: usize,
    register: bool,
    exec: &E,
) -> Result<(Vec<Outcome>, BuildReport)> {
    let mut report = BuildReport::default();
    let (clouds, poses): (Vec<PointCloud>, Vec<Se2Pose>) = sequence.into_iter().unzip();
    if clouds.is_empty() {
        return Ok((Vec::new(), report));
    }
    let p: &Pipeline = pipeline;
    let images = exec
        .map(clouds, |c| p.bev(&c))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let frames = describe_images(pipeline, images, exec, &mut report)?;
    report.built = frames.len();
    let descs: Vec<&[f32]> = frames.iter().map(|f| f.global.vector()).collect();
    let mut outcomes = loop_outcomes(&descs, &poses, exclusion)?;
    if register {
        let p: &Pipeline = pipeline;
        let frames = &frames;
        let poses = &poses;
        let work: Vec<Outcome> = outcomes;
        outcomes = exec.map(work, |mut o| {
            let (q, m) = (o.query_id as usize, o.retrieved_id.unwrap_or(0) as usize);
            o.estimated_pose = p
                .register(&frames[q], frames[m].features())
                .ok()
                .map(|r| compose_global(&poses[m], &r.relative));
            o
        });
    }
    Ok((outcomes, report))
}

fn l2(a: &[f32], b: &[f32]) -> f32 {
    let s: f64 = a.iter().zip(b).map(|(x, y)| ((x - y) as f64) * ((x - y) as f64)).sum();
    libm::sqrt(s) as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{PipelineConfig, Sequential};
    use crate::synth::{gen_synthetic_scene, ScanParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn outcome(dist: f32, geo: f64, has_positive: bool) -> Outcome {
        Outcome {
            query_id: 0,
            retrieved_id: Some(1),
            descriptor_distance: dist,
            geo_distance: geo,
            has_positive,
            true_pose: Se2Pose::identity(),
            estimated_pose: None,
        }
    }

    fn random_outcomes(rng: &mut ChaCha8Rng, n: usize) -> Vec<Outcome> {
        (0..n)
            .map(|i| {
                let geo = rng.gen_range(0.0..12.0);
                let mut o = outcome(rng.gen_range(0..8) as f32 * 0.25, geo, geo <= 5.0 || rng.gen_bool(0.5));
                o.query_id = i as u64;
                o
            })
            .collect()
    }

    #[test]
    fn labels_follow_the_radius() {
        assert_eq!(outcome(0.1, 5.0, true).label(), Label::Tp);
        assert_eq!(outcome(0.1, 5.0001, true).label(), Label::Fp);
        let mut none = outcome(0.1, f64::INFINITY, true);
        none.retrieved_id = None;
        assert_eq!(none.label(), Label::Fn);
        none.has_positive = false;
        assert_eq!(none.label(), Label::Tn);
    }

    #[test]
    fn recall_examples() {
        let all = vec![outcome(0.1, 1.0, true); 4];
        assert_eq!(recall_at_1(&all).rate, Some(1.0));
        let none = vec![outcome(0.1, 9.0, true); 4];
        assert_eq!(recall_at_1(&none).rate, Some(0.0));
        let r = recall_at_1(&[outcome(0.1, 9.0, false)]);
        assert_eq!((r.rate, r.evaluated, r.skipped), (None, 0, 1));
    }

    #[test]
    fn recall_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let o = random_outcomes(&mut rng, 50);
            let mut hits = 0;
            let mut total = 0;
            for x in &o {
                if x.has_positive {
                    total += 1;
                    if x.geo_distance <= 5.0 {
                        hits += 1;
                    }
                }
            }
            let want = if total == 0 { None } else { Some(hits as f64 / total as f64) };
            assert_eq!(recall_at_1(&o).rate, want);
        }
    }

    #[test]
    fn separated_curve_is_perfect() {
        let mut o: Vec<Outcome> = (0..10).map(|i| outcome(i as f32, 1.0, true)).collect();
        o.extend((10..20).map(|i| outcome(i as f32, 50.0, false)));
        let c = pr_curve(&o);
        assert_eq!(c.average_precision, 1.0);
        assert_eq!(c.max_recall_at_full_precision, 1.0);
        assert_eq!(c.max_f1, 1.0);
        assert_eq!(c.points.len(), 20);
    }

    #[test]
    fn curve_matches_threshold_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let o = random_outcomes(&mut rng, 30);
            let c = pr_curve(&o);
            let mut ts: Vec<f32> = o.iter().map(|x| x.descriptor_distance).collect();
            ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
            ts.dedup();
            let pos = o.iter().filter(|x| x.has_positive).count();
            assert_eq!(c.points.len(), ts.len());
            for (p, t) in c.points.iter().zip(&ts) {
                let sel: Vec<&Outcome> = o.iter().filter(|x| x.descriptor_distance <= *t).collect();
                let tp = sel.iter().filter(|x| x.geo_distance <= 5.0).count();
                assert_eq!(p.threshold, *t);
                assert_eq!(p.precision, tp as f64 / sel.len() as f64);
                assert_eq!(p.recall, if pos == 0 { 0.0 } else { tp as f64 / pos as f64 });
                assert!(c.max_f1 >= p.f1());
            }
            assert_eq!(c.average_precision, step_area(&c.points));
            assert!((0.0..=1.0).contains(&c.average_precision));
        }
    }

    #[test]
    fn uninformative_distances_give_prevalence() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let o: Vec<Outcome> = (0..1000)
            .map(|_| {
                let correct = rng.gen_bool(0.3);
                // A query either revisits a place (and finds it) or has nothing to find.
                outcome(rng.gen::<f32>(), if correct { 1.0 } else { 20.0 }, correct)
            })
            .collect();
        let prevalence = o.iter().filter(|x| x.geo_distance <= 5.0).count() as f64 / 1000.0;
        let ap = pr_curve(&o).average_precision;
        assert!((ap - prevalence).abs() <= 0.05, "{ap} vs {prevalence}");
    }

    #[test]
    fn pose_error_examples() {
        let mut exact = outcome(0.1, 1.0, true);
        exact.true_pose = Se2Pose::new(3.0, 4.0, 1.0);
        exact.estimated_pose = Some(exact.true_pose);
        let e = pose_errors(&[exact.clone(), exact.clone()]);
        assert_eq!((e.mean_translation, e.mean_rotation_deg, e.success_rate), (Some(0.0), Some(0.0), Some(1.0)));

        let mut one = outcome(0.1, 1.0, true);
        one.estimated_pose = Some(Se2Pose::new(1.0, 0.0, PI / 180.0));
        let e = pose_errors(&[one]);
        assert!((e.mean_translation.unwrap() - 1.0).abs() < 1e-12);
        assert!((e.mean_rotation_deg.unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(e.success_rate, Some(1.0));

        let fp = outcome(0.1, 9.0, true);
        let e = pose_errors(&[fp]);
        assert_eq!((e.mean_translation, e.success_rate), (None, Some(0.0)));
        assert_eq!(pose_errors(&[]).success_rate, None);
    }

    #[test]
    fn pose_errors_match_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let o: Vec<Outcome> = (0..100)
                .map(|_| {
                    let mut x = outcome(0.0, rng.gen_range(0.0..8.0), true);
                    x.true_pose = Se2Pose::new(rng.gen_range(-9.0..9.0), rng.gen_range(-9.0..9.0), rng.gen_range(-3.0..3.0));
                    x.estimated_pose = Some(Se2Pose::new(
                        x.true_pose.x + rng.gen_range(-2.0..2.0),
                        x.true_pose.y + rng.gen_range(-2.0..2.0),
                        x.true_pose.yaw() + rng.gen_range(-0.15..0.15),
                    ));
                    x
                })
                .collect();
            let errs: Vec<(bool, f64, f64)> = o
                .iter()
                .map(|x| {
                    let (a, b) = (x.true_pose, x.estimated_pose.unwrap());
                    let t = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt();
                    let mut d = (a.yaw() - b.yaw()).rem_euclid(2.0 * PI);
                    if d > PI {
                        d = 2.0 * PI - d;
                    }
                    (x.geo_distance <= 5.0, t, d.to_degrees())
                })
                .collect();
            let tps: Vec<_> = errs.iter().filter(|e| e.0).collect();
            let mt = tps.iter().map(|e| e.1).sum::<f64>() / tps.len() as f64;
            let mr = tps.iter().map(|e| e.2).sum::<f64>() / tps.len() as f64;
            let sr = errs.iter().filter(|e| e.1 <= 2.0 && e.2 <= 5.0).count() as f64 / 100.0;
            let got = pose_errors(&o);
            assert!((got.mean_translation.unwrap() - mt).abs() < 1e-9);
            assert!((got.mean_rotation_deg.unwrap() - mr).abs() < 1e-9);
            assert_eq!(got.success_rate.unwrap(), sr);
        }
    }

    #[test]
    fn loop_candidates_respect_exclusion() {
        let d: Vec<Vec<f32>> = (0..5).map(|i| vec![i as f32]).collect();
        let refs: Vec<&[f32]> = d.iter().map(|v| v.as_slice()).collect();
        let poses: Vec<Se2Pose> = (0..5).map(|i| Se2Pose::new(i as f64, 0.0, 0.0)).collect();
        assert!(loop_outcomes(&refs, &poses, 10).unwrap().is_empty());
        let o = loop_outcomes(&refs, &poses, 0).unwrap();
        assert_eq!(o.len(), 4);
        assert_eq!((o[0].query_id, o[0].retrieved_id), (1, Some(0)));
        let o = loop_outcomes(&refs, &poses, 2).unwrap();
        assert_eq!(o.iter().map(|x| (x.query_id, x.retrieved_id.unwrap())).collect::<Vec<_>>(), vec![(3, 0), (4, 1)]);
    }

    #[test]
    fn planted_loop_is_detected() {
        // Out along a line, then back over the same positions.
        let mut traj: Vec<Se2Pose> = (0..8).map(|i| Se2Pose::new(i as f64 * 20.0 - 70.0, 0.0, 0.0)).collect();
        let back: Vec<Se2Pose> = (0..8).rev().map(|i| Se2Pose::new(i as f64 * 20.0 - 70.0 + 0.5, 0.3, 0.0)).collect();
        traj.extend(back);
        let params = ScanParams { range: 16.0, ..ScanParams::default() };
        let seq = gen_synthetic_scene(11, 200.0, 900, &traj, &params).unwrap();
        let cfg = PipelineConfig { half_extent: 16.0, rotations: 1, clusters: 4, pca_dim: 32, kmeans_iters: 5, ..PipelineConfig::default() };
        let mut pipeline = Pipeline::seeded(cfg).unwrap();
        let (o, _) = loop_protocol(&mut pipeline, seq, 1, true, &Sequential).unwrap();
        assert_eq!(o.iter().map(|x| x.query_id).collect::<Vec<_>>(), (2..16).collect::<Vec<_>>());
        for x in &o {
            // Hand oracle: query 8 + k (k >= 1) revisits frame 7 - k; earlier
            // queries and query 8 (whose twin is the excluded neighbor) have
            // nothing in range.
            let q = x.query_id as usize;
            assert_eq!(x.has_positive, q > 8, "query {q}");
            if q > 8 {
                assert_eq!(x.retrieved_id, Some((15 - q) as u64));
                assert_eq!(x.label(), Label::Tp);
                let (et, er) = x.pose_error().unwrap();
                assert!(et < 0.4 && er < 1.0, "query {q}: {et} m {er} deg");
            }
        }
        let report = evaluate(&o);
        assert_eq!(report.recall.rate, Some(1.0));
    }
}
