//! `key = value` configuration text for [`PipelineConfig`].

use bevloc_core::PipelineConfig;

/// Every key, in the order it is written.
pub const KEYS: &[&str] = &[
    "grid",
    "half_extent",
    "max_density",
    "z_min",
    "z_max",
    "feature_sigma",
    "rotations",
    "clusters",
    "pca_dim",
    "weight_seed",
    "kmeans_seed",
    "kmeans_iters",
    "kmeans_samples",
    "fast_threshold",
    "fast_nms_radius",
    "fast_max_keypoints",
    "ransac_inlier_tol",
    "ransac_max_iters",
    "ransac_min_iters",
    "ransac_confidence",
    "ransac_seed",
    "ransac_min_inliers",
];

fn get(c: &PipelineConfig, key: &str) -> String {
    match key {
        "grid" => c.grid.to_string(),
        "half_extent" => c.half_extent.to_string(),
        "max_density" => c.max_density.to_string(),
        "z_min" => c.z_min.to_string(),
        "z_max" => c.z_max.to_string(),
        "feature_sigma" => c.feature_sigma.to_string(),
        "rotations" => c.rotations.to_string(),
        "clusters" => c.clusters.to_string(),
        "pca_dim" => c.pca_dim.to_string(),
        "weight_seed" => c.weight_seed.to_string(),
        "kmeans_seed" => c.kmeans_seed.to_string(),
        "kmeans_iters" => c.kmeans_iters.to_string(),
        "kmeans_samples" => c.kmeans_samples.to_string(),
        "fast_threshold" => c.fast.threshold.to_string(),
        "fast_nms_radius" => c.fast.nms_radius.to_string(),
        "fast_max_keypoints" => c.fast.max_keypoints.to_string(),
        "ransac_inlier_tol" => c.ransac.inlier_tol.to_string(),
        "ransac_max_iters" => c.ransac.max_iters.to_string(),
        "ransac_min_iters" => c.ransac.min_iters.to_string(),
        "ransac_confidence" => c.ransac.confidence.to_string(),
        "ransac_seed" => c.ransac.seed.to_string(),
        "ransac_min_inliers" => c.ransac.min_inliers.to_string(),
        _ => unreachable!("unknown key {key}"),
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .trim()
        .parse()
        .map_err(|_| format!("bad value {value:?} for {key}"))
}

/// Sets one field from its text form.
pub fn set(c: &mut PipelineConfig, key: &str, value: &str) -> Result<(), String> {
    match key {
        "grid" => c.grid = parse(key, value)?,
        "half_extent" => c.half_extent = parse(key, value)?,
        "max_density" => c.max_density = parse(key, value)?,
        "z_min" => c.z_min = parse(key, value)?,
        "z_max" => c.z_max = parse(key, value)?,
        "feature_sigma" => c.feature_sigma = parse(key, value)?,
        "rotations" => c.rotations = parse(key, value)?,
        "clusters" => c.clusters = parse(key, value)?,
        "pca_dim" => c.pca_dim = parse(key, value)?,
        "weight_seed" => c.weight_seed = parse(key, value)?,
        "kmeans_seed" => c.kmeans_seed = parse(key, value)?,
        "kmeans_iters" => c.kmeans_iters = parse(key, value)?,
        "kmeans_samples" => c.kmeans_samples = parse(key, value)?,
        "fast_threshold" => c.fast.threshold = parse(key, value)?,
        "fast_nms_radius" => c.fast.nms_radius = parse(key, value)?,
        "fast_max_keypoints" => c.fast.max_keypoints = parse(key, value)?,
        "ransac_inlier_tol" => c.ransac.inlier_tol = parse(key, value)?,
        "ransac_max_iters" => c.ransac.max_iters = parse(key, value)?,
        "ransac_min_iters" => c.ransac.min_iters = parse(key, value)?,
        "ransac_confidence" => c.ransac.confidence = parse(key, value)?,
        "ransac_seed" => c.ransac.seed = parse(key, value)?,
        "ransac_min_inliers" => c.ransac.min_inliers = parse(key, value)?,
        _ => return Err(format!("unknown configuration key {key:?}")),
    }
    Ok(())
}

/// All fields as `key = value` lines in [`KEYS`] order.
pub fn to_text(c: &PipelineConfig) -> String {
    KEYS.iter().map(|k| format!("{k} = {}\n", get(c, k))).collect()
}

/// Parses `key = value` lines (blank lines and `#` comments allowed).
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (k, v) = body
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key = value", n + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Applies a configuration file's text on top of `base`.
pub fn apply_text(base: &mut PipelineConfig, text: &str) -> Result<(), String> {
    for (k, v) in parse_pairs(text)? {
        set(base, &k, &v)?;
    }
    Ok(())
}

pub fn from_text(text: &str) -> Result<PipelineConfig, String> {
    let mut c = PipelineConfig::default();
    apply_text(&mut c, text)?;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_default_and_modified() {
        let c = PipelineConfig::default();
        assert_eq!(from_text(&to_text(&c)).unwrap(), c);
        let mut m = c.clone();
        m.grid = 0.1 + 0.2;
        m.ransac.seed = u64::MAX;
        m.fast.threshold = 0.07;
        assert_eq!(from_text(&to_text(&m)).unwrap(), m);
        assert_eq!(to_text(&c).lines().count(), KEYS.len());
    }

    #[test]
    fn comments_and_errors() {
        let c = from_text("# comment\nrotations = 4  # fewer\n\ngrid=0.5\n").unwrap();
        assert_eq!((c.rotations, c.grid), (4, 0.5));
        assert!(from_text("bogus = 1").is_err());
        assert!(from_text("rotations = four").is_err());
        assert!(from_text("rotations 4").is_err());
    }
}
