//! Text renderings of evaluation results.

use bevloc_core::eval::{EvalReport, PrPoint};
use bevloc_core::PipelineConfig;

use crate::config;

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |x| x.to_string())
}

/// `key = value` report in a fixed key order, followed by the run config.
pub fn report_text(r: &EvalReport, cfg: &PipelineConfig, extra: &[(&str, String)]) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
    kv("queries", r.queries.to_string());
    kv("evaluated", r.recall.evaluated.to_string());
    kv("skipped_no_positive", r.recall.skipped.to_string());
    kv("positives", r.curve.positives.to_string());
    kv("recall_at_1", opt(r.recall.rate));
    kv("average_precision", r.curve.average_precision.to_string());
    kv("max_f1", r.curve.max_f1.to_string());
    kv("max_recall_at_precision_1", r.curve.max_recall_at_full_precision.to_string());
    kv("mean_translation_error_m", opt(r.pose.mean_translation));
    kv("mean_rotation_error_deg", opt(r.pose.mean_rotation_deg));
    kv("success_rate_2m_5deg", opt(r.pose.success_rate));
    kv("pr_points", r.curve.points.len().to_string());
    for (k, v) in extra {
        kv(k, v.clone());
    }
    s.push_str("# configuration\n");
    s.push_str(&config::to_text(cfg));
    s
}

pub fn pr_csv(points: &[PrPoint]) -> String {
    let mut s = String::from("threshold,precision,recall\n");
    for p in points {
        s.push_str(&format!("{},{},{}\n", p.threshold, p.precision, p.recall));
    }
    s
}

pub fn parse_pr_csv(text: &str) -> Result<Vec<PrPoint>, String> {
    let mut lines = text.lines();
    if lines.next() != Some("threshold,precision,recall") {
        return Err("missing PR CSV header".into());
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 3 {
                return Err(format!("row {}: expected 3 fields", i + 1));
            }
            let bad = |_| format!("row {}: bad number", i + 1);
            Ok(PrPoint {
                threshold: f[0].parse().map_err(bad)?,
                precision: f[1].parse().map_err(bad)?,
                recall: f[2].parse().map_err(bad)?,
            })
        })
        .collect()
}

pub fn profile_csv(profile: &[(usize, f64)]) -> String {
    let mut s = String::from("delta_px,mean_distance\n");
    for (d, m) in profile {
        s.push_str(&format!("{d},{m}\n"));
    }
    s
}
