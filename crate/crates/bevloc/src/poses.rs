//! Pose lists: one pose per line, either planar `x y yaw` or a KITTI-style
//! row-major 3x4 camera pose (12 numbers).

use std::path::Path;

use bevloc_core::Se2Pose;

use crate::error::{read_file, write_file, IoError, Result};

/// Planar pose from a KITTI camera pose `[R | t]` (camera x right, y down,
/// z forward): the ground plane is camera x-z, sensor forward is camera z
/// and sensor left is camera -x.
pub fn from_kitti_camera(m: &[f64; 12]) -> Se2Pose {
    let (tx, tz) = (m[3], m[11]);
    // Forward axis of the camera in world coordinates is the third column.
    let (fx, fz) = (m[2], m[10]);
    Se2Pose::new(tz, -tx, f64::atan2(-fx, fz))
}

pub fn parse_poses(text: &str) -> std::result::Result<Vec<Se2Pose>, String> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let v: Vec<f64> = body
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| format!("line {}: bad number {t:?}", n + 1)))
            .collect::<std::result::Result<_, _>>()?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(format!("line {}: non-finite value", n + 1));
        }
        match v.len() {
            3 => out.push(Se2Pose::new(v[0], v[1], v[2])),
            12 => out.push(from_kitti_camera(v.as_slice().try_into().expect("12 values"))),
            k => return Err(format!("line {}: expected 3 or 12 values, got {k}", n + 1)),
        }
    }
    Ok(out)
}

pub fn format_poses(poses: &[Se2Pose]) -> String {
    poses.iter().map(|p| format!("{} {} {}\n", p.x, p.y, p.yaw())).collect()
}

pub fn load_poses(path: &Path) -> Result<Vec<Se2Pose>> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|_| IoError::format(path, "not UTF-8 text"))?;
    parse_poses(text).map_err(|m| IoError::format(path, m))
}

pub fn save_poses(path: &Path, poses: &[Se2Pose]) -> Result<()> {
    write_file(path, format_poses(poses).as_bytes())
}
