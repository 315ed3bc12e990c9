//! Point cloud files: KITTI velodyne binaries and whitespace text.

use std::path::Path;

use bevloc_core::{Point3, PointCloud};

use crate::error::{read_file, write_file, IoError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    /// Little-endian f32 quadruples `x y z intensity`.
    KittiBin,
    /// One `x y z [intensity]` line per point, `#` starts a comment.
    XyzText,
}

impl CloudFormat {
    /// `.bin` is KITTI binary, everything else is text.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("bin") => CloudFormat::KittiBin,
            _ => CloudFormat::XyzText,
        }
    }

    pub fn extension(&self) -> &'static str {
        match self {
            CloudFormat::KittiBin => "bin",
            CloudFormat::XyzText => "xyz",
        }
    }
}

pub fn load_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let bytes = read_file(path)?;
    match format {
        CloudFormat::KittiBin => parse_kitti_bin(&bytes).map_err(|m| IoError::format(path, m)),
        CloudFormat::XyzText => {
            let text = std::str::from_utf8(&bytes).map_err(|_| IoError::format(path, "not UTF-8 text"))?;
            parse_xyz_text(text).map_err(|m| IoError::format(path, m))
        }
    }
}

pub fn save_cloud(path: &Path, cloud: &PointCloud, format: CloudFormat) -> Result<()> {
    let bytes = match format {
        CloudFormat::KittiBin => encode_kitti_bin(cloud),
        CloudFormat::XyzText => encode_xyz_text(cloud).into_bytes(),
    };
    write_file(path, &bytes)
}

pub fn parse_kitti_bin(bytes: &[u8]) -> std::result::Result<PointCloud, String> {
    if !bytes.len().is_multiple_of(16) {
        return Err(format!("length {} is not a multiple of 16 bytes", bytes.len()));
    }
    let f = |c: &[u8]| f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
    let mut points = Vec::with_capacity(bytes.len() / 16);
    let mut intensity = Vec::with_capacity(bytes.len() / 16);
    for rec in bytes.chunks_exact(16) {
        points.push(Point3::new(f(&rec[0..4]) as f64, f(&rec[4..8]) as f64, f(&rec[8..12]) as f64));
        intensity.push(f(&rec[12..16]));
    }
    PointCloud::with_intensity(points, intensity).map_err(|e| e.to_string())
}

pub fn encode_kitti_bin(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for (i, p) in cloud.points().iter().enumerate() {
        let w = cloud.intensity().map_or(0.0, |v| v[i]);
        for v in [p.x as f32, p.y as f32, p.z as f32, w] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn parse_xyz_text(text: &str) -> std::result::Result<PointCloud, String> {
    let mut points = Vec::new();
    let mut intensity = Vec::new();
    let mut with_intensity: Option<bool> = None;
    for (n, line) in text.lines().enumerate() {
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let vals: Vec<f64> = body
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| format!("line {}: bad number {t:?}", n + 1)))
            .collect::<std::result::Result<_, _>>()?;
        let has_i = match vals.len() {
            3 => false,
            4 => true,
            k => return Err(format!("line {}: expected 3 or 4 values, got {k}", n + 1)),
        };
        if *with_intensity.get_or_insert(has_i) != has_i {
            return Err(format!("line {}: intensity column present on some lines only", n + 1));
        }
        points.push(Point3::new(vals[0], vals[1], vals[2]));
        if has_i {
            intensity.push(vals[3] as f32);
        }
    }
    let cloud = if with_intensity == Some(true) {
        PointCloud::with_intensity(points, intensity)
    } else {
        PointCloud::new(points)
    };
    cloud.map_err(|e| e.to_string())
}

pub fn encode_xyz_text(cloud: &PointCloud) -> String {
    let mut s = String::new();
    for (i, p) in cloud.points().iter().enumerate() {
        match cloud.intensity() {
            Some(w) => s.push_str(&format!("{} {} {} {}\n", p.x, p.y, p.z, w[i])),
            None => s.push_str(&format!("{} {} {}\n", p.x, p.y, p.z)),
        }
    }
    s
}
