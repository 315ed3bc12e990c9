//! `BVDB` database files.
//!
//! Layout, little-endian: magic `BVDB`, u32 version; config block (f64 grid,
//! f64 half extent, u32 max density, u32 rotations, u32 clusters, u64
//! weight seed, then the full configuration as length-prefixed `key = value`
//! text); the embedded `BVW1` file with VLAD and PCA records (length
//! prefixed); u32 entry count; per entry: u64 id, f64 x, y, yaw, u32
//! descriptor dim and f32 block, u32 image side and f32 pixels, u32 keypoint
//! count and per keypoint f64 u, v, f32 score, u32 local count, u32 local
//! dim and per local f64 u, v, u8 degenerate, f32 block; trailing CRC32.

use std::path::Path;

use bevloc_core::bev::BevImage;
use bevloc_core::database::{PlaceDatabase, PlaceEntry};
use bevloc_core::registration::Keypoint;
use bevloc_core::rem::LocalDescriptor;
use bevloc_core::{Pipeline, Se2Pose};

use crate::binary::{fail, DecodeError, Reader, Writer};
use crate::config;
use crate::error::{read_file, write_file, Result};
use crate::weights::{decode_error, decode_weights, encode_weights};

pub const MAGIC: &[u8; 4] = b"BVDB";
pub const VERSION: usize = 1;

pub fn encode_database(db: &PlaceDatabase) -> Vec<u8> {
    let c = db.config();
    let mut w = Writer::new(MAGIC);
    w.u32(VERSION);
    w.f64(c.grid);
    w.f64(c.half_extent);
    w.u32(c.max_density as usize);
    w.u32(c.rotations);
    w.u32(c.clusters);
    w.u64(c.weight_seed);
    w.bytes(config::to_text(c).as_bytes());
    w.bytes(&encode_weights(&db.pipeline.weights, db.pipeline.pca.as_ref()));
    w.u32(db.len());
    for e in db.entries() {
        w.u64(e.id);
        w.f64(e.pose.x);
        w.f64(e.pose.y);
        w.f64(e.pose.yaw());
        w.u32(e.descriptor.len());
        w.f32s(&e.descriptor);
        w.u32(e.image.size());
        w.f32s(e.image.pixels());
        w.u32(e.keypoints.len());
        for k in &e.keypoints {
            w.f64(k.u);
            w.f64(k.v);
            w.f32(k.score);
        }
        w.u32(e.locals.len());
        w.u32(e.locals.first().map_or(0, |l| l.values.len()));
        for l in &e.locals {
            w.f64(l.u);
            w.f64(l.v);
            w.u8(l.degenerate as u8);
            w.f32s(&l.values);
        }
    }
    w.finish()
}

pub fn decode_database(bytes: &[u8]) -> std::result::Result<PlaceDatabase, DecodeError> {
    let mut r = Reader::open(bytes, MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return fail(format!("unsupported database version {version}"));
    }
    let (grid, half_extent) = (r.f64()?, r.f64()?);
    let (max_density, rotations, clusters) = (r.u32()?, r.u32()?, r.u32()?);
    let weight_seed = r.u64()?;
    let text = std::str::from_utf8(r.bytes()?).map_err(|_| DecodeError::Format("config text is not UTF-8".into()))?;
    let cfg = config::from_text(text).map_err(DecodeError::Format)?;
    if (cfg.grid, cfg.half_extent, cfg.max_density as usize, cfg.rotations, cfg.clusters, cfg.weight_seed)
        != (grid, half_extent, max_density, rotations, clusters, weight_seed)
    {
        return fail("config block fields disagree with the config text");
    }
    let (weights, pca) = decode_weights(r.bytes()?)?;
    let mut db = PlaceDatabase::new(Pipeline::new(cfg, weights, pca)?)?;
    let n = r.u32()?;
    for _ in 0..n {
        let id = r.u64()?;
        let pose = Se2Pose::new(r.f64()?, r.f64()?, r.f64()?);
        let dim = r.u32()?;
        let descriptor = r.f32s(dim)?;
        let side = r.u32()?;
        let pixels = r.f32s(side.checked_mul(side).ok_or_else(|| DecodeError::Format("bad image side".into()))?)?;
        let image = BevImage::from_pixels(side, pixels, grid, half_extent)?;
        let nk = r.u32()?;
        let mut keypoints = Vec::with_capacity(nk.min(1 << 16));
        for _ in 0..nk {
            keypoints.push(Keypoint { u: r.f64()?, v: r.f64()?, score: r.f32()? });
        }
        let (nl, ld) = (r.u32()?, r.u32()?);
        let mut locals = Vec::with_capacity(nl.min(1 << 16));
        for _ in 0..nl {
            let (u, v) = (r.f64()?, r.f64()?);
            let degenerate = r.u8()? != 0;
            locals.push(LocalDescriptor { values: r.f32s(ld)?, u, v, degenerate });
        }
        db.push_entry(PlaceEntry { id, pose, descriptor, image, keypoints, locals })?;
    }
    r.done()?;
    Ok(db)
}

pub fn save_database(path: &Path, db: &PlaceDatabase) -> Result<()> {
    write_file(path, &encode_database(db))
}

pub fn load_database(path: &Path) -> Result<PlaceDatabase> {
    decode_database(&read_file(path)?).map_err(|e| decode_error(path, e))
}
