//! `BVW1` weight files.
//!
//! Layout, little-endian: magic `BVW1`, u32 record count, then per record a
//! u8 tag, four u32 shape words and the record's f32 block; a trailing u32
//! CRC32 covers every preceding byte.
//!
//! | tag  | record   | shape                                   | f32 block           |
//! |------|----------|-----------------------------------------|---------------------|
//! | 0x01 | conv     | kernel, in, out, stride << 16 \| padding | weights, bias       |
//! | 0x02 | relu     | 0, 0, 0, 0                              | none                |
//! | 0x03 | max-pool | 0, 0, 0, 0                              | none                |
//! | 0x04 | residual | in, out, stride, has projection         | none; 2 or 3 conv records follow (not counted) |
//! | 0x05 | affine   | channels, 0, 0, 0                       | scale, shift        |
//! | 0x10 | VLAD     | K, C, 0, 0                              | centers, w, b       |
//! | 0x20 | PCA      | in dim, out dim, 0, 0                   | mean, components    |

use std::path::Path;

use bevloc_core::backbone::{ConvWeights, LayerWeights, Provenance, WeightSet};
use bevloc_core::vlad::{PcaProjection, VladParams, VladProvenance};

use crate::binary::{fail, DecodeError, Reader, Writer};
use crate::error::{read_file, write_file, IoError, Result};

pub const MAGIC: &[u8; 4] = b"BVW1";

const CONV: u8 = 0x01;
const RELU: u8 = 0x02;
const MAXPOOL: u8 = 0x03;
const RESIDUAL: u8 = 0x04;
const AFFINE: u8 = 0x05;
const VLAD: u8 = 0x10;
const PCA: u8 = 0x20;

fn header(w: &mut Writer, tag: u8, shape: [usize; 4]) {
    w.u8(tag);
    for s in shape {
        w.u32(s);
    }
}

fn write_conv(w: &mut Writer, c: &ConvWeights) {
    header(w, CONV, [c.kernel, c.in_channels, c.out_channels, (c.stride << 16) | c.padding]);
    w.f32s(&c.weights);
    w.f32s(&c.bias);
}

pub fn encode_weights(ws: &WeightSet, pca: Option<&PcaProjection>) -> Vec<u8> {
    let mut w = Writer::new(MAGIC);
    w.u32(ws.layers.len() + ws.vlad.is_some() as usize + pca.is_some() as usize);
    for l in &ws.layers {
        match l {
            LayerWeights::Conv(c) => write_conv(&mut w, c),
            LayerWeights::Relu => header(&mut w, RELU, [0; 4]),
            LayerWeights::MaxPool => header(&mut w, MAXPOOL, [0; 4]),
            LayerWeights::Residual { conv1, conv2, projection } => {
                header(
                    &mut w,
                    RESIDUAL,
                    [conv1.in_channels, conv2.out_channels, conv1.stride, projection.is_some() as usize],
                );
                write_conv(&mut w, conv1);
                write_conv(&mut w, conv2);
                if let Some(p) = projection {
                    write_conv(&mut w, p);
                }
            }
            LayerWeights::Affine { scale, shift } => {
                header(&mut w, AFFINE, [scale.len(), 0, 0, 0]);
                w.f32s(scale);
                w.f32s(shift);
            }
        }
    }
    if let Some(v) = &ws.vlad {
        header(&mut w, VLAD, [v.clusters, v.channels, 0, 0]);
        w.f32s(&v.centers);
        w.f32s(&v.weights);
        w.f32s(&v.biases);
    }
    if let Some(p) = pca {
        header(&mut w, PCA, [p.in_dim, p.out_dim, 0, 0]);
        w.f32s(&p.mean);
        w.f32s(&p.components);
    }
    w.finish()
}

fn read_header(r: &mut Reader) -> std::result::Result<(u8, [usize; 4]), DecodeError> {
    let tag = r.u8()?;
    Ok((tag, [r.u32()?, r.u32()?, r.u32()?, r.u32()?]))
}

// Caps block sizes so a corrupt shape cannot request an absurd allocation.
fn sized(dims: &[usize]) -> std::result::Result<usize, DecodeError> {
    dims.iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&n| n <= 1 << 28)
        .ok_or_else(|| DecodeError::Format("implausible block shape".into()))
}

fn conv_body(r: &mut Reader, [k, cin, cout, sp]: [usize; 4]) -> std::result::Result<ConvWeights, DecodeError> {
    let weights = r.f32s(sized(&[k, k, cin, cout])?)?;
    let bias = r.f32s(cout)?;
    Ok(ConvWeights {
        kernel: k,
        in_channels: cin,
        out_channels: cout,
        stride: sp >> 16,
        padding: sp & 0xffff,
        weights,
        bias,
    })
}

fn read_conv(r: &mut Reader) -> std::result::Result<ConvWeights, DecodeError> {
    let (tag, shape) = read_header(r)?;
    if tag != CONV {
        return fail(format!("expected a conv record, found tag {tag:#04x}"));
    }
    conv_body(r, shape)
}

/// Decodes weights and the optional PCA block.
pub fn decode_weights(bytes: &[u8]) -> std::result::Result<(WeightSet, Option<PcaProjection>), DecodeError> {
    let mut r = Reader::open(bytes, MAGIC)?;
    let count = r.u32()?;
    let mut layers = Vec::new();
    let mut vlad = None;
    let mut pca = None;
    for _ in 0..count {
        let (tag, shape) = read_header(&mut r)?;
        match tag {
            CONV => layers.push(LayerWeights::Conv(conv_body(&mut r, shape)?)),
            RELU => layers.push(LayerWeights::Relu),
            MAXPOOL => layers.push(LayerWeights::MaxPool),
            RESIDUAL => {
                let conv1 = read_conv(&mut r)?;
                let conv2 = read_conv(&mut r)?;
                let projection = if shape[3] == 1 { Some(read_conv(&mut r)?) } else { None };
                if conv1.in_channels != shape[0] || conv2.out_channels != shape[1] || conv1.stride != shape[2] {
                    return fail("residual header disagrees with its convs");
                }
                layers.push(LayerWeights::Residual { conv1, conv2, projection });
            }
            AFFINE => {
                let scale = r.f32s(sized(&[shape[0]])?)?;
                let shift = r.f32s(shape[0])?;
                layers.push(LayerWeights::Affine { scale, shift });
            }
            VLAD => {
                let (k, c) = (shape[0], shape[1]);
                let n = sized(&[k, c])?;
                let v = VladParams {
                    clusters: k,
                    channels: c,
                    centers: r.f32s(n)?,
                    weights: r.f32s(n)?,
                    biases: r.f32s(k)?,
                    provenance: VladProvenance::Loaded,
                };
                v.check()?;
                vlad = Some(v);
            }
            PCA => {
                let (din, dout) = (shape[0], shape[1]);
                let mean = r.f32s(sized(&[din])?)?;
                let components = r.f32s(sized(&[din, dout])?)?;
                pca = Some(PcaProjection {
                    in_dim: din,
                    out_dim: dout,
                    mean,
                    components,
                });
            }
            t => return fail(format!("unknown record tag {t:#04x}")),
        }
    }
    r.done()?;
    let ws = WeightSet {
        layers,
        vlad,
        provenance: Provenance::Loaded("BVW1".into()),
    };
    ws.check(&ws.spec())?;
    Ok((ws, pca))
}

pub(crate) fn decode_error(path: &Path, e: DecodeError) -> IoError {
    match e {
        DecodeError::Crc { stored, computed } => IoError::Crc {
            path: path.to_path_buf(),
            stored,
            computed,
        },
        DecodeError::Format(m) => IoError::format(path, m),
    }
}

pub fn save_weights(path: &Path, ws: &WeightSet, pca: Option<&PcaProjection>) -> Result<()> {
    write_file(path, &encode_weights(ws, pca))
}

pub fn load_weights(path: &Path) -> Result<(WeightSet, Option<PcaProjection>)> {
    decode_weights(&read_file(path)?).map_err(|e| decode_error(path, e))
}
