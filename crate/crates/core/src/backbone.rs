//! Dense tensor kernels and the convolutional feature extractor.
//!
//! Tensors are `(height, width, channels)` with channels fastest. Convolutions
//! are lowered to im2col + SGEMM; kernels are stored `[ky][kx][in][out]` so the
//! weight block is directly the right-hand GEMM operand.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bev::BevImage;
use crate::error::{shape, Error, Result};
use crate::math::{cos, floor, round, sin, sqrt, PI};
use crate::vlad::VladParams;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(shape(format!(
                "{} values for a {height}x{width}x{channels} tensor",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_image(img: &BevImage) -> Self {
        let s = img.size();
        Self {
            height: s,
            width: s,
            channels: 1,
            data: img.pixels().to_vec(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Channel vector at `(row, col)`.
    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let o = (row * self.width + col) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    /// Element-wise maximum with `other`, in place.
    pub fn max_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape("max over tensors of different shape"));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            if b > *a {
                *a = b;
            }
        }
        Ok(())
    }
}

/// One layer of a feature extractor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    /// 2x2 window, stride 2.
    MaxPool,
    /// Two 3x3 convs with an identity skip, or a 1x1 projection when the
    /// channel count or stride changes.
    Residual {
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    },
    /// Per-channel scale and shift, a slot for folded normalization.
    Affine { channels: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneSpec {
    pub layers: Vec<LayerSpec>,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self::resnet_trunk()
    }
}

impl BackboneSpec {
    /// A ResNet34 cut after its third stage: 7x7/2 stem, max pool, three
    /// 64-channel blocks, four 128-channel blocks (the first strided).
    /// Output has 128 channels at stride 8.
    ///
    /// The stem uses padding 1 so that each output cell's receptive field is
    /// centered on its 8x8 input block and an `8m`-pixel input yields exactly
    /// `m` output cells.
    pub fn resnet_trunk() -> Self {
        let mut layers = vec![
            LayerSpec::Conv {
                kernel: 7,
                in_channels: 1,
                out_channels: 64,
                stride: 2,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool,
        ];
        for _ in 0..3 {
            layers.push(LayerSpec::Residual {
                in_channels: 64,
                out_channels: 64,
                stride: 1,
            });
        }
        layers.push(LayerSpec::Residual {
            in_channels: 64,
            out_channels: 128,
            stride: 2,
        });
        for _ in 0..3 {
            layers.push(LayerSpec::Residual {
                in_channels: 128,
                out_channels: 128,
                stride: 1,
            });
        }
        Self { layers }
    }

    /// Checks that channel counts chain; returns `(input, output)` channels.
    pub fn validate(&self) -> Result<(usize, usize)> {
        let mut first = None;
        let mut current: Option<usize> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let (cin, cout) = match *layer {
                LayerSpec::Conv {
                    kernel,
                    in_channels,
                    out_channels,
                    stride,
                    ..
                } => {
                    if kernel == 0 || stride == 0 || in_channels == 0 || out_channels == 0 {
                        return Err(shape(format!("layer {i}: zero-sized convolution")));
                    }
                    (Some(in_channels), Some(out_channels))
                }
                LayerSpec::Residual {
                    in_channels,
                    out_channels,
                    stride,
                } => {
                    if stride == 0 || in_channels == 0 || out_channels == 0 {
                        return Err(shape(format!("layer {i}: zero-sized residual block")));
                    }
                    (Some(in_channels), Some(out_channels))
                }
                LayerSpec::Affine { channels } => (Some(channels), Some(channels)),
                LayerSpec::Relu | LayerSpec::MaxPool => (None, None),
            };
            if let Some(cin) = cin {
                match current {
                    Some(c) if c != cin => {
                        return Err(shape(format!("layer {i}: expects {cin} channels, gets {c}")))
                    }
                    None => first = Some(cin),
                    _ => {}
                }
            }
            if cout.is_some() {
                current = cout;
            }
        }
        match (first, current) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => Err(shape("backbone has no parametric layer")),
        }
    }

    pub fn output_channels(&self) -> usize {
        self.validate().map(|(_, c)| c).unwrap_or(0)
    }

    pub fn total_stride(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match *l {
                LayerSpec::Conv { stride, .. } | LayerSpec::Residual { stride, .. } => stride,
                LayerSpec::MaxPool => 2,
                _ => 1,
            })
            .product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[ky][kx][in][out]`
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvWeights {
    pub fn zeros(kernel: usize, in_channels: usize, out_channels: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            in_channels,
            out_channels,
            stride,
            padding,
            weights: vec![0.0; kernel * kernel * in_channels * out_channels],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }

    fn check(&self) -> Result<()> {
        if self.weights.len() != self.fan_in() * self.out_channels || self.bias.len() != self.out_channels {
            return Err(shape("convolution parameter block has the wrong length"));
        }
        Ok(())
    }

    /// Index of `w[ky][kx][ci][co]` in `weights`.
    pub fn index(&self, ky: usize, kx: usize, ci: usize, co: usize) -> usize {
        ((ky * self.kernel + kx) * self.in_channels + ci) * self.out_channels + co
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerWeights {
    Conv(ConvWeights),
    Relu,
    MaxPool,
    Residual {
        conv1: ConvWeights,
        conv2: ConvWeights,
        projection: Option<ConvWeights>,
    },
    Affine {
        scale: Vec<f32>,
        shift: Vec<f32>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    SeededRandom(u64),
    Loaded(String),
}

/// Parameters for every backbone layer, plus the optional VLAD block.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    pub layers: Vec<LayerWeights>,
    pub vlad: Option<VladParams>,
    pub provenance: Provenance,
}

impl WeightSet {
    /// The architecture these parameters describe.
    pub fn spec(&self) -> BackboneSpec {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                LayerWeights::Conv(c) => LayerSpec::Conv {
                    kernel: c.kernel,
                    in_channels: c.in_channels,
                    out_channels: c.out_channels,
                    stride: c.stride,
                    padding: c.padding,
                },
                LayerWeights::Relu => LayerSpec::Relu,
                LayerWeights::MaxPool => LayerSpec::MaxPool,
                LayerWeights::Residual { conv1, conv2, .. } => LayerSpec::Residual {
                    in_channels: conv1.in_channels,
                    out_channels: conv2.out_channels,
                    stride: conv1.stride,
                },
                LayerWeights::Affine { scale, .. } => LayerSpec::Affine { channels: scale.len() },
            })
            .collect();
        BackboneSpec { layers }
    }

    /// Checks internal block shapes and agreement with `spec`.
    pub fn check(&self, spec: &BackboneSpec) -> Result<()> {
        if self.spec() != *spec {
            return Err(shape("weights do not match the backbone spec"));
        }
        for l in &self.layers {
            match l {
                LayerWeights::Conv(c) => c.check()?,
                LayerWeights::Residual {
                    conv1,
                    conv2,
                    projection,
                } => {
                    conv1.check()?;
                    conv2.check()?;
                    if conv1.out_channels != conv2.in_channels || conv2.stride != 1 {
                        return Err(shape("residual block convs do not chain"));
                    }
                    let needs_proj = conv1.in_channels != conv2.out_channels || conv1.stride != 1;
                    match projection {
                        Some(p) => {
                            p.check()?;
                            if p.kernel != 1
                                || p.in_channels != conv1.in_channels
                                || p.out_channels != conv2.out_channels
                                || p.stride != conv1.stride
                            {
                                return Err(shape("residual projection has the wrong shape"));
                            }
                        }
                        None if needs_proj => return Err(shape("residual block needs a projection")),
                        None => {}
                    }
                }
                LayerWeights::Affine { scale, shift } => {
                    if scale.len() != shift.len() {
                        return Err(shape("affine scale and shift differ in length"));
                    }
                }
                LayerWeights::Relu | LayerWeights::MaxPool => {}
            }
        }
        spec.validate()?;
        Ok(())
    }

    pub fn output_channels(&self) -> usize {
        self.spec().output_channels()
    }
}

/// He-normal initialization: kernels ~ N(0, 2 / fan_in), biases zero.
pub fn init_weights(spec: &BackboneSpec, seed: u64) -> Result<WeightSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut conv = |kernel, cin, cout, stride, padding| -> ConvWeights {
        let mut c = ConvWeights::zeros(kernel, cin, cout, stride, padding);
        let std = sqrt(2.0 / c.fan_in() as f64) as f32;
        let normal = Normal::new(0.0f32, std).expect("positive std");
        for w in c.weights.iter_mut() {
            *w = normal.sample(&mut rng);
        }
        c
    };
    let layers = spec
        .layers
        .iter()
        .map(|l| match *l {
            LayerSpec::Conv {
                kernel,
                in_channels,
                out_channels,
                stride,
                padding,
            } => LayerWeights::Conv(conv(kernel, in_channels, out_channels, stride, padding)),
            LayerSpec::Relu => LayerWeights::Relu,
            LayerSpec::MaxPool => LayerWeights::MaxPool,
            LayerSpec::Residual {
                in_channels,
                out_channels,
                stride,
            } => {
                let conv1 = conv(3, in_channels, out_channels, stride, 1);
                let conv2 = conv(3, out_channels, out_channels, 1, 1);
                let projection =
                    (in_channels != out_channels || stride != 1).then(|| conv(1, in_channels, out_channels, stride, 0));
                LayerWeights::Residual {
                    conv1,
                    conv2,
                    projection,
                }
            }
            LayerSpec::Affine { channels } => LayerWeights::Affine {
                scale: vec![1.0; channels],
                shift: vec![0.0; channels],
            },
        })
        .collect();
    Ok(WeightSet {
        layers,
        vlad: None,
        provenance: Provenance::SeededRandom(seed),
    })
}

fn out_dim(size: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = size + 2 * padding;
    if padded < kernel {
        return Err(shape(format!("input of size {size} too small for a {kernel}x{kernel} kernel")));
    }
    Ok((padded - kernel) / stride + 1)
}

/// 2-D convolution with zero padding.
pub fn conv2d(x: &Tensor, w: &ConvWeights) -> Result<Tensor> {
    if x.channels != w.in_channels {
        return Err(shape(format!(
            "convolution expects {} channels, got {}",
            w.in_channels, x.channels
        )));
    }
    let (k, s, p, cin, cout) = (w.kernel, w.stride, w.padding, w.in_channels, w.out_channels);
    let oh = out_dim(x.height, k, s, p)?;
    let ow = out_dim(x.width, k, s, p)?;
    let rows = oh * ow;
    let depth = k * k * cin;

    let lowered;
    let patches: &[f32] = if k == 1 && s == 1 && p == 0 {
        &x.data
    } else {
        let mut buf = vec![0.0f32; rows * depth];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut buf[(oy * ow + ox) * depth..(oy * ow + ox + 1) * depth];
                for ky in 0..k {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= x.height as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix < 0 || ix >= x.width as isize {
                            continue;
                        }
                        let src = (iy as usize * x.width + ix as usize) * cin;
                        let dst = (ky * k + kx) * cin;
                        row[dst..dst + cin].copy_from_slice(&x.data[src..src + cin]);
                    }
                }
            }
        }
        lowered = buf;
        &lowered
    };

    let mut out = Vec::with_capacity(rows * cout);
    for _ in 0..rows {
        out.extend_from_slice(&w.bias);
    }
    // SAFETY: the slices are sized rows*depth, depth*cout and rows*cout with
    // the row/column strides passed below, so every access is in bounds.
    unsafe {
        matrixmultiply::sgemm(
            rows,
            depth,
            cout,
            1.0,
            patches.as_ptr(),
            depth as isize,
            1,
            w.weights.as_ptr(),
            cout as isize,
            1,
            1.0,
            out.as_mut_ptr(),
            cout as isize,
            1,
        );
    }
    Tensor::from_vec(oh, ow, cout, out)
}

pub fn relu(x: &mut Tensor) {
    x.data.iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0
        }
    });
}

/// 2x2 max pooling with stride 2; an odd trailing row/column is dropped.
pub fn max_pool(x: &Tensor) -> Result<Tensor> {
    if x.height < 2 || x.width < 2 {
        return Err(shape("max pool needs at least a 2x2 input"));
    }
    let (oh, ow, c) = (x.height / 2, x.width / 2, x.channels);
    let mut out = Tensor::zeros(oh, ow, c);
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = (oy * ow + ox) * c;
            for ch in 0..c {
                let a = x.get(2 * oy, 2 * ox, ch);
                let b = x.get(2 * oy, 2 * ox + 1, ch);
                let d = x.get(2 * oy + 1, 2 * ox, ch);
                let e = x.get(2 * oy + 1, 2 * ox + 1, ch);
                out.data[dst + ch] = a.max(b).max(d.max(e));
            }
        }
    }
    Ok(out)
}

fn residual(x: &Tensor, conv1: &ConvWeights, conv2: &ConvWeights, projection: Option<&ConvWeights>) -> Result<Tensor> {
    let mut h = conv2d(x, conv1)?;
    relu(&mut h);
    let mut y = conv2d(&h, conv2)?;
    let skip = match projection {
        Some(p) => conv2d(x, p)?,
        None => x.clone(),
    };
    if skip.shape() != y.shape() {
        return Err(shape("residual skip and main path disagree in shape"));
    }
    for (a, b) in y.data.iter_mut().zip(&skip.data) {
        *a += b;
    }
    relu(&mut y);
    Ok(y)
}

/// Runs the extractor on an arbitrary tensor.
pub fn forward_tensor(x: &Tensor, w: &WeightSet) -> Result<Tensor> {
    let mut cur = x.clone();
    for layer in &w.layers {
        cur = match layer {
            LayerWeights::Conv(c) => conv2d(&cur, c)?,
            LayerWeights::Relu => {
                relu(&mut cur);
                cur
            }
            LayerWeights::MaxPool => max_pool(&cur)?,
            LayerWeights::Residual {
                conv1,
                conv2,
                projection,
            } => residual(&cur, conv1, conv2, projection.as_ref())?,
            LayerWeights::Affine { scale, shift } => {
                if scale.len() != cur.channels {
                    return Err(shape("affine layer channel mismatch"));
                }
                let c = cur.channels;
                for (i, v) in cur.data.iter_mut().enumerate() {
                    *v = *v * scale[i % c] + shift[i % c];
                }
                cur
            }
        };
    }
    Ok(cur)
}

/// Feature map of a square BEV image.
pub fn forward(img: &BevImage, spec: &BackboneSpec, w: &WeightSet) -> Result<Tensor> {
    w.check(spec)?;
    let (cin, _) = spec.validate()?;
    if cin != 1 {
        return Err(shape("backbone must take a single-channel image"));
    }
    forward_tensor(&Tensor::from_image(img), w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Nearest,
    Bilinear,
}

/// Quarter turns if `angle` is a multiple of pi/2 (within 1e-9).
fn quarter_turns(angle: f64) -> Option<usize> {
    let q = angle / (PI / 2.0);
    let k = round(q);
    if libm::fabs(angle - k * (PI / 2.0)) <= 1e-9 {
        Some(((k as i64).rem_euclid(4)) as usize)
    } else {
        None
    }
}

/// Rotates the spatial grid counter-clockwise (as displayed, row 0 on top)
/// about the image center. Every channel moves as a scalar field; samples
/// falling outside the source are zero. Multiples of pi/2 are exact index
/// permutations.
pub fn rotate_tensor(t: &Tensor, angle: f64, interp: Interpolation) -> Result<Tensor> {
    if t.height != t.width {
        return Err(shape(format!("rotation needs a square grid, got {}x{}", t.height, t.width)));
    }
    let (n, c) = (t.height, t.channels);
    if let Some(k) = quarter_turns(angle) {
        if k == 0 {
            return Ok(t.clone());
        }
        let mut out = Tensor::zeros(n, n, c);
        for r in 0..n {
            for col in 0..n {
                let (sr, sc) = match k {
                    1 => (col, n - 1 - r),
                    2 => (n - 1 - r, n - 1 - col),
                    _ => (n - 1 - col, r),
                };
                let dst = (r * n + col) * c;
                out.data[dst..dst + c].copy_from_slice(t.pixel(sr, sc));
            }
        }
        return Ok(out);
    }

    let center = (n as f64 - 1.0) / 2.0;
    let (sa, ca) = (sin(angle), cos(angle));
    let mut out = Tensor::zeros(n, n, c);
    for r in 0..n {
        for col in 0..n {
            let (px, py) = (col as f64 - center, center - r as f64);
            let sx = ca * px + sa * py;
            let sy = -sa * px + ca * py;
            let (fc, fr) = (center + sx, center - sy);
            let dst = (r * n + col) * c;
            match interp {
                Interpolation::Nearest => {
                    let (rc, rr) = (round(fc), round(fr));
                    if rc >= 0.0 && rr >= 0.0 && rc < n as f64 && rr < n as f64 {
                        out.data[dst..dst + c].copy_from_slice(t.pixel(rr as usize, rc as usize));
                    }
                }
                Interpolation::Bilinear => {
                    let (c0, r0) = (floor(fc), floor(fr));
                    let (wc, wr) = ((fc - c0) as f32, (fr - r0) as f32);
                    let taps = [
                        (r0, c0, (1.0 - wr) * (1.0 - wc)),
                        (r0, c0 + 1.0, (1.0 - wr) * wc),
                        (r0 + 1.0, c0, wr * (1.0 - wc)),
                        (r0 + 1.0, c0 + 1.0, wr * wc),
                    ];
                    for (tr, tc, wt) in taps {
                        if wt == 0.0 || tr < 0.0 || tc < 0.0 || tr >= n as f64 || tc >= n as f64 {
                            continue;
                        }
                        let src = t.pixel(tr as usize, tc as usize);
                        for (o, &s) in out.data[dst..dst + c].iter_mut().zip(src) {
                            *o += wt * s;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Bilinear blend of the four neighbors of `(u, v)` (u = column, v = row).
/// Integer coordinates return the stored value exactly.
pub fn bilinear_sample(t: &Tensor, u: f64, v: f64) -> Result<Vec<f32>> {
    let (max_u, max_v) = ((t.width - 1) as f64, (t.height - 1) as f64);
    if !(u >= 0.0 && v >= 0.0 && u <= max_u && v <= max_v) || t.width == 0 || t.height == 0 {
        return Err(Error::OutOfRange { u, v, max_u, max_v });
    }
    let mut out = vec![0.0; t.channels];
    sample_into(t, u, v, &mut out);
    Ok(out)
}

/// Unchecked variant of [`bilinear_sample`]; `(u, v)` must be in range.
pub(crate) fn sample_into(t: &Tensor, u: f64, v: f64, out: &mut [f32]) {
    let (u0, v0) = (floor(u) as usize, floor(v) as usize);
    let (fu, fv) = ((u - u0 as f64) as f32, (v - v0 as f64) as f32);
    let u1 = if u0 + 1 < t.width { u0 + 1 } else { u0 };
    let v1 = if v0 + 1 < t.height { v0 + 1 } else { v0 };
    let (a, b) = (t.pixel(v0, u0), t.pixel(v0, u1));
    let (c, d) = (t.pixel(v1, u0), t.pixel(v1, u1));
    let (w00, w01, w10, w11) = ((1.0 - fu) * (1.0 - fv), fu * (1.0 - fv), (1.0 - fu) * fv, fu * fv);
    for (i, o) in out.iter_mut().enumerate() {
        *o = w00 * a[i] + w01 * b[i] + w10 * c[i] + w11 * d[i];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_tensor(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Tensor {
        Tensor::from_vec(h, w, c, (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_conv(rng: &mut ChaCha8Rng, k: usize, cin: usize, cout: usize, s: usize, p: usize) -> ConvWeights {
        let mut c = ConvWeights::zeros(k, cin, cout, s, p);
        c.weights.iter_mut().for_each(|w| *w = rng.gen_range(-1.0..1.0));
        c.bias.iter_mut().for_each(|b| *b = rng.gen_range(-1.0..1.0));
        c
    }

    // Direct definition, independent of the im2col/GEMM path.
    fn naive_conv(x: &Tensor, w: &ConvWeights) -> Tensor {
        let oh = (x.height() + 2 * w.padding - w.kernel) / w.stride + 1;
        let ow = (x.width() + 2 * w.padding - w.kernel) / w.stride + 1;
        let mut out = Tensor::zeros(oh, ow, w.out_channels);
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..w.out_channels {
                    let mut acc = w.bias[co] as f64;
                    for ky in 0..w.kernel {
                        for kx in 0..w.kernel {
                            let iy = (oy * w.stride + ky) as isize - w.padding as isize;
                            let ix = (ox * w.stride + kx) as isize - w.padding as isize;
                            if iy < 0 || ix < 0 || iy >= x.height() as isize || ix >= x.width() as isize {
                                continue;
                            }
                            for ci in 0..w.in_channels {
                                acc += x.get(iy as usize, ix as usize, ci) as f64
                                    * w.weights[w.index(ky, kx, ci, co)] as f64;
                            }
                        }
                    }
                    out.data_mut()[(oy * ow + ox) * w.out_channels + co] = acc as f32;
                }
            }
        }
        out
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
        assert_eq!(a.shape(), b.shape());
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&mut rng, 16, 16, 1);
        let w = random_conv(&mut rng, 3, 1, 1, 1, 1);
        assert!(max_abs_diff(&conv2d(&x, &w).unwrap(), &naive_conv(&x, &w)) <= 1e-5);
        for (k, cin, cout, s, p) in [(3, 4, 5, 1, 1), (7, 1, 6, 2, 1), (3, 3, 8, 2, 1), (1, 6, 4, 2, 0), (1, 3, 2, 1, 0)] {
            let x = random_tensor(&mut rng, 16, 16, cin);
            let w = random_conv(&mut rng, k, cin, cout, s, p);
            assert!(max_abs_diff(&conv2d(&x, &w).unwrap(), &naive_conv(&x, &w)) <= 1e-5);
        }
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(&mut rng, 9, 9, 1);
        let mut w = ConvWeights::zeros(1, 1, 1, 1, 0);
        w.weights[0] = 1.0;
        assert_eq!(conv2d(&x, &w).unwrap(), x);
    }

    #[test]
    fn channel_mismatch_is_structural_error() {
        let x = Tensor::zeros(8, 8, 2);
        let w = ConvWeights::zeros(3, 1, 4, 1, 1);
        assert!(matches!(conv2d(&x, &w), Err(Error::Shape(_))));
    }

    #[test]
    fn default_spec_shape() {
        let spec = BackboneSpec::default();
        assert_eq!(spec.validate().unwrap(), (1, 128));
        assert_eq!(spec.total_stride(), 8);
        let w = init_weights(&spec, 0).unwrap();
        let img = BevImage::zeros(64, 0.4, 12.8);
        let f = forward(&img, &spec, &w).unwrap();
        assert_eq!(f.shape(), (8, 8, 128));
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn broken_spec_is_rejected() {
        let spec = BackboneSpec {
            layers: vec![
                LayerSpec::Conv { kernel: 3, in_channels: 1, out_channels: 8, stride: 1, padding: 1 },
                LayerSpec::Conv { kernel: 3, in_channels: 4, out_channels: 8, stride: 1, padding: 1 },
            ],
        };
        assert!(spec.validate().is_err());
        let w = init_weights(&BackboneSpec::default(), 0).unwrap();
        let img = BevImage::zeros(16, 1.0, 8.0);
        assert!(forward(&img, &spec, &w).is_err());
    }

    #[test]
    fn forward_is_finite_and_deterministic() {
        let spec = BackboneSpec::default();
        let w = init_weights(&spec, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = BevImage::from_pixels(64, (0..64 * 64).map(|_| rng.gen_range(0.0..1.0)).collect(), 0.4, 12.8).unwrap();
        let a = forward(&img, &spec, &w).unwrap();
        let b = forward(&img, &spec, &w).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn translation_equivariance_on_interior() {
        let spec = BackboneSpec::default();
        let w = init_weights(&spec, 9).unwrap();
        let (n, k, s) = (256usize, 1usize, 8usize);
        let shift = s * k;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // Zero padding with zero biases acts like an infinite zero plane, but
        // outputs are truncated at every edge, so keep content more than a
        // receptive-field radius (about 90 px) from all four edges.
        let mut base = vec![0.0f32; n * n];
        for r in 96..144 {
            for c in 96..144 {
                if rng.gen_bool(0.2) {
                    base[r * n + c] = rng.gen_range(0.1..1.0);
                }
            }
        }
        let mut shifted = vec![0.0f32; n * n];
        for r in 0..n - shift {
            for c in 0..n - shift {
                shifted[(r + shift) * n + c + shift] = base[r * n + c];
            }
        }
        let fa = forward(&BevImage::from_pixels(n, base, 1.0, 128.0).unwrap(), &spec, &w).unwrap();
        let fb = forward(&BevImage::from_pixels(n, shifted, 1.0, 128.0).unwrap(), &spec, &w).unwrap();
        let m = fa.height();
        let mut worst = 0.0f32;
        for r in k..m - k {
            for c in k..m - k {
                if r + k >= m || c + k >= m {
                    continue;
                }
                for ch in 0..fa.channels() {
                    let d = (fa.get(r, c, ch) - fb.get(r + k, c + k, ch)).abs();
                    let scale = fa.get(r, c, ch).abs().max(1.0);
                    worst = worst.max(d / scale);
                }
            }
        }
        assert!(worst <= 1e-5, "worst relative deviation {worst}");
    }

    #[test]
    fn rotate_zero_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = random_tensor(&mut rng, 7, 7, 3);
        assert_eq!(rotate_tensor(&t, 0.0, Interpolation::Bilinear).unwrap(), t);
    }

    #[test]
    fn rotate_two_by_two_quarter_turn() {
        let t = Tensor::from_vec(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = rotate_tensor(&t, PI / 2.0, Interpolation::Bilinear).unwrap();
        assert_eq!(r.data(), &[2.0, 4.0, 1.0, 3.0]);
    }

    // Per-pixel inverse mapping, written out with explicit rounding.
    fn inverse_map_oracle(t: &Tensor, angle: f64) -> Tensor {
        let n = t.height();
        let cen = (n as f64 - 1.0) / 2.0;
        let mut out = Tensor::zeros(n, n, t.channels());
        for r in 0..n {
            for c in 0..n {
                let (x, y) = (c as f64 - cen, cen - r as f64);
                let (sx, sy) = (x * angle.cos() + y * angle.sin(), -x * angle.sin() + y * angle.cos());
                let (sc, sr) = ((cen + sx).round() as usize, (cen - sy).round() as usize);
                for ch in 0..t.channels() {
                    out.data_mut()[(r * n + c) * t.channels() + ch] = t.get(sr, sc, ch);
                }
            }
        }
        out
    }

    #[test]
    fn quarter_turns_match_inverse_mapping() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for n in [2, 5, 8] {
            let t = random_tensor(&mut rng, n, n, 2);
            for k in 1..4 {
                let a = k as f64 * PI / 2.0;
                assert_eq!(rotate_tensor(&t, a, Interpolation::Bilinear).unwrap(), inverse_map_oracle(&t, a));
            }
            let mut r = t.clone();
            for _ in 0..4 {
                r = rotate_tensor(&r, PI / 2.0, Interpolation::Nearest).unwrap();
            }
            assert_eq!(r, t);
            assert_eq!(rotate_tensor(&t, -PI / 2.0, Interpolation::Bilinear).unwrap(), inverse_map_oracle(&t, 1.5 * PI));
        }
    }

    #[test]
    fn rotate_non_square_fails() {
        assert!(rotate_tensor(&Tensor::zeros(3, 4, 1), 0.3, Interpolation::Nearest).is_err());
    }

    #[test]
    fn arbitrary_rotation_keeps_center_and_round_trips_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // Smooth field so bilinear round trips stay close.
        let n = 41;
        let data: Vec<f32> = (0..n * n)
            .map(|i| {
                let (r, c) = ((i / n) as f32, (i % n) as f32);
                (r * 0.1).sin() + (c * 0.07).cos()
            })
            .collect();
        let t = Tensor::from_vec(n, n, 1, data).unwrap();
        let a = rng.gen_range(0.2..1.2);
        let back = rotate_tensor(&rotate_tensor(&t, a, Interpolation::Bilinear).unwrap(), -a, Interpolation::Bilinear).unwrap();
        let c = n / 2;
        assert!((back.get(c, c, 0) - t.get(c, c, 0)).abs() < 1e-5);
        for r in 12..29 {
            for col in 12..29 {
                assert!((back.get(r, col, 0) - t.get(r, col, 0)).abs() < 0.02);
            }
        }
    }

    #[test]
    fn bilinear_examples() {
        let t = Tensor::from_vec(2, 2, 2, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(bilinear_sample(&t, 0.5, 0.5).unwrap(), vec![0.5, 0.5]);
        assert_eq!(bilinear_sample(&t, 1.0, 1.0).unwrap(), vec![1.0, 1.0]);
        assert!(matches!(bilinear_sample(&t, 1.5, 0.0), Err(Error::OutOfRange { .. })));
        assert!(bilinear_sample(&t, -0.1, 0.0).is_err());
    }

    #[test]
    fn bilinear_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = random_tensor(&mut rng, 9, 11, 3);
        for _ in 0..100 {
            let (u, v) = (rng.gen_range(0.0..10.0), rng.gen_range(0.0..8.0));
            let s = bilinear_sample(&t, u, v).unwrap();
            let (x0, y0) = (u.floor() as usize, v.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(10), (y0 + 1).min(8));
            let (dx, dy) = (u - x0 as f64, v - y0 as f64);
            for ch in 0..3 {
                let f = |r: usize, c: usize| t.get(r, c, ch) as f64;
                let expected = f(y0, x0) * (1.0 - dx) * (1.0 - dy)
                    + f(y0, x1) * dx * (1.0 - dy)
                    + f(y1, x0) * (1.0 - dx) * dy
                    + f(y1, x1) * dx * dy;
                assert!((s[ch] as f64 - expected).abs() < 1e-6);
            }
        }
        for _ in 0..20 {
            let (r, c) = (rng.gen_range(0..9), rng.gen_range(0..11));
            assert_eq!(bilinear_sample(&t, c as f64, r as f64).unwrap(), t.pixel(r, c));
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        let spec = BackboneSpec::default();
        let a = init_weights(&spec, 1).unwrap();
        let b = init_weights(&spec, 1).unwrap();
        let c = init_weights(&spec, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        a.check(&spec).unwrap();
    }

    #[test]
    fn init_variance_follows_fan_in() {
        let w = init_weights(&BackboneSpec::default(), 3).unwrap();
        let mut convs = vec![];
        for l in &w.layers {
            match l {
                LayerWeights::Conv(c) => convs.push(c),
                LayerWeights::Residual { conv1, conv2, projection } => {
                    convs.push(conv1);
                    convs.push(conv2);
                    if let Some(p) = projection {
                        convs.push(p);
                    }
                }
                _ => {}
            }
        }
        for c in convs.into_iter().filter(|c| c.weights.len() >= 1024) {
            let n = c.weights.len() as f64;
            let mean = c.weights.iter().map(|&x| x as f64).sum::<f64>() / n;
            let var = c.weights.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let target = 2.0 / c.fan_in() as f64;
            assert!((var / target - 1.0).abs() < 0.2, "var {var} target {target}");
            assert!(c.bias.iter().all(|&b| b == 0.0));
        }
    }
}
