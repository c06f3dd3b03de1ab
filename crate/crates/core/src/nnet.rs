//! Inference-only convolutional feature extractor.
//!
//! Six blocks of 3x3 convolutions (pad 1, stride 1, ReLU) each followed by a
//! 2x2 max-pool. Blocks 1-3 hold one convolution, blocks 4-6 hold two, for
//! nine convolutions in total. Pool outputs carry 16, 32, ..., 512 channels,
//! and the activations after pools 4, 5 and 6 are returned as descriptor taps.
//!
//! Weights come either from an MSRW file ([`load_weights`]) or from the
//! deterministic initializer [`init_weights_seeded`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imgio::ImageBuffer;

/// Channel-major activation map: `data[c * h * w + y * w + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FeatureTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "tensor data length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// Converts an interleaved image into a channel-major tensor.
    pub fn from_image(img: &ImageBuffer) -> Self {
        let (w, h, c) = (img.width(), img.height(), img.channels());
        let src = img.data();
        let mut data = vec![0.0; c * h * w];
        for (i, px) in src.chunks_exact(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                data[ch * h * w + i] = v;
            }
        }
        Self {
            channels: c,
            height: h,
            width: w,
            data,
        }
    }
}

/// One 3x3 convolution: kernel laid out `(out, in, ky, kx)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub out_ch: usize,
    pub in_ch: usize,
    pub kernel: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvLayer {
    pub fn new(out_ch: usize, in_ch: usize, kernel: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        if kernel.len() != out_ch * in_ch * 9 || bias.len() != out_ch {
            return Err(Error::Shape(format!(
                "conv layer {out_ch}x{in_ch}x3x3 needs {} kernel and {out_ch} bias values, got {} and {}",
                out_ch * in_ch * 9,
                kernel.len(),
                bias.len()
            )));
        }
        Ok(Self {
            out_ch,
            in_ch,
            kernel,
            bias,
        })
    }
}

/// Zero-padded 3x3 cross-correlation plus bias, then ReLU.
///
/// Each output sample starts from its bias and accumulates in the fixed order
/// in-channel, kernel row, kernel column, so results do not depend on how the
/// output channels are scheduled across threads.
pub fn conv2d_relu(input: &FeatureTensor, layer: &ConvLayer) -> Result<FeatureTensor> {
    if layer.in_ch != input.channels {
        return Err(Error::Shape(format!(
            "kernel expects {} input channels, tensor has {}",
            layer.in_ch, input.channels
        )));
    }
    let (h, w) = (input.height, input.width);
    let plane = h * w;
    let mut out = vec![0f32; layer.out_ch * plane];
    let kn = layer.in_ch * 9;
    // Output channels are processed in groups of BLOCK so every input row
    // load feeds several accumulators; each output still sums in the same order.
    out.par_chunks_mut(plane * BLOCK)
        .enumerate()
        .for_each(|(g, group)| {
            let oc0 = g * BLOCK;
            let nb = group.len() / plane;
            let mut accs = vec![0f32; BLOCK * w];
            for y in 0..h {
                for b in 0..nb {
                    accs[b * w..(b + 1) * w].fill(layer.bias[oc0 + b]);
                }
                for ic in 0..layer.in_ch {
                    let src_plane = &input.data[ic * plane..(ic + 1) * plane];
                    for ky in 0..3 {
                        let sy = y + ky;
                        if sy == 0 || sy > h {
                            continue;
                        }
                        let src = &src_plane[(sy - 1) * w..sy * w];
                        let mut taps = [[0f32; 3]; BLOCK];
                        for (b, t) in taps.iter_mut().enumerate().take(nb) {
                            let k = &layer.kernel[(oc0 + b) * kn + ic * 9 + ky * 3..][..3];
                            t.copy_from_slice(k);
                        }
                        if nb == BLOCK {
                            accumulate_rows(&mut accs, src, &taps);
                        } else {
                            for (b, t) in taps.iter().enumerate().take(nb) {
                                accumulate_row(&mut accs[b * w..(b + 1) * w], src, t[0], t[1], t[2]);
                            }
                        }
                    }
                }
                for b in 0..nb {
                    let dst = &mut group[b * plane + y * w..b * plane + (y + 1) * w];
                    for (d, &a) in dst.iter_mut().zip(&accs[b * w..(b + 1) * w]) {
                        *d = a.max(0.0);
                    }
                }
            }
        });
    FeatureTensor::new(layer.out_ch, h, w, out)
}

const BLOCK: usize = 4;

/// `acc[x] += w0*src[x-1]; acc[x] += w1*src[x]; acc[x] += w2*src[x+1]`, with
/// zero padding at both ends, applied tap by tap to keep the summation order.
#[inline]
fn accumulate_row(acc: &mut [f32], src: &[f32], w0: f32, w1: f32, w2: f32) {
    let n = acc.len();
    if n == 1 {
        acc[0] += w1 * src[0];
        return;
    }
    // Left edge: taps 1 and 2 only.
    acc[0] += w1 * src[0];
    acc[0] += w2 * src[1];
    // Interior: all three taps.
    let (left, mid, right) = (&src[..n - 2], &src[1..n - 1], &src[2..]);
    for (((a, &l), &m), &r) in acc[1..n - 1].iter_mut().zip(left).zip(mid).zip(right) {
        let mut v = *a;
        v += w0 * l;
        v += w1 * m;
        v += w2 * r;
        *a = v;
    }
    acc[n - 1] += w0 * src[n - 2];
    acc[n - 1] += w1 * src[n - 1];
}

/// [`accumulate_row`] for `BLOCK` accumulator rows stored back to back.
#[inline]
fn accumulate_rows(accs: &mut [f32], src: &[f32], taps: &[[f32; 3]; BLOCK]) {
    let n = src.len();
    if n < 3 {
        for (b, t) in taps.iter().enumerate() {
            accumulate_row(&mut accs[b * n..(b + 1) * n], src, t[0], t[1], t[2]);
        }
        return;
    }
    let (a0, rest) = accs.split_at_mut(n);
    let (a1, rest) = rest.split_at_mut(n);
    let (a2, a3) = rest.split_at_mut(n);
    for (a, t) in [(&mut *a0, taps[0]), (&mut *a1, taps[1]), (&mut *a2, taps[2]), (&mut *a3, taps[3])] {
        a[0] += t[1] * src[0];
        a[0] += t[2] * src[1];
        a[n - 1] += t[0] * src[n - 2];
        a[n - 1] += t[1] * src[n - 1];
    }
    let (a0, a1, a2, a3) = (&mut a0[1..n - 1], &mut a1[1..n - 1], &mut a2[1..n - 1], &mut a3[1..n - 1]);
    let (left, mid, right) = (&src[..n - 2], &src[1..n - 1], &src[2..]);
    for x in 0..n - 2 {
        let (l, m, r) = (left[x], mid[x], right[x]);
        let mut v = a0[x];
        v += taps[0][0] * l;
        v += taps[0][1] * m;
        v += taps[0][2] * r;
        a0[x] = v;
        let mut v = a1[x];
        v += taps[1][0] * l;
        v += taps[1][1] * m;
        v += taps[1][2] * r;
        a1[x] = v;
        let mut v = a2[x];
        v += taps[2][0] * l;
        v += taps[2][1] * m;
        v += taps[2][2] * r;
        a2[x] = v;
        let mut v = a3[x];
        v += taps[3][0] * l;
        v += taps[3][1] * m;
        v += taps[3][2] * r;
        a3[x] = v;
    }
}

/// Non-overlapping 2x2 max-pool.
pub fn maxpool2(input: &FeatureTensor) -> Result<FeatureTensor> {
    if input.height % 2 != 0 || input.width % 2 != 0 {
        return Err(Error::Shape(format!(
            "max-pool needs even dimensions, got {}x{}",
            input.height, input.width
        )));
    }
    let (oh, ow) = (input.height / 2, input.width / 2);
    let mut data = Vec::with_capacity(input.channels * oh * ow);
    for c in 0..input.channels {
        for y in 0..oh {
            for x in 0..ow {
                let m = input
                    .at(c, 2 * y, 2 * x)
                    .max(input.at(c, 2 * y, 2 * x + 1))
                    .max(input.at(c, 2 * y + 1, 2 * x))
                    .max(input.at(c, 2 * y + 1, 2 * x + 1));
                data.push(m);
            }
        }
    }
    FeatureTensor::new(input.channels, oh, ow, data)
}

/// Layer layout of the extractor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    /// Each block: its convolutions as `(in_ch, out_ch)`, followed by one 2x2 pool.
    pub blocks: Vec<Vec<(usize, usize)>>,
    pub input_size: usize,
    /// 1-based pool indices whose outputs are returned.
    pub taps: Vec<usize>,
}

pub const CONV_COUNT: usize = 9;
pub const POOL_COUNT: usize = 6;
pub const DEFAULT_INPUT_SIZE: usize = 448;

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            blocks: vec![
                vec![(3, 16)],
                vec![(16, 32)],
                vec![(32, 64)],
                vec![(64, 128), (128, 128)],
                vec![(128, 256), (256, 256)],
                vec![(256, 512), (512, 512)],
            ],
            input_size: DEFAULT_INPUT_SIZE,
            taps: vec![4, 5, 6],
        }
    }
}

impl NetworkSpec {
    pub fn with_input_size(mut self, size: usize) -> Self {
        self.input_size = size;
        self
    }

    /// `(in_ch, out_ch)` of every convolution in execution order.
    pub fn conv_shapes(&self) -> Vec<(usize, usize)> {
        self.blocks.iter().flatten().copied().collect()
    }

    /// Channel count after pool `k` (1-based).
    pub fn pool_channels(&self, k: usize) -> usize {
        self.blocks[k - 1].last().map_or(0, |&(_, out)| out)
    }

    pub fn validate(&self) -> Result<()> {
        let convs = self.conv_shapes();
        if convs.len() != CONV_COUNT || self.blocks.len() != POOL_COUNT {
            return Err(Error::Config(format!(
                "network needs {CONV_COUNT} convolutions and {POOL_COUNT} pools, found {} and {}",
                convs.len(),
                self.blocks.len()
            )));
        }
        if self.blocks.iter().any(Vec::is_empty) {
            return Err(Error::Config("every block needs at least one convolution".into()));
        }
        let mut prev = 3;
        for (i, &(cin, cout)) in convs.iter().enumerate() {
            if cin != prev {
                return Err(Error::Config(format!(
                    "layer {}: input channels {cin} do not follow previous output {prev}",
                    i + 1
                )));
            }
            prev = cout;
        }
        for k in 2..=POOL_COUNT {
            if self.pool_channels(k) != 2 * self.pool_channels(k - 1) {
                return Err(Error::Config(format!(
                    "pool {k} has {} channels, expected double of {}",
                    self.pool_channels(k),
                    self.pool_channels(k - 1)
                )));
            }
        }
        if self.input_size == 0 || self.input_size % 64 != 0 {
            return Err(Error::Config(format!(
                "input size {} must be a positive multiple of 64",
                self.input_size
            )));
        }
        if let Some(t) = self.taps.iter().find(|&&t| t == 0 || t > POOL_COUNT) {
            return Err(Error::Config(format!("tap point {t} is not a pool index")));
        }
        Ok(())
    }
}

/// Optional per-channel input normalization: `(x - mean) / scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputNorm {
    pub mean: [f32; 3],
    pub scale: [f32; 3],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    File { path: PathBuf, checksum: u32 },
    Seeded { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightBundle {
    pub layers: Vec<ConvLayer>,
    pub norm: Option<InputNorm>,
    pub provenance: Provenance,
}

impl WeightBundle {
    /// Checks every layer against `spec`, reporting the first mismatch with its
    /// 1-based layer number.
    pub fn check_against(&self, spec: &NetworkSpec) -> Result<()> {
        let shapes = spec.conv_shapes();
        if shapes.len() != self.layers.len() {
            return Err(Error::Config(format!(
                "weights hold {} conv layers, network expects {}",
                self.layers.len(),
                shapes.len()
            )));
        }
        for (i, (layer, &(cin, cout))) in self.layers.iter().zip(&shapes).enumerate() {
            if layer.in_ch != cin || layer.out_ch != cout {
                return Err(Error::Config(format!(
                    "layer {}: weights are {}->{} channels, network expects {cin}->{cout}",
                    i + 1,
                    layer.in_ch,
                    layer.out_ch
                )));
            }
        }
        Ok(())
    }
}

/// Runs the network on a 3-channel image of exactly `spec.input_size` square
/// and returns the activations after each tap pool, keyed by pool index.
pub fn forward_taps(
    img: &ImageBuffer,
    spec: &NetworkSpec,
    weights: &WeightBundle,
) -> Result<BTreeMap<usize, FeatureTensor>> {
    if img.channels() != 3 {
        return Err(Error::Shape(format!(
            "network input needs 3 channels, image has {}",
            img.channels()
        )));
    }
    spec.validate()?;
    weights.check_against(spec)?;
    if img.width() != spec.input_size || img.height() != spec.input_size {
        return Err(Error::Shape(format!(
            "network input must be {0}x{0}, got {1}x{2}",
            spec.input_size,
            img.width(),
            img.height()
        )));
    }
    let mut x = FeatureTensor::from_image(img);
    if let Some(norm) = &weights.norm {
        let plane = x.height * x.width;
        for (c, chunk) in x.data.chunks_exact_mut(plane).enumerate() {
            for v in chunk {
                *v = (*v - norm.mean[c]) / norm.scale[c];
            }
        }
    }
    let mut layers = weights.layers.iter();
    let mut taps = BTreeMap::new();
    for (b, block) in spec.blocks.iter().enumerate() {
        for _ in block {
            let layer = layers.next().expect("layer count checked against spec");
            x = conv2d_relu(&x, layer)?;
        }
        x = maxpool2(&x)?;
        if spec.taps.contains(&(b + 1)) {
            taps.insert(b + 1, x.clone());
        }
    }
    Ok(taps)
}

/// Deterministic substitute for trained weights.
///
/// Kernels are drawn from xoshiro256** (seeded through SplitMix64, as
/// `SeedableRng::seed_from_u64` does) as uniform values on
/// `[-sqrt(3) s, sqrt(3) s)` with `s = sqrt(2 / (in_ch * 9))`, which gives the
/// He variance `2 / (in_ch * 9)`. The 53-bit mantissa draw and all scaling use
/// exactly rounded IEEE operations, so a seed yields the same bits everywhere.
/// Biases are zero.
pub fn init_weights_seeded(spec: &NetworkSpec, seed: u64) -> WeightBundle {
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let layers = spec
        .conv_shapes()
        .into_iter()
        .map(|(cin, cout)| {
            let std = (2.0 / (cin as f64 * 9.0)).sqrt();
            let half_width = 3f64.sqrt() * std;
            let kernel = (0..cout * cin * 9)
                .map(|_| {
                    let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
                    ((2.0 * u - 1.0) * half_width) as f32
                })
                .collect();
            ConvLayer {
                out_ch: cout,
                in_ch: cin,
                kernel,
                bias: vec![0.0; cout],
            }
        })
        .collect();
    WeightBundle {
        layers,
        norm: None,
        provenance: Provenance::Seeded { seed },
    }
}

const MAGIC: &[u8; 4] = b"MSRW";
const VERSION: u32 = 1;
const NORM_TAG: &[u8; 4] = b"NORM";

/// Serializes to the MSRW layout (little-endian): magic, version, layer count,
/// per layer `out, in, 3, 3, kernel, bias`, an optional `NORM` section with
/// six f32, then a CRC32 of every preceding byte.
pub fn encode_weights(bundle: &WeightBundle) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(bundle.layers.len() as u32).to_le_bytes());
    for layer in &bundle.layers {
        for v in [layer.out_ch as u32, layer.in_ch as u32, 3, 3] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in layer.kernel.iter().chain(&layer.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(norm) = &bundle.norm {
        out.extend_from_slice(NORM_TAG);
        for v in norm.mean.iter().chain(&norm.scale) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn save_weights(bundle: &WeightBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_weights(bundle)).map_err(|e| Error::io(path, e))
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                field,
                format!("truncated at byte {} (need {n} more)", self.pos),
            )),
        }
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize, field: &str) -> Result<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| Error::format(field, "size overflow"))?;
        Ok(self
            .take(len, field)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }
}

/// Parses MSRW bytes without checking them against a network layout.
pub fn decode_weights(bytes: &[u8], path: &Path) -> Result<WeightBundle> {
    let mut r = ByteReader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format("magic", "expected \"MSRW\""));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(
            "version",
            format!("unsupported version {version}, expected {VERSION}"),
        ));
    }
    let count = r.u32("layer_count")? as usize;
    let mut layers = Vec::with_capacity(count.min(64));
    for i in 0..count {
        let field = format!("layer {}", i + 1);
        let out_ch = r.u32(&field)? as usize;
        let in_ch = r.u32(&field)? as usize;
        let (kh, kw) = (r.u32(&field)?, r.u32(&field)?);
        if (kh, kw) != (3, 3) {
            return Err(Error::format(
                field,
                format!("kernel must be 3x3, found {kh}x{kw}"),
            ));
        }
        let n = out_ch
            .checked_mul(in_ch)
            .and_then(|v| v.checked_mul(9))
            .ok_or_else(|| Error::format(&field, "size overflow"))?;
        let kernel = r.f32s(n, &field)?;
        let bias = r.f32s(out_ch, &field)?;
        layers.push(ConvLayer {
            out_ch,
            in_ch,
            kernel,
            bias,
        });
    }
    let mut norm = None;
    if bytes.len() - r.pos > 4 {
        if r.take(4, "section tag")? != NORM_TAG {
            return Err(Error::format("section tag", "expected \"NORM\" or end of file"));
        }
        let v = r.f32s(6, "NORM")?;
        norm = Some(InputNorm {
            mean: [v[0], v[1], v[2]],
            scale: [v[3], v[4], v[5]],
        });
    }
    let body_end = r.pos;
    let stored = r.u32("crc32")?;
    if r.pos != bytes.len() {
        return Err(Error::format("crc32", "trailing bytes after checksum"));
    }
    let actual = crc32fast::hash(&bytes[..body_end]);
    if stored != actual {
        return Err(Error::format(
            "crc32",
            format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}"),
        ));
    }
    Ok(WeightBundle {
        layers,
        norm,
        provenance: Provenance::File {
            path: path.to_path_buf(),
            checksum: actual,
        },
    })
}

/// Reads an MSRW file and validates every layer shape against `spec`.
pub fn load_weights(path: impl AsRef<Path>, spec: &NetworkSpec) -> Result<WeightBundle> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bundle = decode_weights(&bytes, path)?;
    bundle.check_against(spec)?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_core::RngCore;

    fn rand_tensor(c: usize, h: usize, w: usize, seed: u64) -> FeatureTensor {
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        let data = (0..c * h * w)
            .map(|_| (rng.next_u32() as f64 / u32::MAX as f64 * 2.0 - 1.0) as f32)
            .collect();
        FeatureTensor::new(c, h, w, data).unwrap()
    }

    fn rand_layer(cout: usize, cin: usize, seed: u64) -> ConvLayer {
        let k = rand_tensor(1, 1, cout * cin * 9, seed).data;
        let b = rand_tensor(1, 1, cout, seed + 1).data;
        ConvLayer::new(cout, cin, k, b).unwrap()
    }

    /// Direct six-loop convolution with explicit bounds checks.
    fn conv_oracle(input: &FeatureTensor, layer: &ConvLayer) -> Vec<f64> {
        let (h, w) = (input.height as isize, input.width as isize);
        let mut out = Vec::new();
        for oc in 0..layer.out_ch {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = f64::from(layer.bias[oc]);
                    for ic in 0..layer.in_ch {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (sy, sx) = (y + ky - 1, x + kx - 1);
                                if sy < 0 || sx < 0 || sy >= h || sx >= w {
                                    continue;
                                }
                                let wv = layer.kernel
                                    [((oc * layer.in_ch + ic) * 3 + ky as usize) * 3 + kx as usize];
                                acc += f64::from(wv)
                                    * f64::from(input.at(ic, sy as usize, sx as usize));
                            }
                        }
                    }
                    out.push(acc.max(0.0));
                }
            }
        }
        out
    }

    #[test]
    fn conv_of_zero_is_relu_bias() {
        let input = FeatureTensor::zeros(2, 4, 5);
        let layer = ConvLayer::new(2, 2, vec![0.3; 36], vec![0.5, -0.5]).unwrap();
        let out = conv2d_relu(&input, &layer).unwrap();
        assert!(out.data[..20].iter().all(|&v| v == 0.5));
        assert!(out.data[20..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn delta_kernel_is_identity_on_nonnegative_input() {
        let mut input = rand_tensor(1, 6, 7, 3);
        input.data.iter_mut().for_each(|v| *v = v.abs());
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let out = conv2d_relu(&input, &ConvLayer::new(1, 1, k, vec![0.0]).unwrap()).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv_matches_oracle_small() {
        let input = rand_tensor(2, 5, 5, 10);
        let layer = rand_layer(3, 2, 20);
        let out = conv2d_relu(&input, &layer).unwrap();
        for (a, b) in out.data.iter().zip(conv_oracle(&input, &layer)) {
            assert!((f64::from(*a) - b).abs() < 1e-5);
        }
    }

    #[test]
    fn conv_handles_single_column() {
        let input = rand_tensor(1, 4, 1, 2);
        let layer = rand_layer(2, 1, 3);
        let out = conv2d_relu(&input, &layer).unwrap();
        for (a, b) in out.data.iter().zip(conv_oracle(&input, &layer)) {
            assert!((f64::from(*a) - b).abs() < 1e-5);
        }
    }

    #[test]
    fn conv_channel_mismatch_names_both_counts() {
        let err = conv2d_relu(&FeatureTensor::zeros(4, 3, 3), &rand_layer(2, 3, 1)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('3') && msg.contains('4'), "{msg}");
    }

    #[test]
    fn maxpool_cases() {
        let t = FeatureTensor::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool2(&t).unwrap().data, vec![4.0]);
        let c = FeatureTensor::new(2, 4, 6, vec![0.25; 48]).unwrap();
        let p = maxpool2(&c).unwrap();
        assert_eq!(p.shape(), (2, 2, 3));
        assert!(p.data.iter().all(|&v| v == 0.25));
        assert!(maxpool2(&FeatureTensor::zeros(1, 3, 4)).is_err());
    }

    #[test]
    fn maxpool_matches_oracle() {
        let t = rand_tensor(4, 8, 8, 5);
        let p = maxpool2(&t).unwrap();
        for c in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    let mut m = f32::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            m = m.max(t.at(c, 2 * y + dy, 2 * x + dx));
                        }
                    }
                    assert_eq!(p.at(c, y, x), m);
                }
            }
        }
    }

    #[test]
    fn default_spec_is_valid() {
        let spec = NetworkSpec::default();
        spec.validate().unwrap();
        let pools: Vec<usize> = (1..=6).map(|k| spec.pool_channels(k)).collect();
        assert_eq!(pools, vec![16, 32, 64, 128, 256, 512]);
        assert!(spec.clone().with_input_size(480).validate().is_err());
        let mut bad = spec;
        bad.blocks[5].pop();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn small_input_tap_shapes() {
        let spec = NetworkSpec::default().with_input_size(64);
        let w = init_weights_seeded(&spec, 1);
        let img = ImageBuffer::filled(64, 64, 3, 0.5).unwrap();
        let taps = forward_taps(&img, &spec, &w).unwrap();
        assert_eq!(taps[&4].shape(), (128, 4, 4));
        assert_eq!(taps[&5].shape(), (256, 2, 2));
        assert_eq!(taps[&6].shape(), (512, 1, 1));
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_taps() {
        let spec = NetworkSpec::default().with_input_size(64);
        let w = init_weights_seeded(&spec, 9);
        let img = ImageBuffer::filled(64, 64, 3, 0.0).unwrap();
        let taps = forward_taps(&img, &spec, &w).unwrap();
        assert!(taps.values().all(|t| t.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn forward_rejects_gray_and_wrong_size() {
        let spec = NetworkSpec::default().with_input_size(64);
        let w = init_weights_seeded(&spec, 9);
        let gray = ImageBuffer::filled(64, 64, 1, 0.0).unwrap();
        assert!(matches!(forward_taps(&gray, &spec, &w), Err(Error::Shape(_))));
        let big = ImageBuffer::filled(128, 128, 3, 0.0).unwrap();
        assert!(matches!(forward_taps(&big, &spec, &w), Err(Error::Shape(_))));
        let mut short = w.clone();
        short.layers.pop();
        let img = ImageBuffer::filled(64, 64, 3, 0.0).unwrap();
        assert!(matches!(forward_taps(&img, &spec, &short), Err(Error::Config(_))));
    }

    #[test]
    fn seeded_init_determinism() {
        let spec = NetworkSpec::default();
        assert_eq!(init_weights_seeded(&spec, 42), init_weights_seeded(&spec, 42));
        let a = init_weights_seeded(&spec, 1);
        let b = init_weights_seeded(&spec, 2);
        assert_ne!(a.layers, b.layers);
        assert!(a.layers.iter().all(|l| l.bias.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn seeded_init_variance_is_he() {
        let spec = NetworkSpec::default();
        let w = init_weights_seeded(&spec, 42);
        for layer in &w.layers {
            let n = layer.kernel.len() as f64;
            let mean = layer.kernel.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
            let var = layer
                .kernel
                .iter()
                .map(|&v| (f64::from(v) - mean).powi(2))
                .sum::<f64>()
                / n;
            let want = 2.0 / (layer.in_ch as f64 * 9.0);
            assert!((var / want - 1.0).abs() < 0.2, "layer {}x{}: {var} vs {want}", layer.out_ch, layer.in_ch);
        }
    }

    #[test]
    fn weight_file_round_trip_is_bit_identical() {
        let spec = NetworkSpec::default();
        let mut w = init_weights_seeded(&spec, 5);
        w.norm = Some(InputNorm {
            mean: [0.1, 0.2, 0.3],
            scale: [1.0, 2.0, 0.5],
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.msrw");
        save_weights(&w, &path).unwrap();
        let back = load_weights(&path, &spec).unwrap();
        assert_eq!(back.layers, w.layers);
        assert_eq!(back.norm, w.norm);
        let bytes = std::fs::read(&path).unwrap();
        assert!(matches!(
            back.provenance,
            Provenance::File { checksum, .. } if checksum == crc32fast::hash(&bytes[..bytes.len() - 4])
        ));
    }

    #[test]
    fn truncated_weight_file_is_format_error() {
        let spec = NetworkSpec::default().with_input_size(64);
        let bytes = encode_weights(&init_weights_seeded(&spec, 5));
        for cut in [0, 3, 10, 100, bytes.len() / 2, bytes.len() - 1] {
            let err = decode_weights(&bytes[..cut], Path::new("w")).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "cut {cut}: {err}");
        }
    }

    #[test]
    fn corrupted_weight_file_fails_checksum() {
        let spec = NetworkSpec::default();
        let mut bytes = encode_weights(&init_weights_seeded(&spec, 5));
        bytes[100] ^= 0x40;
        let err = decode_weights(&bytes, Path::new("w")).unwrap_err();
        assert!(matches!(&err, Error::Format { field, .. } if field == "crc32"), "{err}");
        let mut bad_magic = encode_weights(&init_weights_seeded(&spec, 5));
        bad_magic[0] = b'X';
        assert!(matches!(
            decode_weights(&bad_magic, Path::new("w")).unwrap_err(),
            Error::Format { field, .. } if field == "magic"
        ));
    }

    #[test]
    fn layer_shape_mismatch_names_layer() {
        let spec = NetworkSpec::default();
        let mut w = init_weights_seeded(&spec, 5);
        let l = &mut w.layers[2];
        l.out_ch = 99;
        l.kernel = vec![0.0; 99 * l.in_ch * 9];
        l.bias = vec![0.0; 99];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.msrw");
        save_weights(&w, &path).unwrap();
        let err = load_weights(&path, &spec).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("layer 3")), "{err}");
    }
}
