//! Descriptor pyramid from network taps, and the Harris corner gate.

use std::collections::BTreeMap;

use base64::Engine;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::imgio::{to_grayscale, ImageBuffer};
use crate::nnet::FeatureTensor;

/// Input pixels covered by one finest-level descriptor cell.
pub const CELL: usize = 16;

/// One descriptor matrix: `rows` descriptors of length `dim`, row `i * grid_w + j`
/// for grid cell `(i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorLevel {
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl DescriptorLevel {
    fn from_tap(t: &FeatureTensor) -> Self {
        let (c, h, w) = t.shape();
        let mut data = vec![0.0; c * h * w];
        for ch in 0..c {
            for cell in 0..h * w {
                data[cell * c + ch] = t.data[ch * h * w + cell];
            }
        }
        Self {
            grid_h: h,
            grid_w: w,
            dim: c,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.grid_h * self.grid_w
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// F1/F2/F3 descriptors of one image plus the frame geometry they live in.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorPyramid {
    pub f1: DescriptorLevel,
    pub f2: DescriptorLevel,
    pub f3: DescriptorLevel,
    /// Side of the square network input frame, in pixels.
    pub frame_size: usize,
    /// `(width, height)` of the image before it was resized into the frame.
    pub source_size: (usize, usize),
}

impl DescriptorPyramid {
    pub fn cells(&self) -> usize {
        self.f1.rows()
    }

    /// F2 row covering F1 cell `k`.
    #[inline]
    pub fn parent2(&self, k: usize) -> usize {
        let (i, j) = (k / self.f1.grid_w, k % self.f1.grid_w);
        (i / 2) * self.f2.grid_w + j / 2
    }

    /// F3 row covering F1 cell `k`.
    #[inline]
    pub fn parent3(&self, k: usize) -> usize {
        let (i, j) = (k / self.f1.grid_w, k % self.f1.grid_w);
        (i / 4) * self.f3.grid_w + j / 4
    }

    /// Center of F1 cell `k` in frame pixel coordinates (pixel centers at integers).
    pub fn cell_center(&self, k: usize) -> Point2 {
        cell_center(k, self.f1.grid_w)
    }
}

pub fn cell_center(k: usize, grid_w: usize) -> Point2 {
    let (i, j) = (k / grid_w, k % grid_w);
    let half = (CELL as f64 - 1.0) / 2.0;
    Point2::new((j * CELL) as f64 + half, (i * CELL) as f64 + half)
}

/// Reindexes the pool 4/5/6 activations into descriptor matrices. No
/// normalization is applied.
pub fn build_pyramid(taps: &BTreeMap<usize, FeatureTensor>) -> Result<DescriptorPyramid> {
    let get = |k: usize| {
        taps.get(&k)
            .ok_or_else(|| Error::Shape(format!("missing tap for pool {k}")))
    };
    let (t4, t5, t6) = (get(4)?, get(5)?, get(6)?);
    let (c4, h4, w4) = t4.shape();
    let consistent = t5.shape() == (2 * c4, h4 / 2, w4 / 2)
        && t6.shape() == (4 * c4, h4 / 4, w4 / 4)
        && h4 % 4 == 0
        && w4 % 4 == 0
        && h4 == w4;
    if !consistent {
        return Err(Error::Shape(format!(
            "tap shapes {:?}, {:?}, {:?} are not one forward pass of a square input",
            t4.shape(),
            t5.shape(),
            t6.shape()
        )));
    }
    let frame_size = w4 * CELL;
    Ok(DescriptorPyramid {
        f1: DescriptorLevel::from_tap(t4),
        f2: DescriptorLevel::from_tap(t5),
        f3: DescriptorLevel::from_tap(t6),
        frame_size,
        source_size: (frame_size, frame_size),
    })
}

/// Harris detector settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HarrisParams {
    pub k: f64,
    /// Keep maxima with `R >= threshold_rel * max(R)`.
    pub threshold_rel: f64,
    pub nms_radius: usize,
    /// Required square input size.
    pub frame_size: usize,
}

impl Default for HarrisParams {
    fn default() -> Self {
        Self {
            k: 0.04,
            threshold_rel: 0.01,
            nms_radius: 4,
            frame_size: 448,
        }
    }
}

impl HarrisParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.02..=0.1).contains(&self.k) {
            return Err(Error::Argument(format!(
                "harris k must lie in [0.02, 0.1], got {}",
                self.k
            )));
        }
        if !(self.threshold_rel > 0.0 && self.threshold_rel < 1.0) {
            return Err(Error::Argument(format!(
                "harris threshold must lie in (0, 1), got {}",
                self.threshold_rel
            )));
        }
        if self.frame_size == 0 || self.frame_size % CELL != 0 {
            return Err(Error::Argument(format!(
                "harris frame size {} must be a positive multiple of {CELL}",
                self.frame_size
            )));
        }
        Ok(())
    }
}

/// Which descriptor cells contain at least one Harris corner.
#[derive(Debug, Clone, PartialEq)]
pub struct CornerGate {
    pub grid_w: usize,
    pub grid_h: usize,
    pub mask: Vec<bool>,
    /// Corner pixel coordinates `(x, y)` in the frame.
    pub corners: Vec<(usize, usize)>,
}

impl CornerGate {
    pub fn from_corners(grid_w: usize, grid_h: usize, corners: Vec<(usize, usize)>) -> Self {
        let mut mask = vec![false; grid_w * grid_h];
        for &(x, y) in &corners {
            mask[(y / CELL) * grid_w + x / CELL] = true;
        }
        Self {
            grid_w,
            grid_h,
            mask,
            corners,
        }
    }

    /// Gate with every cell enabled.
    pub fn all(grid_w: usize, grid_h: usize) -> Self {
        Self {
            grid_w,
            grid_h,
            mask: vec![true; grid_w * grid_h],
            corners: Vec::new(),
        }
    }

    pub fn active_cells(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

const SOBEL_SMOOTH: [f64; 3] = [1.0, 2.0, 1.0];

/// 5-tap Gaussian, sigma 1, normalized.
fn gaussian5() -> [f64; 5] {
    let raw: Vec<f64> = (-2i32..=2).map(|d| (-(d * d) as f64 / 2.0).exp()).collect();
    let s: f64 = raw.iter().sum();
    [raw[0] / s, raw[1] / s, raw[2] / s, raw[3] / s, raw[4] / s]
}

struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Plane {
    #[inline]
    fn at_clamped(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.w as isize - 1) as usize;
        let y = y.clamp(0, self.h as isize - 1) as usize;
        self.v[y * self.w + x]
    }
}

/// 5x5 Gaussian smoothing with replicated borders. Each mirrored pair of taps
/// `(dy, dx)` / `(dx, dy)` is summed before weighting so the result commutes
/// exactly with transposing the plane.
fn smooth5(p: &Plane, g: &[f64; 5]) -> Plane {
    let mut out = vec![0.0; p.w * p.h];
    for y in 0..p.h {
        for x in 0..p.w {
            let (xi, yi) = (x as isize, y as isize);
            let mut acc = 0.0;
            for a in 0..5usize {
                for b in a..5usize {
                    let (da, db) = (a as isize - 2, b as isize - 2);
                    let wgt = g[a] * g[b];
                    let pair = if a == b {
                        p.at_clamped(xi + da, yi + da)
                    } else {
                        p.at_clamped(xi + db, yi + da) + p.at_clamped(xi + da, yi + db)
                    };
                    acc += wgt * pair;
                }
            }
            out[y * p.w + x] = acc;
        }
    }
    Plane {
        w: p.w,
        h: p.h,
        v: out,
    }
}

/// Harris response `det(M) - k trace(M)^2` of the Gaussian-smoothed structure
/// tensor built from 3x3 Sobel gradients.
pub fn harris_response(img: &ImageBuffer, k: f64) -> Vec<f64> {
    let gray = to_grayscale(img);
    let (w, h) = (gray.width(), gray.height());
    let src = Plane {
        w,
        h,
        v: gray.data().iter().map(|&v| f64::from(v)).collect(),
    };
    let n = w * h;
    let (mut ixx, mut iyy, mut ixy) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for y in 0..h {
        for x in 0..w {
            let (xi, yi) = (x as isize, y as isize);
            let mut gx = 0.0;
            let mut gy = 0.0;
            for (d, s) in (-1isize..=1).zip(SOBEL_SMOOTH) {
                gx += s * (src.at_clamped(xi + 1, yi + d) - src.at_clamped(xi - 1, yi + d));
                gy += s * (src.at_clamped(xi + d, yi + 1) - src.at_clamped(xi + d, yi - 1));
            }
            let i = y * w + x;
            ixx[i] = gx * gx;
            iyy[i] = gy * gy;
            ixy[i] = gx * gy;
        }
    }
    let g = gaussian5();
    let sxx = smooth5(&Plane { w, h, v: ixx }, &g);
    let syy = smooth5(&Plane { w, h, v: iyy }, &g);
    let sxy = smooth5(&Plane { w, h, v: ixy }, &g);
    (0..n)
        .map(|i| {
            let (a, b, c) = (sxx.v[i], syy.v[i], sxy.v[i]);
            let tr = a + b;
            a * b - c * c - k * tr * tr
        })
        .collect()
}

/// Detects Harris corners on the resized frame and marks the descriptor cells
/// that contain them.
///
/// A pixel survives non-maximum suppression when no other pixel within
/// Chebyshev distance `nms_radius` has a larger response; exact ties go to the
/// pixel with the smaller `(x + y, |x - y|)`, which keeps detection symmetric
/// under transposition.
pub fn harris_corners(img: &ImageBuffer, params: &HarrisParams) -> Result<CornerGate> {
    params.validate()?;
    let size = params.frame_size;
    if img.width() != size || img.height() != size {
        return Err(Error::Shape(format!(
            "harris input must be the {size}x{size} frame, got {}x{}",
            img.width(),
            img.height()
        )));
    }
    let grid = size / CELL;
    let response = harris_response(img, params.k);
    let max = response.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Ok(CornerGate::from_corners(grid, grid, Vec::new()));
    }
    let threshold = params.threshold_rel * max;
    let r = params.nms_radius as isize;
    let key = |x: usize, y: usize| (x + y, x.abs_diff(y));
    let mut corners = Vec::new();
    for y in 0..size {
        for x in 0..size {
            let v = response[y * size + x];
            if v < threshold {
                continue;
            }
            let mut is_max = true;
            'window: for qy in (y as isize - r).max(0)..=(y as isize + r).min(size as isize - 1) {
                for qx in (x as isize - r).max(0)..=(x as isize + r).min(size as isize - 1) {
                    let (qx, qy) = (qx as usize, qy as usize);
                    if (qx, qy) == (x, y) {
                        continue;
                    }
                    let q = response[qy * size + qx];
                    if q > v || (q == v && key(qx, qy) < key(x, y)) {
                        is_max = false;
                        break 'window;
                    }
                }
            }
            if is_max {
                corners.push((x, y));
            }
        }
    }
    Ok(CornerGate::from_corners(grid, grid, corners))
}

#[derive(Serialize)]
struct LevelDump {
    grid_h: usize,
    grid_w: usize,
    dim: usize,
    /// Little-endian f32, row-major `(cell, channel)`, base64.
    data: String,
}

#[derive(Serialize)]
struct DebugDump {
    frame_size: usize,
    source_size: (usize, usize),
    f1: LevelDump,
    f2: LevelDump,
    f3: LevelDump,
    gate_mask: Vec<u8>,
    corners: Vec<(usize, usize)>,
}

fn dump_level(l: &DescriptorLevel) -> LevelDump {
    let bytes: Vec<u8> = l.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    LevelDump {
        grid_h: l.grid_h,
        grid_w: l.grid_w,
        dim: l.dim,
        data: base64::engine::general_purpose::STANDARD.encode(bytes),
    }
}

/// JSON dump of a pyramid and its gate for cross-implementation comparison.
pub fn debug_json(pyramid: &DescriptorPyramid, gate: &CornerGate) -> serde_json::Value {
    let dump = DebugDump {
        frame_size: pyramid.frame_size,
        source_size: pyramid.source_size,
        f1: dump_level(&pyramid.f1),
        f2: dump_level(&pyramid.f2),
        f3: dump_level(&pyramid.f3),
        gate_mask: gate.mask.iter().map(|&m| u8::from(m)).collect(),
        corners: gate.corners.clone(),
    };
    serde_json::to_value(dump).expect("dump is plain data")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_core::{RngCore, SeedableRng};
    use rand_xoshiro::Xoshiro256StarStar;

    fn seeded_taps(grid: usize, seed: u64) -> BTreeMap<usize, FeatureTensor> {
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        let mut tensor = |c: usize, s: usize| {
            let data = (0..c * s * s).map(|_| (rng.next_u32() % 1000) as f32 / 100.0).collect();
            FeatureTensor::new(c, s, s, data).unwrap()
        };
        let mut taps = BTreeMap::new();
        taps.insert(4, tensor(128, grid));
        taps.insert(5, tensor(256, grid / 2));
        taps.insert(6, tensor(512, grid / 4));
        taps
    }

    #[test]
    fn pyramid_shapes_for_448_frame() {
        let p = build_pyramid(&seeded_taps(28, 1)).unwrap();
        assert_eq!((p.f1.rows(), p.f1.dim), (784, 128));
        assert_eq!((p.f2.rows(), p.f2.dim), (196, 256));
        assert_eq!((p.f3.rows(), p.f3.dim), (49, 512));
        assert_eq!(p.frame_size, 448);
    }

    #[test]
    fn pyramid_index_mapping() {
        let taps = seeded_taps(28, 2);
        let p = build_pyramid(&taps).unwrap();
        assert_eq!(p.f1.row(3 * 28 + 5)[7], taps[&4].at(7, 3, 5));
        for k in 0..784 {
            let (i, j) = (k / 28, k % 28);
            assert_eq!(p.parent2(k), (i / 2) * 14 + j / 2);
            assert_eq!(p.parent3(k), (i / 4) * 7 + j / 4);
        }
        let tap_sum: f64 = taps[&4].data.iter().map(|&v| f64::from(v)).sum();
        let f1_sum: f64 = p.f1.data.iter().map(|&v| f64::from(v)).sum();
        assert!((tap_sum - f1_sum).abs() < 1e-4);
    }

    #[test]
    fn zero_taps_give_zero_descriptors() {
        let mut taps = BTreeMap::new();
        taps.insert(4, FeatureTensor::zeros(128, 4, 4));
        taps.insert(5, FeatureTensor::zeros(256, 2, 2));
        taps.insert(6, FeatureTensor::zeros(512, 1, 1));
        let p = build_pyramid(&taps).unwrap();
        assert!(p.f1.data.iter().chain(&p.f2.data).chain(&p.f3.data).all(|&v| v == 0.0));
    }

    #[test]
    fn inconsistent_taps_rejected() {
        let mut taps = seeded_taps(28, 3);
        taps.insert(5, FeatureTensor::zeros(256, 13, 13));
        assert!(matches!(build_pyramid(&taps), Err(Error::Shape(_))));
        taps.remove(&5);
        assert!(build_pyramid(&taps).is_err());
    }

    #[test]
    fn constant_image_has_no_corners() {
        let img = ImageBuffer::filled(448, 448, 3, 0.4).unwrap();
        let gate = harris_corners(&img, &HarrisParams::default()).unwrap();
        assert!(gate.corners.is_empty());
        assert_eq!(gate.active_cells(), 0);
    }

    #[test]
    fn wrong_frame_size_rejected() {
        let img = ImageBuffer::filled(100, 448, 1, 0.4).unwrap();
        assert!(matches!(
            harris_corners(&img, &HarrisParams::default()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn checkerboard_corners_at_junctions() {
        // 8x8 squares of 56 px: interior junctions between pixels 56k-1 and 56k.
        let img = ImageBuffer::from_fn(448, 448, 1, |x, y, _| ((x / 56 + y / 56) % 2) as f32).unwrap();
        let gate = harris_corners(&img, &HarrisParams::default()).unwrap();
        let junctions: Vec<(f64, f64)> = (1..8)
            .flat_map(|a| (1..8).map(move |b| (56.0 * a as f64 - 0.5, 56.0 * b as f64 - 0.5)))
            .collect();
        assert_eq!(gate.corners.len(), junctions.len(), "{:?}", gate.corners);
        for &(x, y) in &gate.corners {
            let near = junctions
                .iter()
                .any(|&(jx, jy)| (x as f64 - jx).abs() <= 1.0 && (y as f64 - jy).abs() <= 1.0);
            assert!(near, "corner {x},{y} not at a junction");
        }
        let mut expected = vec![false; 784];
        for &(jx, jy) in &junctions {
            for &(x, y) in &gate.corners {
                if (x as f64 - jx).abs() <= 1.0 && (y as f64 - jy).abs() <= 1.0 {
                    expected[(y / 16) * 28 + x / 16] = true;
                }
            }
        }
        assert_eq!(gate.mask, expected);
    }

    #[test]
    fn centered_square_has_four_corners() {
        let img = ImageBuffer::from_fn(448, 448, 1, |x, y, _| {
            f32::from(u8::from((216..232).contains(&x) && (216..232).contains(&y)))
        })
        .unwrap();
        let gate = harris_corners(&img, &HarrisParams::default()).unwrap();
        assert_eq!(gate.corners.len(), 4, "{:?}", gate.corners);
        let square = [(215.5, 215.5), (231.5, 215.5), (215.5, 231.5), (231.5, 231.5)];
        for &(x, y) in &gate.corners {
            assert!(square
                .iter()
                .any(|&(sx, sy)| (x as f64 - sx).abs() <= 1.5 && (y as f64 - sy).abs() <= 1.5));
        }
        assert!(gate.active_cells() <= 4);
    }

    fn dyadic_image(seed: u64, blocks: usize) -> Vec<f32> {
        // Blocky content in multiples of 1/256 within [0, 0.5] so that
        // adding a dyadic constant is exact.
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        let vals: Vec<f32> = (0..blocks * blocks).map(|_| (rng.next_u32() % 128) as f32 / 256.0).collect();
        let bs = 448 / blocks;
        (0..448 * 448)
            .map(|i| vals[((i / 448) / bs).min(blocks - 1) * blocks + ((i % 448) / bs).min(blocks - 1)])
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(4))]

        #[test]
        fn corner_count_invariant_to_brightness_offset(seed in 0u64..1000, shift in 1u32..128) {
            let base = dyadic_image(seed, 14);
            let a = ImageBuffer::new(448, 448, 1, base.clone()).unwrap();
            let b = ImageBuffer::new(448, 448, 1, base.iter().map(|v| v + shift as f32 / 256.0).collect()).unwrap();
            let p = HarrisParams::default();
            prop_assert_eq!(harris_corners(&a, &p).unwrap().corners.len(), harris_corners(&b, &p).unwrap().corners.len());
        }

        #[test]
        fn corners_transpose_with_image(seed in 0u64..1000) {
            let base = dyadic_image(seed, 11);
            let img = ImageBuffer::new(448, 448, 1, base.clone()).unwrap();
            let t: Vec<f32> = (0..448 * 448).map(|i| base[(i % 448) * 448 + i / 448]).collect();
            let timg = ImageBuffer::new(448, 448, 1, t).unwrap();
            let p = HarrisParams::default();
            let mut a: Vec<(usize, usize)> = harris_corners(&img, &p).unwrap().corners.into_iter().map(|(x, y)| (y, x)).collect();
            let mut b = harris_corners(&timg, &p).unwrap().corners;
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
        }
    }
}
