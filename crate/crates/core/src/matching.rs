//! Corner-gated fused distance matrix, one-way ratio matching and the
//! bidirectional intersection.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::features::{cell_center, CornerGate, DescriptorLevel, DescriptorPyramid};

/// Per-level weights of the fused distance `w1 d1 + w2 d2 + w3 d3`.
///
/// The defaults 2, sqrt(2), 1 equal `sqrt(512 / dim)` for the 128-, 256- and
/// 512-dimensional levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DistanceWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
}

impl Default for DistanceWeights {
    fn default() -> Self {
        Self {
            w1: 2.0,
            w2: std::f64::consts::SQRT_2,
            w3: 1.0,
        }
    }
}

impl DistanceWeights {
    #[inline]
    pub fn fuse(&self, d1: f64, d2: f64, d3: f64) -> f64 {
        self.w1 * d1 + self.w2 * d2 + self.w3 * d3
    }
}

/// Row-major `rows x cols` matrix of fused distances; pairs where either cell
/// is gated out hold `+inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedDistanceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub row_gate: Vec<bool>,
    pub col_gate: Vec<bool>,
    /// Grid width of both frames, for cell-center lookup.
    pub grid_w: usize,
}

impl FusedDistanceMatrix {
    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> FusedDistanceMatrix {
        let mut values = vec![0.0; self.values.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                values[c * self.rows + r] = self.values[r * self.cols + c];
            }
        }
        FusedDistanceMatrix {
            rows: self.cols,
            cols: self.rows,
            values,
            row_gate: self.col_gate.clone(),
            col_gate: self.row_gate.clone(),
            grid_w: self.grid_w,
        }
    }
}

/// Euclidean distance accumulated in f64 in index order.
#[inline]
pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn level_table(a: &DescriptorLevel, b: &DescriptorLevel) -> Vec<f64> {
    let mut out = vec![0.0; a.rows() * b.rows()];
    out.par_chunks_mut(b.rows()).enumerate().for_each(|(i, row)| {
        for (j, v) in row.iter_mut().enumerate() {
            *v = euclidean(a.row(i), b.row(j));
        }
    });
    out
}

/// Fused distance between every gated F1 cell of `px` and every gated F1 cell
/// of `py`. F2 and F3 distances are taken between the parent cells.
pub fn fused_distance(
    px: &DescriptorPyramid,
    py: &DescriptorPyramid,
    gx: &CornerGate,
    gy: &CornerGate,
    w: &DistanceWeights,
) -> Result<FusedDistanceMatrix> {
    let shape = |p: &DescriptorPyramid| {
        (
            p.f1.grid_w,
            p.f1.grid_h,
            p.f1.dim,
            p.f2.dim,
            p.f3.dim,
        )
    };
    if shape(px) != shape(py) {
        return Err(Error::Shape(format!(
            "pyramids differ: {:?} vs {:?}",
            shape(px),
            shape(py)
        )));
    }
    let (rows, cols) = (px.cells(), py.cells());
    if gx.mask.len() != rows || gy.mask.len() != cols {
        return Err(Error::Shape(format!(
            "gates have {} and {} cells, pyramids {rows} and {cols}",
            gx.mask.len(),
            gy.mask.len()
        )));
    }
    let d2 = level_table(&px.f2, &py.f2);
    let d3 = level_table(&px.f3, &py.f3);
    let (n2, n3) = (py.f2.rows(), py.f3.rows());
    let mut values = vec![f64::INFINITY; rows * cols];
    values
        .par_chunks_mut(cols)
        .enumerate()
        .filter(|(x, _)| gx.mask[*x])
        .for_each(|(x, row)| {
            let (x2, x3) = (px.parent2(x), px.parent3(x));
            let fx = px.f1.row(x);
            for (y, v) in row.iter_mut().enumerate() {
                if !gy.mask[y] {
                    continue;
                }
                let d1 = euclidean(fx, py.f1.row(y));
                *v = w.fuse(d1, d2[x2 * n2 + py.parent2(y)], d3[x3 * n3 + py.parent3(y)]);
            }
        });
    Ok(FusedDistanceMatrix {
        rows,
        cols,
        values,
        row_gate: gx.mask.clone(),
        col_gate: gy.mask.clone(),
        grid_w: px.f1.grid_w,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
    Intersected,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MatchPair {
    pub src: usize,
    pub dst: usize,
    pub distance: f64,
    /// Second-nearest over nearest distance.
    pub theta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchSet {
    /// Sorted by source cell.
    pub pairs: Vec<MatchPair>,
    /// Final threshold: every one-way pair has `theta > theta_cut`.
    pub theta_cut: f64,
    pub direction: Direction,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// One JSON object per line with grid indices, cell centers in the
    /// respective frames, distance and ratio.
    pub fn to_jsonl(&self, grid_w: usize) -> String {
        let mut out = String::new();
        for p in &self.pairs {
            let (s, d) = (cell_center(p.src, grid_w), cell_center(p.dst, grid_w));
            let rec = serde_json::json!({
                "src": p.src,
                "dst": p.dst,
                "src_xy": [s.x, s.y],
                "dst_xy": [d.x, d.y],
                "distance": p.distance,
                "theta": p.theta,
            });
            out.push_str(&rec.to_string());
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MatchParams {
    pub target_count: usize,
    pub theta_step: f64,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            target_count: 128,
            theta_step: 0.01,
        }
    }
}

/// Lower bound on the nearest distance when forming the ratio.
pub const RATIO_EPS: f64 = 1e-12;

/// Nearest neighbor and ratio for every gated source row with at least two
/// finite distances. Ties in the nearest neighbor go to the smaller index.
fn candidates(dm: &FusedDistanceMatrix) -> Vec<MatchPair> {
    (0..dm.rows)
        .filter_map(|x| {
            let (mut d1, mut d2, mut arg) = (f64::INFINITY, f64::INFINITY, usize::MAX);
            for (y, &d) in dm.row(x).iter().enumerate() {
                if !d.is_finite() {
                    continue;
                }
                if d < d1 {
                    d2 = d1;
                    d1 = d;
                    arg = y;
                } else if d < d2 {
                    d2 = d;
                }
            }
            if !d2.is_finite() {
                return None;
            }
            let theta = if d2 <= d1 { 1.0 } else { d2 / d1.max(RATIO_EPS) };
            Some(MatchPair {
                src: x,
                dst: arg,
                distance: d1,
                theta,
            })
        })
        .collect()
}

/// Ratio-test matching with a descending threshold.
///
/// Starting from the largest ratio, the threshold drops by `theta_step` until
/// at least `target_count` candidates lie strictly above it, or until it
/// reaches 1.0 (ratio 1 carries no information), in which case it is clamped
/// to 1.0. The count is re-evaluated from scratch at each step; the step count
/// is located by bisection, which gives the same result as walking it.
pub fn match_oneway(dm: &FusedDistanceMatrix, params: &MatchParams) -> Result<MatchSet> {
    if !(params.theta_step > 0.0) {
        return Err(Error::Argument(format!(
            "theta step must be positive, got {}",
            params.theta_step
        )));
    }
    let cands = candidates(dm);
    if cands.is_empty() {
        return Err(Error::EmptyMatch(
            "no source cell has two gated-in targets".into(),
        ));
    }
    let mut sorted: Vec<f64> = cands.iter().map(|c| c.theta).collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let theta_max = sorted[0];
    let step = params.theta_step;
    let cut = |k: u64| theta_max - k as f64 * step;
    let above = |c: f64| sorted.partition_point(|&t| t > c);
    let done = |k: u64| {
        let c = cut(k);
        c <= 1.0 || above(c) >= params.target_count
    };
    // Smallest k >= 1 with done(k); done is monotone in k.
    let mut hi: u64 = 1;
    while !done(hi) {
        hi = hi.saturating_mul(2);
    }
    let mut lo: u64 = hi / 2; // !done(lo) unless lo == 0
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if done(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let theta_cut = cut(hi).max(1.0);
    let pairs = cands.into_iter().filter(|c| c.theta > theta_cut).collect();
    Ok(MatchSet {
        pairs,
        theta_cut,
        direction: Direction::Forward,
    })
}

/// Pairs `(x, y)` found matching `x -> y` in `dm_xy` whose reverse `(y, x)` is
/// found in `dm_yx`.
pub fn match_bidirectional(
    dm_xy: &FusedDistanceMatrix,
    dm_yx: &FusedDistanceMatrix,
    params: &MatchParams,
) -> Result<MatchSet> {
    let forward = match_oneway(dm_xy, params)?;
    let backward = match_oneway(dm_yx, params)?;
    Ok(intersect(&forward, &backward))
}

/// Forward pairs whose reversal appears in `backward`.
pub fn intersect(forward: &MatchSet, backward: &MatchSet) -> MatchSet {
    let reverse: HashSet<(usize, usize)> = backward.pairs.iter().map(|p| (p.dst, p.src)).collect();
    MatchSet {
        pairs: forward
            .pairs
            .iter()
            .filter(|p| reverse.contains(&(p.src, p.dst)))
            .copied()
            .collect(),
        theta_cut: forward.theta_cut,
        direction: Direction::Intersected,
    }
}
