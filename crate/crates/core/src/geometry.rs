//! Homography estimation (normalized DLT), RANSAC, point mapping and warping.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgio::ImageBuffer;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Source/destination point correspondence.
pub type Correspondence = (Point2, Point2);

pub type Mat3 = [[f64; 3]; 3];

/// 3x3 projective transform with the inlier bookkeeping of the fit that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Homography {
    /// Normalized so `h[2][2] == 1` whenever it is nonzero.
    pub h: Mat3,
    /// Indices into the correspondences the model was fitted to.
    pub inliers: Vec<usize>,
    pub mean_reproj_error: f64,
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn normalize_scale(mut m: Mat3) -> Mat3 {
    let s = if m[2][2].abs() > 1e-300 {
        m[2][2]
    } else {
        m.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    };
    if s != 0.0 && s.is_finite() {
        m.iter_mut().flatten().for_each(|v| *v /= s);
    }
    m
}

impl Homography {
    pub fn from_matrix(h: Mat3) -> Self {
        Self {
            h: normalize_scale(h),
            inliers: Vec::new(),
            mean_reproj_error: 0.0,
        }
    }

    pub fn identity() -> Self {
        Self::from_matrix([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self::from_matrix([[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]])
    }

    /// `x -> s x + t` per axis.
    pub fn scale_translation(sx: f64, sy: f64, tx: f64, ty: f64) -> Self {
        Self::from_matrix([[sx, 0.0, tx], [0.0, sy, ty], [0.0, 0.0, 1.0]])
    }

    pub fn det(&self) -> f64 {
        det3(&self.h)
    }

    pub fn inverse(&self) -> Result<Homography> {
        let m = &self.h;
        let det = det3(m);
        if det.abs() < 1e-300 || !det.is_finite() {
            return Err(Error::Degenerate("homography is singular".into()));
        }
        let adj = [
            [
                m[1][1] * m[2][2] - m[1][2] * m[2][1],
                m[0][2] * m[2][1] - m[0][1] * m[2][2],
                m[0][1] * m[1][2] - m[0][2] * m[1][1],
            ],
            [
                m[1][2] * m[2][0] - m[1][0] * m[2][2],
                m[0][0] * m[2][2] - m[0][2] * m[2][0],
                m[0][2] * m[1][0] - m[0][0] * m[1][2],
            ],
            [
                m[1][0] * m[2][1] - m[1][1] * m[2][0],
                m[0][1] * m[2][0] - m[0][0] * m[2][1],
                m[0][0] * m[1][1] - m[0][1] * m[1][0],
            ],
        ];
        let inv = adj.map(|row| row.map(|v| v / det));
        Ok(Homography::from_matrix(inv))
    }

    /// `self` applied after `first`.
    pub fn after(&self, first: &Homography) -> Homography {
        Homography::from_matrix(mat_mul(&self.h, &first.h))
    }

    /// Geometric mean of the two linear scale factors, `sqrt(|det A|)` of the
    /// affine part once `h[2][2] = 1`.
    pub fn linear_scale(&self) -> f64 {
        (self.h[0][0] * self.h[1][1] - self.h[0][1] * self.h[1][0])
            .abs()
            .sqrt()
    }

    /// Row-major matrix entries.
    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.h;
        [
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        ]
    }

    /// Frobenius distance between the two scale-normalized matrices.
    pub fn frobenius_distance(&self, other: &Homography) -> f64 {
        self.h
            .iter()
            .flatten()
            .zip(other.h.iter().flatten())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Projective application with division by the homogeneous coordinate.
pub fn map_point(h: &Homography, p: Point2) -> Result<Point2> {
    let m = &h.h;
    let w = m[2][0] * p.x + m[2][1] * p.y + m[2][2];
    let scale = m[2][0].abs() * p.x.abs() + m[2][1].abs() * p.y.abs() + m[2][2].abs();
    if w.abs() <= 1e-12 * scale.max(1e-300) || !w.is_finite() {
        return Err(Error::PointAtInfinity { depth: w });
    }
    Ok(Point2::new(
        (m[0][0] * p.x + m[0][1] * p.y + m[0][2]) / w,
        (m[1][0] * p.x + m[1][1] * p.y + m[1][2]) / w,
    ))
}

/// Forward transfer error `|H src - dst|`, infinite when `src` maps to infinity.
pub fn transfer_error(h: &Homography, c: &Correspondence) -> f64 {
    map_point(h, c.0).map_or(f64::INFINITY, |p| p.dist(c.1))
}

/// Similarity moving the centroid to the origin with RMS radius sqrt(2).
fn hartley_transform(points: impl Iterator<Item = Point2> + Clone) -> Mat3 {
    let n = points.clone().count() as f64;
    let (sx, sy) = points.clone().fold((0.0, 0.0), |(a, b), p| (a + p.x, b + p.y));
    let (cx, cy) = (sx / n, sy / n);
    let ms = points
        .map(|p| (p.x - cx).powi(2) + (p.y - cy).powi(2))
        .sum::<f64>()
        / n;
    let s = if ms > 0.0 { (2.0 / ms).sqrt() } else { 1.0 };
    [[s, 0.0, -s * cx], [0.0, s, -s * cy], [0.0, 0.0, 1.0]]
}

fn apply(t: &Mat3, p: Point2) -> Point2 {
    Point2::new(t[0][0] * p.x + t[0][2], t[1][1] * p.y + t[1][2])
}

/// Eigen-decomposition of a symmetric 9x9 matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and the matching eigenvectors as columns of `v`.
fn jacobi_eigen(mut a: [[f64; 9]; 9]) -> ([f64; 9], [[f64; 9]; 9]) {
    let mut v = [[0.0; 9]; 9];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let norm: f64 = a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..9)
            .flat_map(|i| (0..9).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-18 * norm.max(1e-300) {
            break;
        }
        for p in 0..8 {
            for q in p + 1..9 {
                let apq = a[p][q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..9 {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..9 {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut eig = [0.0; 9];
    for (i, e) in eig.iter_mut().enumerate() {
        *e = a[i][i];
    }
    (eig, v)
}

/// Least-squares homography from at least four correspondences (normalized DLT).
///
/// Both point sets are moved to zero centroid and RMS radius sqrt(2); the
/// solution is the eigenvector of `A^T A` with the smallest eigenvalue, which
/// is the smallest right singular vector of the 2N x 9 design matrix `A`.
pub fn estimate_dlt(pairs: &[Correspondence]) -> Result<Homography> {
    if pairs.len() < 4 {
        return Err(Error::Underdetermined { got: pairs.len() });
    }
    let ts = hartley_transform(pairs.iter().map(|c| c.0));
    let td = hartley_transform(pairs.iter().map(|c| c.1));
    let mut ata = [[0.0f64; 9]; 9];
    for c in pairs {
        let s = apply(&ts, c.0);
        let d = apply(&td, c.1);
        let rows = [
            [-s.x, -s.y, -1.0, 0.0, 0.0, 0.0, d.x * s.x, d.x * s.y, d.x],
            [0.0, 0.0, 0.0, -s.x, -s.y, -1.0, d.y * s.x, d.y * s.y, d.y],
        ];
        for r in &rows {
            for i in 0..9 {
                for j in 0..9 {
                    ata[i][j] += r[i] * r[j];
                }
            }
        }
    }
    let (eig, vecs) = jacobi_eigen(ata);
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&a, &b| eig[a].total_cmp(&eig[b]));
    let largest = eig[order[8]].abs().max(1e-300);
    if eig[order[1]].abs() <= 1e-10 * largest {
        return Err(Error::Degenerate(
            "correspondences do not determine a unique homography (rank < 8)".into(),
        ));
    }
    let col = order[0];
    let hn: Mat3 = [
        [vecs[0][col], vecs[1][col], vecs[2][col]],
        [vecs[3][col], vecs[4][col], vecs[5][col]],
        [vecs[6][col], vecs[7][col], vecs[8][col]],
    ];
    // H = Td^-1 * Hn * Ts
    let mut out = denormalize(&hn, &ts, &td)?;
    out.inliers = (0..pairs.len()).collect();
    out.mean_reproj_error = mean_error(&out, pairs, &out.inliers);
    Ok(out)
}

fn mean_error(h: &Homography, pairs: &[Correspondence], idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    idx.iter().map(|&i| transfer_error(h, &pairs[i])).sum::<f64>() / idx.len() as f64
}

/// Exact homography through four correspondences.
///
/// Solves the normalized 8 x 9 DLT system by Gaussian elimination with full
/// pivoting; the column left without a pivot spans the null space. Rejects
/// samples whose system has rank below 8 (collinear triples, repeats).
pub fn homography_from_four(pairs: &[Correspondence; 4]) -> Result<Homography> {
    let ts = hartley_transform(pairs.iter().map(|c| c.0));
    let td = hartley_transform(pairs.iter().map(|c| c.1));
    let mut a = [[0.0f64; 9]; 8];
    for (i, c) in pairs.iter().enumerate() {
        let s = apply(&ts, c.0);
        let d = apply(&td, c.1);
        a[2 * i] = [-s.x, -s.y, -1.0, 0.0, 0.0, 0.0, d.x * s.x, d.x * s.y, d.x];
        a[2 * i + 1] = [0.0, 0.0, 0.0, -s.x, -s.y, -1.0, d.y * s.x, d.y * s.y, d.y];
    }
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut cols: [usize; 9] = [0, 1, 2, 3, 4, 5, 6, 7, 8];
    for r in 0..8 {
        let (mut pr, mut pc, mut best) = (r, r, 0.0);
        for (i, row) in a.iter().enumerate().skip(r) {
            for (j, v) in row.iter().enumerate().skip(r) {
                if v.abs() > best {
                    (pr, pc, best) = (i, j, v.abs());
                }
            }
        }
        if best <= 1e-10 * scale {
            return Err(Error::Degenerate("sample has rank below 8".into()));
        }
        a.swap(r, pr);
        for row in a.iter_mut() {
            row.swap(r, pc);
        }
        cols.swap(r, pc);
        let pivot = a[r];
        for (i, row) in a.iter_mut().enumerate() {
            if i == r {
                continue;
            }
            let f = row[r] / pivot[r];
            if f != 0.0 {
                for j in r..9 {
                    row[j] -= f * pivot[j];
                }
            }
        }
    }
    // Reduced form: x_r = -a[r][8] / a[r][r] with the free variable set to 1.
    let mut hv = [0.0f64; 9];
    hv[cols[8]] = 1.0;
    for r in 0..8 {
        hv[cols[r]] = -a[r][8] / a[r][r];
    }
    let hn: Mat3 = [
        [hv[0], hv[1], hv[2]],
        [hv[3], hv[4], hv[5]],
        [hv[6], hv[7], hv[8]],
    ];
    denormalize(&hn, &ts, &td)
}

fn denormalize(hn: &Mat3, ts: &Mat3, td: &Mat3) -> Result<Homography> {
    let (sd, tdx, tdy) = (td[0][0], td[0][2], td[1][2]);
    let td_inv = [
        [1.0 / sd, 0.0, -tdx / sd],
        [0.0, 1.0 / sd, -tdy / sd],
        [0.0, 0.0, 1.0],
    ];
    let h = mat_mul(&td_inv, &mat_mul(hn, ts));
    if det3(&h).abs() <= 1e-300 || h.iter().flatten().any(|v| !v.is_finite()) || h[2][2] == 0.0 {
        return Err(Error::Degenerate("estimated homography is singular".into()));
    }
    Ok(Homography::from_matrix(h))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacParams {
    pub iters: usize,
    /// Forward transfer error below which a correspondence counts as inlier.
    pub inlier_px: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            iters: 2000,
            inlier_px: 3.0,
            seed: 0,
        }
    }
}

fn below(rng: &mut Xoshiro256StarStar, n: usize) -> usize {
    // Rejection sampling removes modulo bias.
    let n = n as u64;
    let zone = u64::MAX - (u64::MAX % n);
    loop {
        let v = rng.next_u64();
        if v < zone {
            return (v % n) as usize;
        }
    }
}

fn inliers_of(h: &Homography, pairs: &[Correspondence], px: f64) -> Vec<usize> {
    (0..pairs.len())
        .filter(|&i| transfer_error(h, &pairs[i]) < px)
        .collect()
}

/// Seeded RANSAC over minimal 4-point samples, refitted on the best consensus.
///
/// The best model is the first one (in iteration order) reaching the highest
/// inlier count. Its inliers are refitted with [`estimate_dlt`] and the inlier
/// set recomputed until it stops growing.
pub fn ransac_homography(pairs: &[Correspondence], params: &RansacParams) -> Result<Homography> {
    const MIN_INLIERS: usize = 4;
    if pairs.len() < 4 {
        return Err(Error::Underdetermined { got: pairs.len() });
    }
    let mut rng = Xoshiro256StarStar::seed_from_u64(params.seed);
    let mut best: Option<(Homography, Vec<usize>)> = None;
    let n = pairs.len();
    for _ in 0..params.iters {
        let mut sample = [0usize; 4];
        for i in 0..4 {
            sample[i] = loop {
                let c = below(&mut rng, n);
                if !sample[..i].contains(&c) {
                    break c;
                }
            };
        }
        let Ok(model) = homography_from_four(&sample.map(|i| pairs[i])) else {
            continue;
        };
        let inl = inliers_of(&model, pairs, params.inlier_px);
        if best.as_ref().is_none_or(|(_, b)| inl.len() > b.len()) {
            best = Some((model, inl));
        }
    }
    let (mut model, mut inliers) = match best {
        Some(b) if b.1.len() >= MIN_INLIERS => b,
        _ => return Err(Error::NoConsensus { min: MIN_INLIERS }),
    };
    for _ in 0..10 {
        let subset: Vec<Correspondence> = inliers.iter().map(|&i| pairs[i]).collect();
        let Ok(refit) = estimate_dlt(&subset) else {
            break;
        };
        let refit_inliers = inliers_of(&refit, pairs, params.inlier_px);
        if refit_inliers.len() < inliers.len() {
            break;
        }
        let done = refit_inliers == inliers;
        model = refit;
        inliers = refit_inliers;
        if done {
            break;
        }
    }
    model.mean_reproj_error = mean_error(&model, pairs, &inliers);
    model.inliers = inliers;
    Ok(model)
}

/// Inverse-mapping warp of `img` by `h` (source to output) with bilinear
/// sampling; output pixels whose preimage falls outside the source are 0.
pub fn warp_image(
    img: &ImageBuffer,
    h: &Homography,
    out_w: usize,
    out_h: usize,
) -> Result<ImageBuffer> {
    let inv = h.inverse()?;
    let ch = img.channels();
    let mut data = Vec::with_capacity(out_w * out_h * ch);
    for y in 0..out_h {
        for x in 0..out_w {
            let src = map_point(&inv, Point2::new(x as f64, y as f64)).ok();
            for c in 0..ch {
                let v = src
                    .and_then(|p| img.sample_bilinear(p.x, p.y, c))
                    .unwrap_or(0.0);
                data.push(v);
            }
        }
    }
    ImageBuffer::new(out_w, out_h, ch, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};

    fn rng(seed: u64) -> Xoshiro256StarStar {
        Xoshiro256StarStar::seed_from_u64(seed)
    }

    fn uniform(r: &mut Xoshiro256StarStar, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * ((r.next_u64() >> 11) as f64 / (1u64 << 53) as f64)
    }

    fn random_h(seed: u64) -> Homography {
        let mut r = rng(seed);
        let a = uniform(&mut r, -0.3, 0.3);
        let s = uniform(&mut r, 0.6, 1.5);
        Homography::from_matrix([
            [s * a.cos(), -s * a.sin(), uniform(&mut r, -40.0, 40.0)],
            [s * a.sin(), s * a.cos(), uniform(&mut r, -40.0, 40.0)],
            [uniform(&mut r, -4e-4, 4e-4), uniform(&mut r, -4e-4, 4e-4), 1.0],
        ])
    }

    fn random_points(seed: u64, n: usize) -> Vec<Point2> {
        let mut r = rng(seed);
        (0..n)
            .map(|_| Point2::new(uniform(&mut r, 0.0, 448.0), uniform(&mut r, 0.0, 448.0)))
            .collect()
    }

    /// Plain 3-vector multiply and divide, written out symbolically.
    fn map_oracle(m: &Mat3, p: Point2) -> Point2 {
        let v = [
            m[0][0] * p.x + m[0][1] * p.y + m[0][2],
            m[1][0] * p.x + m[1][1] * p.y + m[1][2],
            m[2][0] * p.x + m[2][1] * p.y + m[2][2],
        ];
        Point2::new(v[0] / v[2], v[1] / v[2])
    }

    #[test]
    fn unit_square_gives_identity() {
        let sq = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)].map(|(x, y)| Point2::new(x, y));
        let pairs: Vec<_> = sq.iter().map(|&p| (p, p)).collect();
        let h = estimate_dlt(&pairs).unwrap();
        assert!(h.frobenius_distance(&Homography::identity()) < 1e-8);
    }

    #[test]
    fn translation_recovered() {
        let pairs: Vec<_> = random_points(1, 6)
            .into_iter()
            .map(|p| (p, Point2::new(p.x + 10.0, p.y - 5.0)))
            .collect();
        let h = estimate_dlt(&pairs).unwrap();
        assert!(h.frobenius_distance(&Homography::translation(10.0, -5.0)) < 1e-6);
        assert_eq!(map_point(&h, Point2::new(0.0, 0.0)).unwrap().dist(Point2::new(10.0, -5.0)) < 1e-6, true);
    }

    #[test]
    fn synthetic_h_recovered() {
        for seed in 0..20 {
            let gt = random_h(seed);
            let pairs: Vec<_> = random_points(seed + 100, 20)
                .into_iter()
                .map(|p| (p, map_oracle(&gt.h, p)))
                .collect();
            let h = estimate_dlt(&pairs).unwrap();
            assert!(h.frobenius_distance(&gt) < 1e-6, "seed {seed}: {:?}", h.h);
        }
    }

    #[test]
    fn too_few_and_collinear_rejected() {
        let p = random_points(3, 3);
        let pairs: Vec<_> = p.iter().map(|&q| (q, q)).collect();
        assert!(matches!(estimate_dlt(&pairs), Err(Error::Underdetermined { got: 3 })));
        let line: Vec<_> = (0..6)
            .map(|i| {
                let q = Point2::new(i as f64 * 10.0, i as f64 * 5.0 + 1.0);
                (q, Point2::new(q.x * 2.0, q.y * 3.0))
            })
            .collect();
        assert!(matches!(estimate_dlt(&line), Err(Error::Degenerate(_))));
    }

    #[test]
    fn dlt_is_scale_covariant() {
        let gt = random_h(7);
        let pts = random_points(8, 12);
        let pairs: Vec<_> = pts.iter().map(|&p| (p, map_oracle(&gt.h, p))).collect();
        let scaled: Vec<_> = pairs
            .iter()
            .map(|(a, b)| (Point2::new(a.x * 10.0, a.y * 10.0), Point2::new(b.x * 10.0, b.y * 10.0)))
            .collect();
        let h = estimate_dlt(&pairs).unwrap();
        let hs = estimate_dlt(&scaled).unwrap();
        let s = Homography::scale_translation(10.0, 10.0, 0.0, 0.0);
        let s_inv = Homography::scale_translation(0.1, 0.1, 0.0, 0.0);
        let conj = s.after(&h.after(&s_inv));
        assert!(hs.frobenius_distance(&conj) < 1e-6);
    }

    #[test]
    fn four_point_solver_agrees_with_dlt() {
        for seed in 0..20 {
            let h = random_h(seed);
            let pts = random_points(seed + 100, 4);
            let pairs: Vec<Correspondence> = pts.iter().map(|&p| (p, map_point(&h, p).unwrap())).collect();
            let fast = homography_from_four(&[pairs[0], pairs[1], pairs[2], pairs[3]]).unwrap();
            let slow = estimate_dlt(&pairs).unwrap();
            assert!(fast.frobenius_distance(&h) < 1e-6, "seed {seed}");
            assert!(fast.frobenius_distance(&slow) < 1e-6, "seed {seed}");
        }
        let line = |t: f64| Point2::new(t, 2.0 * t + 1.0);
        let collinear = [0.0, 1.0, 2.0, 3.0].map(|t| (line(t), line(t)));
        assert!(matches!(homography_from_four(&collinear), Err(Error::Degenerate(_))));
    }

    #[test]
    fn map_point_cases() {
        let p = Point2::new(3.5, -2.0);
        assert_eq!(map_point(&Homography::identity(), p).unwrap(), p);
        let t = Homography::translation(10.0, -5.0);
        assert_eq!(map_point(&t, Point2::new(0.0, 0.0)).unwrap(), Point2::new(10.0, -5.0));
        for seed in 0..10 {
            let h = random_h(seed);
            for q in random_points(seed, 5) {
                let a = map_point(&h, q).unwrap();
                let b = map_oracle(&h.h, q);
                assert!(a.dist(b) < 1e-9);
            }
        }
        let vanishing = Homography::from_matrix([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 1.0]]);
        assert!(matches!(
            map_point(&vanishing, Point2::new(-1.0, 0.0)),
            Err(Error::PointAtInfinity { .. })
        ));
    }

    fn contaminated(seed: u64, inl: usize, out: usize) -> (Homography, Vec<Correspondence>) {
        let gt = random_h(seed);
        let mut r = rng(seed + 1000);
        let mut pairs: Vec<_> = random_points(seed + 1, inl)
            .into_iter()
            .map(|p| (p, map_oracle(&gt.h, p)))
            .collect();
        for _ in 0..out {
            pairs.push((
                Point2::new(uniform(&mut r, 0.0, 448.0), uniform(&mut r, 0.0, 448.0)),
                Point2::new(uniform(&mut r, 0.0, 448.0), uniform(&mut r, 0.0, 448.0)),
            ));
        }
        (gt, pairs)
    }

    #[test]
    fn ransac_outlier_free() {
        let (gt, pairs) = contaminated(5, 50, 0);
        let h = ransac_homography(&pairs, &RansacParams { seed: 1, ..Default::default() }).unwrap();
        assert_eq!(h.inliers.len(), 50);
        assert!(h.frobenius_distance(&gt) < 1e-6);
    }

    #[test]
    fn ransac_half_outliers() {
        let (gt, pairs) = contaminated(6, 50, 50);
        let h = ransac_homography(&pairs, &RansacParams { seed: 3, ..Default::default() }).unwrap();
        let true_inliers = h.inliers.iter().filter(|&&i| i < 50).count();
        assert!(true_inliers >= 48);
        let err: f64 = (0..50).map(|i| transfer_error(&h, &pairs[i])).sum::<f64>() / 50.0;
        assert!(err < 1.0);
        assert!(h.frobenius_distance(&gt) < 1e-3);
    }

    #[test]
    fn ransac_is_deterministic_and_checks_size() {
        let (_, pairs) = contaminated(9, 30, 30);
        let p = RansacParams { seed: 11, iters: 300, ..Default::default() };
        assert_eq!(ransac_homography(&pairs, &p).unwrap(), ransac_homography(&pairs, &p).unwrap());
        assert!(matches!(
            ransac_homography(&pairs[..3], &p),
            Err(Error::Underdetermined { got: 3 })
        ));
    }

    fn smooth_image(seed: u64) -> ImageBuffer {
        let mut r = rng(seed);
        let f: Vec<(f64, f64, f64)> = (0..6)
            .map(|_| (uniform(&mut r, 0.02, 0.12), uniform(&mut r, 0.02, 0.12), uniform(&mut r, 0.0, 6.0)))
            .collect();
        ImageBuffer::from_fn(64, 48, 1, |x, y, _| {
            let v: f64 = f.iter().map(|(a, b, c)| (a * x as f64 + b * y as f64 + c).sin()).sum();
            (0.5 + v / 12.0) as f32
        })
        .unwrap()
    }

    #[test]
    fn identity_and_translation_warps() {
        let img = smooth_image(1);
        assert_eq!(warp_image(&img, &Homography::identity(), 64, 48).unwrap(), img);
        let shifted = warp_image(&img, &Homography::translation(3.0, -2.0), 64, 48).unwrap();
        for y in 0..48 {
            for x in 0..64 {
                let (sx, sy) = (x as isize - 3, y as isize + 2);
                let want = if sx >= 0 && sy < 48 { img.get(sx as usize, sy as usize, 0) } else { 0.0 };
                assert_eq!(shifted.get(x, y, 0), want);
            }
        }
    }

    #[test]
    fn warp_round_trip_interior() {
        let img = smooth_image(2);
        let h = Homography::from_matrix([[1.05, 0.03, 1.5], [-0.02, 0.97, -0.7], [1e-4, -5e-5, 1.0]]);
        let there = warp_image(&img, &h, 64, 48).unwrap();
        let back = warp_image(&there, &h.inverse().unwrap(), 64, 48).unwrap();
        let mut sum = 0.0;
        let mut n = 0;
        for y in 4..44 {
            for x in 4..60 {
                sum += f64::from((back.get(x, y, 0) - img.get(x, y, 0)).abs());
                n += 1;
            }
        }
        assert!(sum / (n as f64) < 0.02);
    }

    #[test]
    fn warp_preserves_constant_inside() {
        let img = ImageBuffer::filled(40, 40, 3, 0.3).unwrap();
        let h = Homography::from_matrix([[0.9, 0.1, 2.0], [-0.1, 0.9, 3.0], [0.0, 0.0, 1.0]]);
        let out = warp_image(&img, &h, 40, 40).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0 || v == 0.3));
    }

    proptest! {
        #[test]
        fn inverse_round_trip(seed in 0u64..10_000, x in 0.0f64..1.0, y in 0.0f64..1.0) {
            let h = random_h(seed);
            let inv = h.inverse().unwrap();
            let p = Point2::new(x, y);
            let q = map_point(&inv, map_point(&h, p).unwrap()).unwrap();
            prop_assert!(q.dist(p) < 1e-6);
        }
    }
}
