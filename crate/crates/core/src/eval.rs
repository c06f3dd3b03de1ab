//! Synthetic multiscale and white-balance pairs with analytic ground truth,
//! match scoring and benchmark reports.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{map_point, Correspondence, Homography};
use crate::imgio::{apply_channel_transform, crop, load_image, resize_area, ChannelMode, ImageBuffer};
use crate::pipeline::{frame_to_original, Pipeline};

/// Smallest side of either synthesized image.
pub const MIN_PAIR_SIDE: usize = 64;

/// Color transform applied to the high-resolution image of a pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WbMode {
    None,
    Gain([f32; 3]),
    /// Per-channel gains drawn uniformly from `[0.5, 1.5)` with the pair seed.
    Random,
    /// Copy channel `k` into all three channels.
    Separate(usize),
}

impl FromStr for WbMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Argument(format!("unknown white-balance mode {s:?}"));
        match s {
            "none" => return Ok(WbMode::None),
            "random" => return Ok(WbMode::Random),
            _ => {}
        }
        let (kind, arg) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "gain" => {
                let parts: Vec<f32> = arg
                    .split(',')
                    .map(|p| p.trim().parse::<f32>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad())?;
                let g: [f32; 3] = parts.try_into().map_err(|_| bad())?;
                if g.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                    return Err(bad());
                }
                Ok(WbMode::Gain(g))
            }
            "separate" => {
                let k = match arg {
                    "r" | "0" => 0,
                    "g" | "1" => 1,
                    "b" | "2" => 2,
                    _ => return Err(bad()),
                };
                Ok(WbMode::Separate(k))
            }
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for WbMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WbMode::None => f.write_str("none"),
            WbMode::Random => f.write_str("random"),
            WbMode::Gain(g) => write!(f, "gain:{},{},{}", g[0], g[1], g[2]),
            WbMode::Separate(k) => write!(f, "separate:{k}"),
        }
    }
}

/// Gains used for `mode` under `seed`.
pub fn wb_gains(mode: WbMode, seed: u64) -> [f32; 3] {
    match mode {
        WbMode::Gain(g) => g,
        WbMode::Random => {
            let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
            [0; 3].map(|_| {
                let u = (rng.next_u64() >> 40) as f32 / (1u64 << 24) as f32;
                0.5 + u
            })
        }
        WbMode::None | WbMode::Separate(_) => [1.0; 3],
    }
}

pub fn apply_wb(img: &ImageBuffer, mode: WbMode, seed: u64) -> Result<ImageBuffer> {
    match mode {
        WbMode::None => Ok(img.clone()),
        WbMode::Separate(k) => apply_channel_transform(img, [1.0; 3], ChannelMode::Separate(k)),
        WbMode::Gain(_) | WbMode::Random => {
            apply_channel_transform(img, wb_gains(mode, seed), ChannelMode::Gain)
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticPair {
    /// Wide-field view: the whole (trimmed) source downscaled by the linear factor.
    pub ix: ImageBuffer,
    /// High-resolution view: central crop of the source at full resolution.
    pub iy: ImageBuffer,
    /// Maps `iy` pixels to `ix` pixels.
    pub gt: Homography,
    pub linear_factor: usize,
}

/// Linear factor for an area ratio; the ratio must be a perfect square above 1.
pub fn linear_factor(scale_ratio: u32) -> Result<usize> {
    let f = (f64::from(scale_ratio)).sqrt().round() as usize;
    if f < 2 || f * f != scale_ratio as usize {
        return Err(Error::Argument(format!(
            "scale ratio must be a perfect square above 1, got {scale_ratio}"
        )));
    }
    Ok(f)
}

/// Builds a pair whose pixel-count ratio over the shared region is
/// `scale_ratio`.
///
/// The source is trimmed at the right and bottom to a multiple of the linear
/// factor `f`. `ix` is the trimmed source box-averaged by `f`; `iy` is the
/// central `1/f` crop at full resolution with the white-balance mode applied.
pub fn synthesize_pair(
    source: &ImageBuffer,
    scale_ratio: u32,
    wb: WbMode,
    seed: u64,
) -> Result<SyntheticPair> {
    let f = linear_factor(scale_ratio)?;
    let (w, h) = (source.width() / f * f, source.height() / f * f);
    let (cw, ch) = (w / f, h / f);
    if cw < MIN_PAIR_SIDE || ch < MIN_PAIR_SIDE {
        return Err(Error::Argument(format!(
            "source {}x{} too small for scale ratio {scale_ratio}: need at least {2}x{2}",
            source.width(),
            source.height(),
            MIN_PAIR_SIDE * f
        )));
    }
    let trimmed = crop(source, 0, 0, w, h)?;
    let ix = resize_area(&trimmed, cw, ch)?;
    let (ox, oy) = ((w - cw) / 2, (h - ch) / 2);
    let iy = apply_wb(&crop(source, ox, oy, cw, ch)?, wb, seed)?;
    // Source pixel s lands at (s + 0.5) / f - 0.5 in ix.
    let s = 1.0 / f as f64;
    let gt = Homography::scale_translation(s, s, (ox as f64 + 0.5) * s - 0.5, (oy as f64 + 0.5) * s - 0.5);
    Ok(SyntheticPair {
        ix,
        iy,
        gt,
        linear_factor: f,
    })
}

/// Counts pairs `(src, dst)` whose `dst` lies within `tol_px` of `gt(src)`.
pub fn score_matches(pairs: &[Correspondence], gt: &Homography, tol_px: f64) -> (usize, usize) {
    let tp = pairs
        .iter()
        .filter(|(s, d)| map_point(gt, *s).is_ok_and(|m| m.dist(*d) <= tol_px))
        .count();
    (tp, pairs.len() - tp)
}

pub fn tpr(tp: usize, fp: usize) -> f64 {
    if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    }
}

fn default_tol() -> f64 {
    3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub images: Vec<PathBuf>,
    pub scales: Vec<u32>,
    #[serde(default = "default_wb_modes")]
    pub wb_modes: Vec<String>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_tol")]
    pub tol_px: f64,
}

fn default_wb_modes() -> Vec<String> {
    vec!["none".into()]
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl Manifest {
    /// Reads a manifest; relative image paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for img in &mut m.images {
            if img.is_relative() {
                *img = base.join(&*img);
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.is_empty() {
            return Err(Error::Config("empty manifest".into()));
        }
        if self.scales.is_empty() || self.wb_modes.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("manifest needs at least one scale, wb mode and seed".into()));
        }
        for &s in &self.scales {
            linear_factor(s)?;
        }
        for m in &self.wb_modes {
            m.parse::<WbMode>()?;
        }
        if !(self.tol_px > 0.0) {
            return Err(Error::Config(format!("tol_px must be positive, got {}", self.tol_px)));
        }
        Ok(())
    }
}

/// One evaluated pair. Matches are scored in `ix` original pixels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub pair: String,
    pub image: String,
    pub seed: u64,
    pub scale: u32,
    pub wb: String,
    pub tp: usize,
    pub fp: usize,
    pub tpr: f64,
    /// Bidirectional matches kept by RANSAC, scored the same way.
    pub inlier_tp: usize,
    pub inlier_fp: usize,
    pub time_ms: f64,
    /// `None` for a completed registration, else the failure message.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionSummary {
    pub scale: u32,
    pub wb: String,
    pub pairs: usize,
    pub failed: usize,
    pub mean_tpr: f64,
    /// Total TP over total TP + FP.
    pub pooled_tpr: f64,
    pub mean_time_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub tol_px: f64,
    pub rows: Vec<EvalRow>,
    pub conditions: Vec<ConditionSummary>,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>, tol_px: f64) -> Self {
        let mut keys: Vec<(u32, String)> = Vec::new();
        for r in &rows {
            let k = (r.scale, r.wb.clone());
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        let conditions = keys
            .into_iter()
            .map(|(scale, wb)| {
                let sel: Vec<&EvalRow> = rows.iter().filter(|r| r.scale == scale && r.wb == wb).collect();
                let n = sel.len() as f64;
                let (tp, fp) = sel.iter().fold((0, 0), |(a, b), r| (a + r.tp, b + r.fp));
                ConditionSummary {
                    scale,
                    wb,
                    pairs: sel.len(),
                    failed: sel.iter().filter(|r| r.error.is_some()).count(),
                    mean_tpr: sel.iter().map(|r| r.tpr).sum::<f64>() / n,
                    pooled_tpr: tpr(tp, fp),
                    mean_time_ms: sel.iter().map(|r| r.time_ms).sum::<f64>() / n,
                }
            })
            .collect();
        Self { tol_px, rows, conditions }
    }

    pub fn condition(&self, scale: u32, wb: &str) -> Option<&ConditionSummary> {
        self.conditions.iter().find(|c| c.scale == scale && c.wb == wb)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("pair,scale,wb,TPR,TP,FP,time_ms\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.6},{},{},{:.3}\n",
                csv_field(&r.pair),
                r.scale,
                csv_field(&r.wb),
                r.tpr,
                r.tp,
                r.fp,
                r.time_ms
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is plain data") + "\n"
    }

    /// Writes the CSV to `path` and the JSON twin next to it.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))?;
        let json = path.with_extension("json");
        std::fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Whether wall-clock time is recorded or written as zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clock {
    Wall,
    Zero,
}

/// Runs one synthesized pair through the pipeline and scores its
/// bidirectional matches against the ground truth.
pub fn evaluate_pair(
    pipeline: &Pipeline,
    pair: &SyntheticPair,
    tol_px: f64,
) -> (usize, usize, usize, usize, f64, Option<String>) {
    let start = Instant::now();
    let prepared = pipeline
        .prepare(&pair.ix)
        .and_then(|px| pipeline.prepare(&pair.iy).map(|py| (px, py)));
    let (px, py) = match prepared {
        Ok(p) => p,
        Err(e) => return (0, 0, 0, 0, elapsed_ms(start), Some(e.to_string())),
    };
    let matched = match pipeline.match_prepared(&px, &py) {
        Ok(m) => m,
        Err(e) => return (0, 0, 0, 0, elapsed_ms(start), Some(e.to_string())),
    };
    let n = pipeline.frame_size();
    let (ax, ay) = (
        frame_to_original(n, px.source_size),
        frame_to_original(n, py.source_size),
    );
    let original: Vec<Correspondence> = matched
        .correspondences
        .iter()
        .map(|&(q, p)| (map_point(&ay, q).expect("affine"), map_point(&ax, p).expect("affine")))
        .collect();
    let (tp, fp) = score_matches(&original, &pair.gt, tol_px);
    let ransac = crate::geometry::ransac_homography(&matched.correspondences, &pipeline.config.ransac);
    let time = elapsed_ms(start);
    match ransac {
        Ok(h) => {
            let kept: Vec<Correspondence> = h.inliers.iter().map(|&i| original[i]).collect();
            let (itp, ifp) = score_matches(&kept, &pair.gt, tol_px);
            (tp, fp, itp, ifp, time, None)
        }
        Err(e) => (tp, fp, 0, 0, time, Some(format!("registration failed at ransac stage: {e}"))),
    }
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Evaluates every `image x scale x wb x seed` combination of the manifest,
/// in that nesting order. Unreadable images and unusable sources become
/// failed rows.
pub fn run_manifest(manifest: &Manifest, pipeline: &Pipeline, clock: Clock) -> Result<EvalReport> {
    manifest.validate()?;
    let mut rows = Vec::new();
    for path in &manifest.images {
        let image = path.display().to_string();
        let source = load_image(path).map_err(|e| e.to_string());
        for &scale in &manifest.scales {
            for wb in &manifest.wb_modes {
                let mode: WbMode = wb.parse()?;
                for &seed in &manifest.seeds {
                    let mut row = EvalRow {
                        pair: format!("{image}#{seed}"),
                        image: image.clone(),
                        seed,
                        scale,
                        wb: wb.clone(),
                        tp: 0,
                        fp: 0,
                        tpr: 0.0,
                        inlier_tp: 0,
                        inlier_fp: 0,
                        time_ms: 0.0,
                        error: None,
                    };
                    let pair = source
                        .clone()
                        .and_then(|s| synthesize_pair(&s, scale, mode, seed).map_err(|e| e.to_string()));
                    match pair {
                        Err(e) => row.error = Some(e),
                        Ok(pair) => {
                            let (tp, fp, itp, ifp, time, err) = evaluate_pair(pipeline, &pair, manifest.tol_px);
                            row.tp = tp;
                            row.fp = fp;
                            row.tpr = tpr(tp, fp);
                            row.inlier_tp = itp;
                            row.inlier_fp = ifp;
                            row.time_ms = if clock == Clock::Wall { time } else { 0.0 };
                            row.error = err;
                        }
                    }
                    if let Some(e) = &row.error {
                        log::warn!("{}: {e}", row.pair);
                    }
                    rows.push(row);
                }
            }
        }
    }
    Ok(EvalReport::from_rows(rows, manifest.tol_px))
}

/// Loads the manifest, evaluates it and writes the CSV report to `out` with
/// its JSON twin.
pub fn run_benchmark(
    manifest: impl AsRef<Path>,
    pipeline: &Pipeline,
    out: impl AsRef<Path>,
    clock: Clock,
) -> Result<EvalReport> {
    let m = Manifest::load(manifest)?;
    let report = run_manifest(&m, pipeline, clock)?;
    report.write(out)?;
    Ok(report)
}
