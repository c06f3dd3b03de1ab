//! End-to-end registration of a high-resolution view `iy` inside a wide-field
//! reference `ix`.
//!
//! Frame convention: both images are resized to the square network frame.
//! Pixel `k` is centered at coordinate `k` in every frame, so the frame of an
//! `n`-pixel axis spans `[-0.5, n - 0.5]`.

use std::fmt;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::features::{build_pyramid, harris_corners, CornerGate, DescriptorPyramid, HarrisParams};
use crate::geometry::{map_point, ransac_homography, Correspondence, Homography, Point2, RansacParams};
use crate::imgio::{resize_bilinear, ImageBuffer};
use crate::matching::{fused_distance, intersect, match_oneway, DistanceWeights, MatchParams, MatchSet};
use crate::nnet::{forward_taps, NetworkSpec, WeightBundle};

/// Smallest accepted input side.
pub const MIN_INPUT: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct PipelineConfig {
    pub harris: HarrisParams,
    pub distance: DistanceWeights,
    pub matching: MatchParams,
    pub ransac: RansacParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Input,
    Resize,
    Forward,
    Gating,
    Distance,
    Matching,
    Ransac,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Input => "input",
            Stage::Resize => "resize",
            Stage::Forward => "forward",
            Stage::Gating => "gating",
            Stage::Distance => "distance",
            Stage::Matching => "matching",
            Stage::Ransac => "ransac",
        };
        f.write_str(s)
    }
}

/// A registration that could not produce a homography, with the stage that
/// stopped it.
#[derive(Debug)]
pub struct RegistrationFailure {
    pub stage: Stage,
    pub error: Error,
}

impl fmt::Display for RegistrationFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "registration failed at {} stage: {}", self.stage, self.error)
    }
}

impl std::error::Error for RegistrationFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, RegistrationFailure>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, RegistrationFailure> {
        self.map_err(|error| RegistrationFailure { stage, error })
    }
}

/// Wall-clock milliseconds per stage. Per-image stages are summed over both
/// images.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Timings {
    pub resize: f64,
    pub forward: f64,
    pub harris: f64,
    pub distance: f64,
    #[serde(rename = "match")]
    pub matching: f64,
    pub ransac: f64,
    pub total: f64,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// One image resized into the network frame with its descriptors and gate.
#[derive(Debug, Clone)]
pub struct PreparedImage {
    /// `(width, height)` of the original image.
    pub source_size: (usize, usize),
    pub frame: ImageBuffer,
    pub pyramid: DescriptorPyramid,
    pub gate: CornerGate,
    pub timings: Timings,
}

impl PreparedImage {
    /// Affine map from this image's network frame to its original pixels.
    pub fn frame_to_original(&self) -> Homography {
        frame_to_original(self.frame.width(), self.source_size)
    }
}

/// Affine map from a square `frame`-pixel frame to an image of `(w, h)`
/// pixels, preserving pixel-center alignment.
pub fn frame_to_original(frame: usize, (w, h): (usize, usize)) -> Homography {
    let sx = w as f64 / frame as f64;
    let sy = h as f64 / frame as f64;
    Homography::scale_translation(sx, sy, 0.5 * sx - 0.5, 0.5 * sy - 0.5)
}

fn map_affine(a: &Homography, p: Point2) -> Point2 {
    map_point(a, p).expect("affine maps have unit depth")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Roi {
    /// Images of `iy`'s outer corners (top-left, top-right, bottom-right,
    /// bottom-left) in `ix` original pixels.
    pub corners: [Point2; 4],
    /// Image of `iy`'s center: the coordinate Y.
    pub center: Point2,
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    /// Maps `iy`'s network frame into `ix`'s network frame.
    pub homography: Homography,
    /// Maps `iy` original pixels into `ix` original pixels.
    pub homography_original: Homography,
    pub roi: Roi,
    /// Bidirectional matches; `src` indexes `ix` cells, `dst` indexes `iy` cells.
    pub matches: MatchSet,
    /// Cell-center pairs `(iy point, ix point)` in network frames, in match order.
    pub correspondences: Vec<Correspondence>,
    pub timings: Timings,
    pub frame_size: usize,
    /// `(width, height)` of the original images.
    pub ix_size: (usize, usize),
    pub iy_size: (usize, usize),
}

impl RegistrationResult {
    pub fn match_count(&self) -> usize {
        self.matches.len()
    }

    /// Match correspondences `(iy point, ix point)` in original pixels.
    pub fn correspondences_original(&self) -> Vec<Correspondence> {
        let ax = frame_to_original(self.frame_size, self.ix_size);
        let ay = frame_to_original(self.frame_size, self.iy_size);
        self.correspondences
            .iter()
            .map(|&(py, px)| (map_affine(&ay, py), map_affine(&ax, px)))
            .collect()
    }

    /// Report object with frame homography, ROI in `ix` pixels, match count
    /// and stage timings.
    pub fn report_json(&self) -> serde_json::Value {
        let pt = |p: Point2| serde_json::json!([p.x, p.y]);
        serde_json::json!({
            "homography": self.homography_original.to_row_major(),
            "homography_frame": self.homography.to_row_major(),
            "roi": {
                "corners": self.roi.corners.iter().map(|&p| pt(p)).collect::<Vec<_>>(),
                "center": pt(self.roi.center),
            },
            "matches": self.match_count(),
            "timings_ms": self.timings,
        })
    }
}

/// Output of the matching stages.
#[derive(Debug, Clone)]
pub struct Matched {
    pub matches: MatchSet,
    /// Cell-center pairs `(iy point, ix point)` in network frames.
    pub correspondences: Vec<Correspondence>,
    pub timings: Timings,
}

/// Registration pipeline: immutable network, weights and parameters.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub spec: NetworkSpec,
    pub weights: WeightBundle,
    pub config: PipelineConfig,
}

fn to_rgb(img: &ImageBuffer) -> Result<ImageBuffer> {
    if img.channels() == 3 {
        return Ok(img.clone());
    }
    ImageBuffer::from_fn(img.width(), img.height(), 3, |x, y, _| img.get(x, y, 0))
}

impl Pipeline {
    pub fn new(spec: NetworkSpec, weights: WeightBundle, config: PipelineConfig) -> Result<Self> {
        spec.validate()?;
        weights.check_against(&spec)?;
        config.harris.validate()?;
        if config.harris.frame_size != spec.input_size {
            return Err(Error::Config(format!(
                "harris frame {} differs from network input {}",
                config.harris.frame_size, spec.input_size
            )));
        }
        Ok(Self { spec, weights, config })
    }

    pub fn frame_size(&self) -> usize {
        self.spec.input_size
    }

    /// Resizes `img` into the network frame and extracts descriptors and the
    /// corner gate.
    pub fn prepare(&self, img: &ImageBuffer) -> std::result::Result<PreparedImage, RegistrationFailure> {
        if img.width() < MIN_INPUT || img.height() < MIN_INPUT {
            return Err(Error::Argument(format!(
                "images must be at least {MIN_INPUT}x{MIN_INPUT}, got {}x{}",
                img.width(),
                img.height()
            )))
            .at(Stage::Input);
        }
        let n = self.frame_size();
        let mut timings = Timings::default();
        let t = Instant::now();
        let frame = resize_bilinear(&to_rgb(img).at(Stage::Input)?, n, n).at(Stage::Resize)?;
        timings.resize = ms_since(t);
        let t = Instant::now();
        let taps = forward_taps(&frame, &self.spec, &self.weights).at(Stage::Forward)?;
        let mut pyramid = build_pyramid(&taps).at(Stage::Forward)?;
        pyramid.source_size = (img.width(), img.height());
        timings.forward = ms_since(t);
        let t = Instant::now();
        let gate = harris_corners(&frame, &self.config.harris).at(Stage::Gating)?;
        timings.harris = ms_since(t);
        Ok(PreparedImage {
            source_size: (img.width(), img.height()),
            frame,
            pyramid,
            gate,
            timings,
        })
    }

    /// Registers `iy` inside `ix`.
    pub fn register(
        &self,
        ix: &ImageBuffer,
        iy: &ImageBuffer,
    ) -> std::result::Result<RegistrationResult, RegistrationFailure> {
        let t = Instant::now();
        let (px, py) = rayon::join(|| self.prepare(ix), || self.prepare(iy));
        let mut result = self.register_prepared(&px?, &py?)?;
        result.timings.total = ms_since(t);
        Ok(result)
    }

    /// Gating check, fused distances and bidirectional matching.
    pub fn match_prepared(
        &self,
        px: &PreparedImage,
        py: &PreparedImage,
    ) -> std::result::Result<Matched, RegistrationFailure> {
        let mut timings = Timings {
            resize: px.timings.resize + py.timings.resize,
            forward: px.timings.forward + py.timings.forward,
            harris: px.timings.harris + py.timings.harris,
            ..Timings::default()
        };
        for (name, p) in [("ix", px), ("iy", py)] {
            if p.gate.active_cells() == 0 {
                return Err(Error::EmptyMatch(format!("no corner cells in {name}"))).at(Stage::Gating);
            }
        }
        let t = Instant::now();
        let dm_xy = fused_distance(&px.pyramid, &py.pyramid, &px.gate, &py.gate, &self.config.distance)
            .at(Stage::Distance)?;
        let dm_yx = dm_xy.transpose();
        timings.distance = ms_since(t);
        let t = Instant::now();
        let forward = match_oneway(&dm_xy, &self.config.matching).at(Stage::Matching)?;
        let backward = match_oneway(&dm_yx, &self.config.matching).at(Stage::Matching)?;
        let matches = intersect(&forward, &backward);
        timings.matching = ms_since(t);
        let correspondences = matches
            .pairs
            .iter()
            .map(|m| (py.pyramid.cell_center(m.dst), px.pyramid.cell_center(m.src)))
            .collect();
        Ok(Matched {
            matches,
            correspondences,
            timings,
        })
    }

    /// Registration from already prepared images. `total` sums the recorded
    /// preparation times and the work done here.
    pub fn register_prepared(
        &self,
        px: &PreparedImage,
        py: &PreparedImage,
    ) -> std::result::Result<RegistrationResult, RegistrationFailure> {
        let start = Instant::now();
        let Matched {
            matches,
            correspondences,
            mut timings,
        } = self.match_prepared(px, py)?;
        let t = Instant::now();
        let homography = ransac_homography(&correspondences, &self.config.ransac).at(Stage::Ransac)?;
        timings.ransac = ms_since(t);
        let ax = px.frame_to_original();
        let ay_inv = py.frame_to_original().inverse().at(Stage::Ransac)?;
        let mut homography_original = ax.after(&homography).after(&ay_inv);
        homography_original.inliers = homography.inliers.clone();
        homography_original.mean_reproj_error = homography.mean_reproj_error;
        let (w, h) = (py.source_size.0 as f64, py.source_size.1 as f64);
        let corner_pts = [
            Point2::new(-0.5, -0.5),
            Point2::new(w - 0.5, -0.5),
            Point2::new(w - 0.5, h - 0.5),
            Point2::new(-0.5, h - 0.5),
        ];
        let mut corners = [Point2::new(0.0, 0.0); 4];
        for (c, p) in corners.iter_mut().zip(corner_pts) {
            *c = map_point(&homography_original, p).at(Stage::Ransac)?;
        }
        let center = map_point(&homography_original, Point2::new((w - 1.0) / 2.0, (h - 1.0) / 2.0))
            .at(Stage::Ransac)?;
        timings.total = timings.resize + timings.forward + timings.harris + ms_since(start);
        Ok(RegistrationResult {
            homography,
            homography_original,
            roi: Roi { corners, center },
            matches,
            correspondences,
            timings,
            frame_size: self.frame_size(),
            ix_size: px.source_size,
            iy_size: py.source_size,
        })
    }
}
