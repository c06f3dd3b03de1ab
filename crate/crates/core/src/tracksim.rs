//! Discrete-time simulation of the two-camera tracking loop.
//!
//! A fixed wide-field camera sees the whole scene at `reference_size` pixels
//! square. A gimbal-mounted camera images an `hr_size` window at native scene
//! resolution around its pointing. Each step the gimbal is commanded to the
//! target's reference position plus a learned offset; the HR frame is then
//! registered against the reference and the offset corrected by `K` times the
//! observed miss.
//!
//! Units: scene pixels equal HR pixels. Commands and registrations live in
//! reference pixels. With `s = scene_width / reference_size`, the systematic
//! pointing error `E = s * offset + miscalibration` obeys
//! `E' = (1 - K) E - K n` under an exact registrar, `n` being the vibration of
//! the registered frame.

use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Normal};
use rand_core::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::imgio::{load_image, resize_area, ImageBuffer};
use crate::pipeline::{Pipeline, PreparedImage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trajectory {
    /// Fixed target; `None` coordinates default to the scene center.
    Static {
        #[serde(default)]
        x: Option<f64>,
        #[serde(default)]
        y: Option<f64>,
    },
    Linear { x0: f64, y0: f64, vx: f64, vy: f64 },
    Sine {
        cx: f64,
        cy: f64,
        ax: f64,
        ay: f64,
        /// Steps per full cycle.
        period: f64,
    },
}

impl Trajectory {
    /// Target position in scene pixels at `step`.
    pub fn at(&self, step: usize, scene: (usize, usize)) -> Point2 {
        let t = step as f64;
        match *self {
            Trajectory::Static { x, y } => Point2::new(
                x.unwrap_or((scene.0 as f64 - 1.0) / 2.0),
                y.unwrap_or((scene.1 as f64 - 1.0) / 2.0),
            ),
            Trajectory::Linear { x0, y0, vx, vy } => Point2::new(x0 + vx * t, y0 + vy * t),
            Trajectory::Sine { cx, cy, ax, ay, period } => {
                let phase = 2.0 * std::f64::consts::PI * t / period;
                Point2::new(cx + ax * phase.sin(), cy + ay * phase.sin())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RegistrarKind {
    /// Reads the true pointing; isolates loop dynamics.
    Oracle,
    #[default]
    Pipeline,
}

fn default_gain() -> f64 {
    0.7
}

fn default_frame() -> usize {
    448
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub scene: PathBuf,
    pub trajectory: Trajectory,
    #[serde(default)]
    pub vibration_sigma: f64,
    /// Constant pointing bias of the calibrated conversion, scene pixels.
    #[serde(default)]
    pub miscalibration: [f64; 2],
    #[serde(default = "default_gain")]
    pub gain: f64,
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub registrar: RegistrarKind,
    #[serde(default = "default_frame")]
    pub reference_size: usize,
    #[serde(default = "default_frame")]
    pub hr_size: usize,
}

impl Scenario {
    /// Reads a scenario; a relative scene path resolves against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut s: Scenario = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if s.scene.is_relative() {
            s.scene = path.parent().unwrap_or(Path::new("")).join(&s.scene);
        }
        Ok(s)
    }

    fn check_params(&self) -> Result<()> {
        let field = |name: &str, msg: String| Err(Error::Config(format!("{name}: {msg}")));
        if !(self.gain > 0.0 && self.gain <= 1.0) {
            return field("gain", format!("must be in (0, 1], got {}", self.gain));
        }
        if !(self.vibration_sigma >= 0.0) || !self.vibration_sigma.is_finite() {
            return field("vibration_sigma", format!("must be finite and >= 0, got {}", self.vibration_sigma));
        }
        if self.miscalibration.iter().any(|v| !v.is_finite()) {
            return field("miscalibration", "must be finite".into());
        }
        if self.steps == 0 {
            return field("steps", "must be positive".into());
        }
        if self.reference_size < 64 || self.hr_size < 64 {
            return field("reference_size", "frames must be at least 64 pixels".into());
        }
        if let Trajectory::Sine { period, .. } = self.trajectory {
            if !(period > 0.0) {
                return field("trajectory.period", format!("must be positive, got {period}"));
            }
        }
        Ok(())
    }

    /// Checks the parameters against a scene of `(w, h)` pixels: every target
    /// position keeps the HR window inside the scene.
    pub fn validate(&self, scene: (usize, usize)) -> Result<()> {
        self.check_params()?;
        let half = (self.hr_size as f64 - 1.0) / 2.0;
        if scene.0 < self.hr_size || scene.1 < self.hr_size {
            return Err(Error::Config(format!(
                "scene: {}x{} is smaller than the {}-pixel HR window",
                scene.0, scene.1, self.hr_size
            )));
        }
        let (xmax, ymax) = (scene.0 as f64 - 1.0 - half, scene.1 as f64 - 1.0 - half);
        for step in 0..self.steps {
            let p = self.trajectory.at(step, scene);
            if !(p.x >= half && p.x <= xmax && p.y >= half && p.y <= ymax) {
                return Err(Error::Config(format!(
                    "trajectory: target ({:.1}, {:.1}) at step {step} leaves the region [{half}, {xmax}] x [{half}, {ymax}]",
                    p.x, p.y
                )));
            }
        }
        Ok(())
    }
}

/// The scene and the two camera models.
#[derive(Debug, Clone)]
pub struct Cameras {
    pub scene: ImageBuffer,
    pub reference: ImageBuffer,
    pub hr_size: usize,
}

impl Cameras {
    pub fn new(scene: ImageBuffer, reference_size: usize, hr_size: usize) -> Result<Self> {
        let reference = resize_area(&scene, reference_size, reference_size)?;
        Ok(Self { scene, reference, hr_size })
    }

    fn scale(&self) -> (f64, f64) {
        (
            self.scene.width() as f64 / self.reference.width() as f64,
            self.scene.height() as f64 / self.reference.height() as f64,
        )
    }

    pub fn ref_to_scene(&self, p: Point2) -> Point2 {
        let (sx, sy) = self.scale();
        Point2::new((p.x + 0.5) * sx - 0.5, (p.y + 0.5) * sy - 0.5)
    }

    pub fn scene_to_ref(&self, p: Point2) -> Point2 {
        let (sx, sy) = self.scale();
        Point2::new((p.x + 0.5) / sx - 0.5, (p.y + 0.5) / sy - 0.5)
    }

    /// Clamps a pointing so the HR window stays inside the scene.
    pub fn clamp_pointing(&self, p: Point2) -> Point2 {
        let half = (self.hr_size as f64 - 1.0) / 2.0;
        let xmax = self.scene.width() as f64 - 1.0 - half;
        let ymax = self.scene.height() as f64 - 1.0 - half;
        Point2::new(p.x.clamp(half, xmax), p.y.clamp(half, ymax))
    }

    /// HR frame centered at `p` (already clamped), bilinear at sub-pixel offsets.
    pub fn render_hr(&self, p: Point2) -> Result<ImageBuffer> {
        let n = self.hr_size;
        let half = (n as f64 - 1.0) / 2.0;
        let (x0, y0) = (p.x - half, p.y - half);
        let scene = &self.scene;
        let mut data = Vec::with_capacity(n * n * scene.channels());
        for v in 0..n {
            for u in 0..n {
                for c in 0..scene.channels() {
                    let sample = scene
                        .sample_bilinear(x0 + u as f64, y0 + v as f64, c)
                        .ok_or_else(|| Error::Argument(format!("HR window at ({}, {}) leaves the scene", p.x, p.y)))?;
                    data.push(sample);
                }
            }
        }
        ImageBuffer::new(n, n, scene.channels(), data)
    }
}

/// What a registrar sees at one step.
pub struct Observation<'a> {
    pub cameras: &'a Cameras,
    pub hr: &'a ImageBuffer,
    /// True HR center in scene pixels; only an oracle may read it.
    pub truth: Point2,
}

/// Locates the HR frame's center in reference pixels.
pub trait Registrar {
    fn locate(&mut self, obs: &Observation<'_>) -> std::result::Result<Point2, String>;
}

pub struct OracleRegistrar;

impl Registrar for OracleRegistrar {
    fn locate(&mut self, obs: &Observation<'_>) -> std::result::Result<Point2, String> {
        Ok(obs.cameras.scene_to_ref(obs.truth))
    }
}

/// Registers each HR frame with the pipeline; the reference is prepared once.
///
/// A registration is rejected as implausible when its center falls outside
/// the reference frame or its scale departs from the calibrated camera scale
/// ratio by more than `scale_tolerance` (relative).
pub struct PipelineRegistrar<'p> {
    pipeline: &'p Pipeline,
    reference: Option<PreparedImage>,
    pub scale_tolerance: f64,
}

impl<'p> PipelineRegistrar<'p> {
    pub fn new(pipeline: &'p Pipeline) -> Self {
        Self {
            pipeline,
            reference: None,
            scale_tolerance: 0.25,
        }
    }
}

impl Registrar for PipelineRegistrar<'_> {
    fn locate(&mut self, obs: &Observation<'_>) -> std::result::Result<Point2, String> {
        if self.reference.is_none() {
            let prepared = self.pipeline.prepare(&obs.cameras.reference).map_err(|e| e.to_string())?;
            self.reference = Some(prepared);
        }
        let reference = self.reference.as_ref().expect("prepared above");
        let hr = self.pipeline.prepare(obs.hr).map_err(|e| e.to_string())?;
        let result = self
            .pipeline
            .register_prepared(reference, &hr)
            .map_err(|e| e.to_string())?;
        let y = result.roi.center;
        let (w, h) = (obs.cameras.reference.width() as f64, obs.cameras.reference.height() as f64);
        if !(y.x >= -0.5 && y.x <= w - 0.5 && y.y >= -0.5 && y.y <= h - 0.5) {
            return Err(format!("implausible registration: center ({:.1}, {:.1}) outside reference", y.x, y.y));
        }
        let expected = 1.0 / obs.cameras.scale().0;
        let got = result.homography_original.linear_scale();
        if !((got / expected - 1.0).abs() <= self.scale_tolerance) {
            return Err(format!("implausible registration: scale {got:.4}, calibrated {expected:.4}"));
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub target: Point2,
    /// Commanded aim, reference pixels.
    pub aim: Point2,
    /// Actual HR center, scene pixels.
    pub pointing: Point2,
    /// Registered HR center, reference pixels; `None` when the frame was lost.
    pub observed: Option<Point2>,
    /// Distance from the HR center to the target, HR pixels.
    pub error_px: f64,
    /// Pointing error without this frame's vibration, HR pixels.
    pub aim_error: Point2,
    pub lost: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub steps: usize,
    pub mean_error_px: f64,
    pub max_error_px: f64,
    /// Fraction of steps with the target inside the HR window.
    pub fraction_in_fov: f64,
    /// First step from which `error_px` stays below one pixel.
    pub convergence_step: Option<usize>,
    pub lost_frames: usize,
    /// Per-axis RMS of `aim_error` over the second half of the run.
    pub steady_state_rms: [f64; 2],
    /// `sigma K / sqrt(2K - K^2)`: stationary RMS of the scalar loop model.
    pub predicted_rms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryReport {
    pub records: Vec<StepRecord>,
    pub summary: Summary,
}

impl TrajectoryReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,aim_x,aim_y,y_x,y_y,error_px,lost,aim_err_x,aim_err_y\n");
        for r in &self.records {
            let (yx, yy) = r.observed.map_or((String::new(), String::new()), |p| (p.x.to_string(), p.y.to_string()));
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.step, r.aim.x, r.aim.y, yx, yy, r.error_px, u8::from(r.lost), r.aim_error.x, r.aim_error.y
            ));
        }
        out
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary).expect("summary is plain data") + "\n"
    }
}

/// Loop state between steps.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub cameras: Cameras,
    pub scenario: Scenario,
    /// Learned correction added to every command, reference pixels.
    pub offset: Point2,
    pub lost_frames: usize,
    rng: Xoshiro256StarStar,
    noise: Option<Normal<f64>>,
    step: usize,
}

impl Simulator {
    pub fn new(scenario: Scenario, scene: ImageBuffer) -> Result<Self> {
        scenario.validate((scene.width(), scene.height()))?;
        let cameras = Cameras::new(scene, scenario.reference_size, scenario.hr_size)?;
        let noise = (scenario.vibration_sigma > 0.0)
            .then(|| Normal::new(0.0, scenario.vibration_sigma).expect("sigma checked"));
        Ok(Self {
            cameras,
            rng: Xoshiro256StarStar::seed_from_u64(scenario.seed),
            scenario,
            offset: Point2::new(0.0, 0.0),
            lost_frames: 0,
            noise,
            step: 0,
        })
    }

    /// Target position in reference pixels, as the wide-field camera sees it.
    pub fn target_ref(&self, step: usize) -> Point2 {
        let scene = (self.cameras.scene.width(), self.cameras.scene.height());
        self.cameras.scene_to_ref(self.scenario.trajectory.at(step, scene))
    }

    /// One loop iteration. The command uses the target position from the
    /// previous reference frame (one frame of latency).
    pub fn step(&mut self, registrar: &mut dyn Registrar) -> Result<StepRecord> {
        let t = self.step;
        let scene = (self.cameras.scene.width(), self.cameras.scene.height());
        let target = self.scenario.trajectory.at(t, scene);
        let known = self.target_ref(t.saturating_sub(1));
        let aim = Point2::new(known.x + self.offset.x, known.y + self.offset.y);
        let [mx, my] = self.scenario.miscalibration;
        let calibrated = self.cameras.ref_to_scene(aim);
        let biased = Point2::new(calibrated.x + mx, calibrated.y + my);
        let (nx, ny) = match &self.noise {
            Some(n) => (n.sample(&mut self.rng), n.sample(&mut self.rng)),
            None => (0.0, 0.0),
        };
        let pointing = self
            .cameras
            .clamp_pointing(Point2::new(biased.x + nx, biased.y + ny));
        let hr = self.cameras.render_hr(pointing)?;
        let obs = Observation {
            cameras: &self.cameras,
            hr: &hr,
            truth: pointing,
        };
        let observed = match registrar.locate(&obs) {
            Ok(y) => Some(y),
            Err(msg) => {
                log::debug!("step {t}: frame lost: {msg}");
                None
            }
        };
        match observed {
            Some(y) => {
                let now = self.target_ref(t);
                let k = self.scenario.gain;
                self.offset = Point2::new(self.offset.x + k * (now.x - y.x), self.offset.y + k * (now.y - y.y));
            }
            None => self.lost_frames += 1,
        }
        self.step += 1;
        Ok(StepRecord {
            step: t,
            target,
            aim,
            pointing,
            observed,
            error_px: pointing.dist(target),
            aim_error: Point2::new(biased.x - target.x, biased.y - target.y),
            lost: observed.is_none(),
        })
    }

    pub fn run(&mut self, registrar: &mut dyn Registrar) -> Result<TrajectoryReport> {
        let mut records = Vec::with_capacity(self.scenario.steps);
        for _ in 0..self.scenario.steps {
            records.push(self.step(registrar)?);
        }
        let summary = summarize(&records, &self.scenario);
        Ok(TrajectoryReport { records, summary })
    }
}

fn summarize(records: &[StepRecord], sc: &Scenario) -> Summary {
    let n = records.len();
    let half_window = sc.hr_size as f64 / 2.0;
    let in_fov = records
        .iter()
        .filter(|r| {
            (r.pointing.x - r.target.x).abs() < half_window && (r.pointing.y - r.target.y).abs() < half_window
        })
        .count();
    let convergence_step = match records.iter().rposition(|r| !(r.error_px < 1.0)) {
        None => Some(0),
        Some(last) if last + 1 < n => Some(last + 1),
        Some(_) => None,
    };
    let tail = &records[n / 2..];
    let rms = |f: fn(&StepRecord) -> f64| (tail.iter().map(|r| f(r).powi(2)).sum::<f64>() / tail.len() as f64).sqrt();
    let k = sc.gain;
    Summary {
        steps: n,
        mean_error_px: records.iter().map(|r| r.error_px).sum::<f64>() / n as f64,
        max_error_px: records.iter().map(|r| r.error_px).fold(0.0, f64::max),
        fraction_in_fov: in_fov as f64 / n as f64,
        convergence_step,
        lost_frames: records.iter().filter(|r| r.lost).count(),
        steady_state_rms: [rms(|r| r.aim_error.x), rms(|r| r.aim_error.y)],
        predicted_rms: sc.vibration_sigma * k / (2.0 * k - k * k).sqrt(),
    }
}

/// Loads the scene named by the scenario and runs it with the requested
/// registrar; `pipeline` is required for the pipeline registrar.
pub fn run_scenario(scenario: &Scenario, pipeline: Option<&Pipeline>) -> Result<TrajectoryReport> {
    scenario.check_params()?;
    let scene = load_image(&scenario.scene)?;
    run_with_scene(scenario, scene, pipeline)
}

pub fn run_with_scene(
    scenario: &Scenario,
    scene: ImageBuffer,
    pipeline: Option<&Pipeline>,
) -> Result<TrajectoryReport> {
    let mut sim = Simulator::new(scenario.clone(), scene)?;
    match scenario.registrar {
        RegistrarKind::Oracle => sim.run(&mut OracleRegistrar),
        RegistrarKind::Pipeline => {
            let p = pipeline.ok_or_else(|| Error::Config("registrar: pipeline registrar needs weights".into()))?;
            sim.run(&mut PipelineRegistrar::new(p))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::texture::natural_texture;

    fn scenario(traj: Trajectory) -> Scenario {
        Scenario {
            scene: PathBuf::from("unused.png"),
            trajectory: traj,
            vibration_sigma: 0.0,
            miscalibration: [0.0, 0.0],
            gain: 0.5,
            steps: 30,
            seed: 1,
            registrar: RegistrarKind::Oracle,
            reference_size: 64,
            hr_size: 64,
        }
    }

    fn scene(size: usize) -> ImageBuffer {
        natural_texture(size, size, 5).unwrap()
    }

    fn centered() -> Trajectory {
        Trajectory::Static { x: None, y: None }
    }

    #[test]
    fn fixed_point_has_zero_error() {
        let r = run_with_scene(&scenario(centered()), scene(256), None).unwrap();
        assert!(r.records.iter().all(|s| s.error_px == 0.0));
        assert_eq!(r.summary.fraction_in_fov, 1.0);
        assert_eq!(r.summary.convergence_step, Some(0));
    }

    #[test]
    fn miscalibration_decays_geometrically() {
        let mut sc = scenario(centered());
        sc.miscalibration = [40.0, 0.0];
        let r = run_with_scene(&sc, scene(256), None).unwrap();
        for s in &r.records {
            let want = 40.0 * 0.5f64.powi(s.step as i32);
            assert!((s.error_px - want).abs() <= 1e-9 * 40.0, "step {}: {} vs {want}", s.step, s.error_px);
        }
        assert_eq!(r.summary.convergence_step, Some(6));
    }

    #[test]
    fn static_error_never_increases() {
        for k in [0.1, 0.5, 0.7, 1.0] {
            let mut sc = scenario(centered());
            sc.miscalibration = [23.0, -17.0];
            sc.gain = k;
            let r = run_with_scene(&sc, scene(256), None).unwrap();
            for w in r.records.windows(2) {
                assert!(w[1].error_px <= w[0].error_px + 1e-12, "K={k}");
            }
        }
    }

    #[test]
    fn linear_target_lag_bounded_by_speed() {
        let v = 3.0;
        let mut sc = scenario(Trajectory::Linear { x0: 60.0, y0: 128.0, vx: v, vy: 0.0 });
        sc.gain = 1.0;
        sc.steps = 40;
        let r = run_with_scene(&sc, scene(256), None).unwrap();
        for s in &r.records[2..] {
            assert!(s.error_px <= v + 1e-9, "step {}: {}", s.step, s.error_px);
        }
    }

    #[test]
    fn vibration_matches_loop_model() {
        let mut sc = scenario(centered());
        sc.vibration_sigma = 2.0;
        sc.gain = 0.5;
        sc.steps = 4000;
        sc.hr_size = 64;
        let r = run_with_scene(&sc, scene(256), None).unwrap();
        let want = r.summary.predicted_rms;
        assert!((want - 2.0 * 0.5 / 0.75f64.sqrt()).abs() < 1e-12);
        for got in r.summary.steady_state_rms {
            assert!((got / want - 1.0).abs() < 0.2, "{got} vs {want}");
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let mut sc = scenario(Trajectory::Sine { cx: 128.0, cy: 128.0, ax: 30.0, ay: 20.0, period: 17.0 });
        sc.vibration_sigma = 1.5;
        let a = run_with_scene(&sc, scene(256), None).unwrap();
        let b = run_with_scene(&sc, scene(256), None).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        sc.seed = 2;
        let c = run_with_scene(&sc, scene(256), None).unwrap();
        assert_ne!(a.to_csv(), c.to_csv());
    }

    struct Flaky(usize);

    impl Registrar for Flaky {
        fn locate(&mut self, obs: &Observation<'_>) -> std::result::Result<Point2, String> {
            self.0 += 1;
            if self.0 % 2 == 0 {
                Err("no consensus".into())
            } else {
                OracleRegistrar.locate(obs)
            }
        }
    }

    #[test]
    fn lost_frame_changes_only_loss_counter() {
        let mut sc = scenario(centered());
        sc.miscalibration = [10.0, 5.0];
        let mut sim = Simulator::new(sc, scene(256)).unwrap();
        let mut reg = Flaky(0);
        sim.step(&mut reg).unwrap();
        let before = (sim.offset, sim.lost_frames);
        let rec = sim.step(&mut reg).unwrap();
        assert!(rec.lost);
        assert_eq!(sim.offset, before.0);
        assert_eq!(sim.lost_frames, before.1 + 1);
    }

    #[test]
    fn trajectory_leaving_scene_is_config_error() {
        let sc = scenario(Trajectory::Linear { x0: 128.0, y0: 128.0, vx: 10.0, vy: 0.0 });
        let err = Simulator::new(sc, scene(256)).unwrap_err();
        assert!(matches!(err, Error::Config(m) if m.starts_with("trajectory")));
    }

    #[test]
    fn pointing_clamped_inside_scene() {
        let mut sc = scenario(centered());
        sc.miscalibration = [5000.0, -5000.0];
        sc.steps = 3;
        let r = run_with_scene(&sc, scene(256), None).unwrap();
        for s in &r.records {
            assert!(s.pointing.x <= 256.0 - 1.0 - 31.5 && s.pointing.y >= 31.5);
        }
    }
}
