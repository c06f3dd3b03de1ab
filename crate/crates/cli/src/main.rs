//! `msreg`: register, evaluate and simulate from the command line.
//!
//! Exit codes: 0 success, 1 usage, configuration or I/O error, 2 registration
//! failure.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use msreg::eval::{self, Clock};
use msreg::features::{debug_json, HarrisParams};
use msreg::geometry::{warp_image, RansacParams};
use msreg::imgio::{load_image, save_image, ImageBuffer};
use msreg::matching::{DistanceWeights, MatchParams};
use msreg::nnet::{init_weights_seeded, load_weights, save_weights, NetworkSpec, Provenance, WeightBundle};
use msreg::pipeline::{Pipeline, PipelineConfig, RegistrationFailure};
use msreg::texture::natural_texture;
use msreg::tracksim::{self, RegistrarKind, Scenario};

/// Seed used for weights when none is given outside strict mode.
const DEFAULT_SEED: u64 = 42;

#[derive(Parser)]
#[command(name = "msreg", version, about = "Multiscale registration with hierarchical convolutional features")]
struct Cli {
    /// Only machine-readable output on stdout; logs limited to errors.
    #[arg(long, global = true)]
    quiet: bool,
    /// Refuse to run without explicit seeds; write wall-clock fields as 0.
    #[arg(long, global = true)]
    strict: bool,
    /// More log output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register a high-resolution image inside a wide-field reference.
    Register {
        /// Wide-field reference image.
        ix: PathBuf,
        /// High-resolution image.
        iy: PathBuf,
        #[command(flatten)]
        pipe: PipelineArgs,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the reference with the registered image blended in.
        #[arg(long)]
        overlay: Option<PathBuf>,
        /// Write the bidirectional matches as JSON lines.
        #[arg(long)]
        matches: Option<PathBuf>,
    },
    /// Dump matches, descriptors and corner gates for inspection.
    MatchDebug {
        ix: PathBuf,
        iy: PathBuf,
        #[command(flatten)]
        pipe: PipelineArgs,
        /// Write the matches (JSON lines) here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write descriptor pyramids and gates of both images as JSON.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Run a benchmark manifest and write the CSV report with a JSON twin.
    Eval {
        manifest: PathBuf,
        #[command(flatten)]
        pipe: PipelineArgs,
        /// CSV report path; the JSON twin gets the `.json` extension.
        #[arg(long, default_value = "report.csv")]
        out: PathBuf,
    },
    /// Run a tracking scenario and write the per-step CSV and summary JSON.
    Simulate {
        scenario: PathBuf,
        #[command(flatten)]
        pipe: PipelineArgs,
        /// Per-step CSV path; the summary goes next to it with `.json`.
        #[arg(long, default_value = "trajectory.csv")]
        out: PathBuf,
    },
    /// Create or inspect weight files.
    Weights {
        #[command(subcommand)]
        action: WeightsCommand,
    },
    /// Render a seeded synthetic scene.
    Texture {
        /// Side length, or WIDTHxHEIGHT.
        #[arg(long, default_value = "448")]
        size: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum WeightsCommand {
    /// Write seeded weights for the default network.
    Init {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a weight file's layer shapes and checksum as JSON.
    Info { path: PathBuf },
}

#[derive(Args, Clone)]
struct PipelineArgs {
    /// Weight file (MSRW).
    #[arg(long, conflicts_with = "seed")]
    weights: Option<PathBuf>,
    /// Seed for generated weights; also the RANSAC seed unless --ransac-seed is given.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 0.04)]
    harris_k: f64,
    /// Corner threshold relative to the strongest response.
    #[arg(long, default_value_t = 0.01)]
    harris_threshold: f64,
    #[arg(long, default_value_t = 2000)]
    ransac_iters: usize,
    /// Inlier threshold in network-frame pixels.
    #[arg(long, default_value_t = 3.0)]
    ransac_px: f64,
    #[arg(long)]
    ransac_seed: Option<u64>,
    #[arg(long, default_value_t = 128)]
    target_count: usize,
    #[arg(long, default_value_t = 0.01)]
    theta_step: f64,
}

impl PipelineArgs {
    fn config(&self, strict: bool) -> anyhow::Result<PipelineConfig> {
        let ransac_seed = match (self.ransac_seed, self.seed) {
            (Some(s), _) | (None, Some(s)) => s,
            (None, None) if strict => bail!("--strict requires --ransac-seed or --seed"),
            (None, None) => {
                warn!("no --ransac-seed given, using 0");
                0
            }
        };
        let ranges = [
            (self.harris_k > 0.0 && self.harris_k < 0.25, "--harris-k must be in (0, 0.25)"),
            (
                self.harris_threshold > 0.0 && self.harris_threshold < 1.0,
                "--harris-threshold must be in (0, 1)",
            ),
            (self.ransac_iters > 0, "--ransac-iters must be positive"),
            (self.ransac_px > 0.0, "--ransac-px must be positive"),
            (self.target_count > 0, "--target-count must be positive"),
            (self.theta_step > 0.0, "--theta-step must be positive"),
        ];
        if let Some((_, msg)) = ranges.iter().find(|(ok, _)| !ok) {
            bail!("{msg}");
        }
        Ok(PipelineConfig {
            harris: HarrisParams {
                k: self.harris_k,
                threshold_rel: self.harris_threshold,
                ..HarrisParams::default()
            },
            distance: DistanceWeights::default(),
            matching: MatchParams {
                target_count: self.target_count,
                theta_step: self.theta_step,
            },
            ransac: RansacParams {
                iters: self.ransac_iters,
                inlier_px: self.ransac_px,
                seed: ransac_seed,
            },
        })
    }

    fn weights(&self, spec: &NetworkSpec, strict: bool) -> anyhow::Result<WeightBundle> {
        match (&self.weights, self.seed) {
            (Some(path), _) => {
                load_weights(path, spec).with_context(|| format!("weight file {}", path.display()))
            }
            (None, Some(seed)) => Ok(init_weights_seeded(spec, seed)),
            (None, None) if strict => bail!("--strict requires --weights or --seed"),
            (None, None) => {
                warn!("no --weights or --seed given, using seeded weights with seed {DEFAULT_SEED}");
                Ok(init_weights_seeded(spec, DEFAULT_SEED))
            }
        }
    }

    fn pipeline(&self, strict: bool) -> anyhow::Result<Pipeline> {
        let spec = NetworkSpec::default();
        let config = self.config(strict)?;
        let weights = self.weights(&spec, strict)?;
        Ok(Pipeline::new(spec, weights, config)?)
    }
}

/// Failure carrying its exit code.
enum Failure {
    Usage(anyhow::Error),
    Registration(RegistrationFailure),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Usage(e)
    }
}

impl From<msreg::Error> for Failure {
    fn from(e: msreg::Error) -> Self {
        Failure::Usage(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn read_image(path: &Path) -> anyhow::Result<ImageBuffer> {
    load_image(path).with_context(|| format!("reading image {}", path.display()))
}

/// Writes `text` to `out`, or to stdout when `out` is `None`.
fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn cmd_register(
    cli: &Cli,
    ix_path: &Path,
    iy_path: &Path,
    pipe: &PipelineArgs,
    out: Option<&Path>,
    overlay: Option<&Path>,
    matches: Option<&Path>,
) -> CmdResult {
    let pipeline = pipe.pipeline(cli.strict)?;
    let ix = read_image(ix_path)?;
    let iy = read_image(iy_path)?;
    let mut result = pipeline.register(&ix, &iy).map_err(Failure::Registration)?;
    if cli.strict {
        result.timings = Default::default();
    }
    info!(
        "{} matches, {} inliers, center ({:.2}, {:.2})",
        result.match_count(),
        result.homography.inliers.len(),
        result.roi.center.x,
        result.roi.center.y
    );
    if let Some(path) = matches {
        let grid = pipeline.frame_size() / msreg::features::CELL;
        emit(Some(path), &result.matches.to_jsonl(grid))?;
    }
    if let Some(path) = overlay {
        let warped = warp_image(&iy, &result.homography_original, ix.width(), ix.height())?;
        let covered = warp_image(
            &ImageBuffer::filled(iy.width(), iy.height(), 1, 1.0)?,
            &result.homography_original,
            ix.width(),
            ix.height(),
        )?;
        let blended = ImageBuffer::from_fn(ix.width(), ix.height(), ix.channels(), |x, y, c| {
            let a = 0.5 * covered.get(x, y, 0);
            let w = warped.get(x, y, c.min(warped.channels() - 1));
            (1.0 - a) * ix.get(x, y, c) + a * w
        })?;
        save_image(&blended, path).with_context(|| format!("writing {}", path.display()))?;
    }
    let text = serde_json::to_string_pretty(&result.report_json()).expect("plain data") + "\n";
    emit(out, &text)?;
    Ok(())
}

fn cmd_match_debug(
    cli: &Cli,
    ix_path: &Path,
    iy_path: &Path,
    pipe: &PipelineArgs,
    out: Option<&Path>,
    dump: Option<&Path>,
) -> CmdResult {
    let pipeline = pipe.pipeline(cli.strict)?;
    let ix = read_image(ix_path)?;
    let iy = read_image(iy_path)?;
    let px = pipeline.prepare(&ix).map_err(Failure::Registration)?;
    let py = pipeline.prepare(&iy).map_err(Failure::Registration)?;
    if let Some(path) = dump {
        let value = serde_json::json!({
            "ix": debug_json(&px.pyramid, &px.gate),
            "iy": debug_json(&py.pyramid, &py.gate),
        });
        emit(Some(path), &(value.to_string() + "\n"))?;
    }
    let matched = pipeline.match_prepared(&px, &py).map_err(Failure::Registration)?;
    info!(
        "{} matches, corner cells {} / {}",
        matched.matches.len(),
        px.gate.active_cells(),
        py.gate.active_cells()
    );
    emit(out, &matched.matches.to_jsonl(px.pyramid.f1.grid_w))?;
    Ok(())
}

fn cmd_eval(cli: &Cli, manifest: &Path, pipe: &PipelineArgs, out: &Path) -> CmdResult {
    let m = eval::Manifest::load(manifest).with_context(|| format!("manifest {}", manifest.display()))?;
    let pipeline = pipe.pipeline(cli.strict)?;
    let clock = if cli.strict { Clock::Zero } else { Clock::Wall };
    let report = eval::run_manifest(&m, &pipeline, clock)?;
    report.write(out)?;
    for c in &report.conditions {
        info!(
            "scale {} wb {}: mean TPR {:.4}, pooled {:.4}, {} pairs ({} failed), {:.1} ms",
            c.scale, c.wb, c.mean_tpr, c.pooled_tpr, c.pairs, c.failed, c.mean_time_ms
        );
    }
    Ok(())
}

fn cmd_simulate(cli: &Cli, path: &Path, pipe: &PipelineArgs, out: &Path) -> CmdResult {
    let scenario = Scenario::load(path).with_context(|| format!("scenario {}", path.display()))?;
    let pipeline = match scenario.registrar {
        RegistrarKind::Oracle => None,
        RegistrarKind::Pipeline => Some(pipe.pipeline(cli.strict)?),
    };
    let report = tracksim::run_scenario(&scenario, pipeline.as_ref())
        .with_context(|| format!("scenario {}", path.display()))?;
    emit(Some(out), &report.to_csv())?;
    let summary = report.summary_json();
    emit(Some(&out.with_extension("json")), &summary)?;
    emit(None, &summary)?;
    Ok(())
}

fn cmd_weights(action: &WeightsCommand) -> CmdResult {
    let spec = NetworkSpec::default();
    match action {
        WeightsCommand::Init { seed, out } => {
            save_weights(&init_weights_seeded(&spec, *seed), out)
                .with_context(|| format!("writing {}", out.display()))?;
        }
        WeightsCommand::Info { path } => {
            let w = load_weights(path, &spec).with_context(|| format!("weight file {}", path.display()))?;
            let checksum = match &w.provenance {
                Provenance::File { checksum, .. } => Some(*checksum),
                Provenance::Seeded { .. } => None,
            };
            let layers: Vec<_> = w.layers.iter().map(|l| [l.out_ch, l.in_ch, 3, 3]).collect();
            let value = serde_json::json!({
                "layers": layers,
                "norm": w.norm.map(|n| serde_json::json!({"mean": n.mean, "scale": n.scale})),
                "crc32": checksum,
            });
            emit(None, &(serde_json::to_string_pretty(&value).expect("plain data") + "\n"))?;
        }
    }
    Ok(())
}

fn parse_size(s: &str) -> anyhow::Result<(usize, usize)> {
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| anyhow!("invalid --size {s:?}"));
    let (w, h) = match s.split_once('x') {
        Some((w, h)) => (parse(w)?, parse(h)?),
        None => {
            let n = parse(s)?;
            (n, n)
        }
    };
    if w == 0 || h == 0 {
        bail!("invalid --size {s:?}");
    }
    Ok((w, h))
}

fn cmd_texture(cli: &Cli, size: &str, seed: Option<u64>, out: &Path) -> CmdResult {
    let (w, h) = parse_size(size)?;
    let seed = match seed {
        Some(s) => s,
        None if cli.strict => return Err(anyhow!("--strict requires --seed").into()),
        None => {
            warn!("no --seed given, using 0");
            0
        }
    };
    let img = natural_texture(w, h, seed)?;
    save_image(&img, out).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn run(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Register {
            ix,
            iy,
            pipe,
            out,
            overlay,
            matches,
        } => cmd_register(cli, ix, iy, pipe, out.as_deref(), overlay.as_deref(), matches.as_deref()),
        Command::MatchDebug { ix, iy, pipe, out, dump } => {
            cmd_match_debug(cli, ix, iy, pipe, out.as_deref(), dump.as_deref())
        }
        Command::Eval { manifest, pipe, out } => cmd_eval(cli, manifest, pipe, out),
        Command::Simulate { scenario, pipe, out } => cmd_simulate(cli, scenario, pipe, out),
        Command::Weights { action } => cmd_weights(action),
        Command::Texture { size, seed, out } => cmd_texture(cli, size, *seed, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Warn,
        (false, 1) => log::LevelFilter::Info,
        (false, _) => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .target(env_logger::Target::Stderr)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Registration(f)) => {
            eprintln!("error: {f}");
            ExitCode::from(2)
        }
    }
}
