//! Command-line front end: `synth`, `encode`, `cfar`, `augment`, `train`,
//! `eval` and `render`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::augment::{apply_weather, ImageRgb, WeatherKind, WeatherParams};
use crate::detect::{DetectConfig, DetectionSet, LossParams};
use crate::error::{Error, Result};
use crate::evalkit::{detect_frame, render_bev, run_eval, EvalMode};
use crate::geometry::CalibrationSet;
use crate::nnet::TrainConfig;
use crate::radar_io::{cfar_detect, parse_intensity_map, parse_point_cloud, CfarConfig};
use crate::spg::{assemble_spg, GridSpec, NormConfig, Palette, SemanticMask, SemanticSource};
use crate::synthgen::{generate_dataset, Dataset, SceneConfig};
use crate::train::{loss_log_csv, prepare_training_set, train_detector, Detector, TrainOptions};

pub const SEED_ENV: &str = "SPG_FUSE_SEED";

/// Settings file (TOML or JSON). Every section is optional; flags override it.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub grid: Option<GridSpec>,
    pub scene: Option<SceneConfig>,
    pub cfar: CfarConfig,
    pub train: TrainConfig,
    pub loss: LossParams,
    pub detect: DetectConfig,
    pub norm: Option<NormConfig>,
    pub weather: Option<WeatherFile>,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub modes: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeatherFile {
    pub fog: crate::augment::FogParams,
    pub rain: crate::augment::RainParams,
    pub snow: crate::augment::SnowParams,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Parser, Debug)]
#[command(name = "spg-fuse", version, about = "Radar-camera BEV fusion toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Seed for all randomness [default: $SPG_FUSE_SEED, then config, then 0]
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Settings file (TOML, or JSON by extension); flags take precedence
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for frame-parallel work [default: 1]
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes
        #[arg(long, default_value_t = 32)]
        frames: usize,
        /// Square grid at 0.625 m per cell [default: 128x128 over 80 m x 80 m]
        #[arg(long)]
        grid_cells: Option<usize>,
        /// Label-flip probability for degraded masks
        #[arg(long)]
        semantic_noise: Option<f64>,
    },
    /// Encode one frame into an SPG1 tensor file
    Encode {
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        /// Semantic mask (8-bit PGM); omit for radar-only encoding
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Palette JSON [default: built-in 19-class grouping]
        #[arg(long)]
        palette: Option<PathBuf>,
        /// Take the grid from this dataset manifest
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Skip channel normalization
        #[arg(long)]
        raw: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run 2D CA-CFAR on a 16-bit intensity map
    Cfar {
        /// 16-bit PGM intensity map
        #[arg(long)]
        map: PathBuf,
        /// Map metadata JSON
        #[arg(long)]
        meta: PathBuf,
        /// Calibration JSON supplying the point height
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long)]
        train_cells: Option<usize>,
        #[arg(long)]
        guard_cells: Option<usize>,
        #[arg(long)]
        pfa: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply seeded fog, rain or snow to a PPM image
    Augment {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        weather: WeatherKind,
        #[arg(long)]
        density: Option<f64>,
        #[arg(long, value_delimiter = ',', num_args = 2)]
        drop_size: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', num_args = 2)]
        flake_size: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', num_args = 2)]
        speed: Option<Vec<f64>>,
    },
    /// Train a detector on a dataset
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Checkpoint output (RSN1)
        #[arg(long)]
        out: PathBuf,
        /// Loss log CSV output
        #[arg(long)]
        log: Option<PathBuf>,
        /// Frame index range `a..b` [default: all]
        #[arg(long)]
        frames: Option<String>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Leave the semantic channels empty
        #[arg(long)]
        radar_only: bool,
    },
    /// Evaluate a checkpoint and write a JSON report
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated modes: clear, weather:<fog|rain|snow>,
        /// corrupt-semantics, radar-only, corrupt-radar
        #[arg(long, value_delimiter = ',')]
        mode: Vec<String>,
        #[arg(long)]
        frames: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw a bird's-eye-view figure of a frame with boxes
    Render {
        #[arg(long)]
        manifest: PathBuf,
        /// Frame index
        #[arg(long)]
        frame: usize,
        /// Detections JSON to overlay
        #[arg(long)]
        detections: Option<PathBuf>,
        /// Checkpoint used to compute detections when none are given
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        scale: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Attaches the file name to content errors.
fn in_file<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io { .. } => e,
        Error::Parse { line, msg } => Error::Parse {
            line,
            msg: format!("{}: {msg}", path.display()),
        },
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => Error::Validation(format!("{}: {other}", path.display())),
    })
}

fn parse_range(s: Option<&str>, len: usize) -> Result<Vec<usize>> {
    let Some(s) = s else {
        return Ok((0..len).collect());
    };
    let bad = || Error::Config(format!("frame range '{s}' must look like a..b"));
    let (a, b) = s.split_once("..").ok_or_else(bad)?;
    let a: usize = if a.is_empty() { 0 } else { a.parse().map_err(|_| bad())? };
    let b: usize = if b.is_empty() { len } else { b.parse().map_err(|_| bad())? };
    if a >= b || b > len {
        return Err(Error::Config(format!("frame range {a}..{b} is empty or exceeds {len} frames")));
    }
    Ok((a..b).collect())
}

fn resolve_seed(flag: Option<u64>, cfg: &RunConfig) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Ok(v) = std::env::var(SEED_ENV) {
        return v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}='{v}' is not an unsigned integer")));
    }
    Ok(cfg.seed.unwrap_or(0))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seed = resolve_seed(cli.common.seed, &cfg)?;
    let jobs = cli.common.jobs.or(cfg.jobs).unwrap_or(1).max(1);
    match cli.cmd {
        Command::Synth {
            out,
            frames,
            grid_cells,
            semantic_noise,
        } => {
            let grid = match grid_cells {
                Some(n) => GridSpec::square(n),
                None => cfg.grid.clone().unwrap_or_default(),
            };
            let mut scene = cfg.scene.clone().unwrap_or_else(|| SceneConfig::for_grid(&grid));
            scene.seed = seed;
            if let Some(r) = semantic_noise {
                scene.semantic_noise = r;
            }
            let ds = generate_dataset(&scene, &grid, frames, jobs)?;
            ds.write(&out)?;
            println!("wrote {frames} frames to {}", out.display());
        }
        Command::Encode {
            points,
            calib,
            mask,
            palette,
            manifest,
            raw,
            out,
        } => {
            let cloud = in_file(&points, parse_point_cloud(&read(&points)?))?;
            let calib_set = in_file(&calib, CalibrationSet::from_json(&read(&calib)?))?;
            let palette = match palette {
                Some(p) => in_file(&p, Palette::from_json(&read(&p)?))?,
                None => Palette::default(),
            };
            let mask = match mask {
                Some(m) => Some(in_file(&m, SemanticMask::from_pgm(&read(&m)?, palette))?),
                None => None,
            };
            let grid = match manifest {
                Some(m) => Dataset::load(&m)?.grid,
                None => cfg.grid.clone().unwrap_or_default(),
            };
            let norm = if raw {
                NormConfig::identity()
            } else {
                cfg.norm.clone().unwrap_or_else(|| NormConfig::for_grid(&grid))
            };
            let sem = mask.as_ref().map(|m| m as &dyn SemanticSource);
            let t = assemble_spg(&cloud, sem, &calib_set, &grid, &norm)?;
            write(&out, &t.to_bytes())?;
        }
        Command::Cfar {
            map,
            meta,
            calib,
            train_cells,
            guard_cells,
            pfa,
            out,
        } => {
            let m = in_file(&map, parse_intensity_map(&read(&map)?, &read(&meta)?))?;
            let mut c = cfg.cfar;
            c.train_cells = train_cells.unwrap_or(c.train_cells);
            c.guard_cells = guard_cells.unwrap_or(c.guard_cells);
            c.pfa = pfa.unwrap_or(c.pfa);
            let calib_set = match calib {
                Some(p) => in_file(&p, CalibrationSet::from_json(&read(&p)?))?,
                None => crate::synthgen::default_calibration(),
            };
            let cloud = cfar_detect(&m, &c, &calib_set)?;
            write(&out, &cloud.to_csv())?;
            println!("{} detections", cloud.len());
        }
        Command::Augment {
            input,
            output,
            weather,
            density,
            drop_size,
            flake_size,
            speed,
        } => {
            let img = in_file(&input, ImageRgb::parse(&read(&input)?))?;
            let mut p = WeatherParams::new(weather, seed);
            if let Some(w) = &cfg.weather {
                p.fog = w.fog.clone();
                p.rain = w.rain.clone();
                p.snow = w.snow.clone();
            }
            let pair = |v: Vec<f64>| [v[0], v[1]];
            if let Some(d) = density {
                p.fog.density = d;
            }
            if let Some(v) = drop_size {
                p.rain.drop_size = pair(v);
            }
            if let Some(v) = flake_size {
                p.snow.flake_size = pair(v);
            }
            if let Some(v) = speed {
                p.snow.speed = pair(v);
            }
            write(&output, &apply_weather(&img, &p)?.to_bytes())?;
        }
        Command::Train {
            manifest,
            out,
            log,
            frames,
            max_steps,
            learning_rate,
            batch_size,
            radar_only,
        } => {
            let ds = Dataset::load(&manifest)?;
            let mut opts = TrainOptions {
                train: cfg.train.clone(),
                loss: cfg.loss,
                detect: cfg.detect.clone(),
                use_semantics: !radar_only,
            };
            opts.train.seed = seed;
            opts.train.max_steps = max_steps.unwrap_or(opts.train.max_steps);
            opts.train.learning_rate = learning_rate.unwrap_or(opts.train.learning_rate);
            opts.train.batch_size = batch_size.unwrap_or(opts.train.batch_size);
            let idx = parse_range(frames.as_deref(), ds.frames.len())?;
            let set = prepare_training_set(&ds, &idx, &opts, jobs)?;
            let every = (opts.train.max_steps / 20).max(1);
            let (det, records) = train_detector(&set, &opts, |r| {
                if r.step % every == 0 {
                    eprintln!("step {:>5}  loss {:.5}  focal {:.5}  smooth_l1 {:.5}", r.step, r.loss, r.focal, r.smooth_l1);
                }
            })?;
            write(&out, &det.to_checkpoint())?;
            if let Some(l) = log {
                write(&l, &loss_log_csv(&records))?;
            }
        }
        Command::Eval {
            checkpoint,
            manifest,
            mode,
            frames,
            out,
        } => {
            let det = in_file(&checkpoint, Detector::from_checkpoint(&read(&checkpoint)?))?;
            let ds = Dataset::load(&manifest)?;
            let names = if mode.is_empty() { cfg.eval.modes.clone() } else { mode };
            let modes = names.iter().map(|m| m.parse()).collect::<Result<Vec<EvalMode>>>()?;
            let idx = parse_range(frames.as_deref(), ds.frames.len())?;
            let report = run_eval(&det, &ds, &idx, &modes, seed, jobs)?;
            write(&out, &report.to_json())?;
            print!("{}", report.to_table());
        }
        Command::Render {
            manifest,
            frame,
            detections,
            checkpoint,
            scale,
            out,
        } => {
            let ds = Dataset::load(&manifest)?;
            let f = ds
                .frames
                .get(frame)
                .ok_or_else(|| Error::Config(format!("frame {frame} out of range ({} frames)", ds.frames.len())))?;
            let dets = match (detections, checkpoint) {
                (Some(d), _) => in_file(&d, DetectionSet::from_json(&read(&d)?))?,
                (None, Some(c)) => {
                    let det = in_file(&c, Detector::from_checkpoint(&read(&c)?))?;
                    detect_frame(&det, &ds, frame, EvalMode::Clear, seed)?
                }
                (None, None) => DetectionSet::default(),
            };
            write(&out, &render_bev(&ds.grid, &f.cloud, &f.labels, &dets, scale).to_bytes())?;
        }
    }
    Ok(())
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code: 0 on success, 1 on invalid input, 2 on I/O failure.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                2
            } else {
                1
            }
        }
    }
}
