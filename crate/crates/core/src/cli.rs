//! Command-line front end. Every command is deterministic given its inputs
//! and seed, and writes plain JSON, JSON-lines or CSV.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, mean_ap, Frame};
use crate::head::{detections_from_jsonl, detections_to_jsonl};
use crate::model::Pipeline;
use crate::resolution::{density_table, scaled_grid};
use crate::streaming::{compare_streaming_vs_full, LatencyModel, COMPARE_COLUMNS};
use crate::synth::{generate, Scene};
use crate::train::{evaluate_loss, samples_for, train, Checkpoint, TrainContext, TRACE_COLUMNS};
use crate::view::GridView;
use crate::voxelize::GridSpec;

#[derive(Debug, Parser)]
#[command(name = "polarbev", version, about = "Polar BEV LiDAR detection toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic scenes into the `--out` directory.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train on scene files (or directories of them); `--out` is the
    /// checkpoint directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        no_grr: bool,
        #[arg(long)]
        no_ga: bool,
        #[arg(required = true)]
        scenes: Vec<PathBuf>,
    },
    /// Full-sweep inference; writes detections as JSON lines.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        scene: PathBuf,
    },
    /// Streaming versus full-sweep table.
    Stream {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// Sector counts, e.g. `1,2,4,8`.
        #[arg(long, value_delimiter = ',')]
        sectors: Option<Vec<usize>>,
        #[arg(long)]
        latency_model: Option<PathBuf>,
        scene: PathBuf,
    },
    /// Occupancy statistics (and AP with `--ckpt`) across voxel scales.
    Resolution {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Scale factors, e.g. `1,2,3,4,5`.
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<usize>>,
        #[arg(required = true)]
        scenes: Vec<PathBuf>,
    },
    /// Metrics for detection files against scenes, paired in order.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long = "dets", required = true)]
        dets: Vec<PathBuf>,
        #[arg(long = "scene", required = true)]
        scenes: Vec<PathBuf>,
    },
    /// Trains and evaluates the component ablation rows.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Only rows without the re-alignment stack.
        #[arg(long)]
        no_grr: bool,
        /// Only rows without the geometry-aware module.
        #[arg(long)]
        no_ga: bool,
        #[arg(required = true)]
        scenes: Vec<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    match &common.config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// CSV text with a leading `# config_hash=…, seed=…` line.
pub fn csv_table<R: serde::Serialize>(hash: &str, seed: u64, header: &[&str], rows: &[R]) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    let body = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv");
    format!("# config_hash={hash}, seed={seed}\n{body}")
}

/// Scene files named on the command line; directories contribute their
/// `*.json` files in name order.
pub fn scene_paths(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "json"))
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(Error::config("no scene files given"));
    }
    Ok(out)
}

fn load_scenes(inputs: &[PathBuf]) -> Result<Vec<Scene>> {
    scene_paths(inputs)?.iter().map(|p| Scene::load(p)).collect()
}

fn load_pipeline(ckpt: &Path) -> Result<(Checkpoint, Pipeline)> {
    let ck = Checkpoint::load(ckpt)?;
    let c = &ck.config;
    let p = Pipeline::new(c.grid_spec()?, c.model, ck.params.clone(), c.decode)?;
    Ok((ck, p))
}

pub fn scene_file_name(seed: u64) -> String {
    format!("scene_{seed:06}.json")
}

pub fn cmd_synth(common: &Common) -> Result<Vec<PathBuf>> {
    let cfg = load_config(common)?;
    let seed = common.seed.unwrap_or(0);
    std::fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
    (0..cfg.synth.n_scenes as u64)
        .map(|k| {
            let s = seed + k;
            let path = common.out.join(scene_file_name(s));
            generate(&cfg.synth.scene, s)?.save(&path)?;
            Ok(path)
        })
        .collect()
}

fn train_config(common: &Common, no_grr: bool, no_ga: bool) -> Result<RunConfig> {
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    cfg.model.use_grr &= !no_grr;
    cfg.model.use_ga &= !no_ga;
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(common: &Common, no_grr: bool, no_ga: bool, scenes: &[PathBuf]) -> Result<()> {
    let cfg = train_config(common, no_grr, no_ga)?;
    let scenes = load_scenes(scenes)?;
    let (ck, trace) = train(&samples_for(&scenes, &cfg)?, &cfg)?;
    ck.save(&common.out)?;
    write(&common.out.join("trace.csv"), &csv_table(&cfg.hash(), cfg.train.seed, &TRACE_COLUMNS, &trace))
}

pub fn cmd_infer(common: &Common, ckpt: &Path, scene: &Path) -> Result<()> {
    let (_, p) = load_pipeline(ckpt)?;
    let scene = Scene::load(scene)?;
    write(&common.out, &detections_to_jsonl(&p.detect(&scene.cloud)))
}

pub fn cmd_stream(common: &Common, ckpt: &Path, sectors: Option<&[usize]>, latency: Option<&Path>, scene: &Path) -> Result<()> {
    let (ck, p) = load_pipeline(ckpt)?;
    let cfg = &ck.config;
    let model = match latency {
        Some(path) => LatencyModel::load(path)?,
        None => cfg.stream.latency,
    };
    let n_list = sectors.map_or_else(|| cfg.stream.n_sectors.clone(), <[usize]>::to_vec);
    let scene = Scene::load(scene)?;
    let rows = compare_streaming_vs_full(&scene, &n_list, &p, &model, cfg.eval.level()?)?;
    let seed = common.seed.unwrap_or(cfg.train.seed);
    write(&common.out, &csv_table(&cfg.hash(), seed, &COMPARE_COLUMNS, &rows))
}

pub const RESOLUTION_COLUMNS: [&str; 10] = [
    "scale",
    "radial_bins",
    "azimuth_bins",
    "cart_cell_m",
    "polar_cov",
    "cart_cov",
    "polar_loss",
    "cart_loss",
    "ap",
    "aph",
];

#[derive(serde::Serialize)]
struct ResolutionRecord {
    scale: usize,
    radial_bins: usize,
    azimuth_bins: usize,
    cart_cell_m: f64,
    polar_cov: f64,
    cart_cov: f64,
    polar_loss: f64,
    cart_loss: f64,
    ap: Option<f64>,
    aph: Option<f64>,
}

/// Azimuth bin multiple that keeps every coarse map window-aligned.
pub fn azimuth_multiple(cfg: &RunConfig) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    let (a, b) = (cfg.model.grr.w_a.max(1), cfg.model.ga.w_g.max(1));
    cfg.grid.downsample * (a / gcd(a, b) * b)
}

pub fn cmd_resolution(common: &Common, ckpt: Option<&Path>, scales: Option<&[usize]>, scenes: &[PathBuf]) -> Result<()> {
    let ck = ckpt.map(Checkpoint::load).transpose()?;
    let cfg = match &ck {
        Some(c) => c.config.clone(),
        None => load_config(common)?,
    };
    let scales = scales.map_or_else(|| cfg.resolution.scales.clone(), <[usize]>::to_vec);
    if scales.iter().any(|&s| s == 0) {
        return Err(Error::config("scales must be positive"));
    }
    let scenes = load_scenes(scenes)?;
    let clouds: Vec<_> = scenes.iter().map(|s| s.cloud.clone()).collect();
    let mult = azimuth_multiple(&cfg);
    let density = density_table(&clouds, &cfg.grid, &scales, mult, cfg.resolution.capacity)?;
    let mut rows = Vec::with_capacity(density.len());
    for d in density {
        let (ap, aph) = match &ck {
            Some(c) => {
                let grid = GridSpec::new(scaled_grid(&cfg.grid, d.scale, mult)?)?;
                let p = Pipeline::new(grid, cfg.model, c.params.clone(), cfg.decode)?;
                let frames: Vec<Frame> = scenes.iter().map(|s| Frame::from_scene(s, p.detect(&s.cloud))).collect();
                let m = mean_ap(&evaluate(&frames, cfg.model.n_classes, cfg.eval.level()?));
                (Some(m.ap), Some(m.aph))
            }
            None => (None, None),
        };
        rows.push(ResolutionRecord {
            scale: d.scale,
            radial_bins: d.radial_bins,
            azimuth_bins: d.azimuth_bins,
            cart_cell_m: d.cart_cell_m,
            polar_cov: d.polar_cov,
            cart_cov: d.cart_cov,
            polar_loss: d.polar_loss,
            cart_loss: d.cart_loss,
            ap,
            aph,
        });
    }
    let seed = common.seed.unwrap_or(cfg.train.seed);
    write(&common.out, &csv_table(&cfg.hash(), seed, &RESOLUTION_COLUMNS, &rows))
}

pub fn cmd_eval(common: &Common, dets: &[PathBuf], scenes: &[PathBuf]) -> Result<()> {
    let cfg = load_config(common)?;
    if dets.len() != scenes.len() {
        return Err(Error::config(format!("{} detection files for {} scenes", dets.len(), scenes.len())));
    }
    let mut frames = Vec::with_capacity(scenes.len());
    for (d, s) in dets.iter().zip(scenes) {
        let text = std::fs::read_to_string(d).map_err(|e| Error::io(d, e))?;
        let det = detections_from_jsonl(&text).map_err(|e| Error::json(d, e))?;
        frames.push(Frame::from_scene(&Scene::load(s)?, det));
    }
    let m = evaluate(&frames, cfg.model.n_classes, cfg.eval.level()?);
    write(&common.out, &(serde_json::to_string_pretty(&m).expect("metrics serialize") + "\n"))
}

pub const ABLATE_COLUMNS: [&str; 6] = ["use_grr", "use_ga", "initial_loss", "final_loss", "ap", "aph"];

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct AblationRow {
    pub use_grr: bool,
    pub use_ga: bool,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub ap: f64,
    pub aph: f64,
}

/// Rows: neither component, re-alignment only, geometry-aware only, both;
/// `no_grr` / `no_ga` drop the rows that use the component.
pub fn ablate(base: &RunConfig, no_grr: bool, no_ga: bool, scenes: &[Scene]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (g, a) in [(false, false), (true, false), (false, true), (true, true)] {
        if (g && no_grr) || (a && no_ga) {
            continue;
        }
        let mut cfg = base.clone();
        cfg.model.use_grr = g;
        cfg.model.use_ga = a;
        cfg.validate()?;
        let samples = samples_for(scenes, &cfg)?;
        let (ck, trace) = train(&samples, &cfg)?;
        let spec = cfg.grid_spec()?;
        let view = GridView::full(&spec);
        let ctx = TrainContext { view: &view, model: &cfg.model, loss: &cfg.loss, train: &cfg.train };
        let final_loss = samples.iter().map(|s| evaluate_loss(&ck.params, s, &ctx).total).sum::<f64>() / samples.len() as f64;
        let p = Pipeline::new(spec, cfg.model, ck.params, cfg.decode)?;
        let frames: Vec<Frame> = scenes.iter().map(|s| Frame::from_scene(s, p.detect(&s.cloud))).collect();
        let m = mean_ap(&evaluate(&frames, cfg.model.n_classes, cfg.eval.level()?));
        rows.push(AblationRow { use_grr: g, use_ga: a, initial_loss: trace[0].total, final_loss, ap: m.ap, aph: m.aph });
    }
    Ok(rows)
}

pub fn cmd_ablate(common: &Common, no_grr: bool, no_ga: bool, scenes: &[PathBuf]) -> Result<()> {
    let cfg = train_config(common, false, false)?;
    let rows = ablate(&cfg, no_grr, no_ga, &load_scenes(scenes)?)?;
    write(&common.out, &csv_table(&cfg.hash(), cfg.train.seed, &ABLATE_COLUMNS, &rows))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common } => cmd_synth(&common).map(|_| ()),
        Command::Train { common, no_grr, no_ga, scenes } => cmd_train(&common, no_grr, no_ga, &scenes),
        Command::Infer { common, ckpt, scene } => cmd_infer(&common, &ckpt, &scene),
        Command::Stream { common, ckpt, sectors, latency_model, scene } => {
            cmd_stream(&common, &ckpt, sectors.as_deref(), latency_model.as_deref(), &scene)
        }
        Command::Resolution { common, ckpt, scales, scenes } => cmd_resolution(&common, ckpt.as_deref(), scales.as_deref(), &scenes),
        Command::Eval { common, dets, scenes } => cmd_eval(&common, &dets, &scenes),
        Command::Ablate { common, no_grr, no_ga, scenes } => cmd_ablate(&common, no_grr, no_ga, &scenes),
    }
}
