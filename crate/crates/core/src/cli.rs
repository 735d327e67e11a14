//! Command-line front end.
//!
//! Exit codes: 0 success, 2 usage, 3 configuration, 4 input data or I/O,
//! 5 runtime failure (for example a diverged training run).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{ConfigError, PipelineConfig};
use crate::coords::{rasterize_heatmap, CoordError, PickSet};
use crate::metric::{evaluate, MetricError};
use crate::net::{read_checkpoint, write_checkpoint, NetError};
use crate::postproc::{extract_picks, PostprocError};
use crate::synth::{generate_tomogram, SynthError};
use crate::tiler::{
    aggregate, ensemble, AggregateOptions, BlendMask, HeatmapCropPredictor, NetPredictor,
    TileError, TileGeometry, WindowPlan,
};
use crate::train::{sample_windows, standardize, train_with, TrainError};
use crate::volgrid::{
    read_heatmap, read_volume, write_heatmap, write_volume, Heatmap, Volume3D, VolumeError,
};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_DATA: i32 = 4;
pub const EXIT_RUNTIME: i32 = 5;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<VolumeError> for CliError {
    fn from(e: VolumeError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CoordError> for CliError {
    fn from(e: CoordError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<PostprocError> for CliError {
    fn from(e: PostprocError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Checkpoint(_) | NetError::Io(_) | NetError::Volume(_) => {
                CliError::Data(e.to_string())
            }
            NetError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<TileError> for CliError {
    fn from(e: TileError) -> Self {
        match e {
            TileError::Net(n) => n.into(),
            TileError::Pool(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::Volume(_) | TrainError::EmptyDataset => CliError::Data(e.to_string()),
            TrainError::Net(n) => n.into(),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "tomopick",
    version,
    about = "Heatmap particle picking for cryo-ET tomograms"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Pipeline config file (`section.key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for scene generation, or for initialization and shuffling when training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, env = "TOMOPICK_THREADS", default_value_t = 0)]
    workers: usize,
    /// Index of the first voxel center: 1.0 or 0.5.
    #[arg(long, global = true)]
    offset: Option<f64>,
    /// Tent weight at window borders, in [0, 1).
    #[arg(long, global = true)]
    edge_floor: Option<f64>,
    /// XY stride of the sliding window.
    #[arg(long, global = true)]
    xy_stride: Option<usize>,
    /// Average overlapping windows without tent weights.
    #[arg(long, global = true)]
    no_blend_weight: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic tomogram and its ground-truth picks.
    Gen {
        #[arg(long)]
        out_volume: PathBuf,
        #[arg(long)]
        out_picks: PathBuf,
        /// Override the scene size as `z,y,x`.
        #[arg(long, value_parser = parse_dims)]
        dims: Option<[usize; 3]>,
    },
    /// Render picks into a per-class Gaussian target heatmap.
    Rasterize {
        #[arg(long)]
        picks: PathBuf,
        /// Take the grid size and spacing from this volume.
        #[arg(long, conflicts_with = "dims", required_unless_present = "dims")]
        volume: Option<PathBuf>,
        /// Grid size as `z,y,x`.
        #[arg(long, value_parser = parse_dims)]
        dims: Option<[usize; 3]>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network on a directory of `NAME.vol` / `NAME.csv` pairs.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write `epoch,lr,loss` rows here.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Sliding-window inference, averaging over every checkpoint given.
    Infer {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long = "checkpoint", required_unless_present = "oracle")]
        checkpoints: Vec<PathBuf>,
        /// Tile this heatmap instead of running a network.
        #[arg(long, conflicts_with = "checkpoints")]
        oracle: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Non-maximum suppression and thresholding of a heatmap into picks.
    Pick {
        #[arg(long)]
        heatmap: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// NMS window edge; odd.
        #[arg(long)]
        kernel: Option<usize>,
    },
    /// Score predicted picks against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the sliding-window plan for a volume.
    Plan {
        #[arg(long, conflicts_with = "dims", required_unless_present = "dims")]
        volume: Option<PathBuf>,
        /// Volume size as `z,y,x`.
        #[arg(long, value_parser = parse_dims)]
        dims: Option<[usize; 3]>,
        /// Window depth; defaults to the configured one.
        #[arg(long)]
        depth: Option<usize>,
    },
    /// Print the effective configuration.
    Config,
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| e.to_string()))
        .collect::<std::result::Result<_, _>>()?;
    let dims: [usize; 3] = parts
        .try_into()
        .map_err(|_| "expected three comma-separated sizes `z,y,x`".to_string())?;
    if dims.contains(&0) {
        return Err("sizes must be positive".into());
    }
    Ok(dims)
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    let workers = cli.global.workers;
    if workers == 0 {
        return dispatch(cli, cfg);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    pool.install(|| dispatch(cli, cfg))
}

fn load_config(g: &GlobalArgs) -> Result<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(o) = g.offset {
        cfg.offset = o;
    }
    if let Some(e) = g.edge_floor {
        cfg.tiling.edge_floor = e;
    }
    if let Some(s) = g.xy_stride {
        cfg.tiling.xy_stride = s;
    }
    if g.no_blend_weight {
        cfg.tiling.blend = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: Cli, mut cfg: PipelineConfig) -> Result<()> {
    let seed = cli.global.seed;
    match cli.command {
        Command::Gen {
            out_volume,
            out_picks,
            dims,
        } => {
            if let Some(d) = dims {
                cfg.scene.dims = d;
            }
            let (vol, picks) = generate_tomogram(&cfg.scene_spec(seed.unwrap_or(0)))?;
            write_volume(&vol, &out_volume)?;
            fs::write(&out_picks, picks.to_text(&cfg.classes))?;
            emit(&format!(
                "generated {} picks in a {:?} volume\n",
                picks.len(),
                vol.dims()
            ));
        }
        Command::Rasterize {
            picks,
            volume,
            dims,
            out,
        } => {
            let picks = read_picks(&picks, &cfg)?;
            let (dims, spacing) = match (volume, dims) {
                (Some(path), _) => {
                    let v = read_volume(path)?;
                    (v.dims(), v.spacing())
                }
                (None, Some(d)) => (d, cfg.spacing as f32),
                (None, None) => {
                    return Err(CliError::Usage("--volume or --dims is required".into()))
                }
            };
            let mut raster = rasterize_heatmap(&picks, &cfg.classes, dims, cfg.conv())?;
            raster.heatmap = Heatmap::new(
                raster.heatmap.classes(),
                dims,
                raster.heatmap.values().to_vec(),
                spacing,
            )?;
            write_heatmap(&raster.heatmap, &out)?;
            if raster.skipped > 0 {
                eprintln!("warning: {} picks fell outside the volume", raster.skipped);
            }
        }
        Command::Train { data, out, log } => {
            if let Some(s) = seed {
                cfg.model.seed = s;
                cfg.train.optim.seed = s;
            }
            run_train(&cfg, &data, &out, log.as_deref())?;
        }
        Command::Infer {
            volume,
            checkpoints,
            oracle,
            out,
        } => {
            let vol = read_volume(&volume)?;
            let hm = match oracle {
                Some(path) => infer_oracle(&cfg, &vol, &read_heatmap(path)?)?,
                None => infer_nets(&cfg, &vol, &checkpoints)?,
            };
            write_heatmap(&hm, &out)?;
        }
        Command::Pick {
            heatmap,
            out,
            kernel,
        } => {
            let hm = read_heatmap(&heatmap)?;
            let picks = extract_picks(
                &hm,
                &cfg.classes,
                kernel.unwrap_or(cfg.nms_kernel),
                cfg.conv(),
            )?;
            fs::write(&out, picks.to_text(&cfg.classes))?;
            emit(&format!("{} picks\n", picks.len()));
        }
        Command::Eval { pred, truth, out } => {
            let pred = read_picks(&pred, &cfg)?;
            let truth = read_picks(&truth, &cfg)?;
            let report = evaluate(&pred, &truth, &cfg.classes, cfg.eval)?.to_text();
            emit(&report);
            if let Some(path) = out {
                fs::write(path, &report)?;
            }
        }
        Command::Plan {
            volume,
            dims,
            depth,
        } => {
            let dims = match (volume, dims) {
                (Some(path), _) => read_volume(path)?.dims(),
                (None, Some(d)) => d,
                (None, None) => {
                    return Err(CliError::Usage("--volume or --dims is required".into()))
                }
            };
            let geometry = cfg.tiling.geometry(
                depth.unwrap_or(cfg.tiling.window_depth),
                cfg.tiling.window_hw,
            );
            emit(&WindowPlan::new(dims, geometry)?.to_string());
        }
        Command::Config => emit(&cfg.to_text()),
    }
    Ok(())
}

/// Writes to stdout, treating a closed pipe as success.
fn emit(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn read_picks(path: &Path, cfg: &PipelineConfig) -> Result<PickSet> {
    let text = fs::read_to_string(path)?;
    PickSet::from_text(&text, &cfg.classes)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn blend_mask(cfg: &PipelineConfig, plan: &WindowPlan) -> Result<BlendMask> {
    if cfg.tiling.blend {
        Ok(BlendMask::tent(plan.window(), cfg.tiling.edge_floor)?)
    } else {
        Ok(BlendMask::uniform(plan.window()))
    }
}

fn infer_oracle(cfg: &PipelineConfig, vol: &Volume3D, target: &Heatmap) -> Result<Heatmap> {
    if target.dims() != vol.dims() {
        return Err(CliError::Data(format!(
            "oracle heatmap dims {:?} differ from volume dims {:?}",
            target.dims(),
            vol.dims()
        )));
    }
    let plan = WindowPlan::new(vol.dims(), cfg.tiling.default_geometry())?;
    let mask = blend_mask(cfg, &plan)?;
    let predictor = HeatmapCropPredictor::new(target, &plan)?;
    Ok(aggregate(
        &predictor,
        vol,
        &plan,
        &mask,
        AggregateOptions::default(),
    )?)
}

fn infer_nets(cfg: &PipelineConfig, vol: &Volume3D, checkpoints: &[PathBuf]) -> Result<Heatmap> {
    let input = standardize(vol);
    let mut maps = Vec::with_capacity(checkpoints.len());
    for path in checkpoints {
        let net = read_checkpoint(path)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let nc = net.config().clone();
        if nc.class_count != cfg.classes.len() {
            return Err(CliError::Config(format!(
                "{} predicts {} classes but the config lists {}",
                path.display(),
                nc.class_count,
                cfg.classes.len()
            )));
        }
        let geometry: TileGeometry = cfg.tiling.geometry(nc.in_depth, nc.window_hw);
        let plan = WindowPlan::new(vol.dims(), geometry)?;
        let mask = blend_mask(cfg, &plan)?;
        let predictor = NetPredictor::new(net);
        maps.push(aggregate(
            &predictor,
            &input,
            &plan,
            &mask,
            AggregateOptions::default(),
        )?);
    }
    Ok(ensemble(&maps)?)
}

/// Volume/pick pairs in `dir`, sorted by file name.
fn training_pairs(dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let mut pairs = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "vol") {
            let picks = path.with_extension("csv");
            if !picks.exists() {
                return Err(CliError::Data(format!(
                    "{} has no matching .csv",
                    path.display()
                )));
            }
            pairs.push((path, picks));
        }
    }
    pairs.sort();
    if pairs.is_empty() {
        return Err(CliError::Data(format!(
            "no .vol files in {}",
            dir.display()
        )));
    }
    Ok(pairs)
}

fn run_train(cfg: &PipelineConfig, dir: &Path, out: &Path, log: Option<&Path>) -> Result<()> {
    let net_cfg = cfg.net_config();
    let window = [net_cfg.in_depth, net_cfg.window_hw, net_cfg.window_hw];
    let mut samples = Vec::new();
    for (i, (vol_path, pick_path)) in training_pairs(dir)?.iter().enumerate() {
        let vol = read_volume(vol_path)?;
        let picks = read_picks(pick_path, cfg)?;
        let target = rasterize_heatmap(&picks, &cfg.classes, vol.dims(), cfg.conv())?.heatmap;
        samples.extend(sample_windows(
            &standardize(&vol),
            &target,
            &picks,
            cfg.conv(),
            window,
            cfg.train.windows_per_scene,
            cfg.train.positive_fraction,
            cfg.train.optim.seed.wrapping_add(i as u64),
        )?);
    }
    let net = crate::net::Net::new(net_cfg)?;
    let mut rows = String::from("epoch,lr,loss\n");
    let outcome = train_with(&samples, net, &cfg.train.optim, |r| {
        eprintln!("epoch {} lr {:.3e} loss {:.6}", r.epoch, r.lr, r.mean_loss);
        rows.push_str(&format!("{},{},{}\n", r.epoch, r.lr, r.mean_loss));
    })?;
    if let Some(path) = log {
        fs::write(path, rows)?;
    }
    let weights = if cfg.train.save_ema {
        &outcome.ema
    } else {
        &outcome.net
    };
    write_checkpoint(out, weights)?;
    emit(&format!(
        "trained on {} windows: loss {:.6} -> {:.6}\n",
        samples.len(),
        outcome.initial_loss,
        outcome.final_loss
    ));
    Ok(())
}
