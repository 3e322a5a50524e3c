//! Command-line front end: `enhance`, `gradcheck`, `partition-report`,
//! `bench` and `synth`.
//!
//! Summaries go to the supplied writer as `key=value` lines; artifacts are
//! written to the paths given on the command line.

use std::io::Write;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::graph::{build_knn, GraphError};
use crate::numerics::{Matrix, Rng};
use crate::partition::{
    encode_pillars, partition, partition_effect_report, scatter, EncoderParams, GridSpec,
    PartitionError, PillarSet, PseudoImage, RawPillar,
};
use crate::pointcloud::{
    load_kitti_bin, range_filter, synth_scene, write_kitti_bin, BevBox, Point, PointCloud,
    PointCloudError, RangeSpec, SceneBox, SceneSpec,
};
use crate::satgcn::{
    self, grad_check, layer_infer, read_checkpoint, write_checkpoint, FeStackParams,
    GradCheckOptions, GradInstance, SatGcnError,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    PointCloud(#[from] PointCloudError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    SatGcn(#[from] SatGcnError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("boxes file {path}: {msg}")]
    Boxes { path: PathBuf, msg: String },
    #[error("gradient check failed: max relative error {error:.3e} at {location}")]
    GradCheckFailed { error: f64, location: String },
}

fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "satgcn", version, about = "Spatial-attention graph convolution feature enhancement for pillar point clouds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run partition -> encode -> kNN -> FE stack -> scatter on one frame.
    Enhance(EnhanceArgs),
    /// Compare analytic gradients of a random stack with central differences.
    Gradcheck(GradcheckArgs),
    /// Measure how coarsely boxes are sliced at several cell sizes.
    PartitionReport(ReportArgs),
    /// Per-stage throughput on synthetic pillars.
    Bench(BenchArgs),
    /// Write a synthetic frame as KITTI .bin.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RangePreset {
    Car,
    Ped,
}

impl RangePreset {
    pub fn spec(self) -> RangeSpec {
        match self {
            RangePreset::Car => RangeSpec::car(),
            RangePreset::Ped => RangeSpec::pedestrian(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScenePreset {
    /// Cars, pedestrians, ground and clutter.
    Street,
    /// One car on the ground plane.
    Box,
}

impl ScenePreset {
    pub fn spec(self) -> SceneSpec {
        match self {
            ScenePreset::Street => SceneSpec::street(),
            ScenePreset::Box => SceneSpec::single_box(SceneBox::car(12.0, 2.0, 800)),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SourceArgs {
    /// KITTI velodyne .bin file.
    #[arg(long, conflicts_with = "synth")]
    pub input: Option<PathBuf>,
    /// Use the built-in synthetic street scene instead of a file.
    #[arg(long)]
    pub synth: bool,
    /// Scene used with `--synth`.
    #[arg(long, value_enum, default_value = "street")]
    pub scene: ScenePreset,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "car")]
    pub ranges: RangePreset,
    /// Square cell size in meters.
    #[arg(long, default_value_t = 0.16)]
    pub cell: f64,
}

#[derive(Debug, Clone, Args)]
pub struct EnhanceArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long, default_value_t = 9)]
    pub k: usize,
    /// Number of cascaded layers.
    #[arg(long, default_value_t = 3)]
    pub layers: usize,
    /// Pillar feature width and width of every layer.
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 32)]
    pub max_points: usize,
    #[arg(long, default_value_t = 12_000)]
    pub max_pillars: usize,
    /// Load stack parameters from a checkpoint instead of seeding them.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Write the stack parameters actually used.
    #[arg(long)]
    pub save_ckpt: Option<PathBuf>,
    /// Write one channel of the pseudo-image as binary PGM.
    #[arg(long)]
    pub emit_bev: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub channel: usize,
    /// Write all channels as little-endian f32 in H x W x C order.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub dim: usize,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Number of vertices.
    #[arg(long, default_value_t = 6)]
    pub n: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub h: f64,
    /// Inflate one analytic gradient by 1% to confirm the check notices.
    #[arg(long)]
    pub corrupt: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    /// JSON list of `{"center": [x, y], "size": [sx, sy]}`. Defaults to the
    /// synthetic scene's boxes with `--synth`.
    #[arg(long)]
    pub boxes: Option<PathBuf>,
    /// Cell sizes to sweep in addition to `--cell`.
    #[arg(long, value_delimiter = ',', default_value = "0.64,0.32,0.16,0.08")]
    pub sweep: Vec<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// Number of synthetic pillars.
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 9)]
    pub k: usize,
    #[arg(long, default_value_t = 3)]
    pub layers: usize,
    /// Timed runs per stage; the median is reported and at least 5 are taken
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "street")]
    pub scene: ScenePreset,
    /// Also write the scene's BEV boxes as JSON.
    #[arg(long)]
    pub boxes_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses `args` (program name first), runs the command and returns the exit status.
pub fn run<I, S>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(out, "{e}");
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Enhance(a) => cmd_enhance(&a, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
        Command::PartitionReport(a) => cmd_partition_report(&a, out),
        Command::Bench(a) => cmd_bench(&a, out),
        Command::Synth(a) => cmd_synth(&a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(out, "error={e}");
            1
        }
    }
}

macro_rules! kv {
    ($out:expr, $key:expr, $($val:tt)*) => {
        let _ = writeln!($out, "{}={}", $key, format!($($val)*));
    };
}

fn ms(d: Duration) -> String {
    format!("{:.3}", d.as_secs_f64() * 1e3)
}

struct Source {
    cloud: PointCloud,
    skipped: usize,
    boxes: Vec<BevBox>,
}

fn load_source(src: &SourceArgs) -> Result<Source, CliError> {
    match (&src.input, src.synth) {
        (Some(path), false) => {
            let scan = load_kitti_bin(path)?;
            Ok(Source {
                cloud: scan.cloud,
                skipped: scan.skipped,
                boxes: vec![],
            })
        }
        (None, true) => {
            let mut spec = src.scene.spec();
            spec.range = src.ranges.spec();
            Ok(Source {
                cloud: synth_scene(&spec, src.seed)?,
                skipped: 0,
                boxes: spec.boxes.iter().map(|b| b.bev()).collect(),
            })
        }
        _ => Err(CliError::Config("exactly one of --input or --synth is required".into())),
    }
}

/// Validated settings for one `enhance` run.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub grid: GridSpec,
    pub k: usize,
    pub dims: Vec<usize>,
    pub seed: u64,
    pub stack: FeStackParams,
}

impl PipelineConfig {
    pub fn from_args(a: &EnhanceArgs) -> Result<Self, CliError> {
        if a.dim == 0 {
            return Err(CliError::Config("--dim must be at least 1".into()));
        }
        if a.k == 0 {
            return Err(CliError::Config("--k must be at least 1".into()));
        }
        let mut grid = GridSpec::new(a.source.ranges.spec()).with_cell(a.source.cell);
        grid.max_points_per_pillar = a.max_points;
        grid.max_pillars = a.max_pillars;
        grid.validate()?;
        let dims = vec![a.dim; a.layers + 1];
        let stack = match &a.ckpt {
            Some(path) => {
                let stack = read_checkpoint(path)?;
                stack.validate(a.dim).map_err(|e| {
                    CliError::Config(format!("checkpoint does not fit --dim {}: {e}", a.dim))
                })?;
                stack
            }
            None => FeStackParams::init(&dims, a.source.seed ^ 0x5a7c),
        };
        if a.channel >= stack.output_dim(a.dim) {
            return Err(CliError::Config(format!(
                "--channel {} out of range for {} output channels",
                a.channel,
                stack.output_dim(a.dim)
            )));
        }
        Ok(Self {
            grid,
            k: a.k,
            dims,
            seed: a.source.seed,
            stack,
        })
    }
}

pub fn cmd_enhance(a: &EnhanceArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = PipelineConfig::from_args(a)?;
    let total = Instant::now();

    let t = Instant::now();
    let src = load_source(&a.source)?;
    let cloud = range_filter(&src.cloud, &cfg.grid.range);
    kv!(out, "time_load_ms", "{}", ms(t.elapsed()));
    kv!(out, "points_in", "{}", src.cloud.len());
    kv!(out, "points_skipped", "{}", src.skipped);
    kv!(out, "points_in_range", "{}", cloud.len());

    let t = Instant::now();
    let raw = partition(&cloud, &cfg.grid, cfg.seed)?;
    kv!(out, "time_partition_ms", "{}", ms(t.elapsed()));

    let t = Instant::now();
    let encoder = EncoderParams::init(a.dim, cfg.seed);
    let pillars = encode_pillars(&raw, &encoder)?;
    kv!(out, "time_encode_ms", "{}", ms(t.elapsed()));
    kv!(out, "pillars", "{}", pillars.len());

    let enhanced = if pillars.len() >= 2 {
        let t = Instant::now();
        let graph = build_knn(&pillars.positions, cfg.k)?;
        kv!(out, "time_graph_ms", "{}", ms(t.elapsed()));
        let mut feats = pillars.features.clone();
        for (l, layer) in cfg.stack.layers.iter().enumerate() {
            let t = Instant::now();
            feats = layer_infer(&feats, &graph, layer)?;
            kv!(out, format!("time_layer{l}_ms"), "{}", ms(t.elapsed()));
        }
        pillars.with_features(feats)
    } else {
        if pillars.is_empty() {
            kv!(out, "warning", "no points left after range filtering");
        } else {
            kv!(out, "warning", "fewer than 2 pillars; feature enhancement skipped");
        }
        let width = cfg.stack.output_dim(a.dim);
        PillarSet {
            cells: pillars.cells.clone(),
            positions: pillars.positions.clone(),
            features: Matrix::zeros(pillars.len(), width),
        }
    };

    let t = Instant::now();
    let image = scatter(&enhanced, &cfg.grid)?;
    kv!(out, "time_scatter_ms", "{}", ms(t.elapsed()));
    kv!(out, "bev_height", "{}", image.height);
    kv!(out, "bev_width", "{}", image.width);
    kv!(out, "bev_channels", "{}", image.channels);
    kv!(out, "occupied_pixels", "{}", image.occupied());
    write_artifacts(a, &cfg, &image)?;
    kv!(out, "time_total_ms", "{}", ms(total.elapsed()));
    Ok(())
}

fn write_artifacts(a: &EnhanceArgs, cfg: &PipelineConfig, image: &PseudoImage) -> Result<(), CliError> {
    if let Some(path) = &a.emit_bev {
        std::fs::write(path, image.to_pgm(a.channel)?).map_err(io_err(path))?;
    }
    if let Some(path) = &a.out {
        std::fs::write(path, image.to_le_f32()).map_err(io_err(path))?;
    }
    if let Some(path) = &a.save_ckpt {
        write_checkpoint(&cfg.stack, path)?;
    }
    Ok(())
}

pub fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if a.dim == 0 || a.k == 0 || a.n < 2 {
        return Err(CliError::Config("need --dim >= 1, --k >= 1 and --n >= 2".into()));
    }
    let dims = vec![a.dim; a.layers + 1];
    let (stack, inst) = GradInstance::sample(a.seed, a.n, a.k, &dims, a.h)?;
    let report = grad_check(
        &stack,
        &inst,
        GradCheckOptions {
            h: a.h,
            corrupt_theta: a.corrupt,
        },
    )?;
    kv!(out, "checked", "{}", report.checked);
    kv!(out, "max_rel_error", "{:.6e}", report.max_rel_error);
    kv!(out, "worst", "{}", report.worst);
    if report.max_rel_error < 1e-4 {
        kv!(out, "status", "pass");
        Ok(())
    } else {
        kv!(out, "status", "fail");
        Err(CliError::GradCheckFailed {
            error: report.max_rel_error,
            location: report.worst,
        })
    }
}

fn read_boxes(path: &std::path::Path) -> Result<Vec<BevBox>, CliError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Boxes {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub fn cmd_partition_report(a: &ReportArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let src = load_source(&a.source)?;
    let boxes = match &a.boxes {
        Some(path) => read_boxes(path)?,
        None if a.source.synth => src.boxes.clone(),
        None => return Err(CliError::Config("--boxes is required with --input".into())),
    };
    let mut cells = vec![a.source.cell];
    for &c in &a.sweep {
        if !cells.contains(&c) {
            cells.push(c);
        }
    }
    let cloud = range_filter(&src.cloud, &a.source.ranges.spec());
    for cell in cells {
        let grid = GridSpec::new(a.source.ranges.spec()).with_cell(cell);
        let report = partition_effect_report(&cloud, &boxes, &grid)?;
        let _ = out.write_all(report.to_lines().as_bytes());
    }
    Ok(())
}

/// `n` distinct random cells of the car grid with 1..=8 points each.
pub fn bench_pillars(n: usize, seed: u64) -> (GridSpec, Vec<RawPillar>) {
    let grid = GridSpec::new(RangeSpec::car());
    let (w, h) = (grid.width(), grid.height());
    let mut rng = Rng::new(seed);
    let mut cells = rng.sample_sorted(w * h, n.min(w * h));
    rng.shuffle(&mut cells);
    let pillars = cells
        .into_iter()
        .map(|c| {
            let (ix, iy) = (c % w, c / w);
            let center = grid.cell_center(ix, iy);
            let count = 1 + rng.index(8);
            let points = (0..count)
                .map(|_| {
                    Point::new(
                        (center[0] + rng.uniform(-0.079, 0.079)) as f32,
                        (center[1] + rng.uniform(-0.079, 0.079)) as f32,
                        rng.uniform(-2.0, 0.5) as f32,
                        rng.uniform(0.0, 1.0) as f32,
                    )
                })
                .collect();
            RawPillar {
                cell_ix: ix,
                cell_iy: iy,
                center,
                points,
                original_count: count,
            }
        })
        .collect();
    (grid, pillars)
}

fn median_time(runs: usize, mut f: impl FnMut()) -> Duration {
    let mut times: Vec<Duration> = (0..runs.max(1))
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed()
        })
        .collect();
    times.sort();
    times[times.len() / 2]
}

/// Median wall time of one layer forward over `n` synthetic pillars.
pub fn time_layer(n: usize, dim: usize, k: usize, runs: usize, seed: u64) -> Result<Duration, CliError> {
    let (_, raw) = bench_pillars(n, seed);
    let pillars = encode_pillars(&raw, &EncoderParams::init(dim, seed))?;
    let graph = build_knn(&pillars.positions, k)?;
    let layer = satgcn::init_params(dim, dim, seed);
    let mut failure = None;
    let t = median_time(runs, || {
        if let Err(e) = layer_infer(&pillars.features, &graph, &layer) {
            failure = Some(e);
        }
    });
    match failure {
        Some(e) => Err(e.into()),
        None => Ok(t),
    }
}

pub fn cmd_bench(a: &BenchArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if a.n < 2 || a.dim == 0 || a.k == 0 {
        return Err(CliError::Config("need --n >= 2, --dim >= 1, --k >= 1".into()));
    }
    let runs = a.runs.max(5);
    let (_, raw) = bench_pillars(a.n, a.seed);
    let n = raw.len() as f64;
    let rate = |d: Duration| format!("{:.0}", n / d.as_secs_f64().max(1e-12));
    let encoder = EncoderParams::init(a.dim, a.seed);
    let mut pillars = None;
    let t = median_time(runs, || pillars = Some(encode_pillars(&raw, &encoder)));
    let pillars = pillars.expect("at least one run")?;
    kv!(out, "pillars", "{}", pillars.len());
    kv!(out, "runs", "{runs}");
    kv!(out, "encode_ms", "{}", ms(t));
    kv!(out, "encode_pillars_per_s", "{}", rate(t));

    let mut graph = None;
    let t = median_time(runs, || graph = Some(build_knn(&pillars.positions, a.k)));
    let graph = graph.expect("at least one run")?;
    kv!(out, "graph_ms", "{}", ms(t));
    kv!(out, "graph_pillars_per_s", "{}", rate(t));

    let stack = FeStackParams::init(&vec![a.dim; a.layers + 1], a.seed);
    let mut feats = pillars.features.clone();
    for (l, layer) in stack.layers.iter().enumerate() {
        let mut next = None;
        let t = median_time(runs, || next = Some(layer_infer(&feats, &graph, layer)));
        feats = next.expect("at least one run")?;
        kv!(out, format!("layer{l}_ms"), "{}", ms(t));
        kv!(out, format!("layer{l}_pillars_per_s"), "{}", rate(t));
    }
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let spec = a.scene.spec();
    let cloud = synth_scene(&spec, a.seed)?;
    write_kitti_bin(&cloud, &a.out)?;
    kv!(out, "points", "{}", cloud.len());
    if let Some(path) = &a.boxes_out {
        let boxes: Vec<BevBox> = spec.boxes.iter().map(|b| b.bev()).collect();
        let json = serde_json::to_string_pretty(&boxes).expect("boxes serialize");
        std::fs::write(path, json).map_err(io_err(path))?;
        kv!(out, "boxes", "{}", boxes.len());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String) {
        let mut buf = Vec::new();
        let code = run(std::iter::once("satgcn").chain(args.iter().copied()), &mut buf);
        (code, String::from_utf8(buf).unwrap())
    }

    #[test]
    fn source_is_required() {
        let (code, text) = run_capture(&["enhance"]);
        assert_eq!(code, 1);
        assert!(text.contains("--input or --synth"));
    }

    #[test]
    fn gradcheck_default_passes_and_corrupt_fails() {
        let (code, text) = run_capture(&["gradcheck", "--seed", "3"]);
        assert_eq!(code, 0, "{text}");
        assert!(text.contains("status=pass"));
        let (code, text) = run_capture(&["gradcheck", "--seed", "3", "--corrupt"]);
        assert_eq!(code, 1, "{text}");
        assert!(text.contains("status=fail"));
    }

    #[test]
    fn gradcheck_step_sizes() {
        for h in ["1e-4", "1e-5"] {
            let (code, text) = run_capture(&["gradcheck", "--seed", "8", "--h", h]);
            assert_eq!(code, 0, "h={h}: {text}");
        }
    }

    #[test]
    fn bad_config_is_rejected() {
        let (code, _) = run_capture(&["enhance", "--synth", "--dim", "0"]);
        assert_eq!(code, 1);
        let (code, _) = run_capture(&["enhance", "--synth", "--channel", "64"]);
        assert_eq!(code, 1);
        let (code, _) = run_capture(&["enhance", "--synth", "--cell=-1"]);
        assert_eq!(code, 1);
    }
}
