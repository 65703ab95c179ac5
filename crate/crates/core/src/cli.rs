//! Command-line front end.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage, config or input
//! error. Config precedence for `demo`: built-in defaults, then the
//! `--config` JSON file, then individual flags.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::decoder::{
    binary_focal_loss, decoder_stack, objectness_labels, scene_objectness, DecoderConfig,
    DecoderWeights, Detection, DEFAULT_FOCAL_ALPHA, DEFAULT_FOCAL_GAMMA,
};
use crate::error::{Error, Result};
use crate::geometry::{synth_scene, Scene, SceneSpec};
use crate::io::{
    gt_sidecar_path, load_weights, read_gt_boxes, read_point_cloud, save_weights,
    write_gt_boxes, write_point_cloud, PointCloud,
};
use crate::issm::{CorrelationMode, DelayMetric};
use crate::numerics::{prng_fill, Distribution, PrngStream};
use crate::serialization::{
    locality_score, serialize, AxisOrder, Bounds, SerializationOrder, DEFAULT_BITS,
};
use crate::verify::{complexity_bench, run_equivalence_suite, SuiteKind, SuiteOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// PRNG stream (forked from the run seed) that draws demo scene features.
const FEATURE_STREAM: u64 = 7;

#[derive(Parser, Debug)]
#[command(name = "issm", version, about = "Interactive state space decoder for 3D point clouds")]
pub struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic box scene and its ground-truth sidecar.
    GenScene(GenSceneArgs),
    /// Print the Hilbert serialization order of a point cloud.
    Serialize(SerializeArgs),
    /// Run the decoder with seeded weights and print per-layer detections.
    Demo(DemoArgs),
    /// Run the equivalence suites.
    Verify(VerifyArgs),
    /// Time the scan against self-attention over growing M.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct GenSceneArgs {
    #[arg(long, default_value_t = 3)]
    pub boxes: usize,
    #[arg(long, default_value_t = 200)]
    pub points_per_box: usize,
    /// Uniform background points.
    #[arg(long, default_value_t = 500)]
    pub noise: usize,
    /// Half-width of the cubic room.
    #[arg(long, default_value_t = 4.0)]
    pub extent: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write per-point colors.
    #[arg(long)]
    pub color: bool,
    /// Output path; `.destpc` selects the binary format, anything else text.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct SerializeArgs {
    pub input: PathBuf,
    /// Axis priority: xyz, xzy, yxz, yzx, zxy or zyx.
    #[arg(long, default_value = "xyz")]
    pub order: String,
    #[arg(long, default_value_t = DEFAULT_BITS)]
    pub bits: u32,
    /// Also print the locality score of the order.
    #[arg(long)]
    pub score: bool,
    /// Neighbors per point for the locality score.
    #[arg(long, default_value_t = 6)]
    pub knn: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum CorrelationArg {
    Table,
    Mlp,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DelayArg {
    Center,
    Vertex,
    Surface,
}

#[derive(Args, Debug)]
pub struct DemoArgs {
    pub input: PathBuf,
    /// JSON run config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Ground-truth boxes; defaults to `<input>.gt.json` when present.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub states: Option<usize>,
    #[arg(long)]
    pub bits: Option<u32>,
    #[arg(long, value_enum)]
    pub correlation: Option<CorrelationArg>,
    #[arg(long, value_enum)]
    pub delay_metric: Option<DelayArg>,
    /// Load weights from `<prefix>.bin` + `<prefix>.json` instead of seeding them.
    #[arg(long)]
    pub load_weights: Option<PathBuf>,
    /// Save the weights used to `<prefix>.bin` + `<prefix>.json`.
    #[arg(long)]
    pub save_weights: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// `all` or one of attn_recurrence, scan_conv, scan_chunked, grad_check, delay_monotone.
    #[arg(long, default_value = "all")]
    pub suite: String,
    #[arg(long, default_value_t = 20)]
    pub seeds: usize,
    /// Override every suite's tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub json: bool,
    /// Offset added to reference scan outputs (negative control).
    #[arg(long, hide = true, default_value_t = 0.0)]
    pub perturb_scan: f64,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "1024,2048,4096,8192")]
    pub m_list: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    pub k: usize,
    #[arg(long, default_value_t = 32)]
    pub e: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long)]
    pub json: bool,
}

/// JSON run config for `demo`. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub decoder: DecoderConfig,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            decoder: DecoderConfig::default(),
            focal_gamma: DEFAULT_FOCAL_GAMMA,
            focal_alpha: DEFAULT_FOCAL_ALPHA,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn apply(&mut self, a: &DemoArgs) {
        let d = &mut self.decoder;
        if let Some(v) = a.seed {
            self.seed = v;
        }
        if let Some(v) = a.layers {
            d.num_layers = v;
        }
        if let Some(v) = a.states {
            d.num_states = v;
        }
        if let Some(v) = a.bits {
            d.bits = v;
        }
        if let Some(v) = a.correlation {
            d.correlation = match v {
                CorrelationArg::Table => CorrelationMode::Table,
                CorrelationArg::Mlp => CorrelationMode::Mlp,
            };
        }
        if let Some(v) = a.delay_metric {
            d.delay_metric = match v {
                DelayArg::Center => DelayMetric::Center,
                DelayArg::Vertex => DelayMetric::Vertex,
                DelayArg::Surface => DelayMetric::Surface,
            };
        }
    }
}

/// Parses `args` (including the program name) and runs the command,
/// writing results to `out` and diagnostics to stderr.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            if e.use_stderr() {
                eprint!("{e}");
            } else {
                let _ = write!(out, "{e}");
            }
            return code;
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return EXIT_USAGE;
        }
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let mut buf = Vec::new();
    let result = pool.install(|| dispatch(&cli.command, &mut buf));
    if let Err(e) = out.write_all(&buf).and_then(|_| out.flush()) {
        eprintln!("error: {e}");
        return EXIT_USAGE;
    }
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
    }
}

fn dispatch(cmd: &Command, out: &mut Vec<u8>) -> Result<i32> {
    match cmd {
        Command::GenScene(a) => cmd_gen_scene(a, out),
        Command::Serialize(a) => cmd_serialize(a, out),
        Command::Demo(a) => cmd_demo(a, out),
        Command::Verify(a) => cmd_verify(a, out),
        Command::Bench(a) => cmd_bench(a, out),
    }
}

pub fn cmd_gen_scene(a: &GenSceneArgs, out: &mut dyn Write) -> Result<i32> {
    let spec = SceneSpec {
        num_boxes: a.boxes,
        points_per_box: a.points_per_box,
        noise_points: a.noise,
        extent: a.extent,
        seed: a.seed,
        with_color: a.color,
        ..SceneSpec::default()
    };
    let scene = synth_scene(&spec)?;
    let pc = PointCloud::new(scene.positions, scene.colors)?;
    write_point_cloud(&a.output, &pc)?;
    let side = gt_sidecar_path(&a.output);
    write_gt_boxes(&side, &scene.gt_boxes)?;
    writeln!(
        out,
        "wrote {} points to {} and {} boxes to {}",
        pc.len(),
        a.output.display(),
        scene.gt_boxes.len(),
        side.display()
    )?;
    Ok(EXIT_OK)
}

pub fn cmd_serialize(a: &SerializeArgs, out: &mut dyn Write) -> Result<i32> {
    let order: AxisOrder = a.order.parse()?;
    let pc = read_point_cloud(&a.input)?;
    if pc.is_empty() {
        return Err(Error::Argument(format!("{} has no points", a.input.display())));
    }
    let bounds = Bounds::from_points(&pc.positions)?;
    let perm = serialize(&pc.positions, SerializationOrder::new(order, a.bits)?, &bounds)?;
    let mut text = String::with_capacity(perm.len() * 6);
    for i in perm.indices() {
        text.push_str(&i.to_string());
        text.push('\n');
    }
    out.write_all(text.as_bytes())?;
    if a.score {
        let knn = a.knn.min(pc.len().saturating_sub(1));
        let s = if knn == 0 {
            0.0
        } else {
            locality_score(&perm, &pc.positions, knn)?
        };
        writeln!(out, "# locality_score: {s}")?;
    }
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct DetectionLine {
    layer: usize,
    center: [f64; 3],
    size: [f64; 3],
    yaw: f64,
    class: usize,
    score: f64,
}

impl DetectionLine {
    fn new(layer: usize, d: &Detection) -> Self {
        DetectionLine {
            layer,
            center: d.bbox.center(),
            size: d.bbox.size(),
            yaw: d.bbox.yaw(),
            class: d.class(),
            score: d.objectness,
        }
    }
}

#[derive(Serialize)]
struct Summary {
    num_layers: usize,
    num_states: usize,
    num_points: usize,
    num_gt_boxes: usize,
    objectness_focal_loss: f64,
}

#[derive(Serialize)]
struct SummaryLine {
    summary: Summary,
}

/// Loads the scene for `demo`: positions from the file, features drawn
/// from the run seed, boxes from the sidecar.
pub fn load_demo_scene(input: &Path, gt: Option<&Path>, cfg: &RunConfig) -> Result<Scene> {
    let pc = read_point_cloud(input)?;
    if pc.is_empty() {
        return Err(Error::Argument(format!("{} has no points", input.display())));
    }
    let gt_boxes = match gt {
        Some(p) => read_gt_boxes(p)?,
        None => {
            let side = gt_sidecar_path(input);
            if side.exists() {
                read_gt_boxes(&side)?
            } else {
                log::warn!("no ground truth at {}; every point is background", side.display());
                Vec::new()
            }
        }
    };
    let mut rng = PrngStream::new(cfg.seed).fork(FEATURE_STREAM);
    let features = prng_fill(
        &mut rng,
        &[pc.len(), cfg.decoder.hidden_dim],
        Distribution::Normal { mean: 0.0, std: 1.0 },
    )?;
    Scene::new(pc.positions, pc.colors, features, gt_boxes)
}

pub fn cmd_demo(a: &DemoArgs, out: &mut dyn Write) -> Result<i32> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(a);
    cfg.decoder.validate()?;
    let scene = load_demo_scene(&a.input, a.gt.as_deref(), &cfg)?;
    let mut weights = DecoderWeights::init(cfg.seed, &cfg.decoder)?;
    if let Some(p) = &a.load_weights {
        load_weights(p, &mut weights)?;
    }
    if let Some(p) = &a.save_weights {
        save_weights(p, &mut weights)?;
    }
    let result = decoder_stack(&scene, &cfg.decoder, &weights)?;
    let mut text = String::new();
    for (l, layer) in result.layers.iter().enumerate() {
        for d in &layer.detections {
            text.push_str(&serde_json::to_string(&DetectionLine::new(l, d))?);
            text.push('\n');
        }
    }
    let final_x = &result.layers.last().expect("at least one layer").x;
    let probs = scene_objectness(final_x, &weights.scene_obj)?;
    let labels = objectness_labels(&scene);
    let loss = binary_focal_loss(&probs, &labels, cfg.focal_gamma, cfg.focal_alpha)?;
    let summary = SummaryLine {
        summary: Summary {
            num_layers: result.layers.len(),
            num_states: cfg.decoder.num_states,
            num_points: scene.num_points(),
            num_gt_boxes: scene.gt_boxes.len(),
            objectness_focal_loss: loss,
        },
    };
    text.push_str(&serde_json::to_string(&summary)?);
    text.push('\n');
    out.write_all(text.as_bytes())?;
    Ok(EXIT_OK)
}

pub fn cmd_verify(a: &VerifyArgs, out: &mut dyn Write) -> Result<i32> {
    let kinds: Vec<SuiteKind> = if a.suite == "all" {
        SuiteKind::ALL.to_vec()
    } else {
        vec![a.suite.parse()?]
    };
    let opts = SuiteOptions {
        tolerance: a.tol,
        perturb_scan: a.perturb_scan,
    };
    let reports = kinds
        .into_iter()
        .map(|k| run_equivalence_suite(k, a.seeds, opts))
        .collect::<Result<Vec<_>>>()?;
    let all_pass = reports.iter().all(|r| r.pass);
    if a.json {
        #[derive(Serialize)]
        struct Doc<'a> {
            pass: bool,
            seeds: usize,
            reports: &'a [crate::verify::EquivalenceReport],
        }
        let doc = Doc {
            pass: all_pass,
            seeds: a.seeds,
            reports: &reports,
        };
        writeln!(out, "{}", serde_json::to_string_pretty(&doc)?)?;
    } else {
        writeln!(
            out,
            "{:<16} {:>6} {:>12} {:>12} {:>10}  status",
            "suite", "cases", "max_err", "max_rel", "tol"
        )?;
        for r in &reports {
            writeln!(
                out,
                "{:<16} {:>6} {:>12.3e} {:>12.3e} {:>10.1e}  {}",
                r.kind.as_str(),
                r.cases,
                r.max_abs_err,
                r.max_rel_err,
                r.tolerance,
                if r.pass { "PASS" } else { "FAIL" }
            )?;
        }
    }
    Ok(if all_pass { EXIT_OK } else { EXIT_VERIFY_FAILED })
}

pub fn cmd_bench(a: &BenchArgs, out: &mut dyn Write) -> Result<i32> {
    let report = complexity_bench(&a.m_list, a.k, a.e, a.repeats)?;
    if a.json {
        writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
    } else {
        writeln!(out, "{:>8} {:>14} {:>16}", "M", "scan_s", "attention_s")?;
        for r in &report.rows {
            writeln!(out, "{:>8} {:>14.6} {:>16.6}", r.m, r.scan_time, r.attention_time)?;
        }
        writeln!(out, "scan_slope: {:.3}", report.scan_slope)?;
        writeln!(out, "attention_slope: {:.3}", report.attention_slope)?;
    }
    Ok(EXIT_OK)
}
