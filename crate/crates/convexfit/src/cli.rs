//! Command-line driver: scene synthesis, fitting, rendering, evaluation,
//! gradient checking, and the combined fit-render-eval pipeline.
//!
//! Exit codes: 0 success, 1 input/parse error, 2 numerical failure.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::geometry::Decomposition;
use crate::io;
use crate::losses::LossWeights;
use crate::metrics;
use crate::refine::{self, FitTrace, GradCheckConfig, PolishConfig};
use crate::render::{self, NormalPairing, RenderConfig};
use crate::sampling::{self, MixConfig};
use crate::synth::{self, Layout, SynthSpec};
use crate::{Error, Result};

/// Fit smooth convex primitives to depth maps and score the result.
#[derive(Parser, Debug)]
#[command(name = "convexfit", version, about)]
struct Cli {
    /// Worker threads for sample and pixel loops (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic box scene with exact ground truth.
    Synth(SynthArgs),
    /// Fit a decomposition to a depth map from a chosen start point.
    Fit(FitArgs),
    /// Render a decomposition to depth / normal / id rasters.
    Render(RenderArgs),
    /// Score predicted rasters against ground truth.
    Eval(EvalArgs),
    /// Compare analytic gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Fit, render, and evaluate in one run.
    Pipeline(PipelineArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Number of boxes on top of the floor slab.
    #[arg(long, default_value_t = 3)]
    boxes: usize,
    #[arg(long, value_enum, default_value_t = LayoutArg::Axis)]
    layout: LayoutArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory receiving depth.pfm, seg.pgm, ids.pgm, camera.json, gt.json.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 320)]
    width: u32,
    #[arg(long, default_value_t = 240)]
    height: u32,
    #[arg(long, default_value_t = 200.0)]
    fx: f64,
    #[arg(long, default_value_t = 200.0)]
    fy: f64,
    /// Principal point x (default: width / 2).
    #[arg(long)]
    cx: Option<f64>,
    /// Principal point y (default: height / 2).
    #[arg(long)]
    cy: Option<f64>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum LayoutArg {
    Axis,
    Rotated,
}

impl From<LayoutArg> for Layout {
    fn from(l: LayoutArg) -> Self {
        match l {
            LayoutArg::Axis => Layout::Axis,
            LayoutArg::Rotated => Layout::Rotated,
        }
    }
}

/// Start-point generator of a fit.
#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// Random boxes over the sample region.
    Random,
    /// Boxes at k-means centroids of the inside surface samples.
    Grid,
    /// Imported decomposition JSON (e.g. a network prediction).
    File,
}

fn default_k() -> usize {
    24
}

/// Everything one fit run needs; the JSON alternative to command-line flags.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RunConfig {
    pub depth: PathBuf,
    pub camera: PathBuf,
    #[serde(default)]
    pub seg: Option<PathBuf>,
    pub init: InitMode,
    #[serde(default)]
    pub init_file: Option<PathBuf>,
    /// Number of convexes for the random and grid starts.
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub polish: PolishConfig,
    #[serde(default)]
    pub weights: LossWeights,
    pub out: PathBuf,
    #[serde(default)]
    pub trace: Option<PathBuf>,
    /// Overrides `polish.seed` when set.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl RunConfig {
    fn resolved_seed(&self) -> u64 {
        self.seed.unwrap_or(self.polish.seed)
    }
}

#[derive(Args, Debug)]
struct FitFlags {
    /// Run configuration JSON; mutually exclusive with the individual flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input depth raster (PFM, meters).
    #[arg(long)]
    depth: Option<PathBuf>,
    /// Camera intrinsics JSON.
    #[arg(long)]
    camera: Option<PathBuf>,
    /// Segmentation PGM enabling the entropy loss.
    #[arg(long)]
    seg: Option<PathBuf>,
    /// Loss weight JSON overriding the defaults.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = InitMode::Grid)]
    init: InitMode,
    /// Start-point decomposition JSON, required with --init file.
    #[arg(long)]
    init_file: Option<PathBuf>,
    /// Convex count for the random and grid starts.
    #[arg(long, default_value_t = 24)]
    k: usize,
    #[arg(long, default_value_t = 500)]
    iters: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    /// Total polish sample budget (1:2 free:surface split).
    #[arg(long, default_value_t = 250_000)]
    samples: usize,
    /// Enable backward-selection pruning before and after the descent.
    #[arg(long, default_value_t = false)]
    prune: bool,
    #[arg(long, default_value_t = 0.001)]
    prune_eps: f64,
    /// 8-way split rounds before polishing.
    #[arg(long, default_value_t = 0)]
    splits: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Anneal the free/surface group weights over the descent.
    #[arg(long, default_value_t = false)]
    anneal: bool,
    #[arg(long, default_value_t = 0.5)]
    w_free: f64,
    #[arg(long, default_value_t = 0.5)]
    w_surface: f64,
    /// Keep the Manhattan frame fixed during the descent.
    #[arg(long, default_value_t = false)]
    freeze_manhattan: bool,
}

impl FitFlags {
    fn into_run_config(self, out: PathBuf, trace: Option<PathBuf>) -> Result<RunConfig> {
        if let Some(config) = &self.config {
            if self.depth.is_some() || self.camera.is_some() {
                return Err(Error::Input(
                    "--config is mutually exclusive with --depth/--camera".into(),
                ));
            }
            let text = std::fs::read_to_string(config)?;
            let mut run: RunConfig = serde_json::from_str(&text)?;
            if out != PathBuf::new() {
                run.out = out;
            }
            if trace.is_some() {
                run.trace = trace;
            }
            return Ok(run);
        }
        let depth = self
            .depth
            .ok_or_else(|| Error::Input("--depth is required".into()))?;
        let camera = self
            .camera
            .ok_or_else(|| Error::Input("--camera is required".into()))?;
        let weights = match &self.weights {
            Some(p) => io::read_weights(p)?,
            None => LossWeights::default(),
        };
        Ok(RunConfig {
            depth,
            camera,
            seg: self.seg,
            init: self.init,
            init_file: self.init_file,
            k: self.k,
            polish: PolishConfig {
                iters: self.iters,
                learning_rate: self.lr,
                n_samples: self.samples,
                prune_epsilon: self.prune_eps,
                splits: self.splits,
                seed: self.seed,
                optimize_manhattan: !self.freeze_manhattan,
                prune: self.prune,
                w_free: self.w_free,
                w_surface: self.w_surface,
                anneal: self.anneal,
            },
            weights,
            out,
            trace,
            seed: None,
        })
    }
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    flags: FitFlags,
    /// Output decomposition JSON.
    #[arg(long, default_value = "fit.json")]
    out: PathBuf,
    /// Optional per-iteration loss trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    decomposition: PathBuf,
    #[arg(long)]
    camera: PathBuf,
    #[arg(long)]
    out_depth: PathBuf,
    #[arg(long)]
    out_normals: Option<PathBuf>,
    #[arg(long)]
    out_ids: Option<PathBuf>,
    /// March step in normalized units.
    #[arg(long, default_value_t = 0.005)]
    step: f64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    pred_depth: PathBuf,
    #[arg(long)]
    gt_depth: PathBuf,
    #[arg(long)]
    camera: PathBuf,
    /// Predicted normals PFM; derived from the predicted depth when absent.
    #[arg(long)]
    pred_normals: Option<PathBuf>,
    /// Ground-truth normals PFM; derived from the ground-truth depth when absent.
    #[arg(long)]
    gt_normals: Option<PathBuf>,
    #[arg(long)]
    pred_ids: Option<PathBuf>,
    #[arg(long)]
    gt_seg: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PairingArg::Consistent)]
    normal_pairing: PairingArg,
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum PairingArg {
    Consistent,
    Printed,
}

impl From<PairingArg> for NormalPairing {
    fn from(p: PairingArg) -> Self {
        match p {
            PairingArg::Consistent => NormalPairing::Consistent,
            PairingArg::Printed => NormalPairing::Printed,
        }
    }
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 4)]
    max_k: usize,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[command(flatten)]
    flags: FitFlags,
    /// Ground-truth segmentation for the accuracy metric.
    #[arg(long)]
    gt_seg: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PairingArg::Consistent)]
    normal_pairing: PairingArg,
    /// Directory receiving fit.json, trace.csv, rendered rasters, report.json.
    #[arg(long)]
    out_dir: PathBuf,
}

/// Parse and execute; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            eprintln!("{e}");
            return 1;
        }
        Err(e) => {
            // --help / --version
            print!("{e}");
            return 0;
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Render(args) => cmd_render(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Pipeline(args) => cmd_pipeline(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let cam = sampling::Camera {
        fx: args.fx,
        fy: args.fy,
        cx: args.cx.unwrap_or(args.width as f64 / 2.0),
        cy: args.cy.unwrap_or(args.height as f64 / 2.0),
        width: args.width,
        height: args.height,
    };
    let spec = SynthSpec {
        n_boxes: args.boxes,
        layout: args.layout.into(),
        seed: args.seed,
    };
    let scene = synth::synth_scene(&spec, &cam)?;
    std::fs::create_dir_all(&args.out_dir)?;
    io::write_pfm_gray(&args.out_dir.join("depth.pfm"), &scene.depth)?;
    io::write_seg_pgm(&args.out_dir.join("seg.pgm"), &scene.seg)?;
    io::write_ids_pgm(&args.out_dir.join("ids.pgm"), &scene.ids)?;
    io::write_camera(&args.out_dir.join("camera.json"), &scene.camera)?;
    io::write_decomposition(&args.out_dir.join("gt.json"), &scene.decomposition)?;
    println!(
        "synth: wrote scene with {} convexes to {}",
        scene.decomposition.convexes.len(),
        args.out_dir.display()
    );
    Ok(())
}

/// Shared fit path: returns the fitted decomposition and its trace after
/// writing the requested outputs.
fn execute_fit(run: &RunConfig) -> Result<(Decomposition, FitTrace)> {
    let cam = io::read_camera(&run.camera)?;
    let depth = io::read_pfm_gray(&run.depth)?;
    let seg = match &run.seg {
        Some(p) => Some(io::read_seg_pgm(p)?),
        None => None,
    };
    let mut polish_cfg = run.polish;
    polish_cfg.seed = run.resolved_seed();

    // Imported start points carry their own normalization; generated starts
    // use the transform fitted to this depth map.
    let (init, cloud) = match run.init {
        InitMode::File => {
            let file = run
                .init_file
                .as_ref()
                .ok_or_else(|| Error::Input("--init file requires --init-file".into()))?;
            let init = io::read_decomposition(file)?;
            let cloud =
                sampling::prepare_cloud_with_transform(&depth, &cam, &init.normalization)?;
            (Some(init), cloud)
        }
        _ => {
            let (cloud, _) = sampling::prepare_cloud(&depth, &cam)?;
            (None, cloud)
        }
    };
    let mix = MixConfig {
        seed: polish_cfg.seed,
        ..MixConfig::with_total(polish_cfg.n_samples, polish_cfg.seed)
    };
    let samples = sampling::training_mix(&cloud, seg.as_ref(), &mix)?;

    let init = match run.init {
        InitMode::File => init.unwrap(),
        InitMode::Random => {
            let mut d = refine::random_init(run.k, polish_cfg.seed)?;
            let (points, pixels) = sampling::depth_to_points(&depth, &cam)?;
            d.normalization = sampling::build_transform(&points)?;
            let _ = pixels;
            d
        }
        InitMode::Grid => {
            let mut d = refine::grid_init(run.k, &samples.samples)?;
            let (points, _) = sampling::depth_to_points(&depth, &cam)?;
            d.normalization = sampling::build_transform(&points)?;
            d
        }
    };

    let (fit, trace) = refine::pipeline(&init, &samples.samples, &run.weights, &polish_cfg)?;
    io::write_decomposition(&run.out, &fit)?;
    if let Some(trace_path) = &run.trace {
        std::fs::write(trace_path, trace.to_csv())?;
    }
    println!(
        "fit: {} -> {} convexes, loss {:.6} -> {:.6}, wrote {}",
        init.convexes.len(),
        fit.convexes.len(),
        trace.initial_total(),
        trace.final_total(),
        run.out.display()
    );
    if let Some(msg) = &trace.aborted {
        return Err(Error::Numeric(msg.clone()));
    }
    Ok((fit, trace))
}

fn cmd_fit(args: FitArgs) -> Result<()> {
    let run = args.flags.into_run_config(args.out, args.trace)?;
    execute_fit(&run)?;
    Ok(())
}

fn cmd_render(args: RenderArgs) -> Result<()> {
    let decomp = io::read_decomposition(&args.decomposition)?;
    let cam = io::read_camera(&args.camera)?;
    let cfg = RenderConfig {
        step: args.step,
        ..RenderConfig::default()
    };
    let out = render::render_all(&decomp, &cam, &cfg)?;
    io::write_pfm_gray(&args.out_depth, &out.depth)?;
    if let Some(p) = &args.out_normals {
        io::write_pfm_color(p, &out.normals)?;
    }
    if let Some(p) = &args.out_ids {
        io::write_ids_pgm(p, &out.ids)?;
    }
    println!("render: wrote {}", args.out_depth.display());
    Ok(())
}

fn load_or_derive_normals(
    raster: &Option<PathBuf>,
    depth: &sampling::DepthImage,
    cam: &sampling::Camera,
    pairing: NormalPairing,
) -> Result<render::NormalImage> {
    match raster {
        Some(p) => io::read_pfm_color(p),
        None => render::normals_from_depth(depth, cam, pairing),
    }
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let cam = io::read_camera(&args.camera)?;
    let pred_depth = io::read_pfm_gray(&args.pred_depth)?;
    let gt_depth = io::read_pfm_gray(&args.gt_depth)?;
    let pairing = args.normal_pairing.into();
    let pred_normals = load_or_derive_normals(&args.pred_normals, &pred_depth, &cam, pairing)?;
    let gt_normals = load_or_derive_normals(&args.gt_normals, &gt_depth, &cam, pairing)?;
    let pred_ids = match &args.pred_ids {
        Some(p) => Some(io::read_ids_pgm(p)?),
        None => None,
    };
    let gt_seg = match &args.gt_seg {
        Some(p) => Some(io::read_seg_pgm(p)?),
        None => None,
    };
    let report = metrics::evaluate(
        &pred_depth,
        &gt_depth,
        &pred_normals,
        &gt_normals,
        pred_ids.as_ref(),
        gt_seg.as_ref(),
        &cam,
    )?;
    io::write_report(&args.out, &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let cfg = GradCheckConfig {
        instances: args.instances,
        seed: args.seed,
        max_convexes: args.max_k,
        n_samples: args.samples,
        step: args.step,
        tolerance: args.tolerance,
    };
    let report = refine::gradcheck(&cfg)?;
    println!(
        "gradcheck: instances={} max_rel_error={:.3e} mean_rel_error={:.3e} failures={}",
        report.instances, report.max_rel_error, report.mean_rel_error, report.failures
    );
    if report.max_rel_error > args.tolerance {
        return Err(Error::Numeric(format!(
            "gradient mismatch: max relative error {:.3e} exceeds {:.1e}",
            report.max_rel_error, args.tolerance
        )));
    }
    Ok(())
}

fn cmd_pipeline(args: PipelineArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out_dir)?;
    let out_dir = &args.out_dir;
    let run = args
        .flags
        .into_run_config(out_dir.join("fit.json"), Some(out_dir.join("trace.csv")))?;
    let (fit, _) = execute_fit(&run)?;

    let cam = io::read_camera(&run.camera)?;
    let rendered = render::render_all(&fit, &cam, &RenderConfig::default())?;
    io::write_pfm_gray(&out_dir.join("pred_depth.pfm"), &rendered.depth)?;
    io::write_pfm_color(&out_dir.join("pred_normals.pfm"), &rendered.normals)?;
    io::write_ids_pgm(&out_dir.join("pred_ids.pgm"), &rendered.ids)?;

    let gt_depth = io::read_pfm_gray(&run.depth)?;
    let pairing = args.normal_pairing.into();
    let gt_normals = render::normals_from_depth(&gt_depth, &cam, pairing)?;
    let gt_seg = match &args.gt_seg {
        Some(p) => Some(io::read_seg_pgm(p)?),
        None => None,
    };
    let report = metrics::evaluate(
        &rendered.depth,
        &gt_depth,
        &rendered.normals,
        &gt_normals,
        Some(&rendered.ids),
        gt_seg.as_ref(),
        &cam,
    )?;
    io::write_report(&out_dir.join("report.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
