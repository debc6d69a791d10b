//! Command-line frontend for the fisheye-to-BEV splatting toolkit.
//!
//! Thin shell over the library: every command parses flags, validates
//! inputs, and calls straight into `fisheye_bev_core`, so CLI outputs are
//! bit-identical to direct library calls.
//!
//! Exit codes: 0 success, 1 check failed (gradcheck tolerance or eval
//! threshold), 2 invalid input or validation error.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fisheye_bev_core::camera::{load_calibration, write_calibration, FisheyeCamera};
use fisheye_bev_core::field::PixelField;
use fisheye_bev_core::gradcheck::{
    ce_gradcheck, end_to_end_gradcheck, splat_gradcheck, DEFAULT_FD_STEP,
};
use fisheye_bev_core::image_io::{read_pgm, write_pgm, write_raster_preview, GrayImage};
use fisheye_bev_core::lift::{
    lift_camera, DepthBinSpec, DepthDistribution, LiftConfig, DEFAULT_PRUNE_BELOW, DEFAULT_SIGMA,
};
use fisheye_bev_core::lut::{build_lut, RayLut};
use fisheye_bev_core::splat::{
    marginalize_to_ground, resample, splat_forward, BevGridSpec, BevRaster, Gaussian2,
    ResampleMode, DEFAULT_TRUNC_SIGMA,
};
use fisheye_bev_core::synth::{
    default_rig, gen_scene, make_oracle_inputs, rasterize_gt_bev, render_view, write_scene,
    SceneGenConfig, NUM_CLASSES,
};
use fisheye_bev_core::train::{
    format_history, iou, toy_train, BevLabels, ClassWeights, SceneBundle, ToyTrainConfig,
    DEFAULT_LEARN_RATE, DEFAULT_TRAIN_STRIDE,
};

#[derive(Parser)]
#[command(
    name = "fisheye-bev",
    about = "Fisheye-to-BEV geometric lifting and differentiable Gaussian splatting",
    version
)]
struct Cli {
    /// Worker thread cap (0 = all cores). Falls back to FISHEYE_BEV_THREADS.
    /// Results do not depend on the thread count.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Precompute a per-pixel unit-ray lookup table from a calibration.
    Lut(LutArgs),
    /// Lift per-pixel fields through their LUTs and splat a BEV raster.
    Splat(SplatArgs),
    /// Verify analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic scene bundle: views, oracle fields, labels.
    Synth(SynthArgs),
    /// Fit per-pixel depth/feature logits to scene labels end to end.
    TrainToy(TrainToyArgs),
    /// Score a predicted BEV raster against a label image.
    Eval(EvalArgs),
}

#[derive(Args)]
struct LutArgs {
    /// Calibration file (plain text).
    #[arg(long)]
    calib: PathBuf,
    /// Camera name inside the calibration; defaults to the only entry.
    #[arg(long)]
    camera: Option<String>,
    /// Subsampling factor; LUT dimensions are ceil(image_size / stride).
    #[arg(long, default_value_t = 1)]
    stride: u32,
    /// Output FLUT path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GridArgs {
    /// Grid x extent in meters: lo,hi.
    #[arg(long, value_parser = parse_pair, default_value = "-12,12")]
    x_range: (f64, f64),
    /// Grid y extent in meters: lo,hi.
    #[arg(long, value_parser = parse_pair, default_value = "-9,9")]
    y_range: (f64, f64),
    /// Cell size in meters.
    #[arg(long, default_value_t = 0.375)]
    resolution: f64,
}

impl GridArgs {
    fn to_spec(&self, channels: usize) -> Result<BevGridSpec> {
        Ok(BevGridSpec::new(
            [self.x_range.0, self.x_range.1],
            [self.y_range.0, self.y_range.1],
            self.resolution,
            channels,
        )?)
    }
}

#[derive(Args)]
struct BinArgs {
    /// Number of uniform depth bins.
    #[arg(long, default_value_t = 64)]
    bins: usize,
    /// Metric depth range: lo,hi in meters.
    #[arg(long, value_parser = parse_pair, default_value = "1,30")]
    depth_range: (f64, f64),
}

impl BinArgs {
    fn to_spec(&self) -> Result<DepthBinSpec> {
        Ok(DepthBinSpec::new(
            self.bins,
            self.depth_range.0,
            self.depth_range.1,
        )?)
    }
}

#[derive(Args)]
struct SplatArgs {
    /// Calibration file providing extrinsics for every --cam.
    #[arg(long)]
    calib: PathBuf,
    /// Camera name; repeat the group --cam/--lut/--depth/--features
    /// (and optionally --sigma) once per camera.
    #[arg(long = "cam", required = true)]
    cams: Vec<String>,
    /// FLUT file per camera.
    #[arg(long = "lut", required = true)]
    luts: Vec<PathBuf>,
    /// FPFD depth field per camera (bin probabilities, or logits with
    /// --depth-logits).
    #[arg(long = "depth", required = true)]
    depths: Vec<PathBuf>,
    /// FPFD feature field per camera (payload channels).
    #[arg(long = "features", required = true)]
    features: Vec<PathBuf>,
    /// FPFD sigma field per camera; omit to use --sigma-const everywhere.
    #[arg(long = "sigma")]
    sigmas: Vec<PathBuf>,
    /// Constant depth uncertainty in meters when no sigma field is given.
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    sigma_const: f64,
    /// Treat depth fields as logits and apply a per-pixel softmax.
    #[arg(long)]
    depth_logits: bool,
    #[command(flatten)]
    grid: GridArgs,
    #[command(flatten)]
    bins: BinArgs,
    /// Mahalanobis truncation radius.
    #[arg(long, default_value_t = DEFAULT_TRUNC_SIGMA)]
    trunc_sigma: f64,
    /// Drop lifted Gaussians with weight below this.
    #[arg(long, default_value_t = DEFAULT_PRUNE_BELOW)]
    prune_below: f64,
    /// Divide accumulated features by per-cell mass.
    #[arg(long)]
    normalize: bool,
    /// Output BEVR raster path.
    #[arg(long)]
    out: PathBuf,
    /// Also write 8-bit previews with this path prefix.
    #[arg(long)]
    preview: Option<PathBuf>,
    /// Also write a raster resampled to this resolution (meters/cell),
    /// e.g. 0.1 for a 240x180 grid over the default extents.
    #[arg(long, requires = "resample_out")]
    resample_resolution: Option<f64>,
    /// Output path for the resampled raster.
    #[arg(long, requires = "resample_resolution")]
    resample_out: Option<PathBuf>,
    /// Resampling mode for --resample-resolution.
    #[arg(long, value_parser = ["nearest", "bilinear"], default_value = "bilinear")]
    resample_mode: String,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 17)]
    seed: u64,
    /// Random Gaussians for the splat check.
    #[arg(long, default_value_t = 100)]
    count: usize,
    /// Finite-difference step.
    #[arg(long, default_value_t = DEFAULT_FD_STEP)]
    step: f64,
    /// Depth-logit probes for the end-to-end check.
    #[arg(long, default_value_t = 24)]
    probes: usize,
    /// Tolerance for splat mean/weight/feature gradients.
    #[arg(long, default_value_t = 1e-4)]
    tol_splat: f64,
    /// Tolerance for splat covariance gradients.
    #[arg(long, default_value_t = 1e-3)]
    tol_cov: f64,
    /// Tolerance for the cross-entropy gradient.
    #[arg(long, default_value_t = 1e-6)]
    tol_ce: f64,
    /// Tolerance for the end-to-end depth-logit gradient.
    #[arg(long, default_value_t = 1e-3)]
    tol_e2e: f64,
    /// Negative-control hook: scales one analytic gradient by (1 + x)
    /// before comparing, which must make the check fail.
    #[arg(long, default_value_t = 0.0)]
    perturb: f64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    seed: u64,
    /// Output directory for the scene bundle.
    #[arg(long)]
    out: PathBuf,
    /// Box count range: min,max.
    #[arg(long, value_parser = parse_upair, default_value = "2,4")]
    boxes: (usize, usize),
    /// Calibration file describing the rig; defaults to the built-in
    /// four-camera surround rig.
    #[arg(long)]
    rig: Option<PathBuf>,
    /// LUT/render subsampling factor.
    #[arg(long, default_value_t = 1)]
    stride: u32,
    /// Base sigma for the oracle fields, meters.
    #[arg(long, default_value_t = 0.06)]
    oracle_sigma: f64,
    #[command(flatten)]
    grid: GridArgs,
    #[command(flatten)]
    bins: BinArgs,
}

#[derive(Args)]
struct TrainToyArgs {
    /// Dataset directory holding scene bundle subdirectories.
    #[arg(long)]
    data: PathBuf,
    /// Metric history output (CSV).
    #[arg(long)]
    out: PathBuf,
    /// Leading scene count used for the training loss.
    #[arg(long, default_value_t = 8)]
    train: usize,
    /// Trailing scene count reported as held-out IoU.
    #[arg(long, default_value_t = 2)]
    eval: usize,
    #[arg(long, default_value_t = 500)]
    iters: usize,
    #[arg(long, default_value_t = DEFAULT_LEARN_RATE)]
    lr: f64,
    /// LUT stride for the per-pixel parameter grids.
    #[arg(long, default_value_t = DEFAULT_TRAIN_STRIDE)]
    stride: u32,
    /// Per-class loss weights, comma separated; defaults to inverse
    /// class frequency clipped to [0.1, 10].
    #[arg(long, value_parser = parse_f64_list)]
    class_weights: Option<Vec<f64>>,
    #[arg(long, default_value_t = DEFAULT_TRUNC_SIGMA)]
    trunc_sigma: f64,
    #[arg(long, default_value_t = DEFAULT_PRUNE_BELOW)]
    prune_below: f64,
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    sigma: f64,
    #[command(flatten)]
    grid: GridArgs,
    #[command(flatten)]
    bins: BinArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted BEV raster (BEVR); classes are the per-cell argmax.
    #[arg(long)]
    pred: PathBuf,
    /// Label image (8-bit PGM of class ids; 255 marks ignored cells).
    #[arg(long)]
    labels: PathBuf,
    /// Optional per-class weights for the weighted mean IoU row.
    #[arg(long, value_parser = parse_f64_list)]
    weights: Option<Vec<f64>>,
    /// Per-class minimum IoU, comma separated; empty slots skip the
    /// check (e.g. ",0.9,0.7"). Exit code 1 when violated.
    #[arg(long)]
    min_iou: Option<String>,
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(format!("expected lo,hi got '{s}'"));
    }
    let lo = parts[0].trim().parse::<f64>().map_err(|e| e.to_string())?;
    let hi = parts[1].trim().parse::<f64>().map_err(|e| e.to_string())?;
    Ok((lo, hi))
}

fn parse_upair(s: &str) -> Result<(usize, usize), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(format!("expected min,max got '{s}'"));
    }
    let lo = parts[0].trim().parse::<usize>().map_err(|e| e.to_string())?;
    let hi = parts[1].trim().parse::<usize>().map_err(|e| e.to_string())?;
    Ok((lo, hi))
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| e.to_string()))
        .collect()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = if cli.threads > 0 {
        cli.threads
    } else {
        std::env::var("FISHEYE_BEV_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(0)
    };
    if threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: could not size the thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let outcome = match cli.command {
        Command::Lut(args) => cmd_lut(args),
        Command::Splat(args) => cmd_splat(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Synth(args) => cmd_synth(args),
        Command::TrainToy(args) => cmd_train_toy(args),
        Command::Eval(args) => cmd_eval(args),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn pick_camera<'a>(cameras: &'a [FisheyeCamera], name: Option<&str>) -> Result<&'a FisheyeCamera> {
    match name {
        Some(n) => cameras
            .iter()
            .find(|c| c.name == n)
            .with_context(|| format!("camera '{n}' not found in calibration")),
        None if cameras.len() == 1 => Ok(&cameras[0]),
        None => bail!(
            "calibration has {} cameras; pick one with --camera",
            cameras.len()
        ),
    }
}

fn cmd_lut(args: LutArgs) -> Result<u8> {
    if args.stride < 1 {
        bail!("--stride must be >= 1");
    }
    let cameras = load_calibration(&args.calib)
        .with_context(|| format!("reading calibration {}", args.calib.display()))?;
    let camera = pick_camera(&cameras, args.camera.as_deref())?;
    let lut = build_lut(&camera.intrinsics, args.stride)?;
    lut.save(&args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    eprintln!(
        "wrote {} ({}x{}, {} valid rays)",
        args.out.display(),
        lut.width(),
        lut.height(),
        lut.valid_count()
    );
    Ok(0)
}

fn cmd_splat(args: SplatArgs) -> Result<u8> {
    let n = args.cams.len();
    if args.luts.len() != n || args.depths.len() != n || args.features.len() != n {
        bail!(
            "camera groups must align: {} --cam, {} --lut, {} --depth, {} --features",
            n,
            args.luts.len(),
            args.depths.len(),
            args.features.len()
        );
    }
    if !args.sigmas.is_empty() && args.sigmas.len() != n {
        bail!("--sigma must be given for no or all cameras");
    }
    let cameras = load_calibration(&args.calib)?;
    let bins = args.bins.to_spec()?;
    let lift_cfg = LiftConfig {
        prune_below: args.prune_below,
        ..LiftConfig::default()
    };

    let mut gaussians: Vec<Gaussian2> = Vec::new();
    let mut channels: Option<usize> = None;
    for (idx, name) in args.cams.iter().enumerate() {
        let camera = pick_camera(&cameras, Some(name))?;
        let lut = RayLut::load(&args.luts[idx])
            .with_context(|| format!("reading {}", args.luts[idx].display()))?;
        let depth_field = PixelField::load(&args.depths[idx])
            .with_context(|| format!("reading {}", args.depths[idx].display()))?;
        let depth = if args.depth_logits {
            DepthDistribution::from_logits(&depth_field)
        } else {
            DepthDistribution::new(depth_field)?
        };
        let features = PixelField::load(&args.features[idx])
            .with_context(|| format!("reading {}", args.features[idx].display()))?;
        match channels {
            None => channels = Some(features.channels()),
            Some(c) if c == features.channels() => {}
            Some(c) => bail!(
                "feature channel mismatch: camera '{name}' has {}, expected {c}",
                features.channels()
            ),
        }
        let sigma = if args.sigmas.is_empty() {
            PixelField::constant(lut.width(), lut.height(), args.sigma_const)
        } else {
            PixelField::load(&args.sigmas[idx])
                .with_context(|| format!("reading {}", args.sigmas[idx].display()))?
        };
        let lifted = lift_camera(
            &lut,
            &camera.extrinsics,
            &bins,
            &depth,
            &sigma,
            &features,
            &lift_cfg,
        )?;
        gaussians.extend(lifted.iter().map(marginalize_to_ground));
    }

    let spec = args.grid.to_spec(channels.unwrap_or(1))?;
    let raster = splat_forward(&gaussians, &spec, args.trunc_sigma, args.normalize)?;
    raster
        .save(&args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    eprintln!(
        "splatted {} gaussians onto {}x{}x{} ({})",
        gaussians.len(),
        spec.rows(),
        spec.cols(),
        spec.channels(),
        args.out.display()
    );
    if let Some(prefix) = &args.preview {
        let files = write_raster_preview(&raster, prefix)?;
        for p in files.images {
            eprintln!("preview {}", p.display());
        }
    }
    if let (Some(resolution), Some(path)) = (args.resample_resolution, &args.resample_out) {
        let mode = match args.resample_mode.as_str() {
            "nearest" => ResampleMode::Nearest,
            _ => ResampleMode::Bilinear,
        };
        let fine = resample(&raster, resolution, mode)?;
        fine.save(path)
            .with_context(|| format!("writing {}", path.display()))?;
        eprintln!(
            "resampled to {}x{} ({})",
            fine.spec().rows(),
            fine.spec().cols(),
            path.display()
        );
    }
    Ok(0)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<u8> {
    if args.step <= 0.0 {
        bail!("--step must be positive");
    }
    let splat = splat_gradcheck(args.seed, args.count, args.step, args.perturb)?;
    let ce = ce_gradcheck(args.seed.wrapping_add(1), args.perturb)?;
    let e2e = end_to_end_gradcheck(args.seed.wrapping_add(2), args.probes, args.perturb)?;

    let rows = [
        ("splat_weight", splat.weight, args.tol_splat),
        ("splat_mean", splat.mean, args.tol_splat),
        ("splat_cov", splat.cov, args.tol_cov),
        ("splat_feature", splat.feature, args.tol_splat),
        ("weighted_ce", ce, args.tol_ce),
        ("end_to_end", e2e, args.tol_e2e),
    ];
    let mut all_pass = true;
    eprintln!(
        "{:<14} {:>14} {:>10} {:>6}",
        "group", "worst_rel_err", "tolerance", "pass"
    );
    for (name, err, tol) in rows {
        let pass = err < tol;
        all_pass &= pass;
        eprintln!(
            "{name:<14} {err:>14.3e} {tol:>10.0e} {:>6}",
            if pass { "yes" } else { "NO" }
        );
        println!("{name},{err:.9e},{tol:.0e},{}", if pass { "pass" } else { "fail" });
    }
    Ok(if all_pass { 0 } else { 1 })
}

fn cmd_synth(args: SynthArgs) -> Result<u8> {
    if args.boxes.0 > args.boxes.1 {
        bail!("--boxes min exceeds max");
    }
    let rig = match &args.rig {
        Some(path) => {
            let cams =
                load_calibration(path).with_context(|| format!("reading rig {}", path.display()))?;
            if cams.is_empty() {
                bail!("rig file {} has no cameras", path.display());
            }
            cams
        }
        None => default_rig(),
    };
    let gen_cfg = SceneGenConfig {
        box_count: args.boxes,
        ..SceneGenConfig::default()
    };
    let scene = gen_scene(args.seed, &gen_cfg)?;
    let grid = args.grid.to_spec(NUM_CLASSES)?;
    let bins = args.bins.to_spec()?;

    std::fs::create_dir_all(&args.out)?;
    let views_dir = args.out.join("views");
    let oracle_dir = args.out.join("oracle");
    std::fs::create_dir_all(&views_dir)?;
    std::fs::create_dir_all(&oracle_dir)?;

    std::fs::write(args.out.join("scene.txt"), write_scene(&scene))?;
    std::fs::write(args.out.join("calibration.txt"), write_calibration(&rig))?;

    let labels = rasterize_gt_bev(&scene, &grid)?;
    write_pgm(
        &args.out.join("gt_labels.pgm"),
        &GrayImage::new(labels.cols(), labels.rows(), labels.class_ids().to_vec()),
    )?;

    for cam in &rig {
        let lut = build_lut(&cam.intrinsics, args.stride)?;
        let view = render_view(&scene, &cam.extrinsics, &lut);
        write_pgm(
            &views_dir.join(format!("{}_semantic.pgm", cam.name)),
            &GrayImage::new(view.width, view.height, view.semantic.clone()),
        )?;
        PixelField::from_data(view.width, view.height, 1, view.depth.clone())
            .save(&views_dir.join(format!("{}_depth.fpfd", cam.name)))?;

        let oracle = make_oracle_inputs(&view, &bins, args.oracle_sigma);
        oracle
            .depth
            .field()
            .save(&oracle_dir.join(format!("{}_depth.fpfd", cam.name)))?;
        oracle
            .features
            .save(&oracle_dir.join(format!("{}_features.fpfd", cam.name)))?;
        oracle
            .sigma
            .save(&oracle_dir.join(format!("{}_sigma.fpfd", cam.name)))?;
    }
    eprintln!(
        "scene {} with {} boxes written to {}",
        args.seed,
        scene.boxes.len(),
        args.out.display()
    );
    Ok(0)
}

fn cmd_train_toy(args: TrainToyArgs) -> Result<u8> {
    let mut scene_dirs: Vec<PathBuf> = std::fs::read_dir(&args.data)
        .with_context(|| format!("reading dataset dir {}", args.data.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    scene_dirs.sort();
    let needed = args.train + args.eval;
    if args.train == 0 {
        bail!("--train must be at least 1");
    }
    if scene_dirs.len() < needed {
        bail!(
            "dataset has {} scene directories, need {needed} (--train {} + --eval {})",
            scene_dirs.len(),
            args.train,
            args.eval
        );
    }
    scene_dirs.truncate(needed);

    let grid = args.grid.to_spec(NUM_CLASSES)?;
    let mut bundles = Vec::with_capacity(needed);
    for dir in &scene_dirs {
        let rig = load_calibration(&dir.join("calibration.txt"))
            .with_context(|| format!("scene {}", dir.display()))?;
        let labels_img =
            read_pgm(&dir.join("gt_labels.pgm")).with_context(|| format!("scene {}", dir.display()))?;
        if labels_img.width != grid.cols() || labels_img.height != grid.rows() {
            bail!(
                "{}: label image is {}x{}, grid is {}x{}",
                dir.display(),
                labels_img.width,
                labels_img.height,
                grid.cols(),
                grid.rows()
            );
        }
        let ignored: Vec<bool> = labels_img.pixels.iter().map(|&p| p == 255).collect();
        let labels = BevLabels::from_class_ids(
            grid.rows(),
            grid.cols(),
            NUM_CLASSES,
            labels_img
                .pixels
                .iter()
                .map(|&p| if p == 255 { 0 } else { p })
                .collect(),
            Some(ignored),
        )?;
        let mut luts = Vec::with_capacity(rig.len());
        for cam in &rig {
            luts.push(build_lut(&cam.intrinsics, args.stride)?);
        }
        bundles.push(SceneBundle {
            name: dir
                .file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned(),
            extrinsics: rig.iter().map(|c| c.extrinsics.clone()).collect(),
            luts,
            labels,
        });
    }

    let class_weights = match &args.class_weights {
        Some(w) => Some(ClassWeights::new(w.clone())?),
        None => None,
    };
    let cfg = ToyTrainConfig {
        grid,
        bins: args.bins.to_spec()?,
        learn_rate: args.lr,
        iterations: args.iters,
        class_weights,
        trunc_sigma: args.trunc_sigma,
        prune_below: args.prune_below,
        sigma: args.sigma,
        train_count: args.train,
    };
    let result = toy_train(&bundles, &cfg)?;
    std::fs::write(&args.out, format_history(&result.history))
        .with_context(|| format!("writing {}", args.out.display()))?;
    let last = result.history.last().expect("history is never empty");
    eprintln!(
        "trained {} scenes for {} iterations: loss {:.6} -> {:.6}, metrics in {}",
        args.train,
        args.iters,
        result.history[0].train_loss,
        last.train_loss,
        args.out.display()
    );
    Ok(0)
}

fn cmd_eval(args: EvalArgs) -> Result<u8> {
    let raster =
        BevRaster::load(&args.pred).with_context(|| format!("reading {}", args.pred.display()))?;
    let labels_img =
        read_pgm(&args.labels).with_context(|| format!("reading {}", args.labels.display()))?;
    let spec = raster.spec();
    if labels_img.width != spec.cols() || labels_img.height != spec.rows() {
        bail!(
            "label image is {}x{}, raster is {}x{}",
            labels_img.width,
            labels_img.height,
            spec.cols(),
            spec.rows()
        );
    }
    let classes = spec.channels();
    let ignored: Vec<bool> = labels_img.pixels.iter().map(|&p| p == 255).collect();
    let labels = BevLabels::from_class_ids(
        spec.rows(),
        spec.cols(),
        classes,
        labels_img
            .pixels
            .iter()
            .map(|&p| if p == 255 { 0 } else { p })
            .collect(),
        Some(ignored),
    )?;
    let pred = raster.argmax_classes();
    let (per_class, counts) = iou(&pred, &labels)?;

    let thresholds: Vec<Option<f64>> = match &args.min_iou {
        Some(list) => list
            .split(',')
            .map(|p| {
                let p = p.trim();
                if p.is_empty() {
                    Ok(None)
                } else {
                    p.parse::<f64>()
                        .map(Some)
                        .map_err(|e| anyhow::anyhow!("bad --min-iou entry '{p}': {e}"))
                }
            })
            .collect::<Result<_>>()?,
        None => vec![None; classes],
    };
    if thresholds.len() > classes {
        bail!("--min-iou has {} entries for {classes} classes", thresholds.len());
    }

    eprintln!("{:<8} {:>10} {:>8} {:>8} {:>8}", "class", "iou", "tp", "fp", "fn");
    let mut failed = false;
    let mut weighted_sum = 0.0;
    let mut weight_total = 0.0;
    for (c, value) in per_class.iter().enumerate() {
        let shown = value
            .map(|v| format!("{v:.6}"))
            .unwrap_or_else(|| "undef".to_string());
        eprintln!(
            "{c:<8} {shown:>10} {:>8} {:>8} {:>8}",
            counts.true_positives[c], counts.false_positives[c], counts.false_negatives[c]
        );
        println!(
            "{c},{},{},{},{}",
            value
                .map(|v| format!("{v:.9}"))
                .unwrap_or_else(|| "nan".to_string()),
            counts.true_positives[c],
            counts.false_positives[c],
            counts.false_negatives[c]
        );
        if let (Some(v), Some(Some(t))) = (*value, thresholds.get(c)) {
            if v < *t {
                eprintln!("class {c} iou {v:.6} below threshold {t}");
                failed = true;
            }
        }
        if let Some(v) = value {
            let w = args
                .weights
                .as_ref()
                .and_then(|ws| ws.get(c).copied())
                .unwrap_or(1.0);
            weighted_sum += w * v;
            weight_total += w;
        }
    }
    if weight_total > 0.0 {
        let mean = weighted_sum / weight_total;
        eprintln!("mean iou (defined classes): {mean:.6}");
        println!("mean,{mean:.9},,,");
    }
    Ok(if failed { 1 } else { 0 })
}
