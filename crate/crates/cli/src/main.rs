use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;

use splatvox::blocked::{bench, BenchSpec};
use splatvox::fit::{fit_pipeline, fit_stage1, fit_stage2, FitConfig};
use splatvox::metrics::{iou_miou, lidar_pattern, rayiou, RAYIOU_THRESHOLDS};
use splatvox::params::QueryParamSet;
use splatvox::scene::{gen_scene, load_scene, GridSpec, SceneSpec};
use splatvox::splat::SplatConfig;
use splatvox::{blocked, io, Result};

#[derive(Parser)]
#[command(
    name = "splatvox",
    about = "Semantic Gaussian occupancy: scene generation, fitting, splatting, evaluation, and kernel benchmarks",
    version
)]
struct Cli {
    /// Worker threads (0 uses all available).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Deterministic kernel scheduling (outputs are bit-stable across
    /// worker counts either way).
    #[arg(long, global = true, value_name = "BOOL", default_value_t = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene and write it to a directory.
    GenScene(GenSceneArgs),
    /// Run the two-stage fitting pipeline on a generated scene.
    Fit(FitArgs),
    /// Splat a Gaussian set onto a grid and write the argmax labels.
    Splat(SplatArgs),
    /// Evaluate a predicted grid against ground truth.
    Eval(EvalArgs),
    /// Benchmark the naive vs blocked splatting kernels.
    Bench(BenchArgs),
    /// Streaming fitting over all frames, one metrics row per frame.
    StreamSim(StreamSimArgs),
}

#[derive(Args)]
struct GenSceneArgs {
    /// Scene spec JSON.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Stage {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Args)]
struct FitArgs {
    /// Scene directory written by gen-scene.
    #[arg(long)]
    scene: PathBuf,
    /// Fit config JSON (defaults apply when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "both")]
    stage: Stage,
    /// Stage-2 initialization from a stage-1 params JSON.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplatArgs {
    /// Gaussian set (.sgau).
    #[arg(long)]
    gaussians: PathBuf,
    /// Grid spec JSON ({origin, voxel_size, dims, class_count}).
    #[arg(long, value_name = "PATH")]
    grid_spec: PathBuf,
    /// Output labeled grid (.svox).
    #[arg(long)]
    out: PathBuf,
    /// Also write the raw occupancy field rows as JSON.
    #[arg(long)]
    field_out: Option<PathBuf>,
    #[arg(long, default_value_t = 3.0)]
    cutoff_sigma: f64,
    /// Disable opacity weighting of the occupancy probability.
    #[arg(long)]
    unweighted: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted grid (.svox).
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth grid (.svox).
    #[arg(long)]
    gt: PathBuf,
    /// Ray origin "x,y,z" for RayIoU; repeatable. Defaults to the grid
    /// center.
    #[arg(long)]
    ray_origin: Vec<String>,
    #[arg(long, default_value_t = 32)]
    rings: usize,
    #[arg(long, default_value_t = 360)]
    azimuth_steps: usize,
    /// Write the metrics JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 9000)]
    gaussians: usize,
    /// Grid dims as "XxYxZ".
    #[arg(long, default_value = "200x200x16")]
    grid: String,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    class_count: usize,
    /// Write the report JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StreamSimArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn load_config(path: &Option<PathBuf>, deterministic: bool) -> Result<FitConfig> {
    let mut cfg: FitConfig = match path {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => FitConfig::default(),
    };
    cfg.deterministic = deterministic;
    Ok(cfg)
}

fn write_json<T: serde::Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn parse_dims(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| splatvox::Error::SchemaError(format!("bad grid dims '{}': {}", s, e)))?;
    if parts.len() != 3 {
        return Err(splatvox::Error::SchemaError(format!(
            "grid dims must be XxYxZ, got '{}'",
            s
        )));
    }
    Ok([parts[0], parts[1], parts[2]])
}

fn parse_vec3(s: &str) -> Result<Vector3<f64>> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| splatvox::Error::SchemaError(format!("bad vector '{}': {}", s, e)))?;
    if parts.len() != 3 {
        return Err(splatvox::Error::SchemaError(format!(
            "vector must be x,y,z, got '{}'",
            s
        )));
    }
    Ok(Vector3::new(parts[0], parts[1], parts[2]))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenScene(args) => {
            let spec: SceneSpec = serde_json::from_str(&std::fs::read_to_string(&args.spec)?)?;
            let scene = gen_scene(&spec, args.seed, &args.out)?;
            eprintln!(
                "wrote {} frames to {}",
                scene.frames.len(),
                args.out.display()
            );
            Ok(())
        }
        Command::Fit(args) => {
            let scene = load_scene(&args.scene)?;
            let cfg = load_config(&args.config, cli.deterministic)?;
            std::fs::create_dir_all(&args.out)?;
            match args.stage {
                Stage::One => {
                    let stage1 = fit_stage1(&scene, &cfg)?;
                    for s in &stage1 {
                        write_json(
                            args.out.join(format!("stage1_params_{:03}.json", s.frame)),
                            &s.params,
                        )?;
                        write_json(
                            args.out.join(format!("stage1_report_{:03}.json", s.frame)),
                            &s.report,
                        )?;
                    }
                    eprintln!("stage 1 done ({} frame fits)", stage1.len());
                }
                Stage::Two => {
                    let init: Option<QueryParamSet> = match &args.init {
                        Some(p) => Some(serde_json::from_str(&std::fs::read_to_string(p)?)?),
                        None => None,
                    };
                    let (params, report) = fit_stage2(&scene, init.as_ref(), &cfg)?;
                    write_outputs(&args.out, &scene, &cfg, &params, &report)?;
                    eprintln!(
                        "stage 2 done: mean IoU {:.4}, mean mIoU {:.4}",
                        report.mean_iou, report.mean_miou
                    );
                }
                Stage::Both => {
                    let (params, stage1, report) = fit_pipeline(&scene, &cfg)?;
                    for s in &stage1 {
                        write_json(
                            args.out.join(format!("stage1_params_{:03}.json", s.frame)),
                            &s.params,
                        )?;
                        write_json(
                            args.out.join(format!("stage1_report_{:03}.json", s.frame)),
                            &s.report,
                        )?;
                    }
                    write_outputs(&args.out, &scene, &cfg, &params, &report)?;
                    eprintln!(
                        "pipeline done: mean IoU {:.4}, mean mIoU {:.4}",
                        report.mean_iou, report.mean_miou
                    );
                }
            }
            Ok(())
        }
        Command::Splat(args) => {
            let (gaussians, class_count) = io::read_gaussians(&args.gaussians)?;
            let grid_spec: GridSpec =
                serde_json::from_str(&std::fs::read_to_string(&args.grid_spec)?)?;
            if grid_spec.class_count != class_count {
                return Err(splatvox::Error::ShapeMismatch(format!(
                    "gaussian file has {} classes, grid spec {}",
                    class_count, grid_spec.class_count
                )));
            }
            let grid = grid_spec.to_grid();
            let cfg = SplatConfig {
                cutoff_sigma: args.cutoff_sigma,
                opacity_weighted: !args.unweighted,
                deterministic: cli.deterministic,
                ..SplatConfig::default()
            };
            let field = blocked::splat_forward_blocked(&gaussians, &grid, &cfg)?;
            let labels = field.to_label_grid(&grid);
            io::write_grid(&args.out, &labels)?;
            if let Some(field_out) = args.field_out {
                write_json(field_out, &field.data)?;
            }
            eprintln!(
                "splatted {} gaussians onto {:?} voxels",
                gaussians.len(),
                grid.dims
            );
            Ok(())
        }
        Command::Eval(args) => {
            let pred = io::read_grid(&args.pred)?;
            let gt = io::read_grid(&args.gt)?;
            let voxel = iou_miou(&pred, &gt)?;
            let origins: Vec<Vector3<f64>> = if args.ray_origin.is_empty() {
                vec![gt.origin + gt.max_corner().scale(0.5) - gt.origin.scale(0.5)]
            } else {
                args.ray_origin
                    .iter()
                    .map(|s| parse_vec3(s))
                    .collect::<Result<_>>()?
            };
            let rays = lidar_pattern(&origins, args.rings, args.azimuth_steps, [-30.0, 10.0]);
            let ray = rayiou(&pred, &gt, &rays, &RAYIOU_THRESHOLDS)?;
            let report = serde_json::json!({
                "iou": voxel.iou,
                "miou": voxel.miou,
                "per_class": voxel.per_class,
                "rayiou": ray.rayiou,
                "rayiou_per_threshold": ray.per_threshold,
            });
            match args.out {
                Some(p) => write_json(p, &report)?,
                None => println!("{}", serde_json::to_string_pretty(&report)?),
            }
            Ok(())
        }
        Command::Bench(args) => {
            let spec = BenchSpec {
                gaussians: args.gaussians,
                grid_dims: parse_dims(&args.grid)?,
                class_count: args.class_count,
                seed: args.seed,
                ..BenchSpec::default()
            };
            let cfg = SplatConfig {
                deterministic: cli.deterministic,
                ..SplatConfig::default()
            };
            let report = bench(&spec, args.reps, &cfg)?;
            match args.out {
                Some(p) => write_json(p, &report)?,
                None => println!("{}", serde_json::to_string_pretty(&report)?),
            }
            Ok(())
        }
        Command::StreamSim(args) => {
            let scene = load_scene(&args.scene)?;
            let cfg = load_config(&args.config, cli.deterministic)?;
            std::fs::create_dir_all(&args.out)?;
            let (params, report) = fit_stage2(&scene, None, &cfg)?;
            write_outputs(&args.out, &scene, &cfg, &params, &report)?;
            for fr in &report.frames {
                println!(
                    "{}",
                    serde_json::json!({
                        "frame": fr.frame,
                        "iou": fr.voxel.iou,
                        "miou": fr.voxel.miou,
                        "rayiou": fr.ray.rayiou,
                    })
                );
            }
            Ok(())
        }
    }
}

fn write_outputs(
    out: &Path,
    scene: &splatvox::scene::SyntheticScene,
    _cfg: &FitConfig,
    params: &QueryParamSet,
    report: &splatvox::fit::Stage2Report,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    write_json(out.join("params.json"), params)?;
    let (gaussians, _) = params.decode_gaussians();
    io::write_gaussians(
        out.join("gaussians.sgau"),
        &gaussians,
        scene.spec.grid.class_count,
    )?;
    write_json(out.join("metrics.json"), report)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            eprintln!("error: failed to size thread pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
