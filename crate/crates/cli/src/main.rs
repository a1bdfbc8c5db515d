//! `pddf`: command-line pipelines for fitting, rendering, composing and
//! interrogating directed distance fields.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use pddf::compose::load_scene;
use pddf::evaluator::{DifferentiableField, DirectionGradient};
use pddf::extract::{chamfer_f_score, fit_vstar, read_xyz, sample_point_cloud, save_vstar, udf_query, write_xyz};
use pddf::field::{load_checkpoint, read_checkpoint, PddfModel};
use pddf::geometry::{load_obj, AnalyticShape, Vec3};
use pddf::renderer::{
    render_curvature, render_depth_visibility, render_normals, write_images, RenderedImages, DEFAULT_XI_THRESHOLD,
};
use pddf::sampler::{generate, load_dataset, read_dataset, write_dataset, Dataset, Oracle, SampleType};
use pddf::trainer::{ablation_experiment, fit_shape, TrainOutputs};
use pddf::validators::run_checks;
use pddf::Error;

use config::Config;

#[derive(Parser)]
#[command(name = "pddf", version, about = "Probabilistic directed distance fields")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample labelled training data from a shape.
    ExtractData {
        /// OBJ mesh path or built-in shape such as `analytic:sphere:0.9`.
        #[arg(long)]
        mesh: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a field to a shape or a dataset file.
    Fit {
        #[command(flatten)]
        source: DataSource,
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines training log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Render depth, visibility, normal and curvature images.
    Render {
        #[command(flatten)]
        model: ModelArg,
        #[command(flatten)]
        camera: CameraArgs,
        /// Output path stem.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated subset of depth,xi,normals,curvature.
        #[arg(long, default_value = "depth,xi,normals")]
        maps: String,
    },
    /// Render depth and visibility of a composed scene.
    ComposeRender {
        /// Scene JSON file.
        #[arg(long)]
        scene: PathBuf,
        #[command(flatten)]
        camera: CameraArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the closest-direction field and optionally evaluate the UDF.
    ExtractUdf {
        #[command(flatten)]
        model: ModelArg,
        /// Where to save the direction field.
        #[arg(long)]
        out: PathBuf,
        /// XYZ points to evaluate.
        #[arg(long)]
        points: Option<PathBuf>,
        /// Output for `udf vx vy vz confident` lines.
        #[arg(long)]
        udf_out: Option<PathBuf>,
    },
    /// Sample a surface point cloud.
    SamplePc {
        #[command(flatten)]
        model: ModelArg,
        /// Number of points (overrides the configuration).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Chamfer distance and F-scores between two XYZ files.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, default_value_t = pddf::extract::DEFAULT_TAU)]
        tau: f64,
    },
    /// Run geometric property checks; exits 1 if any fails.
    Validate {
        #[command(flatten)]
        model: ModelArg,
        /// Comma-separated subset of eikonal,gradnorm,consistency,view.
        #[arg(long, default_value = "eikonal,gradnorm,consistency,view")]
        checks: String,
    },
    /// Train with one sample type removed and report per-type errors.
    Ablate {
        #[command(flatten)]
        source: DataSource,
        /// Sample type to drop (U, A, B, S, T, O), `none`, or `all` for the
        /// full table.
        #[arg(long, default_value = "all")]
        drop: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the header of a dataset or checkpoint file.
    Info { path: PathBuf },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct DataSource {
    /// OBJ mesh path or built-in shape such as `analytic:sphere:0.9`.
    #[arg(long)]
    mesh: Option<String>,
    /// Dataset file written by `extract-data`.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArg {
    /// Checkpoint path or built-in shape such as `analytic:sphere:0.9`.
    #[arg(long)]
    model: String,
}

#[derive(Args)]
struct CameraArgs {
    /// Camera position `x,y,z` (overrides the configuration).
    #[arg(long)]
    camera: Option<String>,
    /// Look-at point `x,y,z`.
    #[arg(long)]
    look_at: Option<String>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    /// Vertical field of view in degrees.
    #[arg(long)]
    fov: Option<f64>,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(_) | Error::Format { .. } => 3,
            Error::NonFinite { .. } => 4,
            Error::InvalidInput(_) | Error::EmptySurface => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Everything a loaded model needs to support.
trait FullField: DifferentiableField + DirectionGradient {}
impl<T: DifferentiableField + DirectionGradient> FullField for T {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok((summary, code)) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&summary).expect("summary serializes")
            );
            ExitCode::from(code)
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> CliResult<(Value, u8)> {
    let mut config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        config.set_seed(seed);
    }
    config.validate()?;
    match cli.command {
        Command::ExtractData { mesh, out } => {
            let oracle = parse_oracle(&mesh)?;
            let dataset = generate(&oracle, &config.dataset)?;
            write_dataset(&dataset, std::io::BufWriter::new(create(&out)?))?;
            Ok((
                json!({"dataset": out, "header": dataset.header, "samples": dataset.samples.len()}),
                0,
            ))
        }
        Command::Fit { source, out, log } => {
            let (dataset, held_out) = load_source(&source, &config)?;
            let outputs = TrainOutputs {
                checkpoint: Some(out.clone()),
                log,
            };
            let (_, report) = fit_shape(
                &dataset,
                held_out.as_ref().map(|d| &d.samples[..]),
                &config.train,
                &outputs,
            )?;
            Ok((
                json!({
                    "checkpoint": out,
                    "iterations": config.train.effective_iterations(),
                    "final_lr": report.final_lr,
                    "lr_reductions": report.lr_reductions,
                    "final_losses": report.history.last().map(|r| r.losses),
                    "held_out": report.held_out,
                }),
                0,
            ))
        }
        Command::Render {
            model,
            camera,
            out,
            maps,
        } => {
            let field = load_model(&model.model)?;
            let camera = apply_camera(&config, &camera)?;
            let maps = split_list(&maps);
            for m in &maps {
                if !["depth", "xi", "normals", "curvature"].contains(&m.as_str()) {
                    return Err(usage(format!("unknown map {m:?}")));
                }
            }
            let wants = |name: &str| maps.iter().any(|m| m == name);
            let mut images = RenderedImages::default();
            if wants("depth") || wants("xi") {
                let dv = render_depth_visibility(&*field, &camera)?;
                images.depth = wants("depth").then_some(dv.depth);
                images.visibility = wants("xi").then_some(dv.visibility);
            }
            if wants("normals") {
                images.normals = Some(render_normals(&*field, &camera, DEFAULT_XI_THRESHOLD)?);
            }
            if wants("curvature") {
                images.curvature = Some(render_curvature(&*field, &camera, DEFAULT_XI_THRESHOLD)?);
            }
            let written = write_images(&images, &out)?;
            Ok((
                json!({"written": written, "width": camera.width, "height": camera.height}),
                0,
            ))
        }
        Command::ComposeRender { scene, camera, out } => {
            let scene = load_scene(&scene, config.compose)?;
            let camera = apply_camera(&config, &camera)?;
            let dv = render_depth_visibility(&scene, &camera)?;
            let images = RenderedImages {
                depth: Some(dv.depth),
                visibility: Some(dv.visibility),
                ..RenderedImages::default()
            };
            let written = write_images(&images, &out)?;
            Ok((json!({"written": written, "parts": scene.parts.len()}), 0))
        }
        Command::ExtractUdf {
            model,
            out,
            points,
            udf_out,
        } => {
            let field = load_model(&model.model)?;
            let (vstar, history) = fit_vstar(&*field, &config.vstar)?;
            save_vstar(&vstar, &out)?;
            let mut summary = json!({
                "vstar": out,
                "iterations": history.len(),
                "final_loss": history.last(),
            });
            if let Some(points) = points {
                let points = read_xyz(points)?;
                let estimates = udf_query(&*field, &vstar, &points)?;
                let target = udf_out.ok_or_else(|| usage("--points needs --udf-out"))?;
                let mut text = String::new();
                for e in &estimates {
                    text.push_str(&format!(
                        "{} {} {} {} {}\n",
                        e.udf, e.v_star.x, e.v_star.y, e.v_star.z, e.confident as u8
                    ));
                }
                std::fs::write(&target, text).map_err(Error::from)?;
                summary["udf"] = json!(target);
                summary["low_confidence"] = json!(estimates.iter().filter(|e| !e.confident).count());
            }
            Ok((summary, 0))
        }
        Command::SamplePc { model, n, out } => {
            let field = load_model(&model.model)?;
            let mut pc = config.pointcloud.clone();
            if let Some(n) = n {
                pc.n_p = n;
            }
            let points = sample_point_cloud(&*field, &pc)?;
            write_xyz(&points, &out)?;
            Ok((json!({"points": points.len(), "out": out}), 0))
        }
        Command::Metrics { pred, reference, tau } => {
            let a = read_xyz(&pred)?;
            let b = read_xyz(&reference)?;
            let s = chamfer_f_score(&a, &b, tau)?;
            Ok((
                json!({"chamfer_x1000": s.chamfer, "f_tau_x100": s.f_tau, "f_2tau_x100": s.f_2tau, "tau": tau}),
                0,
            ))
        }
        Command::Validate { model, checks } => {
            let field = load_model(&model.model)?;
            let reports = run_checks(&*field, &split_list(&checks), &config.validate)?;
            let pass = reports.iter().all(|r| r.pass);
            Ok((json!({"pass": pass, "reports": reports}), if pass { 0 } else { 1 }))
        }
        Command::Ablate { source, drop, out } => {
            let (dataset, held_out) = load_source(&source, &config)?;
            let held_out = held_out.ok_or_else(|| usage("ablation needs --mesh to draw a held-out set"))?;
            let runs: Vec<Option<SampleType>> = match drop.as_str() {
                "all" => std::iter::once(None).chain(SampleType::ALL.map(Some)).collect(),
                "none" => vec![None],
                t => vec![Some(
                    t.parse().map_err(|_| usage(format!("unknown sample type {t:?}")))?,
                )],
            };
            let tables = runs
                .into_iter()
                .map(|kind| ablation_experiment(&dataset, &held_out.samples, &config.train, kind))
                .collect::<pddf::Result<Vec<_>>>()?;
            let summary = json!({ "tables": tables.iter().map(|t| json!({"ablated": t.ablated, "rows": t.rows})).collect::<Vec<_>>() });
            if let Some(out) = out {
                std::fs::write(&out, serde_json::to_string_pretty(&summary).expect("serializes"))
                    .map_err(Error::from)?;
            }
            Ok((summary, 0))
        }
        Command::Info { path } => info(&path).map(|v| (v, 0)),
    }
}

fn create(path: &Path) -> CliResult<std::fs::File> {
    Ok(std::fs::File::create(path).map_err(Error::from)?)
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',')
        .map(|x| x.trim().to_string())
        .filter(|x| !x.is_empty())
        .collect()
}

fn parse_vec3(s: &str) -> CliResult<Vec3> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| usage(format!("expected x,y,z, got {s:?}")))?;
    match parts[..] {
        [x, y, z] => Ok(Vec3::new(x, y, z)),
        _ => Err(usage(format!("expected x,y,z, got {s:?}"))),
    }
}

fn apply_camera(config: &Config, args: &CameraArgs) -> CliResult<pddf::renderer::Camera> {
    let mut camera = config.camera.clone();
    if let Some(p) = &args.camera {
        camera.position = parse_vec3(p)?;
    }
    if let Some(p) = &args.look_at {
        camera.look_at = parse_vec3(p)?;
    }
    if let Some(w) = args.width {
        camera.width = w;
    }
    if let Some(h) = args.height {
        camera.height = h;
    }
    if let Some(f) = args.fov {
        camera.vertical_fov = f;
    }
    camera.frame()?;
    Ok(camera)
}

/// `analytic:sphere:<r>` or `analytic:box:<hx>,<hy>,<hz>`.
fn parse_analytic(spec: &str) -> CliResult<Option<AnalyticShape>> {
    let Some(rest) = spec.strip_prefix("analytic:") else {
        return Ok(None);
    };
    let (kind, args) = rest.split_once(':').unwrap_or((rest, ""));
    let shape = match kind {
        "sphere" => {
            let r: f64 = if args.is_empty() {
                1.0
            } else {
                args.parse().map_err(|_| usage(format!("bad sphere radius {args:?}")))?
            };
            if !(r > 0.0 && r.is_finite()) {
                return Err(usage("sphere radius must be positive"));
            }
            AnalyticShape::sphere(r)
        }
        "box" => {
            let h = parse_vec3(args)?;
            if h.iter().any(|x| !(*x > 0.0)) {
                return Err(usage("box half-extents must be positive"));
            }
            AnalyticShape::cuboid(-h, h)
        }
        other => return Err(usage(format!("unknown built-in shape {other:?}"))),
    };
    Ok(Some(shape))
}

fn parse_oracle(spec: &str) -> CliResult<Oracle> {
    Ok(match parse_analytic(spec)? {
        Some(shape) => Oracle::analytic(shape),
        None => Oracle::mesh(load_obj(spec)?),
    })
}

fn load_model(spec: &str) -> CliResult<Box<dyn FullField>> {
    Ok(match parse_analytic(spec)? {
        Some(shape) => Box::new(shape),
        None => Box::new(load_checkpoint(spec)?.0) as Box<PddfModel>,
    })
}

/// Training data plus a held-out set when the shape itself is available.
fn load_source(source: &DataSource, config: &Config) -> CliResult<(Dataset, Option<Dataset>)> {
    if let Some(path) = &source.data {
        return Ok((load_dataset(path)?, None));
    }
    let oracle = parse_oracle(source.mesh.as_deref().expect("clap enforces one source"))?;
    let dataset = generate(&oracle, &config.dataset)?;
    let held_out = generate(&oracle, &config.held_out_spec())?;
    Ok((dataset, Some(held_out)))
}

fn info(path: &Path) -> CliResult<Value> {
    let bytes = std::fs::read(path).map_err(Error::from)?;
    if bytes.starts_with(b"DDFD1\n") {
        let d = read_dataset(&bytes[..])?;
        Ok(json!({"kind": "dataset", "header": d.header, "samples": d.samples.len()}))
    } else if bytes.starts_with(b"DDFM1\n") {
        let (model, header) = read_checkpoint(&bytes[..])?;
        Ok(json!({"kind": "checkpoint", "header": header, "parameters": model.param_count()}))
    } else {
        Err(Error::format("file", "not a dataset or checkpoint").into())
    }
}
