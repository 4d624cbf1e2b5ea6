//! Command-line entry point: one binary, subcommands wiring the pipeline
//! end to end. Every run drops a manifest (resolved arguments, seed,
//! version) into its output directory so identical manifests reproduce
//! identical artifacts.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::cloud::{build_feature_cloud, load_cloud, save_cloud, Dedup, FeaturePointCloud};
use crate::encoder::ConvEncoder;
use crate::error::{Error, Result};
use crate::eval::{evaluate_frames, EvalConfig};
use crate::render::{render_view, SplatConfig};
use crate::scene::{load_scene, save_image_png, save_scene, CameraView};
use crate::synthetic::{make_synthetic_scene, SyntheticSpec, TextureId};
use crate::tensor::Tensor;
use crate::text::{default_templates, embed_style, load_templates};
use crate::train::{
    build_embedder, train_decoder, train_style, Checkpoint, LogRecord, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "pcstyle",
    version,
    about = "Text-driven 3D point-cloud style transfer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic posed RGB-D scene
    MakeSynthetic(MakeSynthetic),
    /// Encode a scene into a feature point cloud file
    BuildCloud(BuildCloud),
    /// Expand a style phrase through the prompt templates and embed it
    EmbedStyle(EmbedStyle),
    /// Run stage 1 (decoder) or stage 2 (style transform) training
    Train(Train),
    /// Stylize a scene or prebuilt cloud against a style phrase
    Stylize(Stylize),
    /// Render a cloud from a camera into a PNG
    Render(Render),
    /// Score rendered frames: CLIP score and reprojection RMSE
    Evaluate(Evaluate),
}

#[derive(Args)]
struct MakeSynthetic {
    #[arg(long)]
    views: usize,
    #[arg(long)]
    points: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "checker")]
    texture: String,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
}

#[derive(Args)]
struct BuildCloud {
    #[arg(long)]
    scene: PathBuf,
    /// `random:SEED` or a path to an encoder weight bundle
    #[arg(long, default_value = "random:0")]
    encoder: String,
    /// Voxel size for view merging; 0 = automatic, negative = off
    #[arg(long, default_value_t = 0.0)]
    voxel: f64,
    /// Encoder channel plan used with `random:SEED`
    #[arg(long, num_args = 3, default_values_t = [16, 24, 32])]
    channels: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EmbedStyle {
    #[arg(long)]
    text: String,
    /// `stub:SEED` or `export:PATH`
    #[arg(long, default_value = "stub:0")]
    embedder: String,
    /// Embedding width of the stub embedder
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Template file overriding the shipped list
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    stage: u8,
    #[arg(long)]
    out: PathBuf,
    /// Continue from an existing checkpoint (required for stage 2)
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Scene directories; extends the config's scene list
    #[arg(long)]
    scene: Vec<PathBuf>,
}

#[derive(Args)]
struct Stylize {
    #[arg(long, conflicts_with = "cloud")]
    scene: Option<PathBuf>,
    #[arg(long)]
    cloud: Option<PathBuf>,
    #[arg(long)]
    style: String,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Render {
    #[arg(long)]
    cloud: PathBuf,
    /// View index into `--scene`, or a path to a camera JSON file
    #[arg(long)]
    camera: String,
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Evaluate {
    /// Directory of rendered frames (PNG, ordered by filename)
    #[arg(long)]
    frames: PathBuf,
    /// Scene providing the cameras and depth maps of those frames
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    style: String,
    #[arg(long, default_value = "stub:0")]
    embedder: String,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 64)]
    crops: usize,
    /// Crop size; 0 picks min(96, frame size)
    #[arg(long, default_value_t = 0)]
    crop_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: Option<u64>,
    config: serde_json::Value,
}

fn write_manifest(out: &Path, command: &str, seed: Option<u64>, config: serde_json::Value) -> Result<()> {
    let dir = if out.extension().is_some() {
        out.parent().unwrap_or(Path::new("."))
    } else {
        out
    };
    std::fs::create_dir_all(dir)?;
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed,
        config,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Parse and run; returns the process exit code (0 ok, 1 runtime error,
/// 2 usage error).
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{e}");
                    2
                }
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::MakeSynthetic(c) => cmd_make_synthetic(c),
        Command::BuildCloud(c) => cmd_build_cloud(c),
        Command::EmbedStyle(c) => cmd_embed_style(c),
        Command::Train(c) => cmd_train(c),
        Command::Stylize(c) => cmd_stylize(c),
        Command::Render(c) => cmd_render(c),
        Command::Evaluate(c) => cmd_evaluate(c),
    }
}

fn cmd_make_synthetic(c: MakeSynthetic) -> Result<()> {
    let texture: TextureId = c.texture.parse()?;
    let spec = SyntheticSpec {
        n_views: c.views,
        n_points: c.points,
        texture,
        image_size: c.image_size,
    };
    let generated = make_synthetic_scene(&spec, c.seed)?;
    save_scene(&generated.scene, &c.out)?;
    write_manifest(
        &c.out,
        "make-synthetic",
        Some(c.seed),
        serde_json::json!({
            "views": c.views,
            "points": c.points,
            "texture": c.texture,
            "image_size": c.image_size,
        }),
    )
}

fn parse_encoder(spec: &str, channels: &[usize]) -> Result<ConvEncoder> {
    if let Some(seed) = spec.strip_prefix("random:") {
        let seed: u64 = seed
            .parse()
            .map_err(|_| Error::Config(format!("bad encoder seed in {spec:?}")))?;
        if channels.len() != 3 {
            return Err(Error::Config("encoder needs exactly 3 channel sizes".into()));
        }
        Ok(ConvEncoder::from_seed(
            seed,
            (channels[0], channels[1], channels[2]),
        ))
    } else {
        ConvEncoder::load(Path::new(spec))
    }
}

fn cmd_build_cloud(c: BuildCloud) -> Result<()> {
    let scene = load_scene(&c.scene)?;
    let encoder = parse_encoder(&c.encoder, &c.channels)?;
    let dedup = if c.voxel < 0.0 {
        Dedup::Off
    } else if c.voxel == 0.0 {
        Dedup::Auto
    } else {
        Dedup::Voxel(c.voxel)
    };
    let cloud = build_feature_cloud(&scene, &encoder, dedup)?;
    save_cloud(&cloud, &c.out)?;
    write_manifest(
        &c.out,
        "build-cloud",
        None,
        serde_json::json!({
            "scene": c.scene,
            "encoder": c.encoder,
            "voxel": c.voxel,
            "channels": c.channels,
            "points": cloud.len(),
        }),
    )
}

fn cmd_embed_style(c: EmbedStyle) -> Result<()> {
    let embedder = build_embedder(&c.embedder, c.dim)?;
    let templates = match &c.templates {
        Some(path) => load_templates(path)?,
        None => default_templates(),
    };
    let style = embed_style(&c.text, embedder.as_ref(), &templates)?;
    style.save(&c.out)?;
    write_manifest(
        &c.out,
        "embed-style",
        None,
        serde_json::json!({
            "text": c.text,
            "embedder": c.embedder,
            "dim": c.dim,
            "templates": style.template_count(),
        }),
    )
}

fn cmd_train(c: Train) -> Result<()> {
    let config = TrainConfig::load(&c.config)?;
    let mut scene_paths: Vec<PathBuf> = config.scenes.iter().map(PathBuf::from).collect();
    scene_paths.extend(c.scene.iter().cloned());
    if scene_paths.is_empty() {
        return Err(Error::Config(
            "no scenes: set `scenes` in the config or pass --scene".into(),
        ));
    }
    let scenes = scene_paths
        .iter()
        .map(|p| load_scene(p))
        .collect::<Result<Vec<_>>>()?;

    let ckpt = match &c.resume {
        Some(path) => {
            let mut ckpt = Checkpoint::load(path)?;
            let old = &ckpt.config;
            if old.encoder_channels != config.encoder_channels
                || old.transform != config.transform
                || old.decoder_base != config.decoder_base
                || old.splat.stride != config.splat.stride
            {
                return Err(Error::Config(
                    "resume config changes the model shape; dimensions must match the checkpoint"
                        .into(),
                ));
            }
            ckpt.config = config.clone();
            ckpt
        }
        None => {
            if c.stage == 2 {
                return Err(Error::Config(
                    "stage 2 needs a stage-1 checkpoint; pass --resume".into(),
                ));
            }
            Checkpoint::init(config.clone())?
        }
    };

    let (ckpt, log) = match c.stage {
        1 => train_decoder(&scenes, ckpt, config.stage1_steps)?,
        2 => train_style(&scenes, ckpt, config.stage2_steps)?,
        other => {
            return Err(Error::Config(format!("stage must be 1 or 2, got {other}")));
        }
    };
    ckpt.save(&c.out)?;
    write_log(&c.out, &log)?;
    write_manifest(
        &c.out,
        "train",
        Some(config.seed),
        serde_json::to_value(&config)?,
    )
}

fn write_log(ckpt_path: &Path, log: &[LogRecord]) -> Result<()> {
    let mut path = ckpt_path.as_os_str().to_owned();
    path.push(".log.jsonl");
    let mut out = String::new();
    for rec in log {
        out.push_str(&serde_json::to_string(rec)?);
        out.push('\n');
    }
    std::fs::write(PathBuf::from(path), out)?;
    Ok(())
}

fn cmd_stylize(c: Stylize) -> Result<()> {
    let ckpt = Checkpoint::load(&c.checkpoint)?;
    let cloud = match (&c.scene, &c.cloud) {
        (Some(scene_dir), None) => {
            let scene = load_scene(scene_dir)?;
            build_feature_cloud(&scene, &ckpt.encoder, ckpt.config.dedup())?
        }
        (None, Some(cloud_path)) => load_cloud(cloud_path)?,
        _ => {
            return Err(Error::Config(
                "pass exactly one of --scene or --cloud".into(),
            ));
        }
    };
    let stylized = crate::train::stylize_cloud(&cloud, &c.style, &ckpt)?;
    let out_cloud = FeaturePointCloud {
        positions: stylized.positions,
        features: stylized.features,
        source_view: cloud.source_view.clone(),
        colors: None,
    };
    save_cloud(&out_cloud, &c.out)?;
    write_manifest(
        &c.out,
        "stylize",
        Some(ckpt.config.seed),
        serde_json::json!({
            "style": c.style,
            "checkpoint": c.checkpoint,
            "points": out_cloud.len(),
        }),
    )
}

fn cmd_render(c: Render) -> Result<()> {
    let ckpt = Checkpoint::load(&c.checkpoint)?;
    let cloud = load_cloud(&c.cloud)?;
    let view = resolve_camera(&c.camera, c.scene.as_deref())?;
    let cfg = SplatConfig {
        stride: ckpt.config.splat.stride,
        ..ckpt.config.splat.clone()
    };
    let image = render_view(&cloud, &view, &cfg, &ckpt.decoder)?;
    save_image_png(&image, &c.out)?;
    write_manifest(
        &c.out,
        "render",
        Some(ckpt.config.seed),
        serde_json::json!({
            "cloud": c.cloud,
            "camera": c.camera,
            "checkpoint": c.checkpoint,
        }),
    )
}

fn resolve_camera(spec: &str, scene_dir: Option<&Path>) -> Result<CameraView> {
    if let Ok(index) = spec.parse::<usize>() {
        let dir = scene_dir.ok_or_else(|| {
            Error::Config("--camera INDEX needs --scene for the camera list".into())
        })?;
        let scene = load_scene(dir)?;
        return scene
            .views
            .into_iter()
            .nth(index)
            .ok_or_else(|| Error::Config(format!("scene has no view {index}")));
    }
    crate::scene::load_camera_json(Path::new(spec))
}

fn cmd_evaluate(c: Evaluate) -> Result<()> {
    let scene = load_scene(&c.scene)?;
    let mut frame_files: Vec<PathBuf> = std::fs::read_dir(&c.frames)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    frame_files.sort();
    if frame_files.len() != scene.views.len() {
        return Err(Error::Config(format!(
            "{} frames but the scene has {} views",
            frame_files.len(),
            scene.views.len()
        )));
    }
    let frames = frame_files
        .iter()
        .map(|p| crate::scene::load_image_png(p))
        .collect::<Result<Vec<Tensor>>>()?;
    let embedder = build_embedder(&c.embedder, c.dim)?;
    let templates = default_templates();
    let cfg = EvalConfig {
        n_crops: c.crops,
        crop_size: c.crop_size,
        seed: c.seed,
        ..EvalConfig::default()
    };
    let report = evaluate_frames(
        &frames,
        &scene.views,
        &c.style,
        embedder.as_ref(),
        &templates,
        &cfg,
    )?;
    std::fs::write(&c.report, serde_json::to_string_pretty(&report)?)?;
    write_manifest(
        &c.report,
        "evaluate",
        Some(c.seed),
        serde_json::json!({
            "frames": c.frames,
            "scene": c.scene,
            "style": c.style,
            "embedder": c.embedder,
            "crops": c.crops,
        }),
    )
}
