use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use contourformer::config::Config;
use contourformer::data::{
    export_coco, generate_scene, load_coco_annotations, read_png, Scene, SHAPE_CLASSES,
};
use contourformer::eval::Prediction;
use contourformer::geometry::{worker_seed, Contour, Point};
use contourformer::model::load_checkpoint;
use contourformer::train::{evaluate_model, run_training, scene_tensor};
use contourformer::{Error, Result};

#[derive(Parser)]
#[command(
    name = "contourformer",
    about = "Contour-based instance segmentation: data generation, training, evaluation and inference"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shape dataset in COCO layout.
    Generate(GenerateArgs),
    /// Train a model and write checkpoints plus a JSON-lines metric log.
    Train(TrainArgs),
    /// Score a checkpoint against a dataset and report AP metrics.
    Eval(EvalArgs),
    /// Run a checkpoint on a single image and write an overlay plus polygons.
    Infer(InferArgs),
}

#[derive(Args)]
struct SharedArgs {
    /// Configuration file (flat `section.key = value` lines). Defaults apply
    /// for any key not present; omit the flag to run entirely on defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random seed; overrides the seed from the configuration file.
    #[arg(long)]
    seed: Option<u64>,
    /// Compute device. Only `cpu` is supported in this build.
    #[arg(long, default_value = "cpu")]
    device: String,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    shared: SharedArgs,
    /// Number of images to generate; overrides `data.n_images`.
    #[arg(long)]
    images: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    shared: SharedArgs,
    /// Dataset directory (COCO `annotations.json` + `images/`). When omitted,
    /// scenes are synthesized from the config and cached under
    /// `$CONTOURFORMER_CACHE` if that variable is set.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Resume from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    /// Named ablation switches; may be repeated. Known toggles: no_cfdr,
    /// no_box_restriction, no_decoupled, no_denoise, instance_scale.
    #[arg(long)]
    toggle: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    shared: SharedArgs,
    /// Checkpoint base path (without the `.safetensors` suffix).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory to evaluate on.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    shared: SharedArgs,
    /// Checkpoint base path (without the `.safetensors` suffix).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input image (any format the `image` crate can decode).
    #[arg(long)]
    image: PathBuf,
    /// Minimum detection score to draw and export.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Draw every decoder layer's intermediate contour, not just the final
    /// one, to visualise the iterative refinement.
    #[arg(long)]
    show_iterations: bool,
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Infer(args) => cmd_infer(args),
    };
    if let Err(e) = outcome {
        log_line(serde_json::json!({ "event": "error", "message": e.to_string() }));
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

/// Emit one JSON-lines log record on stdout.
fn log_line(value: serde_json::Value) {
    println!("{value}");
}

fn load_config(shared: &SharedArgs) -> Result<Config> {
    if shared.device != "cpu" {
        return Err(Error::Config(format!(
            "unsupported device `{}`; this build only runs on cpu",
            shared.device
        )));
    }
    let mut cfg = match &shared.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = shared.seed {
        cfg.data.seed = seed;
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn require_out(shared: &SharedArgs) -> Result<&Path> {
    shared
        .out
        .as_deref()
        .ok_or_else(|| Error::Config("this command requires --out".into()))
}

/// Dataset cache directory from the environment, if configured.
fn cache_dir() -> Option<PathBuf> {
    std::env::var_os("CONTOURFORMER_CACHE").map(PathBuf::from)
}

fn generate_scenes(cfg: &Config) -> Vec<Scene> {
    (0..cfg.data.n_images)
        .map(|i| generate_scene(&cfg.data, worker_seed(cfg.data.seed, i as u64)))
        .collect()
}

fn load_scenes(dir: &Path) -> Result<Vec<Scene>> {
    let ds = load_coco_annotations(&dir.join("annotations.json"), &dir.join("images"))?;
    if ds.skipped > 0 {
        log_line(serde_json::json!({
            "event": "dataset_skips",
            "skipped": ds.skipped,
        }));
    }
    (0..ds.len()).map(|i| ds.scene(i)).collect()
}

/// Resolve the training dataset: an explicit directory, a seed-keyed cache
/// under `$CONTOURFORMER_CACHE`, or freshly synthesized scenes.
fn training_scenes(cfg: &Config, data: Option<&Path>) -> Result<Vec<Scene>> {
    if let Some(dir) = data {
        return load_scenes(dir);
    }
    if let Some(cache) = cache_dir() {
        let key = cache.join(format!(
            "synthetic-{}x{}-n{}-seed{}",
            cfg.data.image_size, cfg.data.image_size, cfg.data.n_images, cfg.data.seed
        ));
        if !key.join("annotations.json").exists() {
            let scenes = generate_scenes(cfg);
            export_coco(&scenes, &key)?;
            log_line(serde_json::json!({
                "event": "dataset_cached",
                "path": key.display().to_string(),
            }));
            return Ok(scenes);
        }
        return load_scenes(&key);
    }
    Ok(generate_scenes(cfg))
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let mut cfg = load_config(&args.shared)?;
    if let Some(n) = args.images {
        cfg.data.n_images = n;
    }
    let out = require_out(&args.shared)?;
    if cfg.data.n_images == 0 {
        log_line(serde_json::json!({
            "event": "warning",
            "message": "generating an empty dataset (0 images)",
        }));
    }
    let scenes = generate_scenes(&cfg);
    export_coco(&scenes, out)?;
    let mut per_class = vec![0usize; SHAPE_CLASSES.len()];
    let mut total = 0usize;
    for scene in &scenes {
        for inst in &scene.instances {
            per_class[inst.class_id] += 1;
            total += 1;
        }
    }
    let counts: serde_json::Map<String, serde_json::Value> = SHAPE_CLASSES
        .iter()
        .zip(&per_class)
        .map(|(name, n)| ((*name).to_string(), serde_json::json!(n)))
        .collect();
    log_line(serde_json::json!({
        "event": "generated",
        "images": scenes.len(),
        "instances": total,
        "per_class": counts,
        "out": out.display().to_string(),
    }));
    Ok(())
}

/// Apply named ablation switches to the loaded configuration.
fn apply_toggles(cfg: &mut Config, toggles: &[String]) -> Result<()> {
    for t in toggles {
        match t.as_str() {
            "no_cfdr" => cfg.model.cfdr_enabled = false,
            "no_box_restriction" => cfg.model.box_restricted_attention = false,
            "no_decoupled" => cfg.model.decoupled_self_attention = false,
            "no_denoise" => cfg.train.denoise = false,
            "instance_scale" => cfg.model.scale_by_subcontour = false,
            other => {
                return Err(Error::Config(format!(
                    "unknown toggle `{other}`; known toggles: no_cfdr, no_box_restriction, \
                     no_decoupled, no_denoise, instance_scale"
                )))
            }
        }
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.shared)?;
    apply_toggles(&mut cfg, &args.toggle)?;
    let out = require_out(&args.shared)?;
    std::fs::create_dir_all(out)?;
    cfg.save(&out.join("config.txt"))?;
    let scenes = training_scenes(&cfg, args.data.as_deref())?;
    log_line(serde_json::json!({
        "event": "train_start",
        "images": scenes.len(),
        "epochs": cfg.train.epochs,
        "resume": args.resume,
    }));
    let outcome = run_training(&cfg, &scenes, Some(out), args.resume)?;
    for log in &outcome.logs {
        log_line(serde_json::to_value(log)?);
    }
    log_line(serde_json::json!({
        "event": "train_done",
        "initial_loss": outcome.initial_loss,
        "final_loss": outcome.final_loss,
        "checkpoint": out.join("ckpt").display().to_string(),
    }));
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let cfg = load_config(&args.shared)?;
    let (model, _varmap, model_cfg) = load_checkpoint(
        &args.checkpoint,
        candle_core::DType::F32,
        &candle_core::Device::Cpu,
    )?;
    let ds = load_coco_annotations(
        &args.data.join("annotations.json"),
        &args.data.join("images"),
    )?;
    if ds.n_classes > model_cfg.classes {
        return Err(Error::Config(format!(
            "dataset uses {} classes but the checkpoint was trained with {}",
            ds.n_classes, model_cfg.classes
        )));
    }
    let scenes: Vec<Scene> = (0..ds.len()).map(|i| ds.scene(i)).collect::<Result<_>>()?;
    let summary = evaluate_model(&model, &scenes, &cfg.eval, model_cfg.nv)?;
    let json = summary.to_json();
    log_line(serde_json::json!({ "event": "eval", "metrics": json }));
    print!("{}", summary.table());
    if let Some(out) = &args.shared.out {
        std::fs::create_dir_all(out)?;
        let path = out.join("metrics.json");
        std::fs::write(&path, serde_json::to_string_pretty(&json)?)?;
        std::fs::write(out.join("metrics.txt"), summary.table())?;
        log_line(serde_json::json!({
            "event": "eval_written",
            "path": path.display().to_string(),
        }));
    }
    Ok(())
}

/// Letterbox an RGB image to `size`×`size`: scale the long side down to fit,
/// pad the rest with mid grey. Returns the padded pixels plus the transform
/// needed to map normalized model coordinates back to source pixels.
struct Letterbox {
    pixels: Vec<f32>,
    size: usize,
    /// Source pixels per padded pixel.
    scale: f64,
    pad_x: usize,
    pad_y: usize,
}

impl Letterbox {
    fn new(src: &[f32], w: usize, h: usize, size: usize) -> Self {
        let scale = (w.max(h) as f64) / size as f64;
        let new_w = ((w as f64 / scale).round() as usize).min(size).max(1);
        let new_h = ((h as f64 / scale).round() as usize).min(size).max(1);
        let pad_x = (size - new_w) / 2;
        let pad_y = (size - new_h) / 2;
        let mut pixels = vec![0.5f32; size * size * 3];
        for y in 0..new_h {
            for x in 0..new_w {
                let sx = (((x as f64 + 0.5) * w as f64 / new_w as f64 - 0.5).round() as i64)
                    .clamp(0, w as i64 - 1) as usize;
                let sy = (((y as f64 + 0.5) * h as f64 / new_h as f64 - 0.5).round() as i64)
                    .clamp(0, h as i64 - 1) as usize;
                let dst = ((y + pad_y) * size + x + pad_x) * 3;
                let srcp = (sy * w + sx) * 3;
                pixels[dst..dst + 3].copy_from_slice(&src[srcp..srcp + 3]);
            }
        }
        Letterbox {
            pixels,
            size,
            scale,
            pad_x,
            pad_y,
        }
    }

    /// Map a model-space point (normalized over the padded square) to source
    /// image pixel coordinates.
    fn to_source(&self, p: Point) -> (f64, f64) {
        let px = p.x * self.size as f64 - self.pad_x as f64;
        let py = p.y * self.size as f64 - self.pad_y as f64;
        (px * self.scale, py * self.scale)
    }
}

const OVERLAY_COLORS: [[u8; 3]; 5] = [
    [230, 60, 60],
    [60, 170, 230],
    [70, 200, 90],
    [235, 190, 40],
    [180, 90, 220],
];

/// Draw a closed polygon outline onto an RGB image with simple line stepping.
fn draw_contour(img: &mut image::RgbImage, points: &[(f64, f64)], color: [u8; 3], alpha: f64) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let n = points.len();
    for i in 0..n {
        let (x0, y0) = points[i];
        let (x1, y1) = points[(i + 1) % n];
        let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let x = (x0 + (x1 - x0) * t).round() as i64;
            let y = (y0 + (y1 - y0) * t).round() as i64;
            if x < 0 || y < 0 || x >= w || y >= h {
                continue;
            }
            let px = img.get_pixel_mut(x as u32, y as u32);
            for ch in 0..3 {
                px.0[ch] =
                    (px.0[ch] as f64 * (1.0 - alpha) + color[ch] as f64 * alpha).round() as u8;
            }
        }
    }
}

fn cmd_infer(args: InferArgs) -> Result<()> {
    let cfg = load_config(&args.shared)?;
    let out = require_out(&args.shared)?;
    std::fs::create_dir_all(out)?;
    let (model, _varmap, model_cfg) = load_checkpoint(
        &args.checkpoint,
        candle_core::DType::F32,
        &candle_core::Device::Cpu,
    )?;
    let (pixels, w, h) = read_png(&args.image)?;
    let size = cfg.data.image_size;
    let boxed = Letterbox::new(&pixels, w, h, size);
    let scene = Scene {
        image: boxed.pixels.clone(),
        width: size,
        height: size,
        instances: Vec::new(),
    };
    let input = scene_tensor(&scene, candle_core::DType::F32, &candle_core::Device::Cpu)?;
    let output = model.forward(&input, None)?;
    let kept: Vec<(usize, Prediction)> = output
        .predictions(0)?
        .into_iter()
        .enumerate()
        .filter(|(_, p)| p.score >= args.threshold)
        .collect();

    let mut overlay = image::RgbImage::new(w as u32, h as u32);
    for (i, px) in overlay.pixels_mut().enumerate() {
        for ch in 0..3 {
            px.0[ch] = (pixels[i * 3 + ch].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    // Intermediate layers first, faded, so the final contour draws on top.
    if args.show_iterations {
        for layer in &output.layers[..output.layers.len() - 1] {
            let lo = layer.layer_output(0)?;
            for (slot, pred) in &kept {
                let pts: Vec<(f64, f64)> = lo.contours[*slot]
                    .points
                    .iter()
                    .map(|p| boxed.to_source(*p))
                    .collect();
                draw_contour(
                    &mut overlay,
                    &pts,
                    OVERLAY_COLORS[pred.class_id % OVERLAY_COLORS.len()],
                    0.35,
                );
            }
        }
    }
    for (_, pred) in &kept {
        let pts: Vec<(f64, f64)> = pred
            .contour
            .points
            .iter()
            .map(|p| boxed.to_source(*p))
            .collect();
        draw_contour(
            &mut overlay,
            &pts,
            OVERLAY_COLORS[pred.class_id % OVERLAY_COLORS.len()],
            1.0,
        );
    }
    let overlay_path = out.join("overlay.png");
    overlay.save(&overlay_path).map_err(|e| {
        Error::Config(format!("cannot write {}: {e}", overlay_path.display()))
    })?;

    // Emit detections as a COCO-format file so they reload through the same
    // dataset reader used for training data.
    let mut annotations = Vec::new();
    for (i, (_, pred)) in kept.iter().enumerate() {
        let src: Vec<(f64, f64)> = pred
            .contour
            .points
            .iter()
            .map(|p| {
                let (x, y) = boxed.to_source(*p);
                (x.clamp(0.0, w as f64), y.clamp(0.0, h as f64))
            })
            .collect();
        let flat: Vec<f64> = src.iter().flat_map(|&(x, y)| [x, y]).collect();
        let x0 = src.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let y0 = src.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let x1 = src.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let y1 = src.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let norm = Contour::new(
            src.iter()
                .map(|&(x, y)| Point::new(x / w as f64, y / h as f64))
                .collect(),
        );
        annotations.push(contourformer::data::CocoAnnotation {
            id: i as u64 + 1,
            image_id: 1,
            category_id: pred.class_id as u64 + 1,
            segmentation: serde_json::json!([flat]),
            bbox: vec![x0, y0, x1 - x0, y1 - y0],
            area: norm.shoelace().abs() * (w * h) as f64,
            iscrowd: 0,
        });
    }
    let result = contourformer::data::CocoJson {
        images: vec![contourformer::data::CocoImage {
            id: 1,
            file_name: args
                .image
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "input.png".into()),
            width: w as u32,
            height: h as u32,
        }],
        annotations,
        categories: (0..model_cfg.classes)
            .map(|i| contourformer::data::CocoCategory {
                id: i as u64 + 1,
                name: SHAPE_CLASSES
                    .get(i)
                    .map(|s| (*s).to_string())
                    .unwrap_or_else(|| format!("class_{i}")),
            })
            .collect(),
    };
    let json_path = out.join("detections.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&result)?)?;
    log_line(serde_json::json!({
        "event": "infer",
        "detections": kept.len(),
        "layers_drawn": if args.show_iterations { output.layers.len() } else { 1 },
        "overlay": overlay_path.display().to_string(),
        "polygons": json_path.display().to_string(),
    }));
    Ok(())
}
