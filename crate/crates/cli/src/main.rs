//! `percept`: synthetic data, training, evaluation, inference and reports.
//!
//! Exit codes: 0 success, 2 I/O, 3 config or shape mismatch, 4 numeric failure.

mod overlay;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use image::RgbImage;
use percept::dataio::{load_cityscapes, read_dataset, resize_scene, synth_generate, write_dataset, CameraModel, ClassRegistry, Scene};
use percept::detect::{Detection, PostprocessConfig};
use percept::evalkit::{read_report, write_report, MetricsReport};
use percept::model::{predict, SEG_STRIDE};
use percept::ndgrad::ParamStore;
use percept::train::{evaluate, Trainer};
use percept::{Error, Model, ModelConfig, RunConfig};

/// Smallest extent the segmentation pooling pyramid accepts.
const MIN_EXTENT: usize = 128;
const PAD_MULTIPLE: usize = 32;

#[derive(Parser)]
#[command(name = "percept", version, about = "Joint detection, object distance and segmentation for driving scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset.
    Synth(SynthArgs),
    /// Train a model and write checkpoints plus a loss log.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write metrics and plots.
    Eval(EvalArgs),
    /// Run one image through a checkpoint.
    Predict(PredictArgs),
    /// Regenerate plots from an existing metrics directory.
    Report(ReportArgs),
}

/// Settings shared by every model-facing command. They override the config
/// file, which overrides the defaults.
#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["mini", "full"])]
    preset: Option<String>,
    /// WxH, both multiples of 32.
    #[arg(long, value_name = "WxH")]
    input_size: Option<String>,
    #[arg(long)]
    w_seg: Option<f64>,
    /// Let the segmentation loss train the whole encoder.
    #[arg(long)]
    no_grad_block: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, value_name = "WxH", default_value = "512x256")]
    size: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Synthetic dataset directory or Cityscapes root.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Cityscapes split.
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    save_every: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    no_augment: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding metrics.csv and cdf.csv.
    #[arg(long)]
    metrics: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Image { .. } => 2,
        Error::Format { what, .. } if *what != "config" && *what != "checkpoint" => 2,
        Error::NonFinite { .. } => 4,
        _ => 3,
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(dir: &Path) -> percept::Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Defaults, then the config file (or `fallback` when none is given), then flags.
fn resolve_config(common: &Common, fallback: Option<&Path>, extra: &[(&str, String)]) -> percept::Result<RunConfig> {
    let mut cfg = match common.config.as_deref().or(fallback) {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    let mut set = |k: &str, v: String| cfg.set(k, &v);
    if let Some(s) = common.seed {
        set("seed", s.to_string())?;
    }
    if let Some(p) = &common.preset {
        set("preset", p.clone())?;
    }
    if let Some(s) = &common.input_size {
        set("input_size", s.clone())?;
    }
    if let Some(w) = common.w_seg {
        set("w_seg", w.to_string())?;
    }
    if common.no_grad_block {
        set("block_gradients", "off".into())?;
    }
    for (k, v) in extra {
        set(k, v.clone())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// The run config written next to a checkpoint by `train`, if present.
fn sidecar_config(checkpoint: &Path) -> Option<PathBuf> {
    let path = checkpoint.parent().unwrap_or(Path::new(".")).join("run.cfg");
    path.is_file().then_some(path)
}

/// Loads a synthetic dataset (has `manifest.txt`) or a Cityscapes split and
/// resamples every scene to `size`.
fn load_scenes(dir: &Path, split: &str, size: (usize, usize)) -> percept::Result<Vec<Scene>> {
    let scenes = if dir.join("manifest.txt").is_file() {
        read_dataset(dir)?
    } else if dir.join("leftImg8bit").is_dir() {
        let mut iter = load_cityscapes(dir, split, ClassRegistry::default())?;
        let mut scenes = Vec::new();
        for item in iter.by_ref() {
            match item {
                Ok(s) => scenes.push(s),
                Err(e) => log::warn!("skipping scene: {e}"),
            }
        }
        if !iter.skipped.is_empty() {
            log::warn!("{} scenes skipped for missing companion files", iter.skipped.len());
        }
        scenes
    } else {
        return Err(Error::Format {
            what: "dataset",
            path: dir.to_path_buf(),
            reason: "neither manifest.txt nor leftImg8bit/ found".into(),
        });
    };
    scenes.iter().map(|s| resize_scene(s, size.0, size.1)).collect()
}

fn load_model(cfg: &RunConfig, checkpoint: &Path) -> percept::Result<(Model, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    let model = Model::build(&ModelConfig::for_preset(cfg.preset), &mut store, cfg.seed)?;
    store.load(checkpoint)?;
    Ok((model, store))
}

fn cmd_synth(a: &SynthArgs) -> percept::Result<()> {
    let size = percept::config::parse_size(&a.size).ok_or_else(|| Error::InvalidArgument {
        op: "synth",
        reason: format!("bad size {:?}, expected WxH", a.size),
    })?;
    let camera = CameraModel::scaled_to_width(size.0);
    let scenes = synth_generate(a.seed, a.count, size, camera)?;
    let manifest = write_dataset(&a.out, &scenes, camera, Some(a.seed))?;
    println!("wrote {} scenes to {} (content {})", scenes.len(), a.out.display(), manifest.content);
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> percept::Result<()> {
    let mut extra = Vec::new();
    if let Some(d) = &a.dataset {
        extra.push(("dataset", d.display().to_string()));
    }
    for (key, v) in [("epochs", a.epochs), ("max_steps", a.max_steps), ("save_every", a.save_every), ("batch_size", a.batch_size)] {
        if let Some(v) = v {
            extra.push((key, v.to_string()));
        }
    }
    if let Some(lr) = a.lr {
        extra.push(("lr", lr.to_string()));
    }
    if a.no_augment {
        extra.push(("augment", "off".into()));
    }
    let cfg = resolve_config(&a.common, None, &extra)?;
    let dataset = cfg.dataset.clone().ok_or_else(|| Error::InvalidArgument {
        op: "train",
        reason: "no dataset given (--dataset or `dataset =` in the config)".into(),
    })?;
    let scenes = load_scenes(&dataset, &a.split, cfg.input_size)?;
    create_dir(&a.out)?;
    let cfg_path = a.out.join("run.cfg");
    std::fs::write(&cfg_path, cfg.to_text()).map_err(io_err(&cfg_path))?;

    let log_path = a.out.join("loss.csv");
    let mut log = BufWriter::new(File::create(&log_path).map_err(io_err(&log_path))?);
    writeln!(log, "{}", percept::losses::LossReport::CSV_HEADER).map_err(io_err(&log_path))?;
    let save_every = cfg.save_every;
    let mut trainer = Trainer::new(cfg)?;
    log::info!("training on {} scenes", scenes.len());
    trainer.run(
        &scenes,
        |info| {
            log::info!("step {} epoch {} lr {:e} loss {:.5}", info.step, info.epoch, info.lr, info.loss.total);
            writeln!(log, "{}", info.loss.csv_line(info.step)).map_err(io_err(&log_path))
        },
        |t| {
            let step = t.steps_done();
            if save_every > 0 && step % save_every == 0 {
                t.save(&a.out.join(format!("ckpt_step{step}.bin")))?;
            }
            t.save(&a.out.join("model.bin"))
        },
    )?;
    log.flush().map_err(io_err(&log_path))?;
    println!("trained {} steps; checkpoint {}", trainer.steps_done(), a.out.join("model.bin").display());
    Ok(())
}

fn print_summary(report: &MetricsReport) {
    println!("images {}  gt boxes {}  detections {}", report.images, report.gt_boxes, report.detections);
    println!("mAP {:.4}", report.map);
    match report.mean_distance_error {
        Some(e) => println!("mean relative distance error {e:.4} over {} pairs", report.depth_pairs),
        None => println!("mean relative distance error n/a"),
    }
    println!("mIoU {:.4}  pixel accuracy {:.4}", report.seg.mean_iou, report.seg.pixel_accuracy);
}

fn cmd_eval(a: &EvalArgs) -> percept::Result<()> {
    let extra: Vec<_> = a.dataset.iter().map(|d| ("dataset", d.display().to_string())).collect();
    let cfg = resolve_config(&a.common, sidecar_config(&a.checkpoint).as_deref(), &extra)?;
    let (model, store) = load_model(&cfg, &a.checkpoint)?;
    let dataset = cfg.dataset.clone().ok_or_else(|| Error::InvalidArgument {
        op: "eval",
        reason: "no dataset given (--dataset or `dataset =` in the config)".into(),
    })?;
    let scenes = load_scenes(&dataset, &a.split, cfg.input_size)?;
    let report = evaluate(&model, &store, &scenes, cfg.batch_size)?;
    write_report(&a.out, &report, &ClassRegistry::default())?;
    print_summary(&report);
    Ok(())
}

/// Pads right and bottom with black up to a multiple of 32 and at least 128.
fn pad_image(img: &RgbImage) -> RgbImage {
    let target = |v: u32| (v as usize).max(MIN_EXTENT).div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE;
    let (w, h) = img.dimensions();
    let (pw, ph) = (target(w) as u32, target(h) as u32);
    if (pw, ph) == (w, h) {
        return img.clone();
    }
    let mut out = RgbImage::new(pw, ph);
    image::imageops::replace(&mut out, img, 0, 0);
    out
}

/// Clips a detection to the unpadded image; drops it if nothing is left.
fn clip_detection(d: &Detection, w: f64, h: f64) -> Option<Detection> {
    let x0 = d.bbox.x.clamp(0.0, w);
    let y0 = d.bbox.y.clamp(0.0, h);
    let x1 = (d.bbox.x + d.bbox.w).clamp(0.0, w);
    let y1 = (d.bbox.y + d.bbox.h).clamp(0.0, h);
    (x1 > x0 && y1 > y0).then(|| {
        let mut c = *d;
        c.bbox.x = x0;
        c.bbox.y = y0;
        c.bbox.w = x1 - x0;
        c.bbox.h = y1 - y0;
        c
    })
}

fn cmd_predict(a: &PredictArgs) -> percept::Result<()> {
    let cfg = resolve_config(&a.common, sidecar_config(&a.checkpoint).as_deref(), &[])?;
    let (model, store) = load_model(&cfg, &a.checkpoint)?;
    let input = image::open(&a.image)
        .map_err(|source| Error::Image {
            path: a.image.clone(),
            source,
        })?
        .to_rgb8();
    let (w, h) = input.dimensions();
    let padded = pad_image(&input);
    let pred = predict(&model, &store, &[&padded], &PostprocessConfig::default())?.remove(0);
    let detections: Vec<Detection> = pred
        .detections
        .iter()
        .filter_map(|d| clip_detection(d, w as f64, h as f64))
        .collect();
    let mask = image::imageops::crop_imm(
        &pred.mask,
        0,
        0,
        w.div_ceil(SEG_STRIDE as u32),
        h.div_ceil(SEG_STRIDE as u32),
    )
    .to_image();

    create_dir(&a.out)?;
    let stem = a.image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
    let det_path = a.out.join(format!("{stem}.detections.txt"));
    let mut text = String::new();
    for d in &detections {
        text.push_str(&format!(
            "{stem} {} {:.6} {:.2} {:.2} {:.2} {:.2} {:.3}\n",
            d.class, d.score, d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h, d.depth
        ));
    }
    std::fs::write(&det_path, text).map_err(io_err(&det_path))?;
    let save = |img: &dyn Fn(&Path) -> image::ImageResult<()>, path: PathBuf| {
        img(&path).map_err(|source| Error::Image { path, source })
    };
    save(&|p| mask.save(p), a.out.join(format!("{stem}.mask.pgm")))?;
    let over = overlay::render(&input, &mask, &detections);
    save(&|p| over.save(p), a.out.join(format!("{stem}.overlay.png")))?;
    println!("{} detections written to {}", detections.len(), det_path.display());
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> percept::Result<()> {
    let registry = ClassRegistry::default();
    let report = read_report(&a.metrics, &registry)?;
    write_report(&a.out, &report, &registry)?;
    print_summary(&report);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 3 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
