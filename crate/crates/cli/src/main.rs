mod config;
mod error;
mod manifest;

use bootplace_core::checkpoint::load_checkpoint;
use bootplace_core::data::{generate_dataset, load_dataset, load_scene, save_dataset, Scene};
use bootplace_core::eval::{evaluate, export_attention, OraclePlacer, Placer};
use bootplace_core::geometry::BBox;
use bootplace_core::model::{assign_objects, AssignPolicy, ModelConfig, PlacementModel};
use bootplace_core::raster::paste;
use bootplace_core::train::{TrainConfig, Trainer};
use clap::{Parser, Subcommand, ValueEnum};
use config::ConfigFile;
use error::CliError;
use image::{Rgb, RgbImage, RgbaImage};
use manifest::{hash_inputs, now_ms, RunManifest, MANIFEST_NAME};
use serde::Serialize;
use serde_json::json;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "bootplace",
    version,
    about = "Object placement by detection and association"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Preset::Desk)]
        preset: Preset,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "oracle")]
        ckpt: Option<PathBuf>,
        /// Answer with the annotated boxes instead of a model.
        #[arg(long, conflicts_with = "ckpt")]
        oracle: bool,
        #[arg(long, value_enum, default_value_t = Protocol::Repose)]
        protocol: Protocol,
        #[arg(long, value_delimiter = ',', default_values_t = [1, 5])]
        k: Vec<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "eval_report.json")]
        out: PathBuf,
    },
    /// Place object patches into a background and write the composite.
    Place {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        background: PathBuf,
        /// Directory of RGBA PNG patches, placed in file-name order.
        #[arg(long)]
        objects: PathBuf,
        /// JSON list of boxes of objects already in the background.
        #[arg(long)]
        scene_boxes: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Policy::Independent)]
        policy: Policy,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write decoder attention heat maps and a proposal overlay for a scene.
    Visualize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Preset {
    Desk,
    Paper,
}

impl Preset {
    fn configs(self) -> (ModelConfig, TrainConfig) {
        match self {
            Preset::Desk => (ModelConfig::desk(), TrainConfig::desk()),
            Preset::Paper => (ModelConfig::paper(), TrainConfig::default()),
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Protocol {
    /// Each object is placed back into its own scene.
    Repose,
    /// Objects are placed into the next scene of the dataset.
    Place,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Policy {
    Independent,
    GreedyDistinct,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match configure_threads().and_then(|_| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("BOOTPLACE_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Config(format!(
            "BOOTPLACE_THREADS must be a positive integer, got {v:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))
}

struct Run {
    command: &'static str,
    started: u128,
}

impl Run {
    fn start(command: &'static str) -> Self {
        Self {
            command,
            started: now_ms(),
        }
    }

    fn finish(
        self,
        at: &Path,
        config: serde_json::Value,
        seed: Option<u64>,
        inputs: Vec<PathBuf>,
        outputs: Vec<PathBuf>,
    ) -> Result<(), CliError> {
        RunManifest {
            command: self.command.into(),
            args: std::env::args().skip(1).collect(),
            config,
            seed,
            input_hash: hash_inputs(&inputs)?,
            inputs,
            outputs,
            started_unix_ms: self.started,
            finished_unix_ms: now_ms(),
        }
        .write(at)
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData {
            out,
            scenes,
            seed,
            config,
        } => gen_data(&out, scenes, seed, config),
        Command::Train {
            data,
            out,
            preset,
            steps,
            seed,
            config,
            resume,
        } => train(&data, &out, preset, steps, seed, config, resume),
        Command::Eval {
            data,
            ckpt,
            oracle: _,
            protocol,
            k,
            config,
            out,
        } => eval(&data, ckpt.as_deref(), protocol, k, config, &out),
        Command::Place {
            ckpt,
            background,
            objects,
            scene_boxes,
            policy,
            out,
        } => place(
            &ckpt,
            &background,
            &objects,
            scene_boxes.as_deref(),
            policy,
            &out,
        ),
        Command::Visualize { ckpt, scene, out } => visualize(&ckpt, &scene, &out),
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn gen_data(out: &Path, scenes: usize, seed: u64, config: Option<PathBuf>) -> Result<(), CliError> {
    let run = Run::start("gen-data");
    let scene_config = ConfigFile::load(config.as_deref())?.scene()?;
    create_dir(out)?;
    let data = generate_dataset(&scene_config, scenes, seed)?;
    save_dataset(out, &data)?;
    eprintln!("wrote {} scenes to {}", data.len(), out.display());
    let inputs = config.into_iter().collect();
    run.finish(
        &out.join(MANIFEST_NAME),
        json!({ "scene": scene_config, "scenes": scenes }),
        Some(seed),
        inputs,
        vec![out.join("scenes")],
    )
}

fn check_sizes(scenes: &[Scene], model: &ModelConfig) -> Result<(), CliError> {
    let size = model.image_size as u32;
    match scenes
        .iter()
        .find(|s| s.background.dimensions() != (size, size))
    {
        Some(s) => Err(CliError::Compatibility(format!(
            "scene {} is {}x{}, the model expects {size}x{size}",
            s.id,
            s.background.width(),
            s.background.height()
        ))),
        None => Ok(()),
    }
}

fn train(
    data: &Path,
    out: &Path,
    preset: Preset,
    steps: Option<u64>,
    seed: Option<u64>,
    config: Option<PathBuf>,
    resume: bool,
) -> Result<(), CliError> {
    let run = Run::start("train");
    let file = ConfigFile::load(config.as_deref())?;
    let (model_preset, train_preset) = preset.configs();
    let mut train_config = file.train(train_preset)?;
    let mut model_config = file.model(model_preset)?;
    if let Some(s) = steps {
        train_config.steps = s;
    }
    if let Some(s) = seed {
        train_config.seed = s;
        model_config.seed = s;
    }
    let scenes = load_dataset(data)?;
    if scenes.is_empty() {
        return Err(CliError::Config(format!(
            "{} holds no scenes",
            data.display()
        )));
    }
    let ckpt = out.join("checkpoint");
    let mut trainer = if resume {
        let t = Trainer::resume(&ckpt, train_config.clone())?;
        model_config = t.model.config.clone();
        eprintln!("resuming from step {}", t.step());
        t
    } else {
        Trainer::new(
            PlacementModel::new(model_config.clone())?,
            train_config.clone(),
        )?
    };
    check_sizes(&scenes, &model_config)?;
    let every = train_config.log_every.max(1);
    let total = train_config.steps;
    trainer.run(&scenes, Some(out), |r| {
        if r.step % every == 0 || r.step == total {
            eprintln!(
                "step {:>6}  loss {:.4}  cls {:.4}  box {:.4}  asso {:.4}",
                r.step, r.total, r.l_cls, r.l_box, r.l_asso
            );
        }
    })?;
    if trainer.step() == 0 {
        trainer.save(&ckpt)?;
    }
    let mut inputs = vec![data.to_path_buf()];
    inputs.extend(config);
    run.finish(
        &out.join(MANIFEST_NAME),
        json!({ "preset": preset, "model": model_config, "train": train_config, "resumed": resume }),
        Some(train_config.seed),
        inputs,
        vec![ckpt, out.join("metrics.jsonl")],
    )
}

/// Accepts a checkpoint directory or the path of its `manifest.json`.
fn checkpoint_dir(path: &Path) -> PathBuf {
    if path.is_file() {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    } else {
        path.to_path_buf()
    }
}

fn load_model(path: &Path) -> Result<(PlacementModel<f32>, PathBuf), CliError> {
    let dir = checkpoint_dir(path);
    let (model, _) = load_checkpoint(&dir)?;
    Ok((model, dir))
}

fn sidecar(path: &Path, extension: &str) -> PathBuf {
    path.with_extension(extension)
}

fn eval(
    data: &Path,
    ckpt: Option<&Path>,
    protocol: Protocol,
    ks: Vec<usize>,
    config: Option<PathBuf>,
    out: &Path,
) -> Result<(), CliError> {
    let run = Run::start("eval");
    let mut spec = ConfigFile::load(config.as_deref())?.eval()?;
    let scenes = load_dataset(data)?;
    if ks.is_empty() {
        return Err(CliError::Config("--k needs at least one value".into()));
    }
    match protocol {
        Protocol::Repose => {
            spec.ks = ks;
            spec.overfit_ks.clear();
        }
        Protocol::Place => {
            if scenes.len() < 2 {
                return Err(CliError::Config(format!(
                    "the place protocol needs at least 2 scenes, {} has {}",
                    data.display(),
                    scenes.len()
                )));
            }
            spec.ks.clear();
            spec.overfit_ks = ks;
        }
    }
    let mut inputs = vec![data.to_path_buf()];
    let report = match ckpt {
        Some(path) => {
            let (model, dir) = load_model(path)?;
            check_sizes(&scenes, &model.config)?;
            inputs.push(dir);
            run_eval(&model, &scenes, &spec)?
        }
        None => run_eval(&OraclePlacer, &scenes, &spec)?,
    };
    inputs.extend(config);
    let body = json!({ "protocol": protocol, "placer": if ckpt.is_some() { "checkpoint" } else { "oracle" }, "report": report });
    let text = serde_json::to_string_pretty(&body).expect("report serializes");
    println!("{text}");
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    std::fs::write(out, text + "\n").map_err(|e| CliError::io(out, e))?;
    run.finish(
        &sidecar(out, "run.json"),
        json!({ "eval": spec }),
        None,
        inputs,
        vec![out.to_path_buf()],
    )
}

fn run_eval(
    placer: &dyn Placer,
    scenes: &[Scene],
    spec: &bootplace_core::eval::EvalSpec,
) -> Result<bootplace_core::eval::EvalReport, CliError> {
    Ok(evaluate(placer, scenes, spec)?)
}

fn open_rgb(path: &Path) -> Result<RgbImage, CliError> {
    Ok(image::open(path)
        .map_err(|e| CliError::io(path, e))?
        .to_rgb8())
}

fn place(
    ckpt: &Path,
    background: &Path,
    objects: &Path,
    scene_boxes: Option<&Path>,
    policy: Policy,
    out: &Path,
) -> Result<(), CliError> {
    let run = Run::start("place");
    let (model, dir) = load_model(ckpt)?;
    let bg = open_rgb(background)?;
    let size = model.config.image_size as u32;
    if bg.dimensions() != (size, size) {
        return Err(CliError::Compatibility(format!(
            "background is {}x{}, the model expects {size}x{size}",
            bg.width(),
            bg.height()
        )));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(objects)
        .map_err(|e| CliError::io(objects, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Config(format!(
            "no PNG objects in {}",
            objects.display()
        )));
    }
    let patches: Vec<RgbaImage> = files
        .iter()
        .map(|f| Ok(image::open(f).map_err(|e| CliError::io(f, e))?.to_rgba8()))
        .collect::<Result<_, CliError>>()?;
    let boxes: Vec<BBox> = match scene_boxes {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => Vec::new(),
    };
    let (proposals, assoc) = model.associate(&bg, &boxes, &patches)?;
    let policy = match policy {
        Policy::Independent => AssignPolicy::Independent,
        Policy::GreedyDistinct => AssignPolicy::GreedyDistinct,
    };
    let placements = assign_objects(&proposals, &assoc, policy)?;
    let mut composite = bg.clone();
    let mut entries = Vec::with_capacity(files.len());
    for (k, (file, placement)) in files.iter().zip(&placements).enumerate() {
        let name = file.file_name().map(|n| n.to_string_lossy().into_owned());
        entries.push(match placement {
            Some(p) => {
                paste(&mut composite, &patches[k], &p.bbox);
                json!({ "object": name, "proposal": p.proposal, "bbox": p.bbox, "probability": p.probability })
            }
            None => json!({
                "object": name,
                "proposal": null,
                "bbox": null,
                "probability": assoc.probabilities[k][proposals.len()],
            }),
        });
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    composite.save(out).map_err(|e| CliError::io(out, e))?;
    let json_path = sidecar(out, "json");
    let text = serde_json::to_string_pretty(&json!({ "placements": entries }))
        .expect("placements serialize");
    std::fs::write(&json_path, text + "\n").map_err(|e| CliError::io(&json_path, e))?;
    let mut inputs = vec![dir, background.to_path_buf(), objects.to_path_buf()];
    inputs.extend(scene_boxes.map(Path::to_path_buf));
    run.finish(
        &sidecar(out, "run.json"),
        json!({ "policy": format!("{policy:?}"), "model": model.config }),
        None,
        inputs,
        vec![out.to_path_buf(), json_path],
    )
}

/// Magnification of the proposal overlay.
const OVERLAY_SCALE: u32 = 4;

fn palette(i: usize) -> Rgb<u8> {
    const COLORS: [[u8; 3]; 8] = [
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
    ];
    Rgb(COLORS[i % COLORS.len()])
}

fn draw_rect(img: &mut RgbImage, bbox: &BBox, color: Rgb<u8>) {
    let (x0, y0, x1, y1) = bbox.pixel_rect(img.width(), img.height());
    if x1 <= x0 || y1 <= y0 {
        return;
    }
    for x in x0..x1 {
        img.put_pixel(x, y0, color);
        img.put_pixel(x, y1 - 1, color);
    }
    for y in y0..y1 {
        img.put_pixel(x0, y, color);
        img.put_pixel(x1 - 1, y, color);
    }
}

fn visualize(ckpt: &Path, scene_dir: &Path, out: &Path) -> Result<(), CliError> {
    let run = Run::start("visualize");
    let (model, dir) = load_model(ckpt)?;
    let scene = load_scene(scene_dir)?;
    check_sizes(std::slice::from_ref(&scene), &model.config)?;
    create_dir(out)?;
    let heatmaps = export_attention(&model, &scene, &out.join("attention"))?;
    let boxes: Vec<BBox> = scene.scene_objects.iter().map(|o| o.bbox).collect();
    let proposals = model.detect(&scene.background, &boxes)?;
    let (w, h) = scene.background.dimensions();
    let mut overlay = image::imageops::resize(
        &scene.background,
        w * OVERLAY_SCALE,
        h * OVERLAY_SCALE,
        image::imageops::Nearest,
    );
    for (i, p) in proposals.iter().enumerate() {
        draw_rect(&mut overlay, &p.bbox, palette(i));
    }
    let overlay_path = out.join("proposals.png");
    overlay
        .save(&overlay_path)
        .map_err(|e| CliError::io(&overlay_path, e))?;
    let listing: Vec<_> = proposals
        .iter()
        .enumerate()
        .map(|(i, p)| json!({ "query": i, "bbox": p.bbox, "class_probs": p.class_probs }))
        .collect();
    let list_path = out.join("proposals.json");
    let text = serde_json::to_string_pretty(&listing).expect("proposals serialize");
    std::fs::write(&list_path, text + "\n").map_err(|e| CliError::io(&list_path, e))?;
    let mut outputs = heatmaps;
    outputs.extend([overlay_path, list_path]);
    run.finish(
        &out.join(MANIFEST_NAME),
        json!({ "model": model.config }),
        None,
        vec![dir, scene_dir.to_path_buf()],
        outputs,
    )
}
