use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lacnet_core::config::ConfigFile;
use lacnet_core::eval::{evaluate, visible_priors, Predictor, VisibleSource};
use lacnet_core::grasp::{classify_grasp_region, generate_grasp};
use lacnet_core::metrics::PredictedInstance;
use lacnet_core::model::ModelConfig;
use lacnet_core::preprocess::AugmentParams;
use lacnet_core::render::render_overlay;
use lacnet_core::scene::{generate_dataset, load_dataset, load_scene, save_dataset, GeneratorConfig, RgbdScene};
use lacnet_core::train::{train, Checkpoint, TrainConfig, TrainOptions, LAST_CHECKPOINT};
use lacnet_core::{Error, Execution, Mask};

mod manifest;

use manifest::RunManifest;

/// Amodal instance segmentation toolkit: scene generation, training,
/// evaluation, rendering and grasp points.
#[derive(Parser, Debug)]
#[command(name = "lacnet", version)]
struct Cli {
    /// Overrides the seed of the command's configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 runs everything on the calling thread.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic RGB-D dataset.
    GenData(GenDataArgs),
    /// Train the completion network.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the copy-visible baseline) on a dataset.
    Eval(EvalArgs),
    /// Draw ground truth, predictions and grasp points over a scene.
    Render(RenderArgs),
    /// Compute a top-grasp point for one instance.
    Grasp(GraspArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Generator config file (key = value).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of scenes.
    #[arg(long)]
    count: usize,
    /// Index of the first scene.
    #[arg(long, default_value_t = 0)]
    first_index: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Evaluation dataset; without it the last --eval-count scenes of --data are held out.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Scenes held out from --data when --eval-data is absent (default: 10%, at least 1).
    #[arg(long)]
    eval_count: Option<usize>,
    /// Model and training config file (key = value).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints, history and manifest.
    #[arg(long)]
    out: PathBuf,
    /// Overrides total_iterations.
    #[arg(long)]
    iterations: Option<u64>,
    /// Continue from the last checkpoint in --out.
    #[arg(long)]
    resume: bool,
    /// Stop after this many iterations, leaving a resumable checkpoint.
    #[arg(long)]
    stop_after: Option<u64>,
}

#[derive(Args, Debug)]
#[group(id = "prior", multiple = false)]
struct PriorArgs {
    /// Use the dataset's ground-truth visible masks (default).
    #[arg(long, group = "prior")]
    gt_visible: bool,
    /// Read visible masks from <DIR>/<scene_id>/<k>_visible.png.
    #[arg(long, group = "prior")]
    mask_dir: Option<PathBuf>,
    /// Corrupt ground-truth visible masks with dilation, erosion and blur.
    #[arg(long, group = "prior")]
    corrupt_visible: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to evaluate; required unless --copy-visible.
    #[arg(long, required_unless_present = "copy_visible")]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    prior: PriorArgs,
    /// Score the visible prior itself as the amodal prediction.
    #[arg(long)]
    copy_visible: bool,
    /// Directory for report.json, manifest and predictions.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write predicted masks to <OUT>/predictions/<scene_id>/.
    #[arg(long, requires = "out")]
    save_predictions: bool,
    /// Print the JSON report instead of the table.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct RenderArgs {
    /// Scene directory.
    #[arg(long)]
    scene: PathBuf,
    /// Directory of <k>_visible.png / <k>_amodal.png predictions for this scene.
    #[arg(long)]
    pred_dir: Option<PathBuf>,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
#[group(id = "selector", required = true, multiple = false)]
struct Selector {
    /// Instance index; its ground-truth visible mask is the prior.
    #[arg(long, group = "selector")]
    instance: Option<usize>,
    /// Visible-mask PNG to use as the prior.
    #[arg(long, group = "selector")]
    mask: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GraspArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    selector: Selector,
    /// Write the JSON here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_) | Error::UnknownKey(_) | Error::Placement { .. } => 1,
        Error::NonFiniteLoss { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let exec = match cli.threads {
        Some(0) => {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        Some(1) => Execution::Sequential,
        Some(n) => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
            Execution::default()
        }
        None => Execution::default(),
    };
    let result = match &cli.command {
        Command::GenData(a) => gen_data(&cli, a, exec),
        Command::Train(a) => cmd_train(&cli, a, exec),
        Command::Eval(a) => cmd_eval(&cli, a, exec),
        Command::Render(a) => cmd_render(&cli, a),
        Command::Grasp(a) => cmd_grasp(&cli, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn create_dir(dir: &Path) -> lacnet_core::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> lacnet_core::Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn gen_data(cli: &Cli, a: &GenDataArgs, exec: Execution) -> lacnet_core::Result<()> {
    let mut cfg = GeneratorConfig::default();
    if let Some(path) = &a.config {
        ConfigFile::load(path)?.apply_generator(&mut cfg)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let manifest = RunManifest::start("gen-data", &cfg, cfg.seed)
        .input("config", a.config.as_deref())
        .output("dataset", Some(&a.out));
    create_dir(&a.out)?;
    manifest.write(&a.out)?;
    let scenes = generate_dataset(&cfg, a.first_index, a.count, exec)?;
    save_dataset(&scenes, &a.out)?;
    manifest.finish().write(&a.out)?;
    eprintln!("wrote {} scenes to {}", scenes.len(), a.out.display());
    Ok(())
}

fn cmd_train(cli: &Cli, a: &TrainArgs, exec: Execution) -> lacnet_core::Result<()> {
    let mut model_cfg = ModelConfig::desk();
    let mut train_cfg = TrainConfig::default();
    if let Some(path) = &a.config {
        ConfigFile::load(path)?.apply_training(&mut model_cfg, &mut train_cfg)?;
    }
    if let Some(seed) = cli.seed {
        train_cfg.seed = seed;
        model_cfg.seed = seed;
    }
    if let Some(n) = a.iterations {
        train_cfg.total_iterations = n;
        if n > 0 {
            train_cfg.eval_every = train_cfg.eval_every.min(n);
        }
    }
    train_cfg.validate()?;
    model_cfg.validate()?;

    let mut scenes = load_dataset(&a.data)?;
    let eval_scenes = match &a.eval_data {
        Some(dir) => load_dataset(dir)?,
        None => {
            let n = a.eval_count.unwrap_or((scenes.len() / 10).max(1));
            if n == 0 || n >= scenes.len() {
                return Err(Error::InvalidConfig(format!(
                    "cannot hold out {n} of {} scenes for evaluation",
                    scenes.len()
                )));
            }
            scenes.split_off(scenes.len() - n)
        }
    };
    let resume = if a.resume {
        let path = a.out.join(LAST_CHECKPOINT);
        Some(Checkpoint::load(&path)?)
    } else {
        None
    };

    let echo = serde_json::json!({ "model": model_cfg, "train": train_cfg });
    let manifest = RunManifest::start("train", &echo, train_cfg.seed)
        .input("data", Some(&a.data))
        .input("eval_data", a.eval_data.as_deref())
        .input("config", a.config.as_deref())
        .output("checkpoints", Some(&a.out));
    create_dir(&a.out)?;
    manifest.write(&a.out)?;

    let mut report = |r: &lacnet_core::train::HistoryRow| {
        if let (Some(full), Some(occ)) = (r.miou_full, r.miou_occ) {
            eprintln!("iteration {}  loss {:.4}  mIoU full {:.4}  occ {:.4}", r.iteration, r.loss, full, occ);
        }
    };
    let mut opts = TrainOptions::new(&eval_scenes);
    opts.out_dir = Some(&a.out);
    opts.exec = exec;
    opts.resume = resume;
    opts.stop_after = a.stop_after;
    opts.progress = Some(&mut report);
    let outcome = train(&scenes, &model_cfg, &train_cfg, opts)?;
    manifest.finish().write(&a.out)?;
    eprintln!(
        "trained to iteration {} of {}; checkpoints in {}",
        outcome.checkpoint.step,
        train_cfg.total_iterations,
        a.out.display()
    );
    Ok(())
}

fn read_mask(path: &Path) -> lacnet_core::Result<Mask> {
    let img = image::open(path)
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_luma8();
    Ok(Mask::from_luma(&img))
}

/// `<k>_<suffix>.png` files in `dir`, ordered by `k`.
fn indexed_masks(dir: &Path, suffix: &str) -> lacnet_core::Result<Vec<(usize, PathBuf)>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let rd = std::fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut out = Vec::new();
    for entry in rd.flatten() {
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(k) = name
            .strip_suffix(&format!("_{suffix}.png"))
            .and_then(|k| k.parse::<usize>().ok())
        {
            out.push((k, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

fn provided_priors(scenes: &[RgbdScene], dir: &Path) -> lacnet_core::Result<Vec<Vec<Mask>>> {
    scenes
        .iter()
        .map(|s| {
            indexed_masks(&dir.join(&s.scene_id), "visible")?
                .into_iter()
                .map(|(_, p)| {
                    let m = read_mask(&p)?;
                    if m.width() != s.width() || m.height() != s.height() {
                        return Err(Error::ShapeMismatch(format!("{} does not match the scene size", p.display())));
                    }
                    Ok(m)
                })
                .collect()
        })
        .collect()
}

fn save_mask(mask: &Mask, path: &Path) -> lacnet_core::Result<()> {
    mask.to_luma().save(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn cmd_eval(cli: &Cli, a: &EvalArgs, exec: Execution) -> lacnet_core::Result<()> {
    let scenes = load_dataset(&a.data)?;
    let seed = cli.seed.unwrap_or(0);
    let source = if let Some(dir) = &a.prior.mask_dir {
        VisibleSource::Provided(provided_priors(&scenes, dir)?)
    } else if a.prior.corrupt_visible {
        VisibleSource::Corrupted {
            params: AugmentParams::default().always(),
            seed,
        }
    } else {
        VisibleSource::GroundTruth
    };
    let checkpoint = match (&a.checkpoint, a.copy_visible) {
        (Some(path), false) => Some(Checkpoint::load(path)?),
        _ => None,
    };
    let model = checkpoint.as_ref().map(|c| c.model()).transpose()?;
    let predictor = match &model {
        Some(m) => Predictor::Model(m),
        None => Predictor::CopyVisible,
    };
    let prior_name = match &source {
        VisibleSource::GroundTruth => "gt-visible",
        VisibleSource::Corrupted { .. } => "corrupt-visible",
        VisibleSource::Provided(_) => "mask-dir",
    };
    let echo = serde_json::json!({
        "prior": prior_name,
        "predictor": if model.is_some() { "model" } else { "copy-visible" },
        "model": checkpoint.as_ref().map(|c| &c.model_config),
    });
    let manifest = RunManifest::start("eval", &echo, seed)
        .input("data", Some(&a.data))
        .input("checkpoint", a.checkpoint.as_deref())
        .input("mask_dir", a.prior.mask_dir.as_deref())
        .output("report", a.out.as_deref());
    if let Some(out) = &a.out {
        create_dir(out)?;
        manifest.write(out)?;
    }
    let priors = visible_priors(&scenes, &source);
    let result = evaluate(&scenes, &priors, predictor, exec)?;
    let json = serde_json::to_string_pretty(&result.report).expect("report serializes");
    if let Some(out) = &a.out {
        write_file(&out.join("report.json"), json.as_bytes())?;
        if a.save_predictions {
            for (scene, preds) in scenes.iter().zip(&result.predictions) {
                let dir = out.join("predictions").join(&scene.scene_id);
                create_dir(&dir)?;
                for (k, p) in preds.iter().enumerate() {
                    save_mask(&p.visible, &dir.join(format!("{k}_visible.png")))?;
                    save_mask(&p.amodal, &dir.join(format!("{k}_amodal.png")))?;
                }
            }
        }
        manifest.finish().write(out)?;
    }
    if a.json {
        println!("{json}");
    } else {
        print!("{}", result.report.table());
    }
    Ok(())
}

fn cmd_render(cli: &Cli, a: &RenderArgs) -> lacnet_core::Result<()> {
    let scene = load_scene(&a.scene)?;
    let mut preds = Vec::new();
    if let Some(dir) = &a.pred_dir {
        for (k, amodal_path) in indexed_masks(dir, "amodal")? {
            let amodal = read_mask(&amodal_path)?;
            let visible_path = dir.join(format!("{k}_visible.png"));
            let visible = if visible_path.exists() {
                read_mask(&visible_path)?
            } else {
                amodal.clone()
            };
            preds.push(PredictedInstance { amodal, visible });
        }
    }
    let grasps: Vec<(f64, f64)> = preds
        .iter()
        .filter_map(|p| generate_grasp(&scene, p).ok())
        .map(|g| (g.pixel[0], g.pixel[1]))
        .collect();
    let out_dir = parent_dir(&a.out);
    let manifest = RunManifest::start("render", &serde_json::json!({ "predictions": preds.len() }), cli.seed.unwrap_or(0))
        .input("scene", Some(&a.scene))
        .input("pred_dir", a.pred_dir.as_deref())
        .output("image", Some(&a.out));
    create_dir(&out_dir)?;
    manifest.write(&out_dir)?;
    let img = render_overlay(&scene, &preds, &grasps);
    img.save(&a.out).map_err(|e| Error::Parse {
        path: a.out.clone(),
        message: e.to_string(),
    })?;
    manifest.finish().write(&out_dir)?;
    Ok(())
}

fn cmd_grasp(cli: &Cli, a: &GraspArgs) -> lacnet_core::Result<()> {
    let scene = load_scene(&a.scene)?;
    let model = Checkpoint::load(&a.checkpoint)?.model()?;
    let prior = match (&a.selector.instance, &a.selector.mask) {
        (Some(k), _) => scene
            .instances
            .get(*k)
            .ok_or_else(|| Error::InvalidConfig(format!("scene has {} instances, no index {k}", scene.instances.len())))?
            .visible_mask
            .clone(),
        (None, Some(path)) => read_mask(path)?,
        (None, None) => unreachable!("clap requires a selector"),
    };
    let pred = model.predict_amodal(&scene, &prior)?;
    let instance = PredictedInstance {
        amodal: pred.amodal_mask,
        visible: pred.visible_mask,
    };
    let grasp = generate_grasp(&scene, &instance)?;
    let point = (grasp.pixel[0], grasp.pixel[1]);
    let region = classify_grasp_region(point, &instance.amodal)?;
    let region_gt = match a.selector.instance {
        Some(k) => Some(classify_grasp_region(point, &scene.instances[k].amodal_mask)?),
        None => None,
    };
    let json = serde_json::to_string_pretty(&serde_json::json!({
        "pixel": grasp.pixel,
        "point3d": grasp.point3d,
        "strategy": grasp.strategy,
        "region": region,
        "region_ground_truth": region_gt,
    }))
    .expect("grasp serializes");
    if let Some(out) = &a.out {
        let dir = parent_dir(out);
        let manifest = RunManifest::start("grasp", &serde_json::json!({ "instance": a.selector.instance }), cli.seed.unwrap_or(0))
            .input("scene", Some(&a.scene))
            .input("checkpoint", Some(&a.checkpoint))
            .input("mask", a.selector.mask.as_deref())
            .output("grasp", Some(out));
        create_dir(&dir)?;
        manifest.write(&dir)?;
        write_file(out, json.as_bytes())?;
        manifest.finish().write(&dir)?;
    }
    println!("{json}");
    Ok(())
}
