//! Command-line front end: synthetic dataset generation, dataset ingestion,
//! joint training, guided rendering, and protocol evaluation. Every command
//! is deterministic under its seeds and writes a `run.json` provenance
//! record (resolved config, code version, input hashes) next to its outputs.
//!
//! Exit codes: 0 success, 1 user error (bad input, bad config, missing
//! files), 2 internal error (violated numeric or shape contracts).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sparseview_core::config::{resolve_config, RunConfig, RunRecord};
use sparseview_core::data::{
    ingest, load_image, parse_scene_spec, save_image, write_synthetic_dataset, SceneRecord,
};
use sparseview_core::diffusion::{toy_denoiser_train, DenoiserHandle, NvsModel};
use sparseview_core::error::Error;
use sparseview_core::evaluation::{
    render_report_jsonl, render_summary_table, run_protocol, CoarseGeometryModel, EvalProtocol,
    GuidedSynthesizer, IdentityOracle,
};
use sparseview_core::training::{
    load_checkpoint, run_training, save_checkpoint, TrainState,
};

type Result<T> = std::result::Result<T, Error>;

#[derive(Parser)]
#[command(
    name = "sparseview",
    version,
    about = "Sparse-view novel view synthesis: dataset tools, joint training, guided sampling, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON configuration file (missing keys fall back to defaults).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Dotted-key override, e.g. --set pipeline.train.seed=7 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Shorthand that sets every stage seed (training, pretraining,
    /// inference, evaluation) at once.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Increase log verbosity (-v info, -vv debug, -vvv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Render a posed synthetic dataset from a primitive-scene spec.
    Synth {
        /// Scene specification (JSON).
        #[arg(long)]
        spec: PathBuf,
        /// Dataset root to create the scene under.
        #[arg(long)]
        out: PathBuf,
        /// Scene directory name; defaults to the spec file stem.
        #[arg(long)]
        scene_id: Option<String>,
    },
    /// Validate a dataset tree and write its index.
    Ingest {
        /// Dataset root (scene directories with frames.json inside).
        #[arg(long, env = "SPARSEVIEW_DATASET")]
        root: PathBuf,
        /// Where to write index.json and run.json; defaults to the root.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Jointly train the geometry branch and the guidance adapter around a
    /// frozen denoiser.
    Train {
        #[arg(long, env = "SPARSEVIEW_DATASET")]
        dataset: PathBuf,
        /// Output directory for checkpoints, the loss log and run.json.
        #[arg(long)]
        out: PathBuf,
        /// Steps to run in this invocation; defaults to the configured
        /// total minus steps already taken.
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Pretrained denoiser weight blob; when absent, a small denoiser
        /// is pretrained on the dataset first.
        #[arg(long)]
        denoiser_weights: Option<PathBuf>,
        /// Checkpoint interval in steps; defaults to a quarter of the run.
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Synthesize one view of a scene from a trained checkpoint.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, env = "SPARSEVIEW_DATASET")]
        dataset: PathBuf,
        /// Scene id inside the dataset.
        #[arg(long)]
        scene: String,
        /// Frame index to synthesize.
        #[arg(long)]
        target_frame: usize,
        /// Context frame indices, comma-separated.
        #[arg(long, value_delimiter = ',', required = true)]
        contexts: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Guidance scale; defaults to the configured value.
        #[arg(long)]
        lambda: Option<f64>,
        /// Noise steps applied to the coarse estimate before denoising.
        #[arg(long)]
        perturb_steps: Option<usize>,
        /// Prompt; <class_name> expands to the scene's class.
        #[arg(long)]
        prompt: Option<String>,
        /// Also write the guidance-off sample for comparison.
        #[arg(long)]
        compare_unguided: bool,
    },
    /// Score held-out views under the evaluation protocol.
    Evaluate {
        /// Trained checkpoint; not needed for --model identity.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, env = "SPARSEVIEW_DATASET")]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Context views per object; defaults to the configured protocol.
        #[arg(long)]
        contexts: Option<usize>,
        /// Objects per category.
        #[arg(long)]
        objects: Option<usize>,
        /// Poses sampled per object.
        #[arg(long)]
        poses: Option<usize>,
        /// Which model to score.
        #[arg(long, value_enum, default_value = "coarse")]
        model: ModelKind,
        /// Fail (exit 1) if the dataset cannot supply the requested counts.
        #[arg(long)]
        strict: bool,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelKind {
    /// Ground-truth passthrough; exercises the protocol itself.
    Identity,
    /// The geometry prior's coarse color estimate, no diffusion.
    Coarse,
    /// The full guided diffusion pipeline.
    Guided,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::from_default_env().filter_level(level).init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

/// User mistakes exit 1; violated internal contracts exit 2.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::NonFinite { .. } | Error::ShapeMismatch { .. } => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        for key in ["pipeline.train.seed", "pretrain.seed", "inference.seed", "eval.seed"] {
            overrides.push(format!("{key}={seed}"));
        }
    }
    let file_bytes = match &cli.config {
        Some(path) => Some(std::fs::read(path).map_err(|e| Error::io(path, e))?),
        None => None,
    };
    let config = resolve_config(
        file_bytes.as_deref().map(|b| (b, cli.config.as_deref().expect("path with bytes"))),
        &overrides,
    )?;

    match cli.command {
        Command::Synth { spec, out, scene_id } => cmd_synth(&config, &cli.config, &spec, &out, scene_id),
        Command::Ingest { root, out } => cmd_ingest(&config, &cli.config, &root, out),
        Command::Train { dataset, out, steps, resume, denoiser_weights, checkpoint_every } => {
            cmd_train(&config, &cli.config, &dataset, &out, steps, resume, denoiser_weights, checkpoint_every)
        }
        Command::Render {
            checkpoint,
            dataset,
            scene,
            target_frame,
            contexts,
            out,
            lambda,
            perturb_steps,
            prompt,
            compare_unguided,
        } => cmd_render(
            &config,
            &cli.config,
            &checkpoint,
            &dataset,
            &scene,
            target_frame,
            &contexts,
            &out,
            lambda,
            perturb_steps,
            prompt,
            compare_unguided,
        ),
        Command::Evaluate { checkpoint, dataset, out, contexts, objects, poses, model, strict } => {
            cmd_evaluate(&config, &cli.config, checkpoint, &dataset, &out, contexts, objects, poses, model, strict)
        }
    }
}

fn record_for(
    command: &str,
    config: &RunConfig,
    config_path: &Option<PathBuf>,
) -> Result<RunRecord> {
    let mut record = RunRecord::new(command, env!("CARGO_PKG_VERSION"), config.clone());
    if let Some(path) = config_path {
        record.add_input("config", path)?;
    }
    Ok(record)
}

fn add_dataset_inputs(record: &mut RunRecord, root: &Path, scenes: &[SceneRecord]) -> Result<()> {
    for scene in scenes {
        let manifest = root.join(&scene.scene_id).join("frames.json");
        if manifest.exists() {
            record.add_input(&format!("dataset/{}/frames.json", scene.scene_id), &manifest)?;
        }
    }
    Ok(())
}

fn cmd_synth(
    config: &RunConfig,
    config_path: &Option<PathBuf>,
    spec_path: &Path,
    out: &Path,
    scene_id: Option<String>,
) -> Result<()> {
    let bytes = std::fs::read(spec_path).map_err(|e| Error::io(spec_path, e))?;
    let spec = parse_scene_spec(&bytes, spec_path)?;
    let scene_id = scene_id.unwrap_or_else(|| {
        spec_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "scene".into())
    });
    let scene_dir = write_synthetic_dataset(&spec, out, &scene_id)?;
    let mut record = record_for("synth", config, config_path)?;
    record.add_input("spec", spec_path)?;
    record.write(&scene_dir)?;
    println!(
        "wrote scene {scene_id} with {} frames to {}",
        spec.camera_ring.count,
        scene_dir.display()
    );
    Ok(())
}

fn cmd_ingest(
    config: &RunConfig,
    config_path: &Option<PathBuf>,
    root: &Path,
    out: Option<PathBuf>,
) -> Result<()> {
    let scenes = ingest(root)?;
    println!("{} scenes", scenes.len());
    for scene in &scenes {
        println!(
            "  {} ({}, {} frames, {:?})",
            scene.scene_id,
            scene.class_name,
            scene.frames.len(),
            scene.split
        );
    }
    let out = out.unwrap_or_else(|| root.to_path_buf());
    let index: Vec<serde_json::Value> = scenes
        .iter()
        .map(|s| {
            serde_json::json!({
                "scene_id": s.scene_id,
                "class_name": s.class_name,
                "frames": s.frames.len(),
                "split": s.split,
            })
        })
        .collect();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let index_path = out.join("index.json");
    std::fs::write(&index_path, serde_json::to_string_pretty(&index).expect("index serializes"))
        .map_err(|e| Error::io(&index_path, e))?;
    let mut record = record_for("ingest", config, config_path)?;
    add_dataset_inputs(&mut record, root, &scenes)?;
    record.write(&out)?;
    Ok(())
}

/// Latest `step*` checkpoint directory under `checkpoints/`, if any.
fn latest_checkpoint(out: &Path) -> Option<PathBuf> {
    let dir = out.join("checkpoints");
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in std::fs::read_dir(&dir).ok()?.flatten() {
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(step) = name.strip_prefix("step").and_then(|s| s.parse::<usize>().ok()) {
            if best.as_ref().is_none_or(|(b, _)| step > *b) {
                best = Some((step, entry.path()));
            }
        }
    }
    best.map(|(_, p)| p)
}

/// Pretraining corpus: every frame of every scene, brought to the codec
/// resolution, capped for desk-scale runtimes.
fn pretrain_images(
    scenes: &[SceneRecord],
    resolution: (usize, usize),
) -> Result<Vec<sparseview_core::data::Image>> {
    const CAP: usize = 16;
    let mut images = Vec::new();
    'outer: for scene in scenes {
        for frame in &scene.frames {
            let img = load_image(&frame.image_path)?;
            images.push(sparseview_core::aggregation::target_colors_at_grid(
                &img, resolution,
            ));
            if images.len() >= CAP {
                break 'outer;
            }
        }
    }
    Ok(images)
}

fn build_denoiser(
    config: &RunConfig,
    scenes: &[SceneRecord],
    weights: Option<&Path>,
) -> Result<DenoiserHandle> {
    let schedule = config.pipeline.schedule.to_schedule()?;
    if let Some(path) = weights {
        let handle = DenoiserHandle::from_external(
            "external",
            path,
            config.pipeline.denoiser.clone(),
            schedule.clone(),
            config.pretrain.seed,
        )?;
        if handle.frozen {
            return Ok(handle);
        }
        log::warn!("external weights unusable; pretraining the built-in denoiser instead");
    }
    let images = pretrain_images(scenes, config.pipeline.denoiser.resolution)?;
    let class_name = scenes
        .first()
        .map(|s| s.class_name.as_str())
        .unwrap_or("object");
    let prompt = config.inference.prompt_template.replace("<class_name>", class_name);
    let embedding = sparseview_core::diffusion::embed_prompt(
        &prompt,
        config.pipeline.denoiser.text_dim,
    );
    log::info!(
        "pretraining the denoiser on {} images for {} steps",
        images.len(),
        config.pretrain.steps
    );
    let (handle, losses) = toy_denoiser_train(
        &images,
        &embedding,
        config.pipeline.denoiser.clone(),
        schedule,
        &config.pretrain,
    )?;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        log::info!("denoiser pretraining loss {first:.4} -> {last:.4}");
    }
    Ok(handle)
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config: &RunConfig,
    config_path: &Option<PathBuf>,
    dataset: &Path,
    out: &Path,
    steps: Option<usize>,
    resume: bool,
    denoiser_weights: Option<PathBuf>,
    checkpoint_every: Option<usize>,
) -> Result<()> {
    let scenes = ingest(dataset)?;
    if scenes.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no scenes found under {}",
            dataset.display()
        )));
    }

    let existing = latest_checkpoint(out);
    let mut resumed_from = None;
    let mut state = match (&existing, resume) {
        (Some(ckpt), true) => {
            let state = load_checkpoint(ckpt)?;
            if state.config != config.pipeline {
                log::warn!(
                    "resuming with the checkpoint's config snapshot; the resolved config differs"
                );
            }
            println!("resuming from {} at step {}", ckpt.display(), state.step);
            resumed_from = Some(ckpt.clone());
            state
        }
        (Some(ckpt), false) => {
            return Err(Error::Config(format!(
                "{} already contains checkpoints (latest {}); pass --resume to continue",
                out.display(),
                ckpt.display()
            )));
        }
        (None, _) => {
            let denoiser = build_denoiser(config, &scenes, denoiser_weights.as_deref())?;
            TrainState::new(config.pipeline.clone(), denoiser)?
        }
    };

    let total = state.config.train.total_steps;
    let steps = steps.unwrap_or(total.saturating_sub(state.step));
    let interval = checkpoint_every.unwrap_or_else(|| (steps / 4).max(1));

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut record = record_for("train", config, config_path)?;
    add_dataset_inputs(&mut record, dataset, &scenes)?;
    if let Some(ckpt) = &resumed_from {
        record.add_input("resume_checkpoint", &ckpt.join("manifest.json"))?;
    }
    record.write(out)?;

    let log_path = out.join("loss_log.csv");
    let mut log_lines = String::new();
    if !(resume && log_path.exists()) {
        log_lines.push_str("step,recon_loss,diffusion_loss,total_loss\n");
    }

    let mut next_checkpoint = state.step + interval;
    let end_step = state.step + steps;
    let mut last_report = None;
    while state.step < end_step {
        let chunk_end = end_step.min(next_checkpoint);
        let chunk = chunk_end - state.step;
        run_training(&mut state, &scenes, chunk, |report| {
            log_lines.push_str(&format!(
                "{},{},{},{}\n",
                report.step, report.recon_loss, report.diffusion_loss, report.total_loss
            ));
            last_report = Some(report.clone());
        })?;
        if state.step >= next_checkpoint {
            save_checkpoint(&state, &out.join("checkpoints").join(format!("step{:06}", state.step)))?;
            next_checkpoint += interval;
        }
    }
    let final_dir = out.join("checkpoints").join(format!("step{:06}", state.step));
    save_checkpoint(&state, &final_dir)?;

    use std::io::Write;
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    file.write_all(log_lines.as_bytes()).map_err(|e| Error::io(&log_path, e))?;

    if let Some(report) = last_report {
        println!(
            "step {}: L_recon {:.6}, L_diffusion {:.6}, total {:.6}",
            report.step, report.recon_loss, report.diffusion_loss, report.total_loss
        );
    }
    println!("checkpoint {}", final_dir.display());
    Ok(())
}

fn find_scene<'a>(scenes: &'a [SceneRecord], id: &str) -> Result<&'a SceneRecord> {
    scenes.iter().find(|s| s.scene_id == id).ok_or_else(|| {
        let mut available: Vec<&str> = scenes.iter().map(|s| s.scene_id.as_str()).collect();
        available.sort_unstable();
        Error::InvalidArgument(format!(
            "scene {id:?} not found; available scenes: {}",
            available.join(", ")
        ))
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_render(
    config: &RunConfig,
    config_path: &Option<PathBuf>,
    checkpoint: &Path,
    dataset: &Path,
    scene_id: &str,
    target_frame: usize,
    contexts: &[usize],
    out: &Path,
    lambda: Option<f64>,
    perturb_steps: Option<usize>,
    prompt: Option<String>,
    compare_unguided: bool,
) -> Result<()> {
    let scenes = ingest(dataset)?;
    let scene = find_scene(&scenes, scene_id)?;
    let n = scene.frames.len();
    for &idx in contexts.iter().chain(std::iter::once(&target_frame)) {
        if idx >= n {
            return Err(Error::InvalidArgument(format!(
                "frame {idx} does not exist; scene {scene_id:?} has frames 0..{n}"
            )));
        }
    }
    let state = load_checkpoint(checkpoint)?;
    let model = state.into_nvs_model();

    let mut inference = config.inference.clone();
    if let Some(l) = lambda {
        inference.lambda = l;
    }
    if let Some(p) = perturb_steps {
        inference.perturb_steps = p;
    }
    inference.validate()?;
    let template = prompt.unwrap_or_else(|| inference.prompt_template.clone());
    let final_prompt = template.replace("<class_name>", &scene.class_name);

    let mut context_views = Vec::with_capacity(contexts.len());
    for &idx in contexts {
        let frame = &scene.frames[idx];
        context_views.push((load_image(&frame.image_path)?, frame.pose.clone()));
    }
    let target_pose = &scene.frames[target_frame].pose;
    let bounds = scene.bounds()?;

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    // Coarse estimate: the geometry prior with no denoising pass.
    let coarse_opts = sparseview_core::diffusion::NvsOptions {
        perturb_steps: 0,
        random_start: false,
        ..inference.to_options()
    };
    let coarse = model.nvs_inference(&context_views, target_pose, bounds, &final_prompt, &coarse_opts)?;
    save_image(&out.join("coarse.png"), &coarse)?;

    let sample =
        model.nvs_inference(&context_views, target_pose, bounds, &final_prompt, &inference.to_options())?;
    save_image(&out.join("sample.png"), &sample)?;

    if compare_unguided {
        let unguided_opts =
            sparseview_core::diffusion::NvsOptions { lambda: 0.0, ..inference.to_options() };
        let unguided =
            model.nvs_inference(&context_views, target_pose, bounds, &final_prompt, &unguided_opts)?;
        save_image(&out.join("unguided.png"), &unguided)?;
    }

    let mut record = record_for("render", config, config_path)?;
    record.add_input("checkpoint", &checkpoint.join("manifest.json"))?;
    add_dataset_inputs(&mut record, dataset, std::slice::from_ref(scene))?;
    record.write(out)?;
    println!(
        "rendered scene {scene_id} frame {target_frame} from {} context view(s) into {}",
        contexts.len(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    config: &RunConfig,
    config_path: &Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    dataset: &Path,
    out: &Path,
    contexts: Option<usize>,
    objects: Option<usize>,
    poses: Option<usize>,
    model: ModelKind,
    strict: bool,
) -> Result<()> {
    let scenes = ingest(dataset)?;
    let mut protocol: EvalProtocol = config.eval.clone();
    if let Some(c) = contexts {
        protocol.context_count = c;
    }
    if let Some(o) = objects {
        protocol.objects_per_category = o;
    }
    if let Some(p) = poses {
        protocol.poses_per_object = p;
    }
    protocol.validate()?;

    let state = match (&checkpoint, model) {
        (_, ModelKind::Identity) => None,
        (Some(path), _) => Some(load_checkpoint(path)?),
        (None, _) => {
            return Err(Error::InvalidArgument(
                "--checkpoint is required unless --model identity".into(),
            ))
        }
    };

    let report = match model {
        ModelKind::Identity => run_protocol(&IdentityOracle, &scenes, &protocol)?,
        ModelKind::Coarse => {
            let state = state.expect("checkpoint requirement checked above");
            let m = CoarseGeometryModel { geometry: &state.geometry, params: &state.geometry_params };
            run_protocol(&m, &scenes, &protocol)?
        }
        ModelKind::Guided => {
            let nvs: NvsModel = state.expect("checkpoint requirement checked above").into_nvs_model();
            let m = GuidedSynthesizer {
                model: &nvs,
                options: config.inference.to_options(),
                prompt_template: config.inference.prompt_template.clone(),
            };
            run_protocol(&m, &scenes, &protocol)?
        }
    };

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let jsonl_path = out.join("report.jsonl");
    std::fs::write(&jsonl_path, render_report_jsonl(&report))
        .map_err(|e| Error::io(&jsonl_path, e))?;
    let summary = render_summary_table(&report);
    let summary_path = out.join("summary.txt");
    std::fs::write(&summary_path, &summary).map_err(|e| Error::io(&summary_path, e))?;
    let metrics_path = out.join("metrics.json");
    std::fs::write(
        &metrics_path,
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )
    .map_err(|e| Error::io(&metrics_path, e))?;

    let mut record = record_for("evaluate", config, config_path)?;
    if let Some(path) = &checkpoint {
        record.add_input("checkpoint", &path.join("manifest.json"))?;
    }
    add_dataset_inputs(&mut record, dataset, &scenes)?;
    record.write(out)?;

    print!("{summary}");
    if report.partial && strict {
        return Err(Error::InvalidArgument(format!(
            "dataset fell short of the protocol in {} place(s); rerun without --strict to accept partial results",
            report.shortfalls.len()
        )));
    }
    Ok(())
}
