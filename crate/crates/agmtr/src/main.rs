//! `agmtr`: synthetic-data generation, episodic training, evaluation,
//! episode inspection, and component ablations.

use std::fs;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use image::{GrayImage, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use agmtr::dataset::{
    generate_dataset, sample_episode, split_folds, Dataset, MaskScheme, Phase,
    SyntheticDatasetSpec,
};
use agmtr::pipeline::{forward_episode, ForwardOptions, ModelConfig};
use agmtr::train::{
    evaluate, load_checkpoint, save_checkpoint, train, write_metrics_jsonl, RunConfig,
};
use agmtr::Result;

#[derive(Parser)]
#[command(name = "agmtr", about = "Few-shot segmentation with local-aware agents", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shape dataset.
    GenData {
        /// JSON spec; defaults are used when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on seen classes of one fold.
    Train {
        /// JSON run config; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Agent initialization: "random" or "random+sup".
        #[arg(long = "ale-init")]
        ale_init: Option<String>,
        /// Equal-mass local masks via optimal transport: "on" or "off".
        #[arg(long = "ale-ot")]
        ale_ot: Option<String>,
    },
    /// Evaluate a checkpoint on unseen classes.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        #[arg(long = "mask-scheme", value_enum, default_value_t = CliScheme::Dense)]
        mask_scheme: CliScheme,
        /// Evaluate seen-class episodes instead of unseen.
        #[arg(long)]
        seen: bool,
        /// K-shot override.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        json: PathBuf,
    },
    /// Run one episode and dump agent activation heatmaps as PNGs.
    Episode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        dump: PathBuf,
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and evaluate the component chain (baseline, +ALE, ...).
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated components to stack: ale,aad,sad
        #[arg(long, default_value = "ale,aad,sad")]
        components: String,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum CliScheme {
    Dense,
    Bbox,
    Scribble,
}

impl From<CliScheme> for MaskScheme {
    fn from(s: CliScheme) -> Self {
        match s {
            CliScheme::Dense => MaskScheme::Dense,
            CliScheme::Bbox => MaskScheme::Bbox,
            CliScheme::Scribble => MaskScheme::Scribble,
        }
    }
}

fn load_json_or_default<T: Default + serde::de::DeserializeOwned>(
    path: &Option<PathBuf>,
) -> Result<T> {
    match path {
        Some(p) => Ok(serde_json::from_str(&fs::read_to_string(p)?)?),
        None => Ok(T::default()),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { spec, out } => {
            let spec: SyntheticDatasetSpec = load_json_or_default(&spec)?;
            let manifest = generate_dataset(&spec, &out)?;
            println!(
                "wrote {} images across {} classes to {}",
                manifest.images.len(),
                spec.n_classes,
                out.display()
            );
        }
        Command::Train { config, data, fold, out, ale_init, ale_ot } => {
            let mut run_cfg: RunConfig = load_json_or_default(&config)?;
            if let Some(f) = fold {
                run_cfg.fold = f;
            }
            if let Some(init) = ale_init {
                run_cfg.model.ale_init = match init.as_str() {
                    "random" => agmtr::pipeline::AleInit::Random,
                    "random+sup" => agmtr::pipeline::AleInit::RandomPlusSupport,
                    other => {
                        return Err(agmtr::Error::Config(format!("unknown --ale-init {other}")))
                    }
                };
            }
            if let Some(ot) = ale_ot {
                run_cfg.model.ale_ot = match ot.as_str() {
                    "on" => true,
                    "off" => false,
                    other => return Err(agmtr::Error::Config(format!("unknown --ale-ot {other}"))),
                };
            }
            let dataset = Dataset::load(&data)?;
            if run_cfg.model.image_size != dataset.manifest.spec.image_size {
                log::info!(
                    "adopting dataset image size {}",
                    dataset.manifest.spec.image_size
                );
                run_cfg.model.image_size = dataset.manifest.spec.image_size;
            }
            let outcome = train(&run_cfg, &dataset)?;
            save_checkpoint(&outcome.registry, &run_cfg, outcome.iterations, outcome.final_loss, &out)?;
            let acc = evaluate(
                &outcome.registry,
                &run_cfg.model,
                &dataset,
                &run_cfg,
                Phase::Test,
                run_cfg.eval_episodes,
                run_cfg.mask_scheme,
            )?;
            println!(
                "fold {} final loss {:.4}; unseen mIoU {:.4} FB-IoU {:.4}; checkpoint at {}",
                run_cfg.fold,
                outcome.final_loss,
                acc.miou()?,
                acc.fb_iou()?,
                out.display()
            );
        }
        Command::Eval { ckpt, data, fold, episodes, mask_scheme, seen, k, json } => {
            let (registry, mut run_cfg) = load_checkpoint(&ckpt)?;
            if let Some(f) = fold {
                run_cfg.fold = f;
            }
            if let Some(k) = k {
                run_cfg.k_shot = k;
            }
            let dataset = Dataset::load(&data)?;
            let phase = if seen { Phase::Train } else { Phase::Test };
            let acc = evaluate(
                &registry,
                &run_cfg.model,
                &dataset,
                &run_cfg,
                phase,
                episodes,
                mask_scheme.into(),
            )?;
            write_metrics_jsonl(&json, run_cfg.fold, &acc)?;
            println!(
                "fold {} {:?} mIoU {:.4} FB-IoU {:.4} over {} episodes -> {}",
                run_cfg.fold,
                phase,
                acc.miou()?,
                acc.fb_iou()?,
                acc.episodes(),
                json.display()
            );
        }
        Command::Episode { ckpt, data, dump, fold, seed } => {
            let (registry, mut run_cfg) = load_checkpoint(&ckpt)?;
            if let Some(f) = fold {
                run_cfg.fold = f;
            }
            let dataset = Dataset::load(&data)?;
            let folds = split_folds(dataset.n_classes(), run_cfg.n_folds);
            let mut rng = ChaCha20Rng::seed_from_u64(seed.unwrap_or(run_cfg.effective_seed()));
            let episode = sample_episode(
                &dataset,
                &folds,
                run_cfg.fold,
                Phase::Test,
                run_cfg.k_shot,
                if run_cfg.model.use_aad { run_cfg.model.aad.n_unlabeled } else { 0 },
                &mut rng,
            )?;
            let out = forward_episode(
                &registry,
                &run_cfg.model,
                &episode,
                ForwardOptions::default(),
                None,
            )?;
            dump_episode(&episode, &out, &run_cfg.model, &dump)?;
            println!(
                "dumped class-{} episode (loss {:.4}) to {}",
                episode.class_id,
                out.loss,
                dump.display()
            );
        }
        Command::Ablate { data, config, components, json } => {
            let base: RunConfig = load_json_or_default(&config)?;
            let dataset = Dataset::load(&data)?;
            let stack: Vec<&str> = components.split(',').map(str::trim).collect();
            let mut rows = Vec::new();
            for (label, cfg) in ablation_chain(&base.model, &stack) {
                let mut run_cfg = base.clone();
                run_cfg.model = cfg;
                run_cfg.model.image_size = dataset.manifest.spec.image_size;
                let outcome = train(&run_cfg, &dataset)?;
                let acc = evaluate(
                    &outcome.registry,
                    &run_cfg.model,
                    &dataset,
                    &run_cfg,
                    Phase::Test,
                    run_cfg.eval_episodes,
                    MaskScheme::Dense,
                )?;
                println!("{label:<18} mIoU {:.4} FB-IoU {:.4}", acc.miou()?, acc.fb_iou()?);
                rows.push(serde_json::json!({
                    "variant": label,
                    "miou": acc.miou()?,
                    "fb_iou": acc.fb_iou()?,
                }));
            }
            if let Some(path) = json {
                fs::write(&path, serde_json::to_string_pretty(&rows)?)?;
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

/// Baseline plus cumulative component variants, mirroring the standard
/// component-analysis table.
fn ablation_chain(base: &ModelConfig, stack: &[&str]) -> Vec<(String, ModelConfig)> {
    let mut rows = Vec::new();
    let off = ModelConfig { use_ale: false, use_aad: false, use_sad: false, ..base.clone() };
    rows.push(("baseline".to_string(), off.clone()));
    let mut current = off;
    let mut label = String::from("baseline");
    for comp in stack {
        match *comp {
            "ale" => current.use_ale = true,
            "aad" => current.use_aad = true,
            "sad" => current.use_sad = true,
            other => {
                log::warn!("unknown component {other}; skipping");
                continue;
            }
        }
        label = format!("{label}+{}", comp.to_uppercase());
        rows.push((label.clone(), current.clone()));
    }
    rows
}

fn dump_episode(
    episode: &agmtr::dataset::Episode,
    out: &agmtr::pipeline::EpisodeRun,
    model: &ModelConfig,
    dir: &PathBuf,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let size = model.image_size as u32;
    let patch = model.encoder.patch_size;
    let (h, w) = model.feature_grid();

    // query image and ground truth
    let rgb: Vec<u8> = episode
        .query_image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0) as u8)
        .collect();
    RgbImage::from_raw(size, size, rgb)
        .expect("query buffer")
        .save(dir.join("query.png"))?;
    GrayImage::from_raw(size, size, episode.query_mask.data().iter().map(|&v| v * 255).collect())
        .expect("mask buffer")
        .save(dir.join("query_gt.png"))?;

    // prediction at image resolution
    let hard = out.prediction.hard_at_image_resolution(patch);
    GrayImage::from_raw(size, size, hard.data().iter().map(|&v| v * 255).collect())
        .expect("prediction buffer")
        .save(dir.join("prediction.png"))?;

    // per-agent activation heatmaps (scores upsampled to image resolution)
    let scores = &out.final_scores;
    for agent in 0..scores.rows() {
        let row = scores.row(agent);
        let (lo, hi) = row
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = (hi - lo).max(1e-9);
        let mut pixels = vec![0u8; (size * size) as usize];
        for y in 0..size as usize {
            for x in 0..size as usize {
                let cell = (y / patch).min(h - 1) * w + (x / patch).min(w - 1);
                pixels[y * size as usize + x] = (255.0 * (row[cell] - lo) / span) as u8;
            }
        }
        let name = if agent + 1 == scores.rows() {
            "agent_background.png".to_string()
        } else {
            format!("agent_{agent}.png")
        };
        GrayImage::from_raw(size, size, pixels)
            .expect("heatmap buffer")
            .save(dir.join(name))?;
    }
    Ok(())
}
