use std::time::Instant;

use agmtr::aad::AadConfig;
use agmtr::ale::AleConfig;
use agmtr::dataset::{Dataset, MaskScheme, Phase, SyntheticDatasetSpec};
use agmtr::encoder::EncoderConfig;
use agmtr::pipeline::ModelConfig;
use agmtr::sad::SadConfig;
use agmtr::train::{evaluate, train, RunConfig};

fn benchmark_model() -> ModelConfig {
    ModelConfig {
        image_size: 40,
        encoder: EncoderConfig { patch_size: 2, depth: 1, dim: 64, heads: 4 },
        ale: AleConfig { n_agents: 5 },
        aad: AadConfig { n_unlabeled: 3, n_segments: 40, ..Default::default() },
        sad: SadConfig { n_blocks: 7, tau: 10.0 },
        ..Default::default()
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let spec = SyntheticDatasetSpec {
        n_classes: 12,
        images_per_class: 60,
        image_size: 40,
        hue_jitter: 18.0,
        outlier_rate: 0.12,
        texture_jitter: 0.12,
        clutter_density: 4.0,
        halo_clutter: 3.5,
        seed: 100,
        ..Default::default()
    };
    let t0 = Instant::now();
    let dataset = Dataset::generate_in_memory(&spec).unwrap();
    println!("dataset generated in {:.1?}", t0.elapsed());

    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.02);
    let episodes: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(400);
    let variant = args.get(3).cloned().unwrap_or_else(|| "full".into());

    let mut model = benchmark_model();
    match variant.as_str() {
        "baseline" => { model.use_ale = false; model.use_aad = false; model.use_sad = false; }
        "ale" => { model.use_aad = false; model.use_sad = false; }
        "ale_aad" => { model.use_sad = false; }
        "ale_sad" => { model.use_aad = false; }
        _ => {}
    }
    let run = RunConfig {
        model,
        lr,
        epochs: 1,
        episodes_per_epoch: episodes,
        batch_episodes: 8,
        seed: 500,
        fold: 0,
        n_folds: 3,
        ..Default::default()
    };

    let t1 = Instant::now();
    let outcome = train(&run, &dataset).unwrap();
    let train_time = t1.elapsed();
    let t2 = Instant::now();
    let unseen = evaluate(&outcome.registry, &run.model, &dataset, &run, Phase::Test, 100, MaskScheme::Dense).unwrap();
    let seen = evaluate(&outcome.registry, &run.model, &dataset, &run, Phase::Train, 100, MaskScheme::Dense).unwrap();
    println!(
        "variant {variant} lr {lr} episodes {episodes}: train {:.1?} eval {:.1?} | loss {:.3} seen mIoU {:.3} unseen mIoU {:.3}",
        train_time,
        t2.elapsed(),
        outcome.final_loss,
        seen.miou().unwrap(),
        unseen.miou().unwrap()
    );
    println!("loss history: {:?}", outcome.loss_history.iter().step_by(5).map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>());

    if variant == "full" {
        let mut k5 = run.clone();
        k5.k_shot = 5;
        let k5_acc = evaluate(&outcome.registry, &k5.model, &dataset, &k5, Phase::Test, 100, MaskScheme::Dense).unwrap();
        println!("k-shot: K=1 {:.3} K=5 {:.3}", unseen.miou().unwrap(), k5_acc.miou().unwrap());
        let scrib = evaluate(&outcome.registry, &run.model, &dataset, &run, Phase::Test, 100, MaskScheme::Scribble).unwrap();
        let bbox = evaluate(&outcome.registry, &run.model, &dataset, &run, Phase::Test, 100, MaskScheme::Bbox).unwrap();
        println!("schemes: dense {:.3} scribble {:.3} bbox {:.3}", unseen.miou().unwrap(), scrib.miou().unwrap(), bbox.miou().unwrap());
    }
}
