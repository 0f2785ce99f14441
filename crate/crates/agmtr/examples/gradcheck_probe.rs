use std::collections::BTreeMap;
use std::time::Instant;

use agmtr::dataset::{sample_episode, split_folds, Dataset, Phase, SyntheticDatasetSpec};
use agmtr::pipeline::{forward_episode, ForwardOptions, ModelConfig};
use agmtr::registry::{check_gradients, ParamRegistry};
use agmtr::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() {
    let cfg = ModelConfig {
        image_size: 16,
        encoder: agmtr::encoder::EncoderConfig { patch_size: 2, depth: 2, dim: 8, heads: 2 },
        ale: agmtr::ale::AleConfig { n_agents: 3 },
        aad: agmtr::aad::AadConfig { n_unlabeled: 2, n_segments: 8, ..Default::default() },
        sad: agmtr::sad::SadConfig { n_blocks: 2, tau: 10.0 },
        ..Default::default()
    };
    let registry = cfg.build_registry(123);
    println!("parameters: {} scalars in {} groups", registry.num_scalars(), registry.trainable_names().len());

    let spec = SyntheticDatasetSpec { n_classes: 3, images_per_class: 6, image_size: 16, seed: 77, ..Default::default() };
    let ds = Dataset::generate_in_memory(&spec).unwrap();
    let folds = split_folds(3, 3);
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let episode = sample_episode(&ds, &folds, 0, Phase::Train, 1, 2, &mut rng).unwrap();

    // freeze hard assignments once
    let baseline = forward_episode(&registry, &cfg, &episode, ForwardOptions { strict_ot: true }, None).unwrap();
    let frozen = baseline.artifacts.clone();
    println!("loss at theta: {:.6}", baseline.loss);

    let loss_fn = |reg: &ParamRegistry| -> f64 {
        forward_episode(reg, &cfg, &episode, ForwardOptions { strict_ot: true }, Some(&frozen))
            .unwrap()
            .loss
    };
    let frozen2 = baseline.artifacts.clone();
    let grads_fn = |reg: &ParamRegistry| -> BTreeMap<String, Tensor> {
        forward_episode(reg, &cfg, &episode, ForwardOptions { strict_ot: true }, Some(&frozen2))
            .unwrap()
            .grads()
    };

    for step in [1e-4f64, 1e-5, 1e-6] {
        let start = Instant::now();
        let report = check_gradients(&loss_fn, &grads_fn, &registry, step);
        println!("step {step:.0e}: max rel {:.3e} in {} ({:.1?})", report.max_rel_error, report.worst_group, start.elapsed());
        let mut groups = report.groups.clone();
        groups.sort_by(|a, b| b.1.total_cmp(&a.1));
        for (name, err) in groups.iter().take(4) {
            println!("    {name}: {err:.3e}");
        }
    }
}

// step-size sweep appended for diagnosis
#[allow(dead_code)]
fn unused() {}
