//! End-to-end episode forward pass: encode, mine agents, refine them from
//! unlabeled images, align with the query, match, and compute the loss.
//!
//! Hard assignments (the transport plan, superpixel labels, pseudo-local
//! masks) are recomputed from current values on every pass but enter the
//! graph as constants. The finite-difference gradient check freezes them via
//! [`FrozenArtifacts`] so both loss evaluations see identical assignments.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::aad::{self, AadConfig};
use crate::ale::{self, AgentSet, AleConfig};
use crate::autodiff::{backward, Graph, Var};
use crate::dataset::Episode;
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::matching::{self, Prediction};
use crate::registry::{Init, ParamRegistry, ParamVars};
use crate::sad::{self, LocalMaskSet, SadConfig};
use crate::sinkhorn::SinkhornConfig;
use crate::slic::{self, SuperpixelLabels};
use crate::tensor::{BinaryMask, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AleInit {
    Random,
    RandomPlusSupport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub encoder: EncoderConfig,
    pub ale: AleConfig,
    pub aad: AadConfig,
    pub sad: SadConfig,
    pub sinkhorn: SinkhornConfig,
    pub use_ale: bool,
    pub use_aad: bool,
    pub use_sad: bool,
    pub ale_init: AleInit,
    pub ale_ot: bool,
    /// Weight of the agent segmentation loss in the total loss.
    pub gamma: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            encoder: EncoderConfig::default(),
            ale: AleConfig::default(),
            aad: AadConfig::default(),
            sad: SadConfig::default(),
            sinkhorn: SinkhornConfig::default(),
            use_ale: true,
            use_aad: true,
            use_sad: true,
            ale_init: AleInit::RandomPlusSupport,
            ale_ot: true,
            gamma: 0.8,
        }
    }
}

impl ModelConfig {
    pub fn n_foreground_agents(&self) -> usize {
        if self.use_ale {
            self.ale.n_agents
        } else {
            1
        }
    }

    pub fn feature_grid(&self) -> (usize, usize) {
        self.encoder.feature_hw(self.image_size, self.image_size)
    }

    /// Register every parameter the enabled components need.
    pub fn build_registry(&self, seed: u64) -> ParamRegistry {
        let mut reg = ParamRegistry::new();
        let init = Init { seed };
        let (h, w) = self.feature_grid();
        encoder::register_params(&mut reg, &init, &self.encoder, h * w);
        if self.use_ale {
            ale::register_params(&mut reg, &init, &self.ale, self.encoder.dim);
        }
        if self.use_aad {
            aad::register_params(&mut reg, &init, self.encoder.dim, self.aad.beta_init);
        }
        if self.use_sad {
            sad::register_params(&mut reg, &init, &self.sad, self.encoder.dim);
        }
        reg
    }
}

/// Hard assignments captured on one pass and replayed on another.
#[derive(Default, Clone)]
pub struct FrozenArtifacts {
    pub local_attention: Option<Tensor>,
    pub slic_labels: Option<Vec<SuperpixelLabels>>,
    pub block_masks: Option<Vec<LocalMaskSet>>,
    /// Winning foreground agent per pixel in the main loss.
    pub main_routing: Option<Vec<usize>>,
    /// Same, per alignment block.
    pub asl_routing: Option<Vec<Vec<usize>>>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Fail hard on Sinkhorn non-convergence instead of taking the best
    /// iterate.
    pub strict_ot: bool,
}

pub struct EpisodeRun {
    pub loss_var: Var,
    pub loss: f64,
    pub main_loss: f64,
    pub asl: f64,
    pub used_params: Vec<(String, Var)>,
    pub prediction: Prediction,
    pub final_scores: Tensor,
    pub final_agents: AgentSet,
    pub pre_rescale_row_mass: Option<Vec<f64>>,
    pub artifacts: FrozenArtifacts,
    /// Tape length, a cheap proxy for the episode's operation count.
    pub tape_nodes: usize,
}

impl EpisodeRun {
    pub fn grads(&self) -> BTreeMap<String, Tensor> {
        let mut grads = backward(&self.loss_var);
        let mut out = BTreeMap::new();
        for (name, var) in &self.used_params {
            if let Some(g) = grads.take(var) {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

/// Support mask on the feature grid: a cell is foreground when any of its
/// pixels is. Thin annotations (scribbles) keep every cell they touch.
fn mask_to_feature_flags(mask: &BinaryMask, patch: usize) -> Vec<u8> {
    let (h, w) = (mask.height() / patch, mask.width() / patch);
    let mut any = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            'cell: for dy in 0..patch {
                for dx in 0..patch {
                    if mask.get(y * patch + dy, x * patch + dx) == 1 {
                        any[y * w + x] = 1;
                        break 'cell;
                    }
                }
            }
        }
    }
    any
}

pub fn forward_episode(
    registry: &ParamRegistry,
    cfg: &ModelConfig,
    episode: &Episode,
    options: ForwardOptions,
    frozen: Option<&FrozenArtifacts>,
) -> Result<EpisodeRun> {
    assert_eq!(
        episode.query_image.shape()[0],
        cfg.image_size,
        "episode images must match the configured size"
    );
    let graph = Graph::new();
    let params = ParamVars::new(&graph, registry);
    let patch = cfg.encoder.patch_size;
    let grid = cfg.feature_grid();
    let mut artifacts = FrozenArtifacts::default();

    // encode supports into one pixel pool
    let mut support_feats = Vec::with_capacity(episode.support.len());
    let mut fg_flags: Vec<u8> = Vec::new();
    for (image, mask) in &episode.support {
        support_feats.push(encoder::encode(&params, &cfg.encoder, image)?);
        fg_flags.extend(mask_to_feature_flags(mask, patch));
    }
    let support_pool = if support_feats.len() == 1 {
        support_feats[0].clone()
    } else {
        graph.concat_rows(&support_feats)
    };
    if fg_flags.iter().all(|&f| f == 0) {
        return Err(Error::EmptyMask);
    }

    let query_feat = encoder::encode(&params, &cfg.encoder, &episode.query_image)?;

    // agents from the supports
    let (mut agents, mut pre_rescale) = if cfg.use_ale {
        let initial = match cfg.ale_init {
            AleInit::RandomPlusSupport => ale::init_agents(&params, &support_pool, &fg_flags)?,
            AleInit::Random => params.get("ale.tokens"),
        };
        let (attention, masses) = if cfg.ale_ot {
            let padded = if let Some(f) = frozen.and_then(|f| f.local_attention.as_ref()) {
                artifacts.local_attention = Some(f.clone());
                (f.clone(), None)
            } else {
                let local = match ale::decompose_local_attention(
                    &initial.value(),
                    &support_pool.value(),
                    &fg_flags,
                    &cfg.sinkhorn,
                ) {
                    Ok(local) => local,
                    Err(Error::NoConvergence { plan, residual, iters }) if !options.strict_ot => {
                        log::warn!(
                            "sinkhorn stopped at residual {residual:.2e} after {iters} iterations; using best iterate"
                        );
                        ale::pad_and_rescale_plan(plan, &fg_flags)
                    }
                    Err(e) => return Err(e),
                };
                artifacts.local_attention = Some(local.padded.clone());
                (local.padded, Some(local.pre_rescale_row_mass))
            };
            (graph.constant(padded.0), padded.1)
        } else {
            (
                ale::foreground_attention(&params, &initial, &support_pool, &fg_flags)?,
                None,
            )
        };
        (
            ale::build_agent_set(&params, &attention, &support_pool, &fg_flags)?,
            masses,
        )
    } else {
        // plain prototype pair: masked means of foreground and background
        let fg = ale::masked_mean_rows(&support_pool, &fg_flags)?;
        let bg_flags: Vec<u8> = fg_flags.iter().map(|&f| 1 - f).collect();
        let bg = if bg_flags.iter().any(|&f| f == 1) {
            ale::masked_mean_rows(&support_pool, &bg_flags)?
        } else {
            log::warn!("support has no background pixels; using a zero background prototype");
            graph.constant(Tensor::zeros(vec![1, cfg.encoder.dim]))
        };
        (graph.concat_rows(&[fg, bg]), None)
    };
    let _ = &mut pre_rescale;

    // refine agents against unlabeled prototypes
    if cfg.use_aad && !episode.unlabeled.is_empty() {
        let labels: Vec<SuperpixelLabels> = match frozen.and_then(|f| f.slic_labels.as_ref()) {
            Some(l) => l.clone(),
            None => episode
                .unlabeled
                .iter()
                .map(|img| {
                    slic::slic(img, cfg.aad.n_segments, cfg.aad.compactness, cfg.aad.slic_iters)
                        .downsample_majority(patch)
                })
                .collect(),
        };
        artifacts.slic_labels = Some(labels.clone());

        let mut unlabeled_feats = Vec::with_capacity(episode.unlabeled.len());
        for img in &episode.unlabeled {
            unlabeled_feats.push(encoder::encode(&params, &cfg.encoder, img)?);
        }
        let (prototypes, _counts) = aad::unlabeled_prototypes(&unlabeled_feats, &labels);
        if let Some(prototypes) = prototypes {
            let proto_graph = aad::build_graph(&prototypes.value(), cfg.aad.delta);
            let enhanced = aad::gat_enhance(&params, &prototypes, &proto_graph);
            agents = aad::adaptive_aggregate(&params, &agents, &enhanced);
        }
    }

    // align with the query
    let n_fg = cfg.n_foreground_agents();
    let gt_feature = episode.query_mask.downsample_majority(patch);
    let (final_agents, final_query, asl_var) = if cfg.use_sad {
        let out = sad::run_decoder(
            &params,
            &cfg.sad,
            &agents,
            &query_feat,
            grid,
            frozen.and_then(|f| f.block_masks.as_deref()),
        )?;
        artifacts.block_masks = Some(out.per_block_masks.clone());
        let asl = if out.per_block_scores.is_empty() {
            None
        } else {
            let (asl, routing) = sad::agent_segmentation_loss_routed(
                &out.per_block_scores,
                &gt_feature,
                cfg.sad.tau,
                n_fg,
                frozen.and_then(|f| f.asl_routing.as_deref()),
            );
            artifacts.asl_routing = Some(routing);
            Some(asl)
        };
        (out.aligned_agents, out.aligned_query, asl)
    } else {
        (agents, query_feat, None)
    };

    // match and score
    let scores = matching::matching_scores(&final_agents, &final_query);
    let (main, main_routing) = matching::main_loss_routed(
        &scores,
        &gt_feature,
        cfg.sad.tau,
        n_fg,
        frozen.and_then(|f| f.main_routing.as_deref()),
    );
    artifacts.main_routing = Some(main_routing);
    let loss_var = matching::total_loss(&main, asl_var.as_ref(), cfg.gamma);

    let loss = loss_var.scalar_value();
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { iter: 0, value: loss });
    }
    let scores_value = scores.value();
    let prediction = matching::predict_from_scores(&scores_value, cfg.sad.tau, n_fg, grid);
    let final_agents_value = AgentSet::new(final_agents.value(), n_fg)?;
    let tape_nodes = graph.len();

    Ok(EpisodeRun {
        loss,
        main_loss: main.scalar_value(),
        asl: asl_var.map_or(0.0, |v| v.scalar_value()),
        loss_var,
        used_params: params.used(),
        prediction,
        final_scores: scores_value,
        final_agents: final_agents_value,
        pre_rescale_row_mass: pre_rescale,
        artifacts,
        tape_nodes,
    })
}
