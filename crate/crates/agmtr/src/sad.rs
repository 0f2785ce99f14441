//! Semantic Alignment Decoder: iterated blocks that carve the query grid
//! into per-agent pseudo-local masks, let each agent aggregate the query
//! pixels under its own mask, and finally pull the query feature toward the
//! aligned agents with one unmasked cross-attention.
//!
//! Each block scores the incoming agents against the query, so block `n`
//! emits the masks built from the agents it received, not the ones it
//! produces.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::registry::{Init, ParamRegistry, ParamVars};
use crate::tensor::{argmax_one_hot, BinaryMask, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SadConfig {
    pub n_blocks: usize,
    /// Temperature turning cosine scores into two-way probabilities.
    pub tau: f64,
}

impl Default for SadConfig {
    fn default() -> Self {
        Self { n_blocks: 7, tau: 10.0 }
    }
}

/// Binary maps, one per agent, that partition the query grid pixel-wise.
#[derive(Clone, Debug)]
pub struct LocalMaskSet {
    masks: Vec<BinaryMask>,
}

impl LocalMaskSet {
    pub fn new(masks: Vec<BinaryMask>) -> Result<Self> {
        if masks.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "LocalMaskSet::new",
                expected: "at least one map".into(),
                got: "0".into(),
            });
        }
        let len = masks[0].len();
        for pix in 0..len {
            let total: u8 = masks.iter().map(|m| m.data()[pix]).sum();
            if total != 1 {
                return Err(Error::ShapeMismatch {
                    op: "LocalMaskSet::new",
                    expected: "exactly one active map per pixel".into(),
                    got: format!("{total} at pixel {pix}"),
                });
            }
        }
        Ok(Self { masks })
    }

    pub fn masks(&self) -> &[BinaryMask] {
        &self.masks
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

pub fn register_params(reg: &mut ParamRegistry, init: &Init, cfg: &SadConfig, dim: usize) {
    for b in 0..cfg.n_blocks {
        let p = format!("sad.block{b}");
        for w in ["wq", "wk", "wv"] {
            let name = format!("{p}.{w}");
            reg.insert(&name, init.trunc_normal(&name, vec![dim, dim], 0.02), true);
        }
        reg.insert(&format!("{p}.mlp.w1"), init.trunc_normal(&format!("{p}.mlp.w1"), vec![dim, dim], 0.02), true);
        reg.insert(&format!("{p}.mlp.b1"), init.zeros(vec![1, dim]), true);
        reg.insert(&format!("{p}.mlp.w2"), init.trunc_normal(&format!("{p}.mlp.w2"), vec![dim, dim], 0.02), true);
        reg.insert(&format!("{p}.mlp.b2"), init.zeros(vec![1, dim]), true);
    }
    for w in ["wq", "wk", "wv"] {
        let name = format!("sad.final.{w}");
        reg.insert(&name, init.trunc_normal(&name, vec![dim, dim], 0.02), true);
    }
}

/// Cosine scores of every agent against every query pixel, and the argmax
/// partition they induce. Zero-norm pixels score 0 against all agents and
/// fall to the first map by tie-break.
pub fn pseudo_local_masks(
    agents: &Var,
    query: &Var,
    grid: (usize, usize),
) -> (Var, LocalMaskSet) {
    let scores = agents.cosine_rows(query);
    let masks = masks_from_scores(&scores.value(), grid);
    (scores, masks)
}

fn masks_from_scores(scores: &Tensor, grid: (usize, usize)) -> LocalMaskSet {
    let k = scores.rows();
    let maps = argmax_one_hot(&scores.reshape(vec![k, grid.0, grid.1]));
    LocalMaskSet::new(maps).expect("argmax one-hot always partitions")
}

/// One Semantic Alignment Block. Agents whose mask is empty pass through
/// unchanged; everyone else aggregates its masked query pixels through
/// cross-attention plus a two-layer MLP and a residual. Returns the updated
/// agents together with the scores and masks of the incoming agents.
pub fn sab_step(
    params: &ParamVars,
    block: usize,
    agents: &Var,
    query: &Var,
    grid: (usize, usize),
    frozen_masks: Option<&LocalMaskSet>,
) -> Result<(Var, Var, LocalMaskSet)> {
    let scores = agents.cosine_rows(query);
    let masks = match frozen_masks {
        Some(m) => m.clone(),
        None => masks_from_scores(&scores.value(), grid),
    };

    let n_rows = agents.shape()[0];
    let hw = query.shape()[0];
    let dim = query.shape()[1] as f64;
    let mut additive = Vec::with_capacity(n_rows * hw);
    let mut empty = Vec::with_capacity(n_rows);
    for mask in masks.masks() {
        if mask.count_ones() == 0 {
            empty.push(true);
            additive.extend(std::iter::repeat(0.0).take(hw));
        } else {
            empty.push(false);
            additive.extend(mask.to_additive_row());
        }
    }
    let prefix = format!("sad.block{block}");
    let q = agents.matmul(&params.get(&format!("{prefix}.wq")));
    let k = query.matmul(&params.get(&format!("{prefix}.wk")));
    let v = query.matmul(&params.get(&format!("{prefix}.wv")));
    let attn = q
        .matmul(&k.t())
        .mul_scalar(1.0 / dim.sqrt())
        .softmax_rows(Some(&Tensor::from_raw(vec![n_rows, hw], additive)))?;
    let gathered = attn.matmul(&v);
    let mlp = gathered
        .matmul(&params.get(&format!("{prefix}.mlp.w1")))
        .add_rowvec(&params.get(&format!("{prefix}.mlp.b1")))
        .gelu()
        .matmul(&params.get(&format!("{prefix}.mlp.w2")))
        .add_rowvec(&params.get(&format!("{prefix}.mlp.b2")));
    let updated = agents.add(&mlp);
    let aligned = if empty.iter().any(|&e| e) {
        updated.merge_rows(agents, &empty)
    } else {
        updated
    };
    Ok((aligned, scores, masks))
}

pub struct SadOutput {
    pub aligned_agents: Var,
    pub aligned_query: Var,
    pub per_block_scores: Vec<Var>,
    pub per_block_masks: Vec<LocalMaskSet>,
}

/// Run the block stack, then align the query feature onto the final agents
/// with one cross-attention plus residual.
pub fn run_decoder(
    params: &ParamVars,
    cfg: &SadConfig,
    agents: &Var,
    query: &Var,
    grid: (usize, usize),
    frozen: Option<&[LocalMaskSet]>,
) -> Result<SadOutput> {
    if let Some(f) = frozen {
        assert_eq!(f.len(), cfg.n_blocks, "frozen masks must cover every block");
    }
    let mut current = agents.clone();
    let mut per_block_scores = Vec::with_capacity(cfg.n_blocks);
    let mut per_block_masks = Vec::with_capacity(cfg.n_blocks);
    for b in 0..cfg.n_blocks {
        let (next, scores, masks) =
            sab_step(params, b, &current, query, grid, frozen.map(|f| &f[b]))?;
        current = next;
        per_block_scores.push(scores);
        per_block_masks.push(masks);
    }

    let dim = query.shape()[1] as f64;
    let q = query.matmul(&params.get("sad.final.wq"));
    let k = current.matmul(&params.get("sad.final.wk"));
    let v = current.matmul(&params.get("sad.final.wv"));
    let attn = q
        .matmul(&k.t())
        .mul_scalar(1.0 / dim.sqrt())
        .softmax_rows(None)?;
    let aligned_query = query.add(&attn.matmul(&v));

    Ok(SadOutput { aligned_agents: current, aligned_query, per_block_scores, per_block_masks })
}

/// Mean over blocks of the binary cross entropy between the two-way softmax
/// of (background score, best foreground score) at temperature tau and the
/// query mask on the feature grid. Returns the per-block winner routing so
/// callers can pin it on replays.
pub fn agent_segmentation_loss(
    per_block_scores: &[Var],
    target: &BinaryMask,
    tau: f64,
    n_foreground: usize,
) -> Var {
    agent_segmentation_loss_routed(per_block_scores, target, tau, n_foreground, None).0
}

pub fn agent_segmentation_loss_routed(
    per_block_scores: &[Var],
    target: &BinaryMask,
    tau: f64,
    n_foreground: usize,
    frozen_routing: Option<&[Vec<usize>]>,
) -> (Var, Vec<Vec<usize>>) {
    assert!(!per_block_scores.is_empty(), "need at least one block");
    let hw = target.len();
    let mut target_rows = Vec::with_capacity(hw * 2);
    for &m in target.data() {
        target_rows.push(1.0 - m as f64);
        target_rows.push(m as f64);
    }
    let targets = Tensor::from_raw(vec![hw, 2], target_rows);

    let mut total: Option<Var> = None;
    let mut routings = Vec::with_capacity(per_block_scores.len());
    for (b, scores) in per_block_scores.iter().enumerate() {
        let (loss, routing) = two_way_bce_routed(
            scores,
            &targets,
            tau,
            n_foreground,
            frozen_routing.map(|f| f[b].as_slice()),
        );
        routings.push(routing);
        total = Some(match total {
            Some(t) => t.add(&loss),
            None => loss,
        });
    }
    (
        total.unwrap().mul_scalar(1.0 / per_block_scores.len() as f64),
        routings,
    )
}

/// Shared two-channel BCE head: rows are pixels, channels are
/// (background, foreground-max), logits scaled by tau.
pub fn two_way_bce(scores: &Var, targets: &Tensor, tau: f64, n_foreground: usize) -> Var {
    two_way_bce_routed(scores, targets, tau, n_foreground, None).0
}

pub fn two_way_bce_routed(
    scores: &Var,
    targets: &Tensor,
    tau: f64,
    n_foreground: usize,
    routing: Option<&[usize]>,
) -> (Var, Vec<usize>) {
    let (fg, used) = scores
        .slice_rows(0, n_foreground)
        .max_over_rows_routed(routing);
    let bg = scores.slice_rows(n_foreground, n_foreground + 1);
    let graph = scores.graph_handle();
    let logits = graph
        .concat_cols(&[bg.t(), fg.t()])
        .mul_scalar(tau);
    (logits.softmax_cross_entropy_rows(targets), used)
}
