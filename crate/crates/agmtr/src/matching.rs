//! Final agent-level matching, the combined training loss, and the
//! mIoU / FB-IoU evaluation metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::sad::two_way_bce;
use crate::tensor::{BinaryMask, Tensor};

/// Two-channel segmentation estimate on the feature grid. Channel 0 is
/// background, channel 1 foreground; rows sum to one and the hard mask is
/// their argmax (ties fall to background).
#[derive(Clone, Debug)]
pub struct Prediction {
    pub probs: Tensor,
    pub hard: BinaryMask,
}

impl Prediction {
    /// Nearest-neighbour upsampling to image resolution for metrics.
    pub fn hard_at_image_resolution(&self, patch: usize) -> BinaryMask {
        self.hard.upsample_nearest(patch)
    }
}

/// Cosine scores of every agent row against every query pixel.
pub fn matching_scores(agents: &Var, aligned_query: &Var) -> Var {
    agents.cosine_rows(aligned_query)
}

/// Per-pixel two-way softmax over (background score, best foreground score).
pub fn predict_from_scores(
    scores: &Tensor,
    tau: f64,
    n_foreground: usize,
    grid: (usize, usize),
) -> Prediction {
    let hw = scores.cols();
    assert_eq!(scores.rows(), n_foreground + 1);
    assert_eq!(hw, grid.0 * grid.1);
    let mut probs = vec![0.0; hw * 2];
    let mut hard = BinaryMask::zeros(grid.0, grid.1);
    for pix in 0..hw {
        let mut fg = scores.at2(0, pix);
        for agent in 1..n_foreground {
            fg = fg.max(scores.at2(agent, pix));
        }
        let bg = scores.at2(n_foreground, pix);
        let (zb, zf) = (tau * bg, tau * fg);
        let max = zb.max(zf);
        let (eb, ef) = ((zb - max).exp(), (zf - max).exp());
        let sum = eb + ef;
        probs[pix * 2] = eb / sum;
        probs[pix * 2 + 1] = ef / sum;
        if probs[pix * 2 + 1] > probs[pix * 2] {
            hard.data_mut()[pix] = 1;
        }
    }
    Prediction {
        probs: Tensor::from_raw(vec![grid.0, grid.1, 2], probs),
        hard,
    }
}

/// Binary cross entropy of the matching scores against the query mask on the
/// feature grid.
pub fn main_loss(scores: &Var, target: &BinaryMask, tau: f64, n_foreground: usize) -> Var {
    main_loss_routed(scores, target, tau, n_foreground, None).0
}

pub fn main_loss_routed(
    scores: &Var,
    target: &BinaryMask,
    tau: f64,
    n_foreground: usize,
    routing: Option<&[usize]>,
) -> (Var, Vec<usize>) {
    let hw = target.len();
    let mut rows = Vec::with_capacity(hw * 2);
    for &m in target.data() {
        rows.push(1.0 - m as f64);
        rows.push(m as f64);
    }
    crate::sad::two_way_bce_routed(scores, &Tensor::from_raw(vec![hw, 2], rows), tau, n_foreground, routing)
}

/// Combined loss: main BCE plus gamma times the agent segmentation loss.
pub fn total_loss(main: &Var, asl: Option<&Var>, gamma: f64) -> Var {
    match asl {
        Some(asl) if gamma != 0.0 => main.add(&asl.mul_scalar(gamma)),
        _ => main.clone(),
    }
}

/// Intersection/union counters per class plus pooled foreground/background
/// counters. Merging is associative and commutative, so evaluation can run
/// in parallel and reduce at the end.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct MetricAccumulator {
    per_class: BTreeMap<usize, (u64, u64)>,
    fg: (u64, u64),
    bg: (u64, u64),
    episodes: u64,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, class: usize, pred: &BinaryMask, gt: &BinaryMask) {
        assert_eq!(pred.len(), gt.len(), "prediction and ground truth sizes");
        let mut inter = 0u64;
        let mut union = 0u64;
        let mut bg_inter = 0u64;
        let mut bg_union = 0u64;
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            inter += (p & g) as u64;
            union += (p | g) as u64;
            bg_inter += ((1 - p) & (1 - g)) as u64;
            bg_union += ((1 - p) | (1 - g)) as u64;
        }
        let e = self.per_class.entry(class).or_insert((0, 0));
        e.0 += inter;
        e.1 += union;
        self.fg.0 += inter;
        self.fg.1 += union;
        self.bg.0 += bg_inter;
        self.bg.1 += bg_union;
        self.episodes += 1;
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        for (class, (i, u)) in &other.per_class {
            let e = self.per_class.entry(*class).or_insert((0, 0));
            e.0 += i;
            e.1 += u;
        }
        self.fg.0 += other.fg.0;
        self.fg.1 += other.fg.1;
        self.bg.0 += other.bg.0;
        self.bg.1 += other.bg.1;
        self.episodes += other.episodes;
    }

    pub fn episodes(&self) -> u64 {
        self.episodes
    }

    pub fn per_class_iou(&self) -> Vec<(usize, f64)> {
        self.per_class
            .iter()
            .map(|(&c, &(i, u))| (c, if u == 0 { 1.0 } else { i as f64 / u as f64 }))
            .collect()
    }

    /// Mean of per-class IoU over every class seen so far.
    pub fn miou(&self) -> Result<f64> {
        if self.episodes == 0 {
            return Err(Error::EmptyAccumulator);
        }
        let per_class = self.per_class_iou();
        Ok(per_class.iter().map(|(_, iou)| iou).sum::<f64>() / per_class.len() as f64)
    }

    /// Mean of pooled foreground and background IoU.
    pub fn fb_iou(&self) -> Result<f64> {
        if self.episodes == 0 {
            return Err(Error::EmptyAccumulator);
        }
        let f = if self.fg.1 == 0 { 1.0 } else { self.fg.0 as f64 / self.fg.1 as f64 };
        let b = if self.bg.1 == 0 { 1.0 } else { self.bg.0 as f64 / self.bg.1 as f64 };
        Ok((f + b) / 2.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn probs_sum_to_one_per_pixel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scores = Tensor::from_raw(vec![4, 6], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let pred = predict_from_scores(&scores, 10.0, 3, (2, 3));
        for pix in 0..6 {
            let sum = pred.probs.data()[pix * 2] + pred.probs.data()[pix * 2 + 1];
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn foreground_wins_when_pixel_matches_an_agent() {
        // fg agent scores 1.0, bg scores 0.0 on the one pixel
        let scores = Tensor::from_raw(vec![2, 1], vec![1.0, 0.0]);
        let pred = predict_from_scores(&scores, 10.0, 1, (1, 1));
        assert_eq!(pred.hard.data(), &[1]);
    }

    #[test]
    fn hand_computed_two_by_two() {
        let tau = 2.0;
        // two fg agents + bg; fg max per pixel: [0.5, 0.4, -0.1, 0.8]
        let scores = Tensor::from_raw(
            vec![3, 4],
            vec![
                0.5, 0.1, -0.1, 0.2, //
                0.3, 0.4, -0.3, 0.8, //
                0.2, 0.6, 0.4, -0.5, // background
            ],
        );
        let pred = predict_from_scores(&scores, tau, 2, (2, 2));
        let fg_max = [0.5, 0.4, -0.1, 0.8];
        let bg = [0.2, 0.6, 0.4, -0.5];
        for pix in 0..4 {
            let pf = (tau * fg_max[pix]).exp() / ((tau * fg_max[pix]).exp() + (tau * bg[pix]).exp());
            assert!((pred.probs.data()[pix * 2 + 1] - pf).abs() < 1e-12);
            assert_eq!(pred.hard.data()[pix], (fg_max[pix] > bg[pix]) as u8);
        }
    }

    #[test]
    fn hard_mask_invariant_under_increasing_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let raw: Vec<f64> = (0..3 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let base = predict_from_scores(&Tensor::from_raw(vec![3, 8], raw.clone()), 10.0, 2, (2, 4));
        for transform in [|v: f64| 2.0 * v + 1.0, |v: f64| v.powi(3) + 0.5 * v] {
            let mapped: Vec<f64> = raw.iter().map(|&v| transform(v)).collect();
            let other = predict_from_scores(&Tensor::from_raw(vec![3, 8], mapped), 10.0, 2, (2, 4));
            assert_eq!(base.hard, other.hard);
        }
    }

    #[test]
    fn total_loss_composition() {
        let graph = Graph::new();
        let main = graph.constant(Tensor::scalar(0.5));
        let asl = graph.constant(Tensor::scalar(0.25));
        assert_eq!(total_loss(&main, None, 0.8).scalar_value(), 0.5);
        assert_eq!(total_loss(&main, Some(&asl), 0.0).scalar_value(), 0.5);
        assert!((total_loss(&main, Some(&asl), 0.8).scalar_value() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_loss_vanishes() {
        let graph = Graph::new();
        let scores = graph.constant(Tensor::from_raw(
            vec![2, 4],
            vec![1.0, -1.0, 1.0, -1.0, -1.0, 1.0, -1.0, 1.0],
        ));
        let target = BinaryMask::new(2, 2, vec![1, 0, 1, 0]).unwrap();
        let main = main_loss(&scores, &target, 50.0, 1);
        assert!(main.scalar_value() < 1e-8);
    }

    #[test]
    fn miou_perfect_and_disjoint() {
        let mut acc = MetricAccumulator::new();
        let gt = BinaryMask::new(2, 2, vec![1, 1, 0, 0]).unwrap();
        acc.accumulate(0, &gt, &gt);
        assert_eq!(acc.miou().unwrap(), 1.0);
        assert_eq!(acc.fb_iou().unwrap(), 1.0);

        let mut acc2 = MetricAccumulator::new();
        let pred = BinaryMask::new(2, 2, vec![0, 0, 1, 1]).unwrap();
        acc2.accumulate(1, &pred, &gt);
        assert_eq!(acc2.per_class_iou(), vec![(1, 0.0)]);
    }

    #[test]
    fn miou_hand_counts() {
        // GT covers 2 pixels, prediction covers 2 with 1 overlapping -> 1/3
        let mut acc = MetricAccumulator::new();
        let gt = BinaryMask::new(1, 4, vec![1, 1, 0, 0]).unwrap();
        let pred = BinaryMask::new(1, 4, vec![0, 1, 1, 0]).unwrap();
        acc.accumulate(3, &pred, &gt);
        assert!((acc.miou().unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_in_unit_interval_and_empty_errors() {
        let acc = MetricAccumulator::new();
        assert!(matches!(acc.miou(), Err(Error::EmptyAccumulator)));
        assert!(matches!(acc.fb_iou(), Err(Error::EmptyAccumulator)));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut acc = MetricAccumulator::new();
        for _ in 0..30 {
            let gt = BinaryMask::new(2, 2, (0..4).map(|_| rng.gen_range(0..2) as u8).collect()).unwrap();
            let pred = BinaryMask::new(2, 2, (0..4).map(|_| rng.gen_range(0..2) as u8).collect()).unwrap();
            acc.accumulate(rng.gen_range(0..3), &pred, &gt);
        }
        let m = acc.miou().unwrap();
        let f = acc.fb_iou().unwrap();
        assert!((0.0..=1.0).contains(&m));
        assert!((0.0..=1.0).contains(&f));
    }

    #[test]
    fn accumulation_is_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let episodes: Vec<(usize, BinaryMask, BinaryMask)> = (0..40)
            .map(|_| {
                let gt = BinaryMask::new(2, 3, (0..6).map(|_| rng.gen_range(0..2) as u8).collect()).unwrap();
                let pred = BinaryMask::new(2, 3, (0..6).map(|_| rng.gen_range(0..2) as u8).collect()).unwrap();
                (rng.gen_range(0..4), pred, gt)
            })
            .collect();

        let run = |order: &[usize]| {
            let mut acc = MetricAccumulator::new();
            for &i in order {
                let (c, p, g) = &episodes[i];
                acc.accumulate(*c, p, g);
            }
            (acc.miou().unwrap(), acc.fb_iou().unwrap())
        };
        let mut order: Vec<usize> = (0..episodes.len()).collect();
        let a = run(&order);
        order.shuffle(&mut rng);
        let b = run(&order);
        assert_eq!(a, b); // bit-identical
    }

    #[test]
    fn merge_matches_sequential_accumulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut all = MetricAccumulator::new();
        let mut left = MetricAccumulator::new();
        let mut right = MetricAccumulator::new();
        for k in 0..20 {
            let gt = BinaryMask::new(2, 2, (0..4).map(|_| rng.gen_range(0..2) as u8).collect()).unwrap();
            let pred = BinaryMask::new(2, 2, (0..4).map(|_| rng.gen_range(0..2) as u8).collect()).unwrap();
            let class = rng.gen_range(0..3);
            all.accumulate(class, &pred, &gt);
            if k % 2 == 0 { &mut left } else { &mut right }.accumulate(class, &pred, &gt);
        }
        let mut merged = left.clone();
        merged.merge(&right);
        assert_eq!(merged.miou().unwrap(), all.miou().unwrap());
        assert_eq!(merged.fb_iou().unwrap(), all.fb_iou().unwrap());
    }
}
