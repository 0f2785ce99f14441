//! Entropy-regularized optimal transport in the log domain.
//!
//! The solver produces the plan that splits foreground pixels evenly across
//! agents: rows carry mass 1/n each, columns 1/m each. Updates run in the
//! log domain because plain scaling underflows once the sharpness gets
//! large.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SinkhornConfig {
    /// Entropy sharpness: larger values push the plan toward the
    /// unregularized optimum.
    pub lambda: f64,
    pub max_iters: usize,
    pub marginal_tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self { lambda: 20.0, max_iters: 200, marginal_tol: 1e-6 }
    }
}

/// Nonnegative n×m matrix with rows summing to 1/n and columns to 1/m.
#[derive(Clone, Debug)]
pub struct TransportPlan {
    pub matrix: Tensor,
    pub residual: f64,
    pub iterations: usize,
}

impl TransportPlan {
    pub fn row_masses(&self) -> Vec<f64> {
        let (n, m) = (self.matrix.rows(), self.matrix.cols());
        (0..n).map(|i| (0..m).map(|j| self.matrix.at2(i, j)).sum()).collect()
    }

    pub fn col_masses(&self) -> Vec<f64> {
        let (n, m) = (self.matrix.rows(), self.matrix.cols());
        (0..m).map(|j| (0..n).map(|i| self.matrix.at2(i, j)).sum()).collect()
    }

    pub fn transport_cost(&self, cost: &Tensor) -> f64 {
        self.matrix.data().iter().zip(cost.data()).map(|(t, c)| t * c).sum()
    }
}

/// Entropic objective Σ T·cost − H(T)/λ with 0·ln 0 = 0.
pub fn entropic_objective(plan: &Tensor, cost: &Tensor, lambda: f64) -> f64 {
    let mut linear = 0.0;
    let mut entropy = 0.0;
    for (&t, &c) in plan.data().iter().zip(cost.data()) {
        linear += t * c;
        if t > 0.0 {
            entropy -= t * t.ln();
        }
    }
    linear - entropy / lambda
}

fn log_sum_exp(values: impl Iterator<Item = f64>) -> f64 {
    let vals: Vec<f64> = values.collect();
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + vals.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Solve for the plan with uniform marginals (rows 1/n, columns 1/m) by
/// alternating log-domain scaling. On failure to reach the marginal
/// tolerance the best iterate rides along in the error so training callers
/// can keep going while tests stay strict.
pub fn solve(cost: &Tensor, config: &SinkhornConfig) -> Result<TransportPlan> {
    assert!(config.lambda > 0.0, "lambda must be positive");
    assert!(config.max_iters >= 1);
    let (n, m) = (cost.rows(), cost.cols());
    assert!(n >= 1 && m >= 1);
    assert!(cost.is_finite(), "cost matrix must be finite");

    let log_r = (1.0 / n as f64).ln();
    let log_c = (1.0 / m as f64).ln();

    // sharpness schedule: warm-start the dual potentials at milder lambdas,
    // carrying u = f / lambda between stages
    let mut stages = vec![config.lambda];
    let mut l = config.lambda;
    while l > 80.0 {
        l /= 8.0;
        stages.push(l);
    }
    stages.reverse();

    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut best: Option<(f64, Tensor, usize)> = None;
    let mut spent = 0usize;

    for (stage_idx, &lambda) in stages.iter().enumerate() {
        let last = stage_idx + 1 == stages.len();
        if stage_idx > 0 {
            let ratio = lambda / stages[stage_idx - 1];
            f.iter_mut().for_each(|v| *v *= ratio);
            g.iter_mut().for_each(|v| *v *= ratio);
        }
        let neg_lc: Vec<f64> = cost.data().iter().map(|c| -lambda * c).collect();
        let stage_tol = if last { config.marginal_tol } else { config.marginal_tol.max(1e-4) };
        let budget = if last {
            config.max_iters.saturating_sub(spent).max(1)
        } else {
            // leave at least one sweep for the final stage
            (config.max_iters / (2 * stages.len()))
                .max(1)
                .min(config.max_iters.saturating_sub(spent + 1))
        };

        for sweep in 0..budget {
            spent += 1;
            // plain scaling while far out, over-relaxed once settled
            let theta = if sweep < 10 { 1.0 } else { 1.5 };
            for i in 0..n {
                let lse = log_sum_exp((0..m).map(|j| neg_lc[i * m + j] + g[j]));
                f[i] = (1.0 - theta) * f[i] + theta * (log_r - lse);
            }
            for j in 0..m {
                let lse = log_sum_exp((0..n).map(|i| neg_lc[i * m + j] + f[i]));
                g[j] = (1.0 - theta) * g[j] + theta * (log_c - lse);
            }

            let mut plan = vec![0.0; n * m];
            for i in 0..n {
                for j in 0..m {
                    plan[i * m + j] = (neg_lc[i * m + j] + f[i] + g[j]).exp();
                }
            }
            let matrix = Tensor::from_raw(vec![n, m], plan);
            let residual = marginal_residual(&matrix);
            if last && best.as_ref().map_or(true, |(r, _, _)| residual < *r) {
                best = Some((residual, matrix, spent));
            }
            if residual <= stage_tol {
                break;
            }
        }
        if last {
            let (residual, matrix, iterations) = best.take().unwrap();
            if residual <= config.marginal_tol {
                return Ok(TransportPlan { matrix, residual, iterations });
            }
            return Err(Error::NoConvergence {
                plan: TransportPlan { matrix, residual, iterations },
                residual,
                iters: spent,
            });
        }
    }
    unreachable!("final stage always returns")
}

/// Largest deviation of any row sum from 1/n or column sum from 1/m.
pub fn marginal_residual(plan: &Tensor) -> f64 {
    let (n, m) = (plan.rows(), plan.cols());
    let (r, c) = (1.0 / n as f64, 1.0 / m as f64);
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let sum: f64 = plan.row(i).iter().sum();
        worst = worst.max((sum - r).abs());
    }
    for j in 0..m {
        let sum: f64 = (0..n).map(|i| plan.at2(i, j)).sum();
        worst = worst.max((sum - c).abs());
    }
    worst
}

/// Independent reference solvers used only for verification. Nothing here
/// shares code with [`solve`].
pub mod oracles {
    use super::entropic_objective;
    use crate::tensor::Tensor;

    /// Entropic mirror descent over the transport polytope: multiplicative
    /// gradient steps followed by plain-domain alternating projection onto
    /// the marginals. Intended for small instances at high precision.
    pub fn mirror_descent(cost: &Tensor, lambda: f64, outer_iters: usize) -> Tensor {
        let (n, m) = (cost.rows(), cost.cols());
        let (r, c) = (1.0 / n as f64, 1.0 / m as f64);
        let mut plan: Vec<f64> = vec![r * c; n * m];

        for t in 0..outer_iters {
            let eta = 2.0 / ((t + 1) as f64).sqrt();
            for i in 0..n * m {
                let grad = cost.data()[i] + (1.0 + plan[i].max(1e-300).ln()) / lambda;
                plan[i] *= (-eta * grad).exp();
            }
            // alternating projection back onto the marginals
            for _ in 0..500 {
                let mut worst: f64 = 0.0;
                for i in 0..n {
                    let sum: f64 = plan[i * m..(i + 1) * m].iter().sum();
                    let scale = r / sum;
                    for j in 0..m {
                        plan[i * m + j] *= scale;
                    }
                }
                for j in 0..m {
                    let sum: f64 = (0..n).map(|i| plan[i * m + j]).sum();
                    let scale = c / sum;
                    for i in 0..n {
                        plan[i * m + j] *= scale;
                    }
                    worst = worst.max((sum - c).abs());
                }
                if worst <= 1e-13 {
                    break;
                }
            }
        }
        Tensor::from_raw(vec![n, m], plan)
    }

    /// Exact unregularized OT by enumerating the basic feasible solutions of
    /// the transport polytope (spanning trees of the bipartite cell graph).
    /// Only viable for tiny instances.
    pub fn exact_ot_by_vertex_enumeration(cost: &Tensor) -> (Tensor, f64) {
        let (n, m) = (cost.rows(), cost.cols());
        let (r, c) = (1.0 / n as f64, 1.0 / m as f64);
        let cells: Vec<(usize, usize)> =
            (0..n).flat_map(|i| (0..m).map(move |j| (i, j))).collect();
        let k = n + m - 1;
        let mut best: Option<(Tensor, f64)> = None;

        let mut chosen = vec![0usize; k];
        enumerate_subsets(cells.len(), k, &mut chosen, 0, 0, &mut |subset| {
            if let Some(plan) = solve_basic(n, m, r, c, &cells, subset) {
                let total: f64 =
                    plan.iter().zip(cost.data()).map(|(t, co)| t * co).sum();
                if best.as_ref().map_or(true, |(_, b)| total < *b - 1e-15) {
                    best = Some((Tensor::from_raw(vec![n, m], plan.clone()), total));
                }
            }
        });
        best.expect("transport polytope has at least one vertex")
    }

    fn enumerate_subsets(
        total: usize,
        k: usize,
        chosen: &mut Vec<usize>,
        depth: usize,
        start: usize,
        visit: &mut impl FnMut(&[usize]),
    ) {
        if depth == k {
            visit(chosen);
            return;
        }
        for i in start..total {
            chosen[depth] = i;
            enumerate_subsets(total, k, chosen, depth + 1, i + 1, visit);
        }
    }

    /// Solve the flow on a candidate basis by peeling rows/columns with a
    /// single unknown. Returns None when the basis is not a spanning tree or
    /// the solution leaves the nonnegative orthant.
    fn solve_basic(
        n: usize,
        m: usize,
        r: f64,
        c: f64,
        cells: &[(usize, usize)],
        subset: &[usize],
    ) -> Option<Vec<f64>> {
        let mut value = vec![f64::NAN; subset.len()];
        let mut row_rem = vec![r; n];
        let mut col_rem = vec![c; m];
        let mut solved = 0;
        while solved < subset.len() {
            let mut progressed = false;
            for i in 0..n {
                let unknowns: Vec<usize> = (0..subset.len())
                    .filter(|&s| value[s].is_nan() && cells[subset[s]].0 == i)
                    .collect();
                if unknowns.len() == 1 {
                    let s = unknowns[0];
                    value[s] = row_rem[i];
                    row_rem[i] = 0.0;
                    col_rem[cells[subset[s]].1] -= value[s];
                    solved += 1;
                    progressed = true;
                }
            }
            for j in 0..m {
                let unknowns: Vec<usize> = (0..subset.len())
                    .filter(|&s| value[s].is_nan() && cells[subset[s]].1 == j)
                    .collect();
                if unknowns.len() == 1 {
                    let s = unknowns[0];
                    value[s] = col_rem[j];
                    col_rem[j] = 0.0;
                    row_rem[cells[subset[s]].0] -= value[s];
                    solved += 1;
                    progressed = true;
                }
            }
            if !progressed {
                return None; // contains a cycle
            }
        }
        if value.iter().any(|&v| v < -1e-12) {
            return None;
        }
        if row_rem.iter().any(|&v| v.abs() > 1e-9) || col_rem.iter().any(|&v| v.abs() > 1e-9) {
            return None;
        }
        let mut plan = vec![0.0; n * m];
        for (s, &cell) in subset.iter().enumerate() {
            let (i, j) = cells[cell];
            plan[i * m + j] = value[s].max(0.0);
        }
        Some(plan)
    }

    /// Objective gap between a candidate plan and the oracle plan.
    pub fn objective_gap(candidate: &Tensor, cost: &Tensor, lambda: f64, oracle_iters: usize) -> f64 {
        let reference = mirror_descent(cost, lambda, oracle_iters);
        entropic_objective(candidate, cost, lambda) - entropic_objective(&reference, cost, lambda)
    }
}
