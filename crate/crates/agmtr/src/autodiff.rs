//! Reverse-mode automatic differentiation over rank-2 tensors.
//!
//! Every operation on the path from trainable parameters to the scalar loss
//! carries an exact analytic adjoint. Hard assignments produced elsewhere in
//! the pipeline (transport plans, argmax masks, superpixel labels) enter the
//! graph as constants and receive no gradient.
//!
//! The graph is a per-episode tape: build it, call [`backward`], throw it
//! away. Tapes are single-threaded; parallel callers build one tape per
//! episode from a shared immutable parameter snapshot.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{masked_softmax, Tensor, COSINE_EPS};

#[derive(Clone)]
pub struct Graph {
    inner: Rc<RefCell<Vec<Node>>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    /// Elementwise product with a broadcast 1×1 variable.
    MulScalarVar(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Gelu(usize),
    AddRowVec(usize, usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceCols { input: usize, from: usize, to: usize },
    SliceRows { input: usize, from: usize, to: usize },
    /// Adjoint reads the saved output (node value); masked entries are exact
    /// zeros there and stay zero in the gradient.
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        x_hat: Tensor,
        inv_std: Vec<f64>,
    },
    CosineRows {
        a: usize,
        b: usize,
        a_norms: Vec<f64>,
        b_norms: Vec<f64>,
    },
    MaxOverRows {
        x: usize,
        argmax: Vec<usize>,
    },
    MeanAll(usize),
    SoftmaxCrossEntropyRows {
        logits: usize,
        probs: Tensor,
        targets: Tensor,
    },
    MergeRows {
        a: usize,
        b: usize,
        take_b: Vec<bool>,
    },
    NormalizeRowsGuarded {
        x: usize,
        sums: Vec<f64>,
    },
}

/// Handle to one node of a [`Graph`].
#[derive(Clone)]
pub struct Var {
    id: usize,
    graph: Graph,
}

impl Graph {
    pub fn new() -> Self {
        Self { inner: Rc::new(RefCell::new(Vec::new())) }
    }

    fn push(&self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let mut nodes = self.inner.borrow_mut();
        nodes.push(Node { value, requires_grad, op });
        Var { id: nodes.len() - 1, graph: self.clone() }
    }

    /// Input that gradients do not flow into.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Trainable input.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.borrow().is_empty()
    }

    /// Stack rank-2 values vertically.
    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let nodes = self.inner.borrow();
        let cols = nodes[parts[0].id].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        let mut grad = false;
        for p in parts {
            let v = &nodes[p.id].value;
            assert_eq!(v.cols(), cols, "concat_rows column mismatch");
            rows += v.rows();
            data.extend_from_slice(v.data());
            grad |= nodes[p.id].requires_grad;
        }
        drop(nodes);
        self.push(
            Tensor::from_raw(vec![rows, cols], data),
            grad,
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
        )
    }

    /// Stack rank-2 values side by side.
    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let nodes = self.inner.borrow();
        let rows = nodes[parts[0].id].value.rows();
        let total_cols: usize = parts.iter().map(|p| nodes[p.id].value.cols()).sum();
        let mut data = vec![0.0; rows * total_cols];
        let mut offset = 0;
        let mut grad = false;
        for p in parts {
            let v = &nodes[p.id].value;
            assert_eq!(v.rows(), rows, "concat_cols row mismatch");
            let w = v.cols();
            for i in 0..rows {
                data[i * total_cols + offset..i * total_cols + offset + w]
                    .copy_from_slice(v.row(i));
            }
            offset += w;
            grad |= nodes[p.id].requires_grad;
        }
        drop(nodes);
        self.push(
            Tensor::from_raw(vec![rows, total_cols], data),
            grad,
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
        )
    }
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph_handle(&self) -> Graph {
        self.graph.clone()
    }

    pub fn value(&self) -> Tensor {
        self.graph.inner.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.graph.inner.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.inner.borrow()[self.id].value.shape().to_vec()
    }

    pub fn scalar_value(&self) -> f64 {
        let nodes = self.graph.inner.borrow();
        let v = &nodes[self.id].value;
        assert_eq!(v.numel(), 1, "scalar_value on shape {:?}", v.shape());
        v.data()[0]
    }

    fn unary(&self, value: Tensor, op: Op) -> Var {
        let grad = self.graph.inner.borrow()[self.id].requires_grad;
        self.graph.push(value, grad, op)
    }

    fn binary(&self, other: &Var, value: Tensor, op: Op) -> Var {
        assert!(Rc::ptr_eq(&self.graph.inner, &other.graph.inner), "vars from different graphs");
        let nodes = self.graph.inner.borrow();
        let grad = nodes[self.id].requires_grad || nodes[other.id].requires_grad;
        drop(nodes);
        self.graph.push(value, grad, op)
    }

    pub fn add(&self, other: &Var) -> Var {
        let v = self.with_value(|a| other.with_value(|b| a.add(b)));
        self.binary(other, v, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var) -> Var {
        let v = self.with_value(|a| {
            other.with_value(|b| {
                assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
                Tensor::from_raw(
                    a.shape().to_vec(),
                    a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect(),
                )
            })
        });
        self.binary(other, v, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var) -> Var {
        let v = self.with_value(|a| {
            other.with_value(|b| {
                assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
                Tensor::from_raw(
                    a.shape().to_vec(),
                    a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect(),
                )
            })
        });
        self.binary(other, v, Op::Mul(self.id, other.id))
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        let v = self.with_value(|a| a.map(|x| x + c));
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn mul_scalar(&self, c: f64) -> Var {
        let v = self.with_value(|a| a.scale(c));
        self.unary(v, Op::MulScalar(self.id, c))
    }

    /// Multiply every element by a trainable 1×1 scalar.
    pub fn mul_scalar_var(&self, s: &Var) -> Var {
        let sv = s.scalar_value();
        let v = self.with_value(|a| a.scale(sv));
        self.binary(s, v, Op::MulScalarVar(self.id, s.id))
    }

    pub fn matmul(&self, other: &Var) -> Var {
        let v = self.with_value(|a| other.with_value(|b| a.matmul(b)));
        self.binary(other, v, Op::MatMul(self.id, other.id))
    }

    pub fn t(&self) -> Var {
        let v = self.with_value(|a| a.transpose2());
        self.unary(v, Op::Transpose(self.id))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Var {
        let v = self.with_value(|a| a.reshape(shape.clone()));
        self.unary(v, Op::Reshape(self.id))
    }

    pub fn relu(&self) -> Var {
        let v = self.with_value(|a| a.map(|x| x.max(0.0)));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        let v = self.with_value(|a| a.map(|x| if x >= 0.0 { x } else { slope * x }));
        self.unary(v, Op::LeakyRelu(self.id, slope))
    }

    /// Smooth GELU (tanh form).
    pub fn gelu(&self) -> Var {
        let v = self.with_value(|a| a.map(gelu_value));
        self.unary(v, Op::Gelu(self.id))
    }

    /// Broadcast-add a 1×m row vector to every row of an n×m tensor.
    pub fn add_rowvec(&self, v: &Var) -> Var {
        let out = self.with_value(|a| {
            v.with_value(|r| {
                assert_eq!(r.rows(), 1, "add_rowvec needs a 1×m vector");
                assert_eq!(a.cols(), r.cols(), "add_rowvec width mismatch");
                let (n, m) = (a.rows(), a.cols());
                let mut data = a.data().to_vec();
                for i in 0..n {
                    for j in 0..m {
                        data[i * m + j] += r.data()[j];
                    }
                }
                Tensor::from_raw(vec![n, m], data)
            })
        });
        self.binary(v, out, Op::AddRowVec(self.id, v.id))
    }

    pub fn slice_cols(&self, from: usize, to: usize) -> Var {
        let out = self.with_value(|a| {
            let (n, m) = (a.rows(), a.cols());
            assert!(from < to && to <= m);
            let w = to - from;
            let mut data = Vec::with_capacity(n * w);
            for i in 0..n {
                data.extend_from_slice(&a.data()[i * m + from..i * m + to]);
            }
            Tensor::from_raw(vec![n, w], data)
        });
        self.unary(out, Op::SliceCols { input: self.id, from, to })
    }

    pub fn slice_rows(&self, from: usize, to: usize) -> Var {
        let out = self.with_value(|a| {
            let (n, m) = (a.rows(), a.cols());
            assert!(from < to && to <= n);
            Tensor::from_raw(vec![to - from, m], a.data()[from * m..to * m].to_vec())
        });
        self.unary(out, Op::SliceRows { input: self.id, from, to })
    }

    /// Row-wise softmax with an optional additive {0, -inf} mask. Fully
    /// masked rows are an error the caller must handle.
    pub fn softmax_rows(&self, additive_mask: Option<&Tensor>) -> Result<Var> {
        let out = self.with_value(|a| -> Result<Tensor> {
            match additive_mask {
                Some(m) => masked_softmax(a, m),
                None => {
                    let zeros = Tensor::zeros(a.shape().to_vec());
                    masked_softmax(a, &zeros)
                }
            }
        })?;
        Ok(self.unary(out, Op::SoftmaxRows(self.id)))
    }

    /// Per-row layer normalization with learnable 1×m scale and shift.
    pub fn layer_norm(&self, gamma: &Var, beta: &Var, eps: f64) -> Var {
        let (x_hat, inv_std, out) = self.with_value(|x| {
            gamma.with_value(|g| {
                beta.with_value(|b| {
                    let (n, m) = (x.rows(), x.cols());
                    assert_eq!(g.cols(), m);
                    assert_eq!(b.cols(), m);
                    let mut x_hat = vec![0.0; n * m];
                    let mut inv_std = vec![0.0; n];
                    let mut out = vec![0.0; n * m];
                    for i in 0..n {
                        let row = x.row(i);
                        let mean = row.iter().sum::<f64>() / m as f64;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                        let istd = 1.0 / (var + eps).sqrt();
                        inv_std[i] = istd;
                        for j in 0..m {
                            let xh = (row[j] - mean) * istd;
                            x_hat[i * m + j] = xh;
                            out[i * m + j] = g.data()[j] * xh + b.data()[j];
                        }
                    }
                    (
                        Tensor::from_raw(vec![n, m], x_hat),
                        inv_std,
                        Tensor::from_raw(vec![n, m], out),
                    )
                })
            })
        });
        let nodes = self.graph.inner.borrow();
        let grad = nodes[self.id].requires_grad
            || nodes[gamma.id].requires_grad
            || nodes[beta.id].requires_grad;
        drop(nodes);
        self.graph.push(
            out,
            grad,
            Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, x_hat, inv_std },
        )
    }

    /// Pairwise cosine similarity between the rows of `self` (n×c) and the
    /// rows of `other` (m×c). Rows with norm below the epsilon score 0
    /// against everything and receive no gradient.
    pub fn cosine_rows(&self, other: &Var) -> Var {
        let (a_norms, b_norms, out) = self.with_value(|a| {
            other.with_value(|b| {
                assert_eq!(a.cols(), b.cols(), "cosine_rows feature dims");
                let (n, m, c) = (a.rows(), b.rows(), a.cols());
                let a_norms: Vec<f64> =
                    (0..n).map(|i| a.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
                let b_norms: Vec<f64> =
                    (0..m).map(|j| b.row(j).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
                let mut out = vec![0.0; n * m];
                for i in 0..n {
                    if a_norms[i] < COSINE_EPS {
                        continue;
                    }
                    for j in 0..m {
                        if b_norms[j] < COSINE_EPS {
                            continue;
                        }
                        let dot: f64 =
                            a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum::<f64>();
                        out[i * m + j] = dot / (a_norms[i] * b_norms[j]);
                    }
                }
                let _ = c;
                (a_norms, b_norms, Tensor::from_raw(vec![n, m], out))
            })
        });
        self.binary(other, out, Op::CosineRows { a: self.id, b: other.id, a_norms, b_norms })
    }

    /// Column-wise maximum over rows, returning 1×m. The subgradient routes
    /// to the winning row; ties go to the lowest row index.
    pub fn max_over_rows(&self) -> Var {
        self.max_over_rows_routed(None).0
    }

    /// Like [`max_over_rows`], but the winner per column can be pinned by the
    /// caller, which treats the hard selection as a constant (the convention
    /// for every hard assignment in the pipeline). Returns the routing used.
    pub fn max_over_rows_routed(&self, routing: Option<&[usize]>) -> (Var, Vec<usize>) {
        let (argmax, out) = self.with_value(|a| {
            let (n, m) = (a.rows(), a.cols());
            assert!(n >= 1);
            match routing {
                Some(r) => {
                    assert_eq!(r.len(), m);
                    let out: Vec<f64> = (0..m).map(|j| a.at2(r[j], j)).collect();
                    (r.to_vec(), Tensor::from_raw(vec![1, m], out))
                }
                None => {
                    let mut argmax = vec![0usize; m];
                    let mut out = a.row(0).to_vec();
                    for i in 1..n {
                        for j in 0..m {
                            if a.at2(i, j) > out[j] {
                                out[j] = a.at2(i, j);
                                argmax[j] = i;
                            }
                        }
                    }
                    (argmax, Tensor::from_raw(vec![1, m], out))
                }
            }
        });
        let var = self.unary(out, Op::MaxOverRows { x: self.id, argmax: argmax.clone() });
        (var, argmax)
    }

    pub fn mean_all(&self) -> Var {
        let v = self.with_value(|a| {
            Tensor::scalar(a.data().iter().sum::<f64>() / a.numel() as f64)
        });
        self.unary(v, Op::MeanAll(self.id))
    }

    /// Mean over rows of the cross entropy between row-wise softmax of the
    /// logits and the given (possibly soft) target rows. Numerically stable;
    /// returns a 1×1 loss.
    pub fn softmax_cross_entropy_rows(&self, targets: &Tensor) -> Var {
        let (probs, loss) = self.with_value(|z| {
            assert_eq!(z.shape(), targets.shape(), "cross entropy shapes");
            let (n, m) = (z.rows(), z.cols());
            let mut probs = vec![0.0; n * m];
            let mut total = 0.0;
            for i in 0..n {
                let row = z.row(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..m {
                    let e = (row[j] - max).exp();
                    probs[i * m + j] = e;
                    sum += e;
                }
                let log_sum = sum.ln() + max;
                for j in 0..m {
                    probs[i * m + j] /= sum;
                    total -= targets.at2(i, j) * (row[j] - log_sum);
                }
            }
            (
                Tensor::from_raw(vec![n, m], probs),
                Tensor::scalar(total / n as f64),
            )
        });
        self.unary(
            loss,
            Op::SoftmaxCrossEntropyRows { logits: self.id, probs, targets: targets.clone() },
        )
    }

    /// Row-wise select: rows flagged in `take_b` come from `other`, the rest
    /// from `self`. Used for pass-through fallbacks.
    pub fn merge_rows(&self, other: &Var, take_b: &[bool]) -> Var {
        let out = self.with_value(|a| {
            other.with_value(|b| {
                assert_eq!(a.shape(), b.shape(), "merge_rows shapes");
                assert_eq!(a.rows(), take_b.len());
                let m = a.cols();
                let mut data = a.data().to_vec();
                for (i, &t) in take_b.iter().enumerate() {
                    if t {
                        data[i * m..(i + 1) * m].copy_from_slice(b.row(i));
                    }
                }
                Tensor::from_raw(a.shape().to_vec(), data)
            })
        });
        self.binary(other, out, Op::MergeRows { a: self.id, b: other.id, take_b: take_b.to_vec() })
    }

    /// Divide each row by its sum so rows become probability vectors. Rows
    /// whose sum is not positive come out as all zeros (pass-through guard
    /// for nonnegative inputs).
    pub fn normalize_rows_guarded(&self) -> Var {
        let (sums, out) = self.with_value(|a| {
            let (n, m) = (a.rows(), a.cols());
            let mut sums = vec![0.0; n];
            let mut out = vec![0.0; n * m];
            for i in 0..n {
                let s: f64 = a.row(i).iter().sum();
                sums[i] = s;
                if s > 0.0 {
                    for j in 0..m {
                        out[i * m + j] = a.at2(i, j) / s;
                    }
                }
            }
            (sums, Tensor::from_raw(vec![n, m], out))
        });
        self.unary(out, Op::NormalizeRowsGuarded { x: self.id, sums })
    }
}

/// Gradients keyed by node id, produced by [`backward`].
pub struct Grads {
    by_id: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        self.by_id.get(var.id()).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: &Var) -> Option<Tensor> {
        self.by_id.get_mut(var.id()).and_then(|g| g.take())
    }
}

/// Reverse accumulation from a scalar loss node.
pub fn backward(loss: &Var) -> Grads {
    let nodes = loss.graph.inner.borrow();
    let n = nodes.len();
    let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
    assert_eq!(nodes[loss.id].value.numel(), 1, "backward needs a scalar loss");
    grads[loss.id] = Some(Tensor::scalar(1.0));

    for id in (0..=loss.id).rev() {
        if !nodes[id].requires_grad {
            grads[id] = None;
            continue;
        }
        let Some(g) = grads[id].take() else { continue };
        accumulate(&nodes, &mut grads, id, &g);
        if matches!(nodes[id].op, Op::Leaf) {
            grads[id] = Some(g);
        }
    }
    Grads { by_id: grads }
}

fn add_grad(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, delta: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => {
            let sum = existing.add(&delta);
            *existing = sum;
        }
        slot @ None => *slot = Some(delta),
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, g: &Tensor) {
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            add_grad(nodes, grads, *a, g.clone());
            add_grad(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            add_grad(nodes, grads, *a, g.clone());
            add_grad(nodes, grads, *b, g.scale(-1.0));
        }
        Op::Mul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            add_grad(
                nodes,
                grads,
                *a,
                Tensor::from_raw(
                    g.shape().to_vec(),
                    g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect(),
                ),
            );
            add_grad(
                nodes,
                grads,
                *b,
                Tensor::from_raw(
                    g.shape().to_vec(),
                    g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect(),
                ),
            );
        }
        Op::AddScalar(a) => add_grad(nodes, grads, *a, g.clone()),
        Op::MulScalar(a, c) => add_grad(nodes, grads, *a, g.scale(*c)),
        Op::MulScalarVar(a, s) => {
            let sv = nodes[*s].value.data()[0];
            add_grad(nodes, grads, *a, g.scale(sv));
            let av = &nodes[*a].value;
            let ds: f64 = g.data().iter().zip(av.data()).map(|(x, y)| x * y).sum();
            add_grad(nodes, grads, *s, Tensor::scalar(ds));
        }
        Op::MatMul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            if nodes[*a].requires_grad {
                add_grad(nodes, grads, *a, g.matmul(&bv.transpose2()));
            }
            if nodes[*b].requires_grad {
                add_grad(nodes, grads, *b, av.transpose2().matmul(g));
            }
        }
        Op::Transpose(a) => add_grad(nodes, grads, *a, g.transpose2()),
        Op::Reshape(a) => {
            add_grad(nodes, grads, *a, g.reshape(nodes[*a].value.shape().to_vec()));
        }
        Op::Relu(a) => {
            let av = &nodes[*a].value;
            add_grad(
                nodes,
                grads,
                *a,
                Tensor::from_raw(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(av.data())
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect(),
                ),
            );
        }
        Op::LeakyRelu(a, slope) => {
            let av = &nodes[*a].value;
            add_grad(
                nodes,
                grads,
                *a,
                Tensor::from_raw(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(av.data())
                        .map(|(gv, xv)| if *xv >= 0.0 { *gv } else { slope * gv })
                        .collect(),
                ),
            );
        }
        Op::Gelu(a) => {
            let av = &nodes[*a].value;
            add_grad(
                nodes,
                grads,
                *a,
                Tensor::from_raw(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(av.data())
                        .map(|(gv, xv)| gv * gelu_derivative(*xv))
                        .collect(),
                ),
            );
        }
        Op::AddRowVec(a, v) => {
            add_grad(nodes, grads, *a, g.clone());
            let (n, m) = (g.rows(), g.cols());
            let mut dv = vec![0.0; m];
            for i in 0..n {
                for j in 0..m {
                    dv[j] += g.at2(i, j);
                }
            }
            add_grad(nodes, grads, *v, Tensor::from_raw(vec![1, m], dv));
        }
        Op::ConcatRows(parts) => {
            let m = g.cols();
            let mut offset = 0;
            for &p in parts {
                let rows = nodes[p].value.rows();
                let slice = g.data()[offset * m..(offset + rows) * m].to_vec();
                add_grad(nodes, grads, p, Tensor::from_raw(vec![rows, m], slice));
                offset += rows;
            }
        }
        Op::ConcatCols(parts) => {
            let n = g.rows();
            let total = g.cols();
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].value.cols();
                let mut dp = vec![0.0; n * w];
                for i in 0..n {
                    dp[i * w..(i + 1) * w]
                        .copy_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                }
                add_grad(nodes, grads, p, Tensor::from_raw(vec![n, w], dp));
                offset += w;
            }
        }
        Op::SliceCols { input, from, to } => {
            let (n, m) = (nodes[*input].value.rows(), nodes[*input].value.cols());
            let w = to - from;
            let mut dx = vec![0.0; n * m];
            for i in 0..n {
                dx[i * m + from..i * m + to].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
            }
            add_grad(nodes, grads, *input, Tensor::from_raw(vec![n, m], dx));
        }
        Op::SliceRows { input, from, to } => {
            let (n, m) = (nodes[*input].value.rows(), nodes[*input].value.cols());
            let mut dx = vec![0.0; n * m];
            dx[from * m..to * m].copy_from_slice(g.data());
            add_grad(nodes, grads, *input, Tensor::from_raw(vec![n, m], dx));
        }
        Op::SoftmaxRows(a) => {
            let y = &nodes[id].value;
            let (n, m) = (y.rows(), y.cols());
            let mut dx = vec![0.0; n * m];
            for i in 0..n {
                let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(gv, yv)| gv * yv).sum();
                for j in 0..m {
                    dx[i * m + j] = y.at2(i, j) * (g.at2(i, j) - dot);
                }
            }
            add_grad(nodes, grads, *a, Tensor::from_raw(vec![n, m], dx));
        }
        Op::LayerNorm { x, gamma, beta, x_hat, inv_std } => {
            let (n, m) = (g.rows(), g.cols());
            let gv = &nodes[*gamma].value;
            let mut dgamma = vec![0.0; m];
            let mut dbeta = vec![0.0; m];
            let mut dx = vec![0.0; n * m];
            for i in 0..n {
                let mut mean_gg = 0.0;
                let mut mean_ggx = 0.0;
                for j in 0..m {
                    let gg = g.at2(i, j) * gv.data()[j];
                    mean_gg += gg;
                    mean_ggx += gg * x_hat.at2(i, j);
                    dgamma[j] += g.at2(i, j) * x_hat.at2(i, j);
                    dbeta[j] += g.at2(i, j);
                }
                mean_gg /= m as f64;
                mean_ggx /= m as f64;
                for j in 0..m {
                    let gg = g.at2(i, j) * gv.data()[j];
                    dx[i * m + j] = inv_std[i] * (gg - mean_gg - x_hat.at2(i, j) * mean_ggx);
                }
            }
            add_grad(nodes, grads, *x, Tensor::from_raw(vec![n, m], dx));
            add_grad(nodes, grads, *gamma, Tensor::from_raw(vec![1, m], dgamma));
            add_grad(nodes, grads, *beta, Tensor::from_raw(vec![1, m], dbeta));
        }
        Op::CosineRows { a, b, a_norms, b_norms } => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let c = &nodes[id].value;
            let (n, m, d) = (av.rows(), bv.rows(), av.cols());
            let mut da = vec![0.0; n * d];
            let mut db = vec![0.0; m * d];
            for i in 0..n {
                if a_norms[i] < COSINE_EPS {
                    continue;
                }
                for j in 0..m {
                    if b_norms[j] < COSINE_EPS {
                        continue;
                    }
                    let gij = g.at2(i, j);
                    if gij == 0.0 {
                        continue;
                    }
                    let cij = c.at2(i, j);
                    let inv_ab = 1.0 / (a_norms[i] * b_norms[j]);
                    let inv_aa = 1.0 / (a_norms[i] * a_norms[i]);
                    let inv_bb = 1.0 / (b_norms[j] * b_norms[j]);
                    for k in 0..d {
                        da[i * d + k] += gij * (bv.at2(j, k) * inv_ab - cij * av.at2(i, k) * inv_aa);
                        db[j * d + k] += gij * (av.at2(i, k) * inv_ab - cij * bv.at2(j, k) * inv_bb);
                    }
                }
            }
            add_grad(nodes, grads, *a, Tensor::from_raw(vec![n, d], da));
            add_grad(nodes, grads, *b, Tensor::from_raw(vec![m, d], db));
        }
        Op::MaxOverRows { x, argmax } => {
            let (n, m) = (nodes[*x].value.rows(), nodes[*x].value.cols());
            let mut dx = vec![0.0; n * m];
            for (j, &i) in argmax.iter().enumerate() {
                dx[i * m + j] = g.data()[j];
            }
            add_grad(nodes, grads, *x, Tensor::from_raw(vec![n, m], dx));
        }
        Op::MeanAll(a) => {
            let av = &nodes[*a].value;
            let gv = g.data()[0] / av.numel() as f64;
            add_grad(nodes, grads, *a, Tensor::full(av.shape().to_vec(), gv));
        }
        Op::SoftmaxCrossEntropyRows { logits, probs, targets } => {
            let (n, m) = (probs.rows(), probs.cols());
            let scale = g.data()[0] / n as f64;
            let mut dz = vec![0.0; n * m];
            for i in 0..n * m {
                dz[i] = scale * (probs.data()[i] - targets.data()[i]);
            }
            add_grad(nodes, grads, *logits, Tensor::from_raw(vec![n, m], dz));
        }
        Op::MergeRows { a, b, take_b } => {
            let m = g.cols();
            let mut da = vec![0.0; g.numel()];
            let mut db = vec![0.0; g.numel()];
            for (i, &t) in take_b.iter().enumerate() {
                let dst = if t { &mut db } else { &mut da };
                dst[i * m..(i + 1) * m].copy_from_slice(g.row(i));
            }
            add_grad(nodes, grads, *a, Tensor::from_raw(g.shape().to_vec(), da));
            add_grad(nodes, grads, *b, Tensor::from_raw(g.shape().to_vec(), db));
        }
        Op::NormalizeRowsGuarded { x, sums } => {
            let y = &nodes[id].value;
            let (n, m) = (y.rows(), y.cols());
            let mut dx = vec![0.0; n * m];
            for i in 0..n {
                if sums[i] <= 0.0 {
                    continue;
                }
                let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(gv, yv)| gv * yv).sum();
                for j in 0..m {
                    dx[i * m + j] = (g.at2(i, j) - dot) / sums[i];
                }
            }
            add_grad(nodes, grads, *x, Tensor::from_raw(vec![n, m], dx));
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_value(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Forced error constructor used by callers that pre-validate masked rows.
pub fn all_masked_row(row: usize) -> Error {
    Error::AllMaskedRow { row }
}
