//! Dense row-major tensors, binary masks, and the shared numeric primitives
//! (masked pooling, cosine similarity, masked softmax, argmax one-hot) used by
//! every stage of the pipeline.
//!
//! Values are `f64` throughout. Shapes are checked eagerly: wiring bugs in a
//! pipeline with this many reshapes should fail at the op that introduced
//! them, not three modules later.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const COSINE_EPS: f64 = 1e-12;

/// Dense n-dimensional array, row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    /// Checked constructor: shape must match data length and every value must
    /// be finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                expected: format!("{numel} values for shape {shape:?}"),
                got: format!("{}", data.len()),
            });
        }
        for (index, &value) in data.iter().enumerate() {
            if !value.is_finite() {
                return Err(Error::NonFinite { index, value });
            }
        }
        Ok(Self { shape, data })
    }

    /// Unchecked constructor. Additive attention masks legitimately carry
    /// `-inf`, which the checked constructor rejects.
    pub fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "shape {shape:?} vs {} values", data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![0.0; numel] }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1, 1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.rank(), 2, "rows() needs rank 2, got {:?}", self.shape);
        self.shape[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.rank(), 2, "cols() needs rank 2, got {:?}", self.shape);
        self.shape[1]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.shape[1] + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let m = self.cols();
        &self.data[i * m..(i + 1) * m]
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.data.len(), "reshape {:?} -> {shape:?}", self.shape);
        Tensor { shape, data: self.data.clone() }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (n, k) = (self.rows(), self.cols());
        let (k2, m) = (other.rows(), other.cols());
        assert_eq!(k, k2, "matmul {:?} x {:?}", self.shape, other.shape);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * m..(i + 1) * m];
            for (kk, &aik) in arow.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let brow = &other.data[kk * m..(kk + 1) * m];
                for j in 0..m {
                    orow[j] += aik * brow[j];
                }
            }
        }
        Tensor { shape: vec![n, m], data: out }
    }

    pub fn transpose2(&self) -> Tensor {
        let (n, m) = (self.rows(), self.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = self.data[i * m + j];
            }
        }
        Tensor { shape: vec![m, n], data: out }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape, other.shape, "add shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }
}

/// H×W map with every element exactly 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch {
                op: "BinaryMask::new",
                expected: format!("{} values", height * width),
                got: format!("{}", data.len()),
            });
        }
        if let Some(idx) = data.iter().position(|&v| v > 1) {
            return Err(Error::NonFinite { index: idx, value: data[idx] as f64 });
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![1; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        debug_assert!(v <= 1);
        self.data[y * self.width + x] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    /// Additive attention row: 0 where active, -inf where masked out.
    pub fn to_additive_row(&self) -> Vec<f64> {
        self.data
            .iter()
            .map(|&v| if v == 1 { 0.0 } else { f64::NEG_INFINITY })
            .collect()
    }

    /// Majority-vote reduction onto a coarser grid (`factor` pixels per cell
    /// side). Ties go to foreground.
    pub fn downsample_majority(&self, factor: usize) -> BinaryMask {
        assert!(self.height % factor == 0 && self.width % factor == 0);
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = BinaryMask::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                let mut ones = 0usize;
                for dy in 0..factor {
                    for dx in 0..factor {
                        ones += self.get(y * factor + dy, x * factor + dx) as usize;
                    }
                }
                if 2 * ones >= factor * factor {
                    out.set(y, x, 1);
                }
            }
        }
        out
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> BinaryMask {
        let (h, w) = (self.height * factor, self.width * factor);
        let mut out = BinaryMask::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                out.set(y, x, self.get(y / factor, x / factor));
            }
        }
        out
    }
}

/// Mean of the feature vectors at mask==1 positions.
///
/// `feature` is H×W×C, `mask` is H×W; returns a length-C vector.
pub fn masked_average_pool(feature: &Tensor, mask: &BinaryMask) -> Result<Tensor> {
    let shape = feature.shape();
    assert_eq!(feature.rank(), 3, "masked_average_pool expects H×W×C");
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if h != mask.height() || w != mask.width() {
        return Err(Error::ShapeMismatch {
            op: "masked_average_pool",
            expected: format!("mask {h}×{w}"),
            got: format!("{}×{}", mask.height(), mask.width()),
        });
    }
    let active = mask.count_ones();
    if active == 0 {
        return Err(Error::EmptyMask);
    }
    let mut acc = vec![0.0; c];
    let data = feature.data();
    for (pix, &m) in mask.data().iter().enumerate() {
        if m == 1 {
            let base = pix * c;
            for (k, a) in acc.iter_mut().enumerate() {
                *a += data[base + k];
            }
        }
    }
    let inv = 1.0 / active as f64;
    Tensor::new(vec![c], acc.into_iter().map(|v| v * inv).collect())
}

/// Cosine similarity of two equal-length vectors.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    assert_eq!(a.numel(), b.numel(), "cosine_similarity length mismatch");
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if na < COSINE_EPS || nb < COSINE_EPS {
        return Err(Error::ZeroVector { eps: COSINE_EPS });
    }
    Ok(dot / (na * nb))
}

/// Row-wise softmax with an additive mask whose entries are 0 or -inf.
/// Masked positions come out exactly 0; a fully masked row is an error.
pub fn masked_softmax(logits: &Tensor, additive_mask: &Tensor) -> Result<Tensor> {
    assert_eq!(logits.shape(), additive_mask.shape(), "masked_softmax shapes");
    let (n, m) = (logits.rows(), logits.cols());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let lrow = logits.row(i);
        let mrow = additive_mask.row(i);
        let mut max = f64::NEG_INFINITY;
        for j in 0..m {
            debug_assert!(mrow[j] == 0.0 || mrow[j] == f64::NEG_INFINITY);
            if mrow[j] == 0.0 && lrow[j] > max {
                max = lrow[j];
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::AllMaskedRow { row: i });
        }
        let mut sum = 0.0;
        for j in 0..m {
            if mrow[j] == 0.0 {
                let e = (lrow[j] - max).exp();
                out[i * m + j] = e;
                sum += e;
            }
        }
        let inv = 1.0 / sum;
        for j in 0..m {
            if mrow[j] == 0.0 {
                out[i * m + j] *= inv;
            }
        }
    }
    Ok(Tensor::from_raw(vec![n, m], out))
}

/// Per-pixel argmax over K score maps, encoded as K binary maps that
/// partition the grid. Ties break to the lowest index.
pub fn argmax_one_hot(scores: &Tensor) -> Vec<BinaryMask> {
    assert_eq!(scores.rank(), 3, "argmax_one_hot expects K×H×W");
    let (k, h, w) = (scores.shape()[0], scores.shape()[1], scores.shape()[2]);
    assert!(k >= 1);
    let hw = h * w;
    let data = scores.data();
    let mut masks = vec![BinaryMask::zeros(h, w); k];
    for pix in 0..hw {
        let mut best = 0usize;
        let mut best_v = data[pix];
        for map in 1..k {
            let v = data[map * hw + pix];
            if v > best_v {
                best_v = v;
                best = map;
            }
        }
        masks[best].data_mut()[pix] = 1;
    }
    masks
}

const TENSOR_MAGIC: &[u8; 4] = b"AGTR";

/// Write a tensor in the portable format: magic "AGTR", u8 rank,
/// little-endian u64 dims, little-endian f32 payload.
pub fn save_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&[tensor.rank() as u8])?;
    for &d in tensor.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in tensor.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::BadTensorFile(format!("bad magic {magic:?}")));
    }
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank)?;
    let mut shape = Vec::with_capacity(rank[0] as usize);
    for _ in 0..rank[0] {
        let mut dim = [0u8; 8];
        r.read_exact(&mut dim)?;
        shape.push(u64::from_le_bytes(dim) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        let mut v = [0u8; 4];
        r.read_exact(&mut v)?;
        data.push(f32::from_le_bytes(v) as f64);
    }
    Ok(Tensor::from_raw(shape, data))
}
