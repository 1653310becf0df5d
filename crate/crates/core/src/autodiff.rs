//! Reverse-mode differentiation over dense feature maps.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes are appended in evaluation order, so walking them backwards is a
//! valid reverse-topological order and `backward` is deterministic.
//! Parameters live outside the graph in a [`ParamStore`] and are copied in
//! on first use.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use thiserror::Error;

use crate::batch::{LevelIndex, OctreeBatch, SparseRows, UpsampleMode};
use crate::octree::EMPTY;
use crate::tensor::{matmul, Real, Tensor};

pub const BATCH_NORM_EPS: f64 = 1e-5;
/// Weight of the previous running statistic in a batch-norm update.
pub const BATCH_NORM_MOMENTUM: f64 = 0.9;
pub const ZERO_NORM_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("loss must be a 1x1 scalar, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("row {row} has near-zero norm and cannot be normalized")]
    ZeroVector { row: usize },
    #[error("octree level {level} is not valid for {op}")]
    InvalidLevel { op: &'static str, level: u32 },
}

fn mismatch(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    NormScale,
    NormShift,
}

impl ParamRole {
    pub fn is_norm(self) -> bool {
        matches!(self, ParamRole::NormScale | ParamRole::NormShift)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub role: ParamRole,
}

/// Non-trainable state such as batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    buffers: Vec<Buffer<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, role: ParamRole) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            role,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> BufferId {
        self.buffers.push(Buffer {
            name: name.into(),
            value,
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].value
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<T>] {
        &mut self.buffers
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    role: p.role,
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| Buffer {
                    name: b.name.clone(),
                    value: b.value.cast(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchNormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNormIds {
    pub fn register<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(
                format!("{name}.gamma"),
                Tensor::filled(1, channels, T::one()),
                ParamRole::NormScale,
            ),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(1, channels), ParamRole::NormShift),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(1, channels)),
            running_var: store.add_buffer(
                format!("{name}.running_var"),
                Tensor::filled(1, channels, T::one()),
            ),
        }
    }
}

pub enum NormStats<'a, T> {
    Train {
        running: Option<(&'a mut Tensor<T>, &'a mut Tensor<T>)>,
    },
    Eval {
        mean: &'a Tensor<T>,
        var: &'a Tensor<T>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Param,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMulConstNT {
        x: Var,
        m: Arc<Tensor<T>>,
    },
    SegmentMatMulConstNT {
        x: Var,
        offsets: Vec<usize>,
        mats: Vec<Arc<Tensor<T>>>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Concat(Vec<Var>),
    GatherRows {
        x: Var,
        index: Arc<Vec<u32>>,
    },
    L2Normalize {
        x: Var,
        inv_norms: Vec<T>,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    OctConv {
        x: Var,
        w: Var,
        b: Option<Var>,
        level: Arc<LevelIndex>,
        cols: Tensor<T>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample {
        x: Var,
        map: Arc<SparseRows>,
    },
    SegmentMean {
        x: Var,
        offsets: Vec<usize>,
    },
    Sum(Var),
    SoftmaxXent {
        logits: Var,
        probs: Tensor<T>,
        targets: Vec<u32>,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients from one backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<T: Real> Gradients<T> {
    pub fn of(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.param_vars.get(&id).and_then(|v| self.of(*v))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.param_vars.keys().copied().collect();
        ids.sort();
        ids
    }
}

fn add_into<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An input whose gradient is tracked.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.param_vars.insert(id, v);
        v
    }

    /// `x · w + b` with `w` of shape `in × out` and `b` of shape `1 × out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, AutodiffError> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.cols() != wv.rows() {
            return Err(mismatch("linear", format!("{:?} · {:?}", xv.shape(), wv.shape())));
        }
        let mut out = matmul(xv, false, wv, false);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != (1, out.cols()) {
                return Err(mismatch("linear", format!("bias {:?}", bv.shape())));
            }
            let bias = bv.data().to_vec();
            for r in 0..out.rows() {
                for (o, &bb) in out.row_mut(r).iter_mut().zip(&bias) {
                    *o += bb;
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(out, Op::Linear { x, w, b }, ng))
    }

    /// `x · mᵀ` with a constant `m`.
    pub fn matmul_const_nt(&mut self, x: Var, m: Arc<Tensor<T>>) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        if xv.cols() != m.cols() {
            return Err(mismatch("matmul_const_nt", format!("{:?} · {:?}ᵀ", xv.shape(), m.shape())));
        }
        let out = matmul(xv, false, &m, true);
        let ng = self.ng(x);
        Ok(self.push(out, Op::MatMulConstNT { x, m }, ng))
    }

    /// Row block `b` of `x` (rows `offsets[b]..offsets[b+1]`) is multiplied by
    /// `mats[b]ᵀ`. Every matrix must have the same row count.
    pub fn segment_matmul_const_nt(
        &mut self,
        x: Var,
        offsets: Vec<usize>,
        mats: Vec<Arc<Tensor<T>>>,
    ) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        if offsets.len() != mats.len() + 1 || offsets.last() != Some(&xv.rows()) || offsets[0] != 0 {
            return Err(mismatch("segment_matmul", "offsets do not cover the rows".into()));
        }
        let k = mats.first().map_or(0, |m| m.rows());
        if mats.iter().any(|m| m.rows() != k || m.cols() != xv.cols()) {
            return Err(mismatch("segment_matmul", "inconsistent class matrices".into()));
        }
        let mut out = Tensor::zeros(xv.rows(), k);
        for (b, m) in mats.iter().enumerate() {
            let (lo, hi) = (offsets[b], offsets[b + 1]);
            if hi == lo {
                continue;
            }
            let seg = Tensor::from_vec(hi - lo, xv.cols(), xv.data()[lo * xv.cols()..hi * xv.cols()].to_vec());
            let y = matmul(&seg, false, m, true);
            out.data_mut()[lo * k..hi * k].copy_from_slice(y.data());
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::SegmentMatMulConstNT { x, offsets, mats }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("add", format!("{:?} + {:?}", av.shape(), bv.shape())));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("mul", format!("{:?} * {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let mut out = self.value(x).clone();
        out.scale(c);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, c), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let out = Tensor::from_vec(xv.rows(), xv.cols(), data);
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let rows = parts.first().map(|&p| self.value(p).rows()).unwrap_or(0);
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(mismatch("concat", "row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[c0..c0 + src.len()].copy_from_slice(src);
                c0 += src.len();
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), ng))
    }

    pub fn gather_rows(&mut self, x: Var, index: Arc<Vec<u32>>) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        if let Some(&bad) = index.iter().find(|&&i| i as usize >= xv.rows()) {
            return Err(mismatch("gather_rows", format!("row {bad} of {}", xv.rows())));
        }
        let mut out = Tensor::zeros(index.len(), xv.cols());
        for (r, &i) in index.iter().enumerate() {
            out.row_mut(r).copy_from_slice(xv.row(i as usize));
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::GatherRows { x, index }, ng))
    }

    /// Divides every row by its Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut inv_norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let n = xv.row(r).iter().map(|&v| v * v).sum::<T>().sqrt();
            if n.as_f64() < ZERO_NORM_THRESHOLD {
                return Err(AutodiffError::ZeroVector { row: r });
            }
            let inv = T::one() / n;
            for v in out.row_mut(r) {
                *v *= inv;
            }
            inv_norms.push(inv);
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::L2Normalize { x, inv_norms }, ng))
    }

    /// Batch normalization with the affine parameters and statistics taken
    /// from `store`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        store: &mut ParamStore<T>,
        ids: &BatchNormIds,
        training: bool,
    ) -> Result<Var, AutodiffError> {
        let gamma = self.param(store, ids.gamma);
        let beta = self.param(store, ids.beta);
        let stats = if training {
            let [mean, var] = store
                .buffers
                .get_disjoint_mut([ids.running_mean.0, ids.running_var.0])
                .expect("distinct running statistics");
            NormStats::Train {
                running: Some((&mut mean.value, &mut var.value)),
            }
        } else {
            NormStats::Eval {
                mean: store.buffer(ids.running_mean),
                var: store.buffer(ids.running_var),
            }
        };
        self.batch_norm_with(x, gamma, beta, stats)
    }

    /// Batch normalization over rows. Training uses batch statistics and
    /// folds them into the running averages when given; evaluation uses the
    /// supplied averages.
    pub fn batch_norm_with(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_, T>,
    ) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        if self.value(gamma).shape() != (1, c) || self.value(beta).shape() != (1, c) {
            return Err(mismatch(
                "batch_norm",
                format!("{c} channels vs affine {:?}", self.value(gamma).shape()),
            ));
        }
        let eps = T::of(BATCH_NORM_EPS);
        let g = self.value(gamma).data().to_vec();
        let bta = self.value(beta).data().to_vec();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        match stats {
            NormStats::Train { running } => {
                if n == 0 {
                    return Err(mismatch("batch_norm", "empty batch".into()));
                }
                let nf = T::of(n as f64);
                let mut mean = vec![T::zero(); c];
                for r in 0..n {
                    for (m, &v) in mean.iter_mut().zip(xv.row(r)) {
                        *m += v;
                    }
                }
                for m in &mut mean {
                    *m /= nf;
                }
                let mut var = vec![T::zero(); c];
                for r in 0..n {
                    for ((s, &v), &m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                for s in &mut var {
                    *s /= nf;
                }
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let mut xhat = Tensor::zeros(n, c);
                let mut out = Tensor::zeros(n, c);
                for r in 0..n {
                    for j in 0..c {
                        let h = (xv.get(r, j) - mean[j]) * inv_std[j];
                        xhat.set(r, j, h);
                        out.set(r, j, g[j] * h + bta[j]);
                    }
                }
                if let Some((rm, rv)) = running {
                    if rm.len() != c || rv.len() != c {
                        return Err(mismatch("batch_norm", "running statistics width".into()));
                    }
                    let mom = T::of(BATCH_NORM_MOMENTUM);
                    let unbias = if n > 1 {
                        T::of(n as f64 / (n as f64 - 1.0))
                    } else {
                        T::one()
                    };
                    for (r, &m) in rm.data_mut().iter_mut().zip(&mean) {
                        *r = mom * *r + (T::one() - mom) * m;
                    }
                    for (r, &v) in rv.data_mut().iter_mut().zip(&var) {
                        *r = mom * *r + (T::one() - mom) * v * unbias;
                    }
                }
                Ok(self.push(
                    out,
                    Op::BatchNormTrain {
                        x,
                        gamma,
                        beta,
                        xhat,
                        inv_std,
                    },
                    ng,
                ))
            }
            NormStats::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(mismatch("batch_norm", "running statistics width".into()));
                }
                let mean = mean.data().to_vec();
                let inv_std: Vec<T> = var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let mut out = Tensor::zeros(n, c);
                for r in 0..n {
                    for j in 0..c {
                        out.set(r, j, g[j] * (xv.get(r, j) - mean[j]) * inv_std[j] + bta[j]);
                    }
                }
                Ok(self.push(
                    out,
                    Op::BatchNormEval {
                        x,
                        gamma,
                        beta,
                        mean,
                        inv_std,
                    },
                    ng,
                ))
            }
        }
    }

    /// 3×3×3 sparse convolution at `level`. `w` is `27·Cin × Cout` with
    /// neighbour slot as the outer index; empty neighbours read zeros.
    pub fn octree_conv(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        batch: &OctreeBatch,
        level: u32,
    ) -> Result<Var, AutodiffError> {
        let lvl = batch
            .levels
            .get(level as usize)
            .cloned()
            .ok_or(AutodiffError::InvalidLevel { op: "octree_conv", level })?;
        let xv = self.value(x);
        let cin = xv.cols();
        if xv.rows() != lvl.len {
            return Err(mismatch("octree_conv", format!("{} rows at a level of {} octants", xv.rows(), lvl.len)));
        }
        if self.value(w).rows() != 27 * cin {
            return Err(mismatch("octree_conv", format!("weights {:?} for {cin} input channels", self.value(w).shape())));
        }
        let mut cols = Tensor::zeros(lvl.len, 27 * cin);
        for (r, slots) in lvl.neighbors.iter().enumerate() {
            let dst = cols.row_mut(r);
            for (s, &n) in slots.iter().enumerate() {
                if n != EMPTY {
                    dst[s * cin..(s + 1) * cin].copy_from_slice(xv.row(n as usize));
                }
            }
        }
        let wv = self.value(w);
        let mut out = matmul(&cols, false, wv, false);
        if let Some(b) = b {
            let bias = self.value(b).data().to_vec();
            if bias.len() != out.cols() {
                return Err(mismatch("octree_conv", "bias width".into()));
            }
            for r in 0..out.rows() {
                for (o, &bb) in out.row_mut(r).iter_mut().zip(&bias) {
                    *o += bb;
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(
            out,
            Op::OctConv {
                x,
                w,
                b,
                level: lvl,
                cols,
            },
            ng,
        ))
    }

    /// Channel-wise max over the occupied children of each octant at
    /// `level - 1`. Ties resolve to the lowest child slot.
    pub fn octree_maxpool(&mut self, x: Var, batch: &OctreeBatch, level: u32) -> Result<Var, AutodiffError> {
        if level == 0 || level as usize >= batch.levels.len() {
            return Err(AutodiffError::InvalidLevel { op: "octree_maxpool", level });
        }
        let parent = batch.level(level - 1).clone();
        let xv = self.value(x);
        if xv.rows() != batch.level(level).len {
            return Err(mismatch("octree_maxpool", format!("{} rows at level {level}", xv.rows())));
        }
        let c = xv.cols();
        let mut out = Tensor::zeros(parent.len, c);
        let mut argmax = vec![EMPTY; parent.len * c];
        for (p, children) in parent.children.iter().enumerate() {
            for &ch in children.iter().filter(|&&ch| ch != EMPTY) {
                let row = xv.row(ch as usize);
                for j in 0..c {
                    let k = p * c + j;
                    if argmax[k] == EMPTY || row[j] > out.get(p, j) {
                        argmax[k] = ch;
                        out.set(p, j, row[j]);
                    }
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::MaxPool { x, argmax }, ng))
    }

    /// Maps features at `level` onto the occupied octants of `level + 1`.
    pub fn octree_upsample(
        &mut self,
        x: Var,
        batch: &OctreeBatch,
        level: u32,
        mode: UpsampleMode,
    ) -> Result<Var, AutodiffError> {
        let child = batch
            .levels
            .get(level as usize + 1)
            .ok_or(AutodiffError::InvalidLevel { op: "octree_upsample", level })?;
        let map = child
            .upsample_map(mode)
            .cloned()
            .ok_or(AutodiffError::InvalidLevel { op: "octree_upsample", level })?;
        let xv = self.value(x);
        if xv.rows() != batch.level(level).len {
            return Err(mismatch("octree_upsample", format!("{} rows at level {level}", xv.rows())));
        }
        let c = xv.cols();
        let mut out = Tensor::zeros(map.rows(), c);
        for r in 0..map.rows() {
            for &(p, wgt) in map.row(r) {
                let w = T::of(wgt);
                let src = xv.row(p as usize);
                for (o, &s) in out.row_mut(r).iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::Upsample { x, map }, ng))
    }

    /// Mean over each row block; `offsets` has one more entry than blocks.
    pub fn segment_mean(&mut self, x: Var, offsets: &[usize]) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        if offsets.last() != Some(&xv.rows()) {
            return Err(mismatch("segment_mean", "offsets do not cover the rows".into()));
        }
        let c = xv.cols();
        let mut out = Tensor::zeros(offsets.len() - 1, c);
        for b in 0..offsets.len() - 1 {
            let (lo, hi) = (offsets[b], offsets[b + 1]);
            if hi == lo {
                continue;
            }
            let inv = T::one() / T::of((hi - lo) as f64);
            for r in lo..hi {
                for (o, &v) in out.row_mut(b).iter_mut().zip(xv.row(r)) {
                    *o += v * inv;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            out,
            Op::SegmentMean {
                x,
                offsets: offsets.to_vec(),
            },
            ng,
        ))
    }

    /// Per-shape global average pooling at `level`.
    pub fn global_avg_pool(&mut self, x: Var, batch: &OctreeBatch, level: u32) -> Result<Var, AutodiffError> {
        let offsets = batch
            .levels
            .get(level as usize)
            .ok_or(AutodiffError::InvalidLevel { op: "global_avg_pool", level })?
            .shape_offsets
            .clone();
        self.segment_mean(x, &offsets)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// `Σ_r weights[r] · (−log softmax(logits_r)[targets[r]])`, computed with
    /// max-logit subtraction.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u32],
        weights: &[T],
    ) -> Result<Var, AutodiffError> {
        let lv = self.value(logits);
        let (n, k) = lv.shape();
        if targets.len() != n || weights.len() != n {
            return Err(mismatch("softmax_cross_entropy", format!("{n} rows, {} targets, {} weights", targets.len(), weights.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t as usize >= k) {
            return Err(mismatch("softmax_cross_entropy", format!("target {t} with {k} classes")));
        }
        let mut probs = Tensor::zeros(n, k);
        let mut loss = T::zero();
        for r in 0..n {
            let row = lv.row(r);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - m).exp();
                z += *p;
            }
            for p in probs.row_mut(r) {
                *p /= z;
            }
            let t = targets[r] as usize;
            loss += weights[r] * (z.ln() + m - row[t]);
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                probs,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            ng,
        ))
    }

    /// Hash of all piecewise-linear branch decisions (ReLU masks and max-pool
    /// winners). Finite-difference checks use it to detect kink crossings.
    pub fn activation_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(_) => {
                    for v in node.value.data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, AutodiffError> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(AutodiffError::NonScalarLoss {
                rows: lv.rows(),
                cols: lv.cols(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.backprop_node(i, &dy, &mut grads);
            }
            grads[i] = Some(dy);
        }
        Ok(Gradients {
            grads,
            param_vars: self.param_vars.clone(),
        })
    }

    fn backprop_node(&self, i: usize, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Linear { x, w, b } => {
                if self.ng(*x) {
                    add_into(grads, *x, matmul(dy, false, self.value(*w), true));
                }
                if self.ng(*w) {
                    add_into(grads, *w, matmul(self.value(*x), true, dy, false));
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        add_into(grads, *b, column_sums(dy));
                    }
                }
            }
            Op::MatMulConstNT { x, m } => {
                if self.ng(*x) {
                    add_into(grads, *x, matmul(dy, false, m, false));
                }
            }
            Op::SegmentMatMulConstNT { x, offsets, mats } => {
                if self.ng(*x) {
                    let d = self.value(*x).cols();
                    let k = dy.cols();
                    let mut dx = Tensor::zeros(dy.rows(), d);
                    for (b, m) in mats.iter().enumerate() {
                        let (lo, hi) = (offsets[b], offsets[b + 1]);
                        if hi == lo {
                            continue;
                        }
                        let seg = Tensor::from_vec(hi - lo, k, dy.data()[lo * k..hi * k].to_vec());
                        let g = matmul(&seg, false, m, false);
                        dx.data_mut()[lo * d..hi * d].copy_from_slice(g.data());
                    }
                    add_into(grads, *x, dx);
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    add_into(grads, *a, dy.clone());
                }
                if self.ng(*b) {
                    add_into(grads, *b, dy.clone());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let d = dy.data().iter().zip(bv.data()).map(|(&g, &v)| g * v).collect();
                    add_into(grads, *a, Tensor::from_vec(dy.rows(), dy.cols(), d));
                }
                if self.ng(*b) {
                    let d = dy.data().iter().zip(av.data()).map(|(&g, &v)| g * v).collect();
                    add_into(grads, *b, Tensor::from_vec(dy.rows(), dy.cols(), d));
                }
            }
            Op::Scale(x, c) => {
                let mut g = dy.clone();
                g.scale(*c);
                add_into(grads, *x, g);
            }
            Op::Relu(x) => {
                let d = dy
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
                    .collect();
                add_into(grads, *x, Tensor::from_vec(dy.rows(), dy.cols(), d));
            }
            Op::Concat(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.ng(p) {
                        let mut g = Tensor::zeros(dy.rows(), pc);
                        for r in 0..dy.rows() {
                            g.row_mut(r).copy_from_slice(&dy.row(r)[c0..c0 + pc]);
                        }
                        add_into(grads, p, g);
                    }
                    c0 += pc;
                }
            }
            Op::GatherRows { x, index } => {
                let xv = self.value(*x);
                let mut g = Tensor::zeros(xv.rows(), xv.cols());
                for (r, &src) in index.iter().enumerate() {
                    for (o, &d) in g.row_mut(src as usize).iter_mut().zip(dy.row(r)) {
                        *o += d;
                    }
                }
                add_into(grads, *x, g);
            }
            Op::L2Normalize { x, inv_norms } => {
                let y = &node.value;
                let mut g = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let dr = dy.row(r);
                    let dot: T = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yy), &dd) in g.row_mut(r).iter_mut().zip(yr).zip(dr) {
                        *o = (dd - yy * dot) * inv_norms[r];
                    }
                }
                add_into(grads, *x, g);
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c) = xhat.shape();
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for r in 0..n {
                    for j in 0..c {
                        sum_dy[j] += dy.get(r, j);
                        sum_dy_xhat[j] += dy.get(r, j) * xhat.get(r, j);
                    }
                }
                if self.ng(*gamma) {
                    add_into(grads, *gamma, Tensor::from_vec(1, c, sum_dy_xhat.clone()));
                }
                if self.ng(*beta) {
                    add_into(grads, *beta, Tensor::from_vec(1, c, sum_dy.clone()));
                }
                if self.ng(*x) {
                    let g = self.value(*gamma).data();
                    let nf = T::of(n as f64);
                    let mut dx = Tensor::zeros(n, c);
                    for r in 0..n {
                        for j in 0..c {
                            let v = g[j] * inv_std[j] / nf
                                * (nf * dy.get(r, j) - sum_dy[j] - xhat.get(r, j) * sum_dy_xhat[j]);
                            dx.set(r, j, v);
                        }
                    }
                    add_into(grads, *x, dx);
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let xv = self.value(*x);
                let (n, c) = xv.shape();
                let g = self.value(*gamma).data();
                if self.ng(*gamma) {
                    let mut dg = vec![T::zero(); c];
                    for r in 0..n {
                        for j in 0..c {
                            dg[j] += dy.get(r, j) * (xv.get(r, j) - mean[j]) * inv_std[j];
                        }
                    }
                    add_into(grads, *gamma, Tensor::from_vec(1, c, dg));
                }
                if self.ng(*beta) {
                    add_into(grads, *beta, column_sums(dy));
                }
                if self.ng(*x) {
                    let mut dx = Tensor::zeros(n, c);
                    for r in 0..n {
                        for j in 0..c {
                            dx.set(r, j, dy.get(r, j) * g[j] * inv_std[j]);
                        }
                    }
                    add_into(grads, *x, dx);
                }
            }
            Op::OctConv { x, w, b, level, cols } => {
                if self.ng(*w) {
                    add_into(grads, *w, matmul(cols, true, dy, false));
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        add_into(grads, *b, column_sums(dy));
                    }
                }
                if self.ng(*x) {
                    let xv = self.value(*x);
                    let cin = xv.cols();
                    let dcols = matmul(dy, false, self.value(*w), true);
                    let mut dx = Tensor::zeros(xv.rows(), cin);
                    for (r, slots) in level.neighbors.iter().enumerate() {
                        let src = dcols.row(r);
                        for (s, &nb) in slots.iter().enumerate() {
                            if nb != EMPTY {
                                for (o, &d) in dx.row_mut(nb as usize).iter_mut().zip(&src[s * cin..(s + 1) * cin]) {
                                    *o += d;
                                }
                            }
                        }
                    }
                    add_into(grads, *x, dx);
                }
            }
            Op::MaxPool { x, argmax } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = Tensor::zeros(xv.rows(), c);
                for (k, &src) in argmax.iter().enumerate() {
                    if src != EMPTY {
                        let (p, j) = (k / c, k % c);
                        let v = dx.get(src as usize, j) + dy.get(p, j);
                        dx.set(src as usize, j, v);
                    }
                }
                add_into(grads, *x, dx);
            }
            Op::Upsample { x, map } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..map.rows() {
                    for &(p, wgt) in map.row(r) {
                        let w = T::of(wgt);
                        for (o, &d) in dx.row_mut(p as usize).iter_mut().zip(dy.row(r)) {
                            *o += w * d;
                        }
                    }
                }
                add_into(grads, *x, dx);
            }
            Op::SegmentMean { x, offsets } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for b in 0..offsets.len() - 1 {
                    let (lo, hi) = (offsets[b], offsets[b + 1]);
                    if hi == lo {
                        continue;
                    }
                    let inv = T::one() / T::of((hi - lo) as f64);
                    for r in lo..hi {
                        for (o, &d) in dx.row_mut(r).iter_mut().zip(dy.row(b)) {
                            *o = d * inv;
                        }
                    }
                }
                add_into(grads, *x, dx);
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                add_into(grads, *x, Tensor::filled(xv.rows(), xv.cols(), dy.item()));
            }
            Op::SoftmaxXent {
                logits,
                probs,
                targets,
                weights,
            } => {
                let g0 = dy.item();
                let mut g = probs.clone();
                for r in 0..g.rows() {
                    let w = weights[r] * g0;
                    for v in g.row_mut(r) {
                        *v *= w;
                    }
                    let t = targets[r] as usize;
                    let cur = g.get(r, t);
                    g.set(r, t, cur - w);
                }
                add_into(grads, *logits, g);
            }
        }
    }
}

fn column_sums<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(1, t.cols());
    for r in 0..t.rows() {
        for (o, &v) in out.data_mut().iter_mut().zip(t.row(r)) {
            *o += v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{PointCloud, Vec3};
    use crate::gradcheck::random_octree;
    use crate::octree::{cell_center, Octree, SELF_SLOT};
    use proptest::prelude::*;

    fn batch_of(tree: &Octree) -> OctreeBatch {
        OctreeBatch::new(&[tree]).unwrap()
    }

    fn center_tap(cin: usize, cout: usize, block: &[f64]) -> Tensor<f64> {
        let mut w = Tensor::zeros(27 * cin, cout);
        for i in 0..cin {
            for o in 0..cout {
                w.set(SELF_SLOT * cin + i, o, block[i * cout + o]);
            }
        }
        w
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let tree = random_octree(3, 60, 3);
        let batch = batch_of(&tree);
        let n = batch.level(3).len;
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(n, 2, (0..2 * n).map(|v| v as f64 * 0.1).collect()));
        let w = g.constant(center_tap(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let y = g.octree_conv(x, w, None, &batch, 3).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn isolated_octant_sees_only_itself() {
        let p = cell_center(2, [1, 1, 1]);
        let cloud = PointCloud::with_normals(vec![p], vec![Vec3::z()]).unwrap();
        let tree = Octree::with_signal(&cloud, 2).unwrap();
        let batch = batch_of(&tree);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(1, 2, vec![2.0, -1.0]));
        let mut w = Tensor::filled(54, 3, 9.0);
        for (i, v) in [1.0, 2.0, 3.0, 4.0, 5.0, 6.0].into_iter().enumerate() {
            w.set(SELF_SLOT * 2 + i / 3, i % 3, v);
        }
        let w = g.constant(w);
        let b = g.constant(Tensor::from_vec(1, 3, vec![0.5, 0.25, 0.0]));
        let y = g.octree_conv(x, w, Some(b), &batch, 2).unwrap();
        // [2, -1] · [[1,2,3],[4,5,6]] + b
        assert_eq!(g.value(y).data(), &[2.0 - 4.0 + 0.5, 4.0 - 5.0 + 0.25, 6.0 - 6.0]);
    }

    #[test]
    fn conv_rejects_misaligned_rows() {
        let tree = random_octree(3, 30, 2);
        let batch = batch_of(&tree);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(batch.level(2).len + 1, 1));
        let w = g.constant(Tensor::zeros(27, 1));
        assert!(matches!(
            g.octree_conv(x, w, None, &batch, 2),
            Err(AutodiffError::ShapeMismatch { .. })
        ));
    }

    fn full_parent() -> (Octree, OctreeBatch) {
        // All eight children of one depth-1 octant occupied.
        let mut pts = Vec::new();
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    pts.push(cell_center(2, [x, y, z]));
                }
            }
        }
        let n = pts.len();
        let tree = Octree::with_signal(&PointCloud::with_normals(pts, vec![Vec3::z(); n]).unwrap(), 2).unwrap();
        let batch = batch_of(&tree);
        (tree, batch)
    }

    #[test]
    fn maxpool_takes_channel_max() {
        let (tree, batch) = full_parent();
        assert_eq!(tree.level(2).len(), 8);
        let vals = [1.0, 3.0, 2.0, 0.0, -1.0, 5.0, 4.0, 2.0];
        let mut g = Graph::<f64>::new();
        // Rows follow child slots because keys are sorted.
        let x = g.variable(Tensor::from_vec(8, 1, vals.to_vec()));
        let y = g.octree_maxpool(x, &batch, 2).unwrap();
        assert_eq!(g.value(y).data(), &[5.0]);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        let gx = grads.of(x).unwrap().data();
        assert_eq!(gx, &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_ties_route_to_lowest_child() {
        let (_, batch) = full_parent();
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::from_vec(8, 1, vec![0.0, 7.0, 1.0, 7.0, 7.0, 0.0, 0.0, 0.0]));
        let y = g.octree_maxpool(x, &batch, 2).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.of(x).unwrap().data()[1], 1.0);
        assert_eq!(grads.of(x).unwrap().sum(), 1.0);
    }

    #[test]
    fn single_child_parent_copies_child() {
        let p = cell_center(2, [3, 0, 2]);
        let tree = Octree::with_signal(&PointCloud::with_normals(vec![p], vec![Vec3::z()]).unwrap(), 2).unwrap();
        let batch = batch_of(&tree);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(1, 3, vec![-2.0, 0.5, 1.0]));
        let y = g.octree_maxpool(x, &batch, 2).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn maxpool_requires_positive_level() {
        let (_, batch) = full_parent();
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(1, 1));
        assert!(g.octree_maxpool(x, &batch, 0).is_err());
    }

    #[test]
    fn nearest_upsample_copies_parent() {
        let tree = random_octree(5, 80, 3);
        let batch = batch_of(&tree);
        let np = batch.level(2).len;
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(np, 2, (0..2 * np).map(|v| v as f64).collect()));
        let y = g.octree_upsample(x, &batch, 2, UpsampleMode::Nearest).unwrap();
        let lvl = batch.level(3);
        for r in 0..lvl.len {
            assert_eq!(g.value(y).row(r), g.value(x).row(lvl.parent[r] as usize));
        }
    }

    #[test]
    fn trilinear_of_constant_field_is_constant_with_full_support() {
        let mut pts = Vec::new();
        for z in 4..12 {
            for y in 4..12 {
                for x in 4..12 {
                    pts.push(cell_center(4, [x, y, z]));
                }
            }
        }
        let n = pts.len();
        let tree = Octree::with_signal(&PointCloud::with_normals(pts, vec![Vec3::z(); n]).unwrap(), 4).unwrap();
        let batch = batch_of(&tree);
        let np = batch.level(3).len;
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::filled(np, 2, 1.75));
        let y = g.octree_upsample(x, &batch, 3, UpsampleMode::Trilinear).unwrap();
        let mut interior = 0;
        for r in 0..batch.level(4).len {
            if tree.cell(4, r).iter().all(|&c| (6..10).contains(&c)) {
                interior += 1;
                for &v in g.value(y).row(r) {
                    assert!((v - 1.75).abs() < 1e-12);
                }
            }
        }
        assert!(interior > 0);
    }

    #[test]
    fn l2_normalize_and_relu_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(1, 2, vec![3.0, 4.0]));
        let y = g.l2_normalize(x).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        let z = g.constant(Tensor::from_vec(1, 2, vec![-1.0, 2.0]));
        let r = g.relu(z);
        assert_eq!(g.value(r).data(), &[0.0, 2.0]);
        let zero = g.constant(Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1e-13]));
        assert_eq!(g.l2_normalize(zero).unwrap_err(), AutodiffError::ZeroVector { row: 1 });
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut g = Graph::<f64>::new();
        let data = vec![0.5, -1.5, 2.0, 3.0];
        let x = g.variable(Tensor::from_vec(2, 2, data.clone()));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.of(x).unwrap().data(), &[1.0; 4]);

        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::from_vec(2, 2, data.clone()));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let half = g.scale(s, 0.5);
        let grads = g.backward(half).unwrap();
        assert_eq!(grads.of(x).unwrap().data(), data.as_slice());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::zeros(2, 3));
        assert_eq!(g.backward(x).unwrap_err(), AutodiffError::NonScalarLoss { rows: 2, cols: 3 });
    }

    #[test]
    fn batchnorm_train_normalizes_and_updates_running_stats() {
        let mut store = ParamStore::<f64>::new();
        let ids = BatchNormIds::register(&mut store, "bn", 1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(4, 1, vec![1.0, 2.0, 3.0, 4.0]));
        let y = g.batch_norm(x, &mut store, &ids, true).unwrap();
        let mean: f64 = g.value(y).data().iter().sum::<f64>() / 4.0;
        let var: f64 = g.value(y).data().iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.25 / (1.25 + BATCH_NORM_EPS)).abs() < 1e-9);
        assert!((store.buffer(ids.running_mean).item() - 0.1 * 2.5).abs() < 1e-12);
        // Unbiased batch variance is 5/3.
        assert!((store.buffer(ids.running_var).item() - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);

        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(1, 1, vec![0.25]));
        let y = g.batch_norm(x, &mut store, &ids, false).unwrap();
        let rm = store.buffer(ids.running_mean).item();
        let rv = store.buffer(ids.running_var).item();
        assert!((g.value(y).item() - (0.25 - rm) / (rv + BATCH_NORM_EPS).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn parameters_are_shared_within_a_graph() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_vec(1, 1, vec![2.0]), ParamRole::Weight);
        let mut g = Graph::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        assert_eq!(a, b);
        let p = g.mul(a, b).unwrap();
        let grads = g.backward(p).unwrap();
        assert_eq!(grads.param(id).unwrap().item(), 4.0);
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let tree = random_octree(11, 120, 4);
        let batch = batch_of(&tree);
        let run = || {
            let n = batch.level(4).len;
            let mut g = Graph::<f32>::new();
            let x = g.variable(Tensor::from_vec(n, 4, (0..4 * n).map(|v| ((v * 37 % 11) as f32) - 5.0).collect()));
            let w = g.variable(Tensor::from_vec(108, 3, (0..324).map(|v| ((v % 7) as f32 - 3.0) * 0.1).collect()));
            let y = g.octree_conv(x, w, None, &batch, 4).unwrap();
            let y = g.relu(y);
            let y = g.octree_maxpool(y, &batch, 4).unwrap();
            let y = g.octree_upsample(y, &batch, 3, UpsampleMode::Trilinear).unwrap();
            let s = g.sum(y);
            let grads = g.backward(s).unwrap();
            (grads.of(x).unwrap().clone(), grads.of(w).unwrap().clone())
        };
        assert_eq!(run(), run());
    }

    fn linear_check(mode: UpsampleMode, a: &[f64], b: &[f64], k: f64) {
        let tree = random_octree(9, 50, 3);
        let batch = batch_of(&tree);
        let np = batch.level(2).len;
        let up = |data: Vec<f64>| {
            let mut g = Graph::<f64>::new();
            let x = g.constant(Tensor::from_vec(np, 1, data));
            let y = g.octree_upsample(x, &batch, 2, mode).unwrap();
            g.value(y).data().to_vec()
        };
        let a: Vec<f64> = a.iter().cycle().take(np).copied().collect();
        let b: Vec<f64> = b.iter().cycle().take(np).copied().collect();
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + k * y).collect();
        let (ua, ub, us) = (up(a), up(b), up(sum));
        for i in 0..us.len() {
            assert!((us[i] - (ua[i] + k * ub[i])).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn upsample_is_linear(
            a in proptest::collection::vec(-5.0f64..5.0, 1..8),
            b in proptest::collection::vec(-5.0f64..5.0, 1..8),
            k in -3.0f64..3.0,
        ) {
            linear_check(UpsampleMode::Nearest, &a, &b, k);
            linear_check(UpsampleMode::Trilinear, &a, &b, k);
        }

        #[test]
        fn linear_without_bias_and_concat_are_linear(
            a in proptest::collection::vec(-5.0f64..5.0, 6),
            b in proptest::collection::vec(-5.0f64..5.0, 6),
            k in -3.0f64..3.0,
        ) {
            let w = Tensor::from_vec(3, 2, vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5]);
            let f = |d: &[f64]| {
                let mut g = Graph::<f64>::new();
                let x = g.constant(Tensor::from_vec(2, 3, d.to_vec()));
                let wv = g.constant(w.clone());
                let y = g.linear(x, wv, None).unwrap();
                let c = g.concat(&[y, x]).unwrap();
                let s = g.add(c, c).unwrap();
                g.value(s).data().to_vec()
            };
            let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + k * y).collect();
            let (fa, fb, fm) = (f(&a), f(&b), f(&mix));
            for i in 0..fm.len() {
                prop_assert!((fm[i] - (fa[i] + k * fb[i])).abs() < 1e-12);
            }
        }
    }
}
