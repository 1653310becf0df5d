//! Multiresolution instance discrimination.
//!
//! Every training shape is its own class for the shape-level classifier, and
//! every patch of a shape is a class for that shape's point-level
//! classifier. Classifier weights are memory banks of unit rows: constants
//! inside the graph, moved towards the latest features by a momentum blend
//! after each optimizer step.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Var, ZERO_NORM_THRESHOLD};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_BANK_MOMENTUM: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MidError {
    #[error("class index {index} out of range for {len} classes")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("label mismatch: {0}")]
    LabelMismatch(String),
    #[error("blended bank row has near-zero norm; previous row kept")]
    ZeroVector,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// `rows × dim` matrix of i.i.d. uniformly distributed unit rows.
pub fn random_unit_rows<T: Real>(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let mut data = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                data.extend(v.iter().map(|x| T::of(x / n)));
                break;
            }
        }
    }
    Tensor::from_vec(rows, dim, data)
}

/// `row ← normalize((1 − λ)·row + λ·w)`. The row is left untouched when the
/// blend is (numerically) zero.
pub fn bank_update<T: Real>(row: &mut [T], w: &[T], momentum: f64) -> Result<(), MidError> {
    let lam = T::of(momentum);
    let blend: Vec<T> = row
        .iter()
        .zip(w)
        .map(|(&a, &b)| (T::one() - lam) * a + lam * b)
        .collect();
    let n = blend.iter().map(|&v| v * v).sum::<T>().sqrt();
    if n.as_f64() < ZERO_NORM_THRESHOLD {
        return Err(MidError::ZeroVector);
    }
    for (r, b) in row.iter_mut().zip(blend) {
        *r = b / n;
    }
    Ok(())
}

/// Shape-instance classifier weights, one unit row per training shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeBank<T> {
    pub rows: Arc<Tensor<T>>,
    pub momentum: f64,
    pub temperature: f64,
}

/// Patch classifiers: `K` unit rows for every training shape.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBank<T> {
    pub shapes: Vec<Arc<Tensor<T>>>,
    pub momentum: f64,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MidBanks<T> {
    pub shape: ShapeBank<T>,
    pub patch: PatchBank<T>,
}

impl<T: Real> MidBanks<T> {
    pub fn new(shapes: usize, patches: usize, shape_dim: usize, point_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = Arc::new(random_unit_rows(shapes, shape_dim, &mut rng));
        let patch = (0..shapes)
            .map(|_| Arc::new(random_unit_rows(patches, point_dim, &mut rng)))
            .collect();
        Self {
            shape: ShapeBank {
                rows: shape,
                momentum: DEFAULT_BANK_MOMENTUM,
                temperature: DEFAULT_TEMPERATURE,
            },
            patch: PatchBank {
                shapes: patch,
                momentum: DEFAULT_BANK_MOMENTUM,
                temperature: DEFAULT_TEMPERATURE,
            },
        }
    }

    pub fn shape_count(&self) -> usize {
        self.shape.rows.rows()
    }

    pub fn patches_per_shape(&self) -> usize {
        self.patch.shapes.first().map_or(0, |t| t.rows())
    }
}

/// Everything the MID loss needs to know about one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MidTargets {
    /// Dataset index of each shape in the batch.
    pub shape_index: Vec<usize>,
    /// Row range of each shape's points: `point_offsets[b]..point_offsets[b+1]`.
    pub point_offsets: Vec<usize>,
    /// Patch label of every point row.
    pub patch_labels: Vec<u32>,
}

impl MidTargets {
    fn validate(&self, n_shapes: usize, patches: usize, shape_rows: usize, point_rows: usize) -> Result<(), MidError> {
        let b = self.shape_index.len();
        if shape_rows != b || self.point_offsets.len() != b + 1 {
            return Err(MidError::LabelMismatch(format!(
                "{shape_rows} shape rows, {b} indices, {} offsets",
                self.point_offsets.len()
            )));
        }
        if self.point_offsets[0] != 0
            || self.point_offsets[b] != point_rows
            || self.patch_labels.len() != point_rows
            || self.point_offsets.windows(2).any(|w| w[1] < w[0])
        {
            return Err(MidError::LabelMismatch(format!(
                "{point_rows} point rows, {} labels",
                self.patch_labels.len()
            )));
        }
        if let Some(&i) = self.shape_index.iter().find(|&&i| i >= n_shapes) {
            return Err(MidError::IndexOutOfRange { index: i, len: n_shapes });
        }
        if let Some(&c) = self.patch_labels.iter().find(|&&c| c as usize >= patches) {
            return Err(MidError::IndexOutOfRange {
                index: c as usize,
                len: patches,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MidLoss {
    /// Batch mean of `L_s + mean_j L_p`.
    pub total: Var,
    pub shape_term: Var,
    pub patch_term: Var,
    pub shape_logits: Var,
    pub patch_logits: Var,
}

/// Weighted shape-instance cross-entropy `Σ_b w_b · L_s(s_b)`.
pub fn shape_loss<T: Real>(
    g: &mut Graph<T>,
    shape: Var,
    bank: &ShapeBank<T>,
    classes: &[usize],
    weights: &[T],
) -> Result<(Var, Var), MidError> {
    let n = bank.rows.rows();
    if let Some(&i) = classes.iter().find(|&&i| i >= n) {
        return Err(MidError::IndexOutOfRange { index: i, len: n });
    }
    let raw = g.matmul_const_nt(shape, bank.rows.clone())?;
    let logits = g.scale(raw, T::of(1.0 / bank.temperature));
    let targets: Vec<u32> = classes.iter().map(|&i| i as u32).collect();
    Ok((g.softmax_cross_entropy(logits, &targets, weights)?, logits))
}

/// Weighted patch-instance cross-entropy; point block `b` is classified by
/// `banks[b]` only.
pub fn patch_loss<T: Real>(
    g: &mut Graph<T>,
    point: Var,
    banks: Vec<Arc<Tensor<T>>>,
    temperature: f64,
    point_offsets: &[usize],
    labels: &[u32],
    weights: &[T],
) -> Result<(Var, Var), MidError> {
    let k = banks.first().map_or(0, |t| t.rows());
    if let Some(&c) = labels.iter().find(|&&c| c as usize >= k) {
        return Err(MidError::IndexOutOfRange { index: c as usize, len: k });
    }
    let raw = g.segment_matmul_const_nt(point, point_offsets.to_vec(), banks)?;
    let logits = g.scale(raw, T::of(1.0 / temperature));
    Ok((g.softmax_cross_entropy(logits, labels, weights)?, logits))
}

/// `(1/B) Σ_i [L_s(s_i) + (1/M_i) Σ_j L_p(v_ij)]` over the batch.
pub fn mid_loss<T: Real>(
    g: &mut Graph<T>,
    shape: Var,
    point: Var,
    banks: &MidBanks<T>,
    targets: &MidTargets,
) -> Result<MidLoss, MidError> {
    targets.validate(
        banks.shape_count(),
        banks.patches_per_shape(),
        g.value(shape).rows(),
        g.value(point).rows(),
    )?;
    let b = targets.shape_index.len();
    let inv_b = T::of(1.0 / b as f64);
    let (shape_term, shape_logits) = shape_loss(g, shape, &banks.shape, &targets.shape_index, &vec![inv_b; b])?;

    let mut weights = Vec::with_capacity(targets.patch_labels.len());
    for w in targets.point_offsets.windows(2) {
        let m = w[1] - w[0];
        weights.extend(std::iter::repeat_n(inv_b / T::of(m.max(1) as f64), m));
    }
    let mats = targets
        .shape_index
        .iter()
        .map(|&i| banks.patch.shapes[i].clone())
        .collect();
    let (patch_term, patch_logits) = patch_loss(
        g,
        point,
        mats,
        banks.patch.temperature,
        &targets.point_offsets,
        &targets.patch_labels,
        &weights,
    )?;
    let total = g.add(shape_term, patch_term)?;
    Ok(MidLoss {
        total,
        shape_term,
        patch_term,
        shape_logits,
        patch_logits,
    })
}

/// Fraction of rows whose argmax equals the target.
pub fn accuracy_from_logits<T: Real>(logits: &Tensor<T>, targets: impl IntoIterator<Item = usize>) -> f64 {
    let mut hits = 0usize;
    let mut n = 0usize;
    for (r, t) in targets.into_iter().enumerate() {
        n += 1;
        if logits.argmax_row(r) == t {
            hits += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

/// Counts of bank rows skipped because their blend vanished.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BankUpdateStats {
    pub shape_rows: usize,
    pub patch_rows: usize,
    pub skipped: usize,
}

/// Momentum update for every shape in the batch and every patch present in
/// it. `shape_feats` and `point_feats` are the batch's forward features.
pub fn update_banks<T: Real>(
    banks: &mut MidBanks<T>,
    shape_feats: &Tensor<T>,
    point_feats: &Tensor<T>,
    targets: &MidTargets,
) -> Result<BankUpdateStats, MidError> {
    targets.validate(
        banks.shape_count(),
        banks.patches_per_shape(),
        shape_feats.rows(),
        point_feats.rows(),
    )?;
    let mut stats = BankUpdateStats::default();
    let shape_rows = Arc::make_mut(&mut banks.shape.rows);
    for (b, &i) in targets.shape_index.iter().enumerate() {
        match bank_update(shape_rows.row_mut(i), shape_feats.row(b), banks.shape.momentum) {
            Ok(()) => stats.shape_rows += 1,
            Err(MidError::ZeroVector) => stats.skipped += 1,
            Err(e) => return Err(e),
        }
    }
    let k = banks.patches_per_shape();
    let d = point_feats.cols();
    for (b, &i) in targets.shape_index.iter().enumerate() {
        let mut sums = vec![T::zero(); k * d];
        let mut counts = vec![0usize; k];
        for r in targets.point_offsets[b]..targets.point_offsets[b + 1] {
            let c = targets.patch_labels[r] as usize;
            counts[c] += 1;
            for (s, &v) in sums[c * d..(c + 1) * d].iter_mut().zip(point_feats.row(r)) {
                *s += v;
            }
        }
        let bank = Arc::make_mut(&mut banks.patch.shapes[i]);
        for c in (0..k).filter(|&c| counts[c] > 0) {
            let mean = &mut sums[c * d..(c + 1) * d];
            let n = mean.iter().map(|&v| v * v).sum::<T>().sqrt();
            if n.as_f64() < ZERO_NORM_THRESHOLD {
                stats.skipped += 1;
                continue;
            }
            for v in mean.iter_mut() {
                *v /= n;
            }
            match bank_update(bank.row_mut(c), mean, banks.patch.momentum) {
                Ok(()) => stats.patch_rows += 1,
                Err(MidError::ZeroVector) => stats.skipped += 1,
                Err(e) => return Err(e),
            }
        }
    }
    Ok(stats)
}
