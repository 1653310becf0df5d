//! Task back-ends on top of the backbone: a linear classifier on shape
//! features, a two-layer segmentation head on point features, the three
//! training schemes, and the accuracy / mIoU metrics.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Var};
use crate::geometry::{estimate_normals_pca, normalize_unit_sphere, GeometryError, PointCloud, DEFAULT_PCA_NEIGHBORS};
use crate::io::{io_err, write_atomic, IoError};
use crate::network::{Backbone, NetError};
use crate::seed::{derive, rng_for};
use crate::tensor::Tensor;
use crate::trainer::{lr_at, octree_batch, sgd_step, sgd_update, MomentumState, TrainConfig, TrainError};

const TAG_HEAD: u64 = 11;
const TAG_ORDER: u64 = 12;

#[derive(Debug, Error)]
pub enum DownstreamError {
    #[error("invalid head config: {0}")]
    InvalidConfig(String),
    #[error("empty input")]
    EmptyInput,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("label {label} out of range for {count} classes")]
    LabelRange { label: usize, count: usize },
    #[error("shape {0} has no part labels")]
    MissingPartLabels(usize),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("report {path}: {message}")]
    Report { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    #[serde(alias = "cls")]
    Classification,
    #[serde(alias = "seg")]
    Segmentation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Frozen backbone in eval mode; only the head trains.
    #[default]
    Fix,
    /// Pretrained backbone and head both train.
    Finetune,
    /// Random backbone and head both train at the head rate.
    Nopre,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub task: Task,
    pub scheme: Scheme,
    /// Classes for classification, part labels for segmentation.
    pub classes: usize,
    /// Hidden width of the segmentation head.
    pub hidden: usize,
    pub head_lr: f64,
    pub backbone_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fractions of `epochs` at which both rates drop tenfold.
    pub milestones: Vec<f64>,
    pub seed: u64,
    /// Score a part missing from both prediction and ground truth as IoU 1.
    pub absent_part_iou_one: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            task: Task::Classification,
            scheme: Scheme::Fix,
            classes: 2,
            hidden: 256,
            head_lr: 0.1,
            backbone_lr: 0.01,
            epochs: 240,
            batch_size: 32,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: vec![0.5, 0.75],
            seed: 0,
            absent_part_iou_one: true,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<(), DownstreamError> {
        let bad = |m: &str| Err(DownstreamError::InvalidConfig(m.into()));
        if self.classes < 2 {
            return bad("class count must be at least 2");
        }
        if self.task == Task::Segmentation && self.hidden == 0 {
            return bad("hidden width must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive");
        }
        if !(self.head_lr > 0.0 && self.backbone_lr >= 0.0) {
            return bad("learning rates must be positive");
        }
        Ok(())
    }

    fn schedule(&self, lr: f64) -> TrainConfig {
        TrainConfig {
            lr,
            epochs: self.epochs,
            milestones: self.milestones.clone(),
            fractional_milestones: true,
            ..TrainConfig::default()
        }
    }
}

/// One shape with its class (classification) or category (segmentation).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledShape {
    pub cloud: PointCloud,
    pub label: usize,
}

impl LabeledShape {
    /// Normalizes into the unit sphere and estimates missing normals.
    pub fn prepare(cloud: &PointCloud, label: usize) -> Result<Self, DownstreamError> {
        let mut c = normalize_unit_sphere(cloud)?;
        if !c.has_normals() {
            c = estimate_normals_pca(&c, DEFAULT_PCA_NEIGHBORS.min(c.len()))?;
        }
        c.point_ids = (0..c.len() as u32).collect();
        Ok(Self { cloud: c, label })
    }
}

/// Fully-connected back-end: `[w, b]` per layer, ReLU between layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub layers: Vec<(Tensor<f32>, Tensor<f32>)>,
}

impl Head {
    pub fn new(task: Task, in_dim: usize, hidden: usize, classes: usize, seed: u64) -> Self {
        let mut rng = rng_for(&[seed, TAG_HEAD]);
        let dims = match task {
            Task::Classification => vec![in_dim, classes],
            Task::Segmentation => vec![in_dim, hidden, classes],
        };
        let layers = dims
            .windows(2)
            .map(|d| {
                let normal = Normal::new(0.0, (2.0 / d[0] as f64).sqrt()).expect("positive std");
                let w: Vec<f64> = (0..d[0] * d[1]).map(|_| normal.sample(&mut rng)).collect();
                (Tensor::from_f64(d[0], d[1], &w), Tensor::zeros(1, d[1]))
            })
            .collect();
        Self { layers }
    }

    fn forward(&self, g: &mut Graph<f32>, x: Var) -> Result<(Var, Vec<Var>), AutodiffError> {
        let mut vars = Vec::new();
        let mut h = x;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.relu(h);
            }
            let (wv, bv) = (g.variable(w.clone()), g.variable(b.clone()));
            vars.extend([wv, bv]);
            h = g.linear(h, wv, Some(bv))?;
        }
        Ok((h, vars))
    }

    pub fn logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>, AutodiffError> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (out, _) = self.forward(&mut g, xv)?;
        Ok(g.value(out).clone())
    }
}

/// A backbone with its trained head.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub backbone: Backbone<f32>,
    pub head: Head,
    pub config: HeadConfig,
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
}

fn check_labels(shapes: &[LabeledShape], cfg: &HeadConfig) -> Result<(), DownstreamError> {
    if shapes.is_empty() {
        return Err(DownstreamError::EmptyInput);
    }
    for (i, s) in shapes.iter().enumerate() {
        match cfg.task {
            Task::Classification => {
                if s.label >= cfg.classes {
                    return Err(DownstreamError::LabelRange {
                        label: s.label,
                        count: cfg.classes,
                    });
                }
            }
            Task::Segmentation => {
                let parts = s.cloud.part_labels.as_ref().ok_or(DownstreamError::MissingPartLabels(i))?;
                if let Some(&p) = parts.iter().find(|&&p| p as usize >= cfg.classes) {
                    return Err(DownstreamError::LabelRange {
                        label: p as usize,
                        count: cfg.classes,
                    });
                }
            }
        }
    }
    Ok(())
}

/// Target rows and per-row loss weights for a batch: each shape contributes
/// equally, and in segmentation each of its points `1 / M_i` of that.
fn batch_targets(shapes: &[&LabeledShape], task: Task) -> (Vec<u32>, Vec<f32>) {
    let b = shapes.len() as f32;
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    for s in shapes {
        match task {
            Task::Classification => {
                targets.push(s.label as u32);
                weights.push(1.0 / b);
            }
            Task::Segmentation => {
                let parts = s.cloud.part_labels.as_ref().expect("checked");
                targets.extend(parts);
                weights.extend(std::iter::repeat_n(1.0 / (b * parts.len() as f32), parts.len()));
            }
        }
    }
    (targets, weights)
}

/// Eval-mode backbone features for each shape: one row for classification,
/// one row per point for segmentation.
pub fn extract_features(
    backbone: &mut Backbone<f32>,
    shapes: &[LabeledShape],
    task: Task,
    batch_size: usize,
) -> Result<Vec<Tensor<f32>>, DownstreamError> {
    let depth = backbone.config().depth;
    let mut out = Vec::with_capacity(shapes.len());
    for chunk in shapes.chunks(batch_size.max(1)) {
        let clouds: Vec<PointCloud> = chunk.iter().map(|s| s.cloud.clone()).collect();
        let batch = octree_batch(&clouds, depth)?;
        let (shape, point) = backbone.embed(&batch)?;
        for i in 0..chunk.len() {
            let rows: Vec<usize> = match task {
                Task::Classification => vec![i],
                Task::Segmentation => (batch.point_offsets[i]..batch.point_offsets[i + 1]).collect(),
            };
            let src = if task == Task::Classification { &shape } else { &point };
            let mut t = Tensor::zeros(rows.len(), src.cols());
            for (r, &row) in rows.iter().enumerate() {
                t.row_mut(r).copy_from_slice(src.row(row));
            }
            out.push(t);
        }
    }
    Ok(out)
}

fn stack(parts: &[&Tensor<f32>]) -> Tensor<f32> {
    let cols = parts[0].cols();
    let mut data = Vec::new();
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::from_vec(data.len() / cols, cols, data)
}

/// Trains a head (and, unless the scheme is `fix`, the backbone) with
/// softmax cross-entropy. For `nopre` the caller supplies a freshly
/// initialized backbone; no checkpoint content is consulted here.
pub fn train_head(
    mut backbone: Backbone<f32>,
    shapes: &[LabeledShape],
    cfg: &HeadConfig,
) -> Result<TrainedModel, DownstreamError> {
    cfg.validate()?;
    check_labels(shapes, cfg)?;
    let in_dim = match cfg.task {
        Task::Classification => backbone.config().shape_dim,
        Task::Segmentation => backbone.config().point_dim,
    };
    let mut head = Head::new(cfg.task, in_dim, cfg.hidden, cfg.classes, cfg.seed);
    let mut head_vel: Vec<Tensor<f32>> = head
        .layers
        .iter()
        .flat_map(|(w, b)| [Tensor::zeros(w.rows(), w.cols()), Tensor::zeros(1, b.cols())])
        .collect();
    let mut net_vel = MomentumState::zeros_like(&backbone.store);
    let cached = match cfg.scheme {
        Scheme::Fix => Some(extract_features(&mut backbone, shapes, cfg.task, cfg.batch_size)?),
        _ => None,
    };
    let head_sched = cfg.schedule(cfg.head_lr);
    let net_lr = match cfg.scheme {
        Scheme::Finetune => cfg.backbone_lr,
        _ => cfg.head_lr,
    };
    let net_sched = cfg.schedule(net_lr);
    let depth = backbone.config().depth;
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..shapes.len()).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng_for(&[cfg.seed, TAG_ORDER, epoch as u64]));
        let (mut total, mut batches) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let picked: Vec<&LabeledShape> = chunk.iter().map(|&i| &shapes[i]).collect();
            let (targets, weights) = batch_targets(&picked, cfg.task);
            let mut g = Graph::new();
            let x = match &cached {
                Some(feats) => g.constant(stack(&chunk.iter().map(|&i| &feats[i]).collect::<Vec<_>>())),
                None => {
                    let clouds: Vec<PointCloud> = picked.iter().map(|s| s.cloud.clone()).collect();
                    let batch = octree_batch(&clouds, depth)?;
                    let f = backbone.forward(&mut g, &batch, true)?;
                    match cfg.task {
                        Task::Classification => f.shape,
                        Task::Segmentation => f.point,
                    }
                }
            };
            let (logits, vars) = head.forward(&mut g, x)?;
            let loss = g.softmax_cross_entropy(logits, &targets, &weights)?;
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    step: epoch,
                    detail: format!("head training, shapes {chunk:?}"),
                }
                .into());
            }
            total += value;
            batches += 1;
            let grads = g.backward(loss)?;
            let lr = lr_at(epoch, &head_sched);
            let params = head.layers.iter_mut().flat_map(|(w, b)| [w, b]);
            for ((p, v), var) in params.zip(head_vel.iter_mut()).zip(&vars) {
                let grad = grads.of(*var).expect("head gradient");
                sgd_update(p.data_mut(), grad.data(), v.data_mut(), lr, cfg.momentum, cfg.weight_decay);
            }
            if cached.is_none() {
                sgd_step(
                    &mut backbone.store,
                    &grads,
                    &mut net_vel,
                    lr_at(epoch, &net_sched),
                    cfg.momentum,
                    cfg.weight_decay,
                )?;
            }
        }
        losses.push(total / batches as f64);
    }
    Ok(TrainedModel {
        backbone,
        head,
        config: cfg.clone(),
        losses,
    })
}

/// Per-shape predictions: one class, or one part label per point.
pub fn predict(model: &mut TrainedModel, shapes: &[LabeledShape]) -> Result<Vec<Vec<usize>>, DownstreamError> {
    let feats = extract_features(&mut model.backbone, shapes, model.config.task, model.config.batch_size)?;
    feats
        .iter()
        .map(|f| {
            let logits = model.head.logits(f)?;
            Ok((0..logits.rows()).map(|r| logits.argmax_row(r)).collect())
        })
        .collect()
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64, DownstreamError> {
    if predictions.len() != labels.len() {
        return Err(DownstreamError::LengthMismatch(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(DownstreamError::EmptyInput);
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiouResult {
    pub shape_iou: Vec<f64>,
    /// Mean over categories of each category's mean shape IoU.
    pub c_miou: f64,
    /// Mean over shapes.
    pub i_miou: f64,
    /// Per category present: (category, mean shape IoU, shape count).
    pub per_category: Vec<(usize, f64, usize)>,
}

/// Part IoUs are averaged over each category's part set, taken as every
/// part that occurs in the ground truth of any shape of that category.
pub fn miou(
    predictions: &[Vec<u32>],
    labels: &[Vec<u32>],
    part_count: usize,
    categories: &[usize],
    absent_as_one: bool,
) -> Result<MiouResult, DownstreamError> {
    if predictions.len() != labels.len() || categories.len() != labels.len() {
        return Err(DownstreamError::LengthMismatch(format!(
            "{} predictions, {} labels, {} categories",
            predictions.len(),
            labels.len(),
            categories.len()
        )));
    }
    if labels.is_empty() {
        return Err(DownstreamError::EmptyInput);
    }
    let mut part_sets: BTreeMap<usize, Vec<bool>> = BTreeMap::new();
    for ((p, l), &c) in predictions.iter().zip(labels).zip(categories) {
        if p.len() != l.len() {
            return Err(DownstreamError::LengthMismatch(format!("{} predicted points for {}", p.len(), l.len())));
        }
        if l.is_empty() {
            return Err(DownstreamError::EmptyInput);
        }
        if let Some(&bad) = p.iter().chain(l).find(|&&v| v as usize >= part_count) {
            return Err(DownstreamError::LabelRange {
                label: bad as usize,
                count: part_count,
            });
        }
        let set = part_sets.entry(c).or_insert_with(|| vec![false; part_count]);
        for &v in l {
            set[v as usize] = true;
        }
    }
    let mut shape_iou = Vec::with_capacity(labels.len());
    for ((p, l), c) in predictions.iter().zip(labels).zip(categories) {
        let mut inter = vec![0usize; part_count];
        let mut union = vec![0usize; part_count];
        for (&a, &b) in p.iter().zip(l) {
            if a == b {
                inter[a as usize] += 1;
                union[a as usize] += 1;
            } else {
                union[a as usize] += 1;
                union[b as usize] += 1;
            }
        }
        let mut sum = 0.0;
        let mut n = 0usize;
        for (part, _) in part_sets[c].iter().enumerate().filter(|(_, &in_set)| in_set) {
            if union[part] == 0 {
                if absent_as_one {
                    sum += 1.0;
                    n += 1;
                }
            } else {
                sum += inter[part] as f64 / union[part] as f64;
                n += 1;
            }
        }
        shape_iou.push(if n == 0 { 1.0 } else { sum / n as f64 });
    }
    let mut per_category = Vec::new();
    for &c in part_sets.keys() {
        let ious: Vec<f64> = shape_iou.iter().zip(categories).filter(|(_, &k)| k == c).map(|(v, _)| *v).collect();
        per_category.push((c, ious.iter().sum::<f64>() / ious.len() as f64, ious.len()));
    }
    let c_miou = per_category.iter().map(|(_, v, _)| v).sum::<f64>() / per_category.len() as f64;
    let i_miou = shape_iou.iter().sum::<f64>() / shape_iou.len() as f64;
    Ok(MiouResult {
        shape_iou,
        c_miou,
        i_miou,
        per_category,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub category: String,
    pub metric: String,
    pub value: f64,
    pub count: usize,
}

/// Per-category metric rows; aggregates are derived from them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

pub const AGGREGATE_CATEGORY: &str = "all";

impl EvalReport {
    /// Per-class accuracy rows plus the overall accuracy.
    pub fn classification(class_names: &[String], predictions: &[usize], labels: &[usize]) -> Result<Self, DownstreamError> {
        accuracy(predictions, labels)?;
        let mut rows = Vec::new();
        for (c, name) in class_names.iter().enumerate() {
            let (p, l): (Vec<usize>, Vec<usize>) =
                predictions.iter().zip(labels).filter(|(_, &l)| l == c).map(|(&p, &l)| (p, l)).unzip();
            if !l.is_empty() {
                rows.push(ReportRow {
                    category: name.clone(),
                    metric: "accuracy".into(),
                    value: accuracy(&p, &l)?,
                    count: l.len(),
                });
            }
        }
        let mut r = Self { rows };
        r.rows.extend(r.aggregates());
        Ok(r)
    }

    pub fn segmentation(category_names: &[String], m: &MiouResult) -> Self {
        let rows = m
            .per_category
            .iter()
            .map(|&(c, v, n)| ReportRow {
                category: category_names.get(c).cloned().unwrap_or_else(|| c.to_string()),
                metric: "shape_miou".into(),
                value: v,
                count: n,
            })
            .collect();
        let mut r = Self { rows };
        r.rows.extend(r.aggregates());
        r
    }

    /// Aggregate rows recomputed from the per-category rows: count-weighted
    /// accuracy, or C.mIoU (unweighted) and I.mIoU (count-weighted).
    pub fn aggregates(&self) -> Vec<ReportRow> {
        let per: Vec<&ReportRow> = self.rows.iter().filter(|r| r.category != AGGREGATE_CATEGORY).collect();
        let total: usize = per.iter().map(|r| r.count).sum();
        let weighted = |metric: &str| per.iter().filter(|r| r.metric == metric).map(|r| r.value * r.count as f64).sum::<f64>() / total as f64;
        let mut out = Vec::new();
        if per.iter().any(|r| r.metric == "accuracy") {
            out.push(ReportRow {
                category: AGGREGATE_CATEGORY.into(),
                metric: "accuracy".into(),
                value: weighted("accuracy"),
                count: total,
            });
        }
        let seg: Vec<&&ReportRow> = per.iter().filter(|r| r.metric == "shape_miou").collect();
        if !seg.is_empty() {
            out.push(ReportRow {
                category: AGGREGATE_CATEGORY.into(),
                metric: "c_miou".into(),
                value: seg.iter().map(|r| r.value).sum::<f64>() / seg.len() as f64,
                count: seg.len(),
            });
            out.push(ReportRow {
                category: AGGREGATE_CATEGORY.into(),
                metric: "i_miou".into(),
                value: weighted("shape_miou"),
                count: total,
            });
        }
        out
    }

    pub fn metric(&self, category: &str, metric: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.category == category && r.metric == metric).map(|r| r.value)
    }

    pub fn summary(&self) -> BTreeMap<String, f64> {
        self.rows
            .iter()
            .filter(|r| r.category == AGGREGATE_CATEGORY)
            .map(|r| (r.metric.clone(), r.value))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
    }

    pub fn from_csv(text: &str, path: &str) -> Result<Self, DownstreamError> {
        let rows = csv::Reader::from_reader(text.as_bytes())
            .deserialize()
            .collect::<Result<Vec<ReportRow>, _>>()
            .map_err(|e| DownstreamError::Report {
                path: path.into(),
                message: e.to_string(),
            })?;
        Ok(Self { rows })
    }

    /// Writes the CSV and a JSON summary of the aggregates beside it.
    pub fn write(&self, csv_path: &Path) -> Result<(), DownstreamError> {
        write_atomic(csv_path, self.to_csv().as_bytes())?;
        let json = serde_json::to_string_pretty(&self.summary()).expect("map serializes");
        write_atomic(&csv_path.with_extension("json"), json.as_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, DownstreamError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_csv(&text, &path.display().to_string())
    }
}

/// Seeds a backbone for the `nopre` scheme independently of any checkpoint.
pub fn nopre_seed(seed: u64) -> u64 {
    derive(&[seed, TAG_HEAD, 1])
}

/// Scores a trained model on held-out shapes. For segmentation each shape's
/// label is its category and the targets are its point part labels.
pub fn evaluate(model: &mut TrainedModel, test: &[LabeledShape], names: &[String]) -> Result<EvalReport, DownstreamError> {
    check_labels(test, &model.config)?;
    let preds = predict(model, test)?;
    match model.config.task {
        Task::Classification => {
            let p: Vec<usize> = preds.iter().map(|p| p[0]).collect();
            let l: Vec<usize> = test.iter().map(|s| s.label).collect();
            EvalReport::classification(names, &p, &l)
        }
        Task::Segmentation => {
            let p: Vec<Vec<u32>> = preds.iter().map(|p| p.iter().map(|&v| v as u32).collect()).collect();
            let l: Vec<Vec<u32>> = test.iter().map(|s| s.cloud.part_labels.clone().expect("checked")).collect();
            let c: Vec<usize> = test.iter().map(|s| s.label).collect();
            let m = miou(&p, &l, model.config.classes, &c, model.config.absent_part_iou_one)?;
            Ok(EvalReport::segmentation(names, &m))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{make_shape, Pose, ShapeKind, ShapeSpec};
    use crate::network::NetConfig;
    use proptest::prelude::*;

    #[test]
    fn accuracy_examples() {
        assert!((accuracy(&[0, 1, 1], &[0, 1, 0]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(accuracy(&[2, 1], &[2, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert!(matches!(accuracy(&[], &[]), Err(DownstreamError::EmptyInput)));
        assert!(matches!(accuracy(&[1], &[]), Err(DownstreamError::LengthMismatch(_))));
    }

    #[test]
    fn miou_examples() {
        let gt = vec![vec![0, 0, 1, 1]];
        let perfect = miou(&gt, &gt, 2, &[0], true).unwrap();
        assert_eq!(perfect.shape_iou, vec![1.0]);
        assert_eq!((perfect.c_miou, perfect.i_miou), (1.0, 1.0));

        let half = miou(&[vec![0, 0, 0, 0]], &gt, 2, &[0], true).unwrap();
        assert!((half.shape_iou[0] - 0.25).abs() < 1e-15);

        // Part 1 exists in the category (second shape) but not in shape 0.
        let labels = vec![vec![0, 0], vec![0, 1]];
        let preds = vec![vec![0, 0], vec![0, 1]];
        let m = miou(&preds, &labels, 3, &[0, 0], true).unwrap();
        assert_eq!(m.shape_iou, vec![1.0, 1.0]);
        let m = miou(&[vec![0, 0], vec![0, 0]], &labels, 3, &[0, 0], false).unwrap();
        assert_eq!(m.shape_iou[0], 1.0);
        assert!((m.shape_iou[1] - 0.25).abs() < 1e-15);
        assert!(matches!(miou(&[vec![3]], &[vec![0]], 3, &[0], true), Err(DownstreamError::LabelRange { .. })));
    }

    #[test]
    fn c_and_i_miou_differ_across_categories() {
        let labels = vec![vec![0, 1], vec![0, 1], vec![0, 1]];
        let preds = vec![vec![0, 1], vec![0, 1], vec![0, 0]];
        let m = miou(&preds, &labels, 2, &[0, 0, 1], true).unwrap();
        // Shape IoUs 1, 1, 0.25: category means 1 and 0.25.
        assert!((m.i_miou - 0.75).abs() < 1e-15);
        assert!((m.c_miou - 0.625).abs() < 1e-15);
        let single = miou(&preds, &labels, 2, &[0, 0, 0], true).unwrap();
        assert!((single.c_miou - single.i_miou).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn metrics_are_bounded_and_order_invariant(
            data in prop::collection::vec((0usize..3, 0usize..3, 0usize..2), 1..20),
            seed in any::<u64>(),
        ) {
            let preds: Vec<usize> = data.iter().map(|d| d.0).collect();
            let labels: Vec<usize> = data.iter().map(|d| d.1).collect();
            let a = accuracy(&preds, &labels).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            let mut perm: Vec<usize> = (0..data.len()).collect();
            perm.shuffle(&mut rng_for(&[seed]));
            let pp: Vec<usize> = perm.iter().map(|&i| preds[i]).collect();
            let pl: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
            prop_assert_eq!(accuracy(&pp, &pl).unwrap(), a);

            let sp: Vec<Vec<u32>> = data.iter().map(|d| vec![d.0 as u32, d.1 as u32]).collect();
            let sl: Vec<Vec<u32>> = data.iter().map(|d| vec![d.1 as u32, d.0 as u32]).collect();
            let cats: Vec<usize> = data.iter().map(|d| d.2).collect();
            let m = miou(&sp, &sl, 3, &cats, true).unwrap();
            for v in m.shape_iou.iter().chain([&m.c_miou, &m.i_miou]) {
                prop_assert!((0.0..=1.0).contains(v));
            }
            let psp: Vec<_> = perm.iter().map(|&i| sp[i].clone()).collect();
            let psl: Vec<_> = perm.iter().map(|&i| sl[i].clone()).collect();
            let pc: Vec<_> = perm.iter().map(|&i| cats[i]).collect();
            let pm = miou(&psp, &psl, 3, &pc, true).unwrap();
            prop_assert!((pm.i_miou - m.i_miou).abs() < 1e-12);
            prop_assert!((pm.c_miou - m.c_miou).abs() < 1e-12);
        }
    }

    #[test]
    fn report_aggregates_recompute_from_rows() {
        let names = vec!["a".to_string(), "b".to_string()];
        let r = EvalReport::classification(&names, &[0, 1, 1, 1], &[0, 0, 1, 1]).unwrap();
        assert_eq!(r.metric("all", "accuracy"), Some(0.75));
        assert_eq!(r.metric("a", "accuracy"), Some(0.5));
        let back = EvalReport::from_csv(&r.to_csv(), "mem").unwrap();
        assert_eq!(back, r);
        assert_eq!(back.aggregates(), r.rows[2..].to_vec());

        let m = miou(&[vec![0, 1], vec![0, 0]], &[vec![0, 1], vec![0, 1]], 2, &[0, 1], true).unwrap();
        let s = EvalReport::segmentation(&names, &m);
        assert_eq!(s.metric("all", "c_miou"), Some(m.c_miou));
        assert_eq!(s.metric("all", "i_miou"), Some(m.i_miou));
        assert!(s.to_csv().starts_with("category,metric,value,count\n"));
    }

    fn tiny_net() -> NetConfig {
        NetConfig {
            depth: 3,
            stem_channels: 4,
            branch_channels: vec![4, 8],
            fusion_stages: 1,
            blocks_per_stage: 1,
            bottleneck_ratio: 2,
            shape_dim: 8,
            point_dim: 8,
            ..NetConfig::default()
        }
    }

    fn composite_set(n: usize) -> Vec<LabeledShape> {
        (0..n)
            .map(|i| {
                let c = make_shape(&ShapeSpec {
                    kind: ShapeKind::SphereBox {
                        radius: 0.5,
                        half_extent: 0.4,
                        separation: 1.0,
                    },
                    points: 96,
                    seed: i as u64,
                    pose: Pose::Yaw,
                    stretch: 0.1,
                })
                .unwrap();
                LabeledShape::prepare(&c, 0).unwrap()
            })
            .collect()
    }

    #[test]
    fn fix_scheme_leaves_backbone_bitwise_unchanged() {
        let net = Backbone::<f32>::new(&tiny_net(), 4).unwrap();
        let before = net.store.clone();
        let shapes = composite_set(4);
        let cfg = HeadConfig {
            task: Task::Segmentation,
            classes: 2,
            hidden: 16,
            epochs: 3,
            batch_size: 2,
            ..HeadConfig::default()
        };
        let mut model = train_head(net, &shapes, &cfg).unwrap();
        assert_eq!(model.backbone.store, before);
        assert!(model.losses.iter().all(|l| l.is_finite()));
        let report = evaluate(&mut model, &shapes, &["composite".to_string()]).unwrap();
        let i = report.metric(AGGREGATE_CATEGORY, "i_miou").unwrap();
        assert!((0.0..=1.0).contains(&i));

        let mut b = Backbone::<f32>::new(&tiny_net(), 4).unwrap();
        let f1 = extract_features(&mut b, &shapes, Task::Segmentation, 2).unwrap();
        let f2 = extract_features(&mut b, &shapes, Task::Segmentation, 3).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(f1[0].rows(), 96);
    }

    #[test]
    fn finetune_changes_backbone_and_is_deterministic() {
        let shapes = composite_set(4);
        let cfg = HeadConfig {
            task: Task::Segmentation,
            scheme: Scheme::Finetune,
            classes: 2,
            hidden: 16,
            epochs: 2,
            batch_size: 2,
            ..HeadConfig::default()
        };
        let run = || train_head(Backbone::<f32>::new(&tiny_net(), 4).unwrap(), &shapes, &cfg).unwrap();
        let (a, b) = (run(), run());
        assert_ne!(a.backbone.store, Backbone::<f32>::new(&tiny_net(), 4).unwrap().store);
        assert_eq!(a.backbone.store, b.backbone.store);
        assert_eq!(a.head, b.head);
    }

    #[test]
    fn head_training_reduces_loss_on_separable_features() {
        let shapes: Vec<LabeledShape> = (0..6)
            .map(|i| {
                let kind = if i % 2 == 0 {
                    ShapeKind::Sphere { radius: 1.0 }
                } else {
                    ShapeKind::Box { half_extents: [1.0, 0.3, 0.3] }
                };
                let c = make_shape(&ShapeSpec {
                    kind,
                    points: 128,
                    seed: i,
                    pose: Pose::Canonical,
                    stretch: 0.0,
                })
                .unwrap();
                LabeledShape::prepare(&c, (i % 2) as usize).unwrap()
            })
            .collect();
        let cfg = HeadConfig {
            epochs: 60,
            batch_size: 6,
            ..HeadConfig::default()
        };
        let mut model = train_head(Backbone::<f32>::new(&tiny_net(), 1).unwrap(), &shapes, &cfg).unwrap();
        assert!(model.losses.last().unwrap() < &model.losses[0]);
        let preds = predict(&mut model, &shapes).unwrap();
        assert!(preds.iter().all(|p| p.len() == 1 && p[0] < 2));
        let names = vec!["sphere".to_string(), "box".to_string()];
        let report = evaluate(&mut model, &shapes, &names).unwrap();
        let p: Vec<usize> = preds.iter().map(|p| p[0]).collect();
        let l: Vec<usize> = shapes.iter().map(|s| s.label).collect();
        assert_eq!(report.metric(AGGREGATE_CATEGORY, "accuracy"), Some(accuracy(&p, &l).unwrap()));
        assert!(matches!(
            train_head(Backbone::<f32>::new(&tiny_net(), 1).unwrap(), &shapes, &HeadConfig { classes: 1, ..cfg.clone() }),
            Err(DownstreamError::InvalidConfig(_))
        ));
    }
}
