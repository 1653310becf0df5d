//! Rigid registration: mutual-nearest descriptor matching, RANSAC over
//! Kabsch fits, point-to-point ICP, and symmetric Hausdorff evaluation.

use std::f64::consts::TAU;

use nalgebra::{Matrix3, Rotation3};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{normalize_unit_sphere, GeometryError, PointCloud, Vec3};
use crate::network::{Backbone, NetError};
use crate::seed::rng_for;
use crate::spatial::KdTree;
use crate::tensor::{matmul, Tensor};
use crate::trainer::{octree_batch, TrainError};

/// Orthonormality tolerance of a valid rotation.
pub const ROTATION_TOLERANCE: f64 = 1e-6;
/// Ratio of the middle to the largest eigenvalue of the point spread below
/// which a point set counts as collinear.
const COLLINEAR_RATIO: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum RegistrationError {
    #[error("empty input")]
    EmptyInput,
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("need at least 3 correspondences, got {0}")]
    TooFewCorrespondences(usize),
    #[error("descriptor width mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn apply_all(&self, points: &[Vec3]) -> Vec<Vec3> {
        points.iter().map(|p| self.apply(p)).collect()
    }

    /// `self ∘ first`.
    pub fn compose(&self, first: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * first.rotation,
            translation: self.rotation * first.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn is_valid(&self) -> bool {
        let ortho = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        ortho <= ROTATION_TOLERANCE
            && (self.rotation.determinant() - 1.0).abs() <= ROTATION_TOLERANCE
            && self.translation.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub source: usize,
    pub target: usize,
    pub distance: f64,
}

fn nearest_rows(sq_a: &[f64], sq_b: &[f64], dots: &Tensor<f64>) -> Vec<usize> {
    (0..dots.rows())
        .map(|i| {
            let row = dots.row(i);
            let mut best = (f64::INFINITY, 0);
            for (j, &d) in row.iter().enumerate() {
                let dist = sq_a[i] + sq_b[j] - 2.0 * d;
                if dist < best.0 {
                    best = (dist, j);
                }
            }
            best.1
        })
        .collect()
}

/// Mutual nearest neighbours under Euclidean descriptor distance, in source
/// order. Ties resolve to the lowest index.
pub fn match_features(src: &Tensor<f64>, tgt: &Tensor<f64>) -> Result<Vec<Correspondence>, RegistrationError> {
    if src.rows() == 0 || tgt.rows() == 0 {
        return Err(RegistrationError::EmptyInput);
    }
    if src.cols() != tgt.cols() {
        return Err(RegistrationError::DimensionMismatch(src.cols(), tgt.cols()));
    }
    let sq = |t: &Tensor<f64>| (0..t.rows()).map(|r| t.row(r).iter().map(|v| v * v).sum()).collect::<Vec<f64>>();
    let (sa, sb) = (sq(src), sq(tgt));
    let dots = matmul(src, false, tgt, true);
    let forward = nearest_rows(&sa, &sb, &dots);
    let backward = nearest_rows(&sb, &sa, &matmul(tgt, false, src, true));
    Ok(forward
        .iter()
        .enumerate()
        .filter(|&(i, &j)| backward[j] == i)
        .map(|(i, &j)| Correspondence {
            source: i,
            target: j,
            distance: src.row(i).iter().zip(tgt.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
        })
        .collect())
}

/// Least-squares rigid transform mapping `src[i]` onto `tgt[i]`.
pub fn kabsch(src: &[Vec3], tgt: &[Vec3]) -> Result<RigidTransform, RegistrationError> {
    if src.len() != tgt.len() || src.len() < 3 {
        return Err(RegistrationError::TooFewCorrespondences(src.len().min(tgt.len())));
    }
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vec3>() / n;
    let ct = tgt.iter().sum::<Vec3>() / n;
    let mut h = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for (s, t) in src.iter().zip(tgt) {
        let (a, b) = (s - cs, t - ct);
        h += a * b.transpose();
        spread += a * a.transpose();
    }
    let mut ev: Vec<f64> = spread.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    if ev[2] <= 0.0 || ev[1] <= COLLINEAR_RATIO * ev[2] {
        return Err(RegistrationError::DegenerateGeometry("points are collinear".into()));
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("requested");
    let v_t = svd.v_t.expect("requested");
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, if d == 0.0 { 1.0 } else { d }));
    let rotation = v * correction * u.transpose();
    Ok(RigidTransform {
        rotation,
        translation: ct - rotation * cs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    pub enabled: bool,
    pub iterations: usize,
    pub inlier_threshold: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            iterations: 1000,
            inlier_threshold: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RigidEstimate {
    pub transform: RigidTransform,
    pub inliers: usize,
}

/// RANSAC over 3-correspondence Kabsch hypotheses, then a Kabsch refit on
/// the inliers of the best one. With RANSAC disabled, fits all pairs.
pub fn estimate_rigid(
    corr: &[Correspondence],
    src: &[Vec3],
    tgt: &[Vec3],
    cfg: &RansacConfig,
) -> Result<RigidEstimate, RegistrationError> {
    if corr.len() < 3 {
        return Err(RegistrationError::TooFewCorrespondences(corr.len()));
    }
    let pairs: Vec<(Vec3, Vec3)> = corr.iter().map(|c| (src[c.source], tgt[c.target])).collect();
    let fit = |idx: &[usize]| {
        let (s, t): (Vec<Vec3>, Vec<Vec3>) = idx.iter().map(|&i| pairs[i]).unzip();
        kabsch(&s, &t)
    };
    let inliers_of = |t: &RigidTransform| -> Vec<usize> {
        (0..pairs.len())
            .filter(|&i| (t.apply(&pairs[i].0) - pairs[i].1).norm() < cfg.inlier_threshold)
            .collect()
    };
    if !cfg.enabled {
        let all: Vec<usize> = (0..pairs.len()).collect();
        let transform = fit(&all)?;
        return Ok(RigidEstimate {
            inliers: inliers_of(&transform).len(),
            transform,
        });
    }
    let mut rng = rng_for(&[cfg.seed]);
    let mut best: Option<Vec<usize>> = None;
    for _ in 0..cfg.iterations {
        let sample = rand::seq::index::sample(&mut rng, pairs.len(), 3).into_vec();
        let Ok(t) = fit(&sample) else { continue };
        let inl = inliers_of(&t);
        if best.as_ref().is_none_or(|b| inl.len() > b.len()) {
            best = Some(inl);
        }
    }
    let best = best.ok_or_else(|| RegistrationError::DegenerateGeometry("every sample was collinear".into()))?;
    let transform = if best.len() >= 3 { fit(&best) } else { fit(&(0..pairs.len()).collect::<Vec<_>>()) }?;
    Ok(RigidEstimate {
        inliers: inliers_of(&transform).len(),
        transform,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcpConfig {
    pub max_iters: usize,
    pub tolerance: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    pub transform: RigidTransform,
    /// RMSE of nearest-neighbour residuals before each refit, then after the
    /// last one.
    pub rmse: Vec<f64>,
    pub iterations: usize,
}

fn nn_rmse(tree: &KdTree, tgt: &[Vec3], moved: &[Vec3]) -> (f64, Vec<Vec3>) {
    let mut sum = 0.0;
    let matched = moved
        .iter()
        .map(|p| {
            let n = tree.nearest(p).expect("non-empty target");
            sum += n.dist2;
            tgt[n.index]
        })
        .collect();
    ((sum / moved.len() as f64).sqrt(), matched)
}

/// Point-to-point ICP from `init`. Stops when the RMSE improves by less
/// than the tolerance or after `max_iters` refits, returning the best
/// transform seen.
pub fn icp_refine(src: &[Vec3], tgt: &[Vec3], init: &RigidTransform, cfg: &IcpConfig) -> Result<IcpResult, RegistrationError> {
    if src.is_empty() || tgt.is_empty() {
        return Err(RegistrationError::EmptyInput);
    }
    let tree = KdTree::new(tgt);
    let mut current = *init;
    let (mut err, mut matched) = nn_rmse(&tree, tgt, &current.apply_all(src));
    let mut rmse = vec![err];
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        let Ok(next) = kabsch(src, &matched) else { break };
        iterations += 1;
        let (e, m) = nn_rmse(&tree, tgt, &next.apply_all(src));
        if e > err {
            break;
        }
        rmse.push(e);
        let improvement = err - e;
        current = next;
        err = e;
        matched = m;
        if improvement < cfg.tolerance {
            break;
        }
    }
    Ok(IcpResult {
        transform: current,
        rmse,
        iterations,
    })
}

fn directed(from: &[Vec3], tree: &KdTree) -> f64 {
    from.iter().map(|p| tree.nearest(p).expect("non-empty").dist2).fold(0.0, f64::max).sqrt()
}

/// Symmetric Hausdorff distance.
pub fn hausdorff(a: &[Vec3], b: &[Vec3]) -> Result<f64, RegistrationError> {
    if a.is_empty() || b.is_empty() {
        return Err(RegistrationError::EmptyInput);
    }
    Ok(directed(a, &KdTree::new(b)).max(directed(b, &KdTree::new(a))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMethod {
    /// Descriptor matching plus RANSAC, then ICP.
    #[default]
    Feature,
    /// ICP from the identity.
    Identity,
}

impl InitMethod {
    pub fn name(self) -> &'static str {
        match self {
            InitMethod::Feature => "feature",
            InitMethod::Identity => "identity",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegisterConfig {
    pub ransac: RansacConfig,
    pub icp: IcpConfig,
}


#[derive(Debug, Clone, PartialEq)]
pub struct Registration {
    pub transform: RigidTransform,
    pub hausdorff: f64,
    pub correspondences: usize,
    pub inliers: usize,
    pub icp_iterations: usize,
}

/// Eval-mode point descriptors for each cloud, computed on copies
/// normalized into the unit sphere. Rows follow the cloud's point order.
pub fn point_descriptors(backbone: &mut Backbone<f32>, clouds: &[&PointCloud]) -> Result<Vec<Tensor<f64>>, RegistrationError> {
    let mut normalized = Vec::with_capacity(clouds.len());
    for c in clouds {
        let mut n = normalize_unit_sphere(c)?;
        n.point_ids = (0..n.len() as u32).collect();
        normalized.push(n);
    }
    let batch = octree_batch(&normalized, backbone.config().depth)?;
    let (_, point) = backbone.embed(&batch)?;
    let point = point.cast::<f64>();
    Ok((0..clouds.len())
        .map(|i| {
            let (a, b) = (batch.point_offsets[i], batch.point_offsets[i + 1]);
            let data = point.data()[a * point.cols()..b * point.cols()].to_vec();
            Tensor::from_vec(b - a, point.cols(), data)
        })
        .collect())
}

/// Aligns `src` onto `tgt`: descriptors, mutual matching, RANSAC, ICP.
pub fn register(
    src: &PointCloud,
    tgt: &PointCloud,
    backbone: &mut Backbone<f32>,
    cfg: &RegisterConfig,
) -> Result<Registration, RegistrationError> {
    let feats = point_descriptors(backbone, &[src, tgt])?;
    let corr = match_features(&feats[0], &feats[1])?;
    let init = estimate_rigid(&corr, &src.points, &tgt.points, &cfg.ransac)?;
    let icp = icp_refine(&src.points, &tgt.points, &init.transform, &cfg.icp)?;
    Ok(Registration {
        hausdorff: hausdorff(&icp.transform.apply_all(&src.points), &tgt.points)?,
        transform: icp.transform,
        correspondences: corr.len(),
        inliers: init.inliers,
        icp_iterations: icp.iterations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub trials: usize,
    pub seed: u64,
    pub init: InitMethod,
    /// Points sampled from each shape per trial.
    pub points: usize,
    pub translation_range: f64,
    pub success_threshold: f64,
    pub register: RegisterConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            trials: 50,
            seed: 0,
            init: InitMethod::Feature,
            points: 2048,
            translation_range: 0.25,
            success_threshold: 0.05,
            register: RegisterConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    pub init_method: String,
    pub hausdorff: f64,
    pub success: bool,
    pub iters: usize,
}

/// Rotation from independent uniform angles about x, y and z.
pub fn euler_rotation<R: Rng>(rng: &mut R) -> Matrix3<f64> {
    let (ax, ay, az) = (TAU * rng.random::<f64>(), TAU * rng.random::<f64>(), TAU * rng.random::<f64>());
    *Rotation3::from_euler_angles(ax, ay, az).matrix()
}

/// Trial `i` registers a rigidly moved, reordered copy of a shape sample
/// back onto the sample. Trials run in parallel and are independent of
/// scheduling.
pub fn run_benchmark(
    shapes: &[PointCloud],
    backbone: Option<&Backbone<f32>>,
    cfg: &BenchmarkConfig,
) -> Result<Vec<TrialResult>, RegistrationError> {
    if shapes.is_empty() {
        return Err(RegistrationError::EmptyInput);
    }
    if cfg.init == InitMethod::Feature && backbone.is_none() {
        return Err(RegistrationError::DegenerateGeometry("feature initialization needs a backbone".into()));
    }
    (0..cfg.trials)
        .into_par_iter()
        .map(|trial| {
            let seed = crate::seed::derive(&[cfg.seed, trial as u64]);
            let mut rng = rng_for(&[seed]);
            let shape = normalize_unit_sphere(&shapes[trial % shapes.len()])?;
            let mut idx: Vec<usize> = (0..shape.len()).collect();
            idx.shuffle(&mut rng);
            idx.truncate(cfg.points.min(shape.len()));
            let target = shape.select(&idx);
            let motion = RigidTransform {
                rotation: euler_rotation(&mut rng),
                translation: Vec3::from_fn(|_, _| rng.random_range(-cfg.translation_range..=cfg.translation_range)),
            };
            let mut order: Vec<usize> = (0..target.len()).collect();
            order.shuffle(&mut rng);
            let mut source = target.select(&order);
            source.points = motion.apply_all(&source.points);
            source.normals = source.normals.iter().map(|n| motion.rotation * n).collect();
            let mut reg_cfg = cfg.register.clone();
            reg_cfg.ransac.seed = seed;
            let (h, iters) = match cfg.init {
                InitMethod::Identity => {
                    let icp = icp_refine(&source.points, &target.points, &RigidTransform::identity(), &reg_cfg.icp)?;
                    (hausdorff(&icp.transform.apply_all(&source.points), &target.points)?, icp.iterations)
                }
                InitMethod::Feature => {
                    let mut net = backbone.expect("checked").clone();
                    let r = register(&source, &target, &mut net, &reg_cfg)?;
                    (r.hausdorff, r.icp_iterations)
                }
            };
            Ok(TrialResult {
                trial,
                seed,
                init_method: cfg.init.name().into(),
                hausdorff: h,
                success: h < cfg.success_threshold,
                iters,
            })
        })
        .collect()
}

pub fn success_rate(results: &[TrialResult]) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    results.iter().filter(|r| r.success).count() as f64 / results.len() as f64
}

/// Fraction of trials with Hausdorff distance below each threshold.
pub fn success_curve(results: &[TrialResult], thresholds: &[f64]) -> Vec<(f64, f64)> {
    thresholds
        .iter()
        .map(|&t| {
            let hits = results.iter().filter(|r| r.hausdorff < t).count();
            (t, hits as f64 / results.len().max(1) as f64)
        })
        .collect()
}

pub fn default_thresholds() -> Vec<f64> {
    (0..=40).map(|i| i as f64 * 0.005).collect()
}

pub fn results_csv(results: &[TrialResult]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in results {
        w.serialize(r).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
}

pub fn curve_csv(curve: &[(f64, f64)]) -> String {
    let mut out = String::from("threshold,success_rate\n");
    for (t, r) in curve {
        out.push_str(&format!("{t},{r}\n"));
    }
    out
}
