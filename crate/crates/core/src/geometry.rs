//! Point-cloud ingestion, normalization, normal estimation, augmentation
//! sampling and K-Means patch labelling.

use nalgebra::{Matrix3, SymmetricEigen, Unit, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spatial::KdTree;

pub type Vec3 = Vector3<f64>;

/// Neighbourhood size used when a cloud arrives without normals.
pub const DEFAULT_PCA_NEIGHBORS: usize = 16;

const KMEANS_MAX_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("too few points: need {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("attribute `{name}` has {got} entries but the cloud has {expected} points")]
    LengthMismatch {
        name: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("neighbour count must be at least 3, got {0}")]
    InvalidNeighborCount(usize),
}

/// Ordered points with per-point attributes. The `point_ids` column carries
/// point-instance identity through augmentation and cropping.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    /// Unit normals, or empty when the source had none.
    pub normals: Vec<Vec3>,
    pub point_ids: Vec<u32>,
    pub patch_ids: Option<Vec<u32>>,
    pub part_labels: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        let point_ids = (0..points.len() as u32).collect();
        Self {
            points,
            normals: Vec::new(),
            point_ids,
            patch_ids: None,
            part_labels: None,
        }
    }

    pub fn with_normals(points: Vec<Vec3>, normals: Vec<Vec3>) -> Result<Self, GeometryError> {
        let mut cloud = Self::new(points);
        cloud.normals = normals;
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn has_normals(&self) -> bool {
        !self.normals.is_empty()
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let n = self.points.len();
        let check = |name: &'static str, got: usize| {
            if got == n {
                Ok(())
            } else {
                Err(GeometryError::LengthMismatch {
                    name,
                    got,
                    expected: n,
                })
            }
        };
        if self.has_normals() {
            check("normals", self.normals.len())?;
        }
        check("point_ids", self.point_ids.len())?;
        if let Some(p) = &self.patch_ids {
            check("patch_ids", p.len())?;
        }
        if let Some(p) = &self.part_labels {
            check("part_labels", p.len())?;
        }
        Ok(())
    }

    pub fn centroid(&self) -> Option<Vec3> {
        if self.points.is_empty() {
            return None;
        }
        let sum = self.points.iter().fold(Vec3::zeros(), |acc, p| acc + p);
        Some(sum / self.points.len() as f64)
    }

    /// Keeps the points at `indices`, in that order, with all attributes.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        let pick = |v: &Vec<u32>| indices.iter().map(|&i| v[i]).collect::<Vec<_>>();
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            normals: if self.has_normals() {
                indices.iter().map(|&i| self.normals[i]).collect()
            } else {
                Vec::new()
            },
            point_ids: pick(&self.point_ids),
            patch_ids: self.patch_ids.as_ref().map(pick),
            part_labels: self.part_labels.as_ref().map(pick),
        }
    }

    /// Drops points with any coordinate outside `[-half, half]`.
    pub fn crop_to_cube(&self, half: f64) -> PointCloud {
        let keep: Vec<usize> = self
            .points
            .iter()
            .enumerate()
            .filter(|(_, p)| p.iter().all(|c| c.abs() <= half))
            .map(|(i, _)| i)
            .collect();
        self.select(&keep)
    }
}

/// Moves the centroid to the origin and scales so the farthest point has norm 1.
pub fn normalize_unit_sphere(cloud: &PointCloud) -> Result<PointCloud, GeometryError> {
    let c = cloud.centroid().ok_or(GeometryError::EmptyCloud)?;
    let radius = cloud
        .points
        .iter()
        .map(|p| (p - c).norm())
        .fold(0.0f64, f64::max);
    let scale = if radius > 0.0 { 1.0 / radius } else { 1.0 };
    let mut out = cloud.clone();
    for p in &mut out.points {
        *p = (*p - c) * scale;
    }
    Ok(out)
}

/// Unit eigenvector of the smallest eigenvalue of a symmetric 3×3 matrix.
pub(crate) fn smallest_eigenvector(m: Matrix3<f64>) -> Vec3 {
    let eig = SymmetricEigen::new(m);
    let (mut best, mut val) = (0, f64::INFINITY);
    for i in 0..3 {
        if eig.eigenvalues[i] < val {
            val = eig.eigenvalues[i];
            best = i;
        }
    }
    eig.eigenvectors.column(best).normalize()
}

pub(crate) fn largest_eigenvector(m: Matrix3<f64>) -> Vec3 {
    let eig = SymmetricEigen::new(m);
    let (mut best, mut val) = (0, f64::NEG_INFINITY);
    for i in 0..3 {
        if eig.eigenvalues[i] > val {
            val = eig.eigenvalues[i];
            best = i;
        }
    }
    eig.eigenvectors.column(best).normalize()
}

pub(crate) fn covariance(points: impl Iterator<Item = Vec3> + Clone) -> Matrix3<f64> {
    let mut n = 0usize;
    let mut mean = Vec3::zeros();
    for p in points.clone() {
        mean += p;
        n += 1;
    }
    if n == 0 {
        return Matrix3::zeros();
    }
    mean /= n as f64;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    cov / n as f64
}

/// Normal of each point from the covariance of its `k` nearest neighbours
/// (the point itself included). Orientation is arbitrary.
pub fn estimate_normals_pca(cloud: &PointCloud, k: usize) -> Result<PointCloud, GeometryError> {
    if k < 3 {
        return Err(GeometryError::InvalidNeighborCount(k));
    }
    if cloud.len() < k {
        return Err(GeometryError::TooFewPoints {
            needed: k,
            got: cloud.len(),
        });
    }
    let tree = KdTree::new(&cloud.points);
    let normals = cloud
        .points
        .iter()
        .map(|p| {
            let nn = tree.k_nearest(p, k);
            let cov = covariance(nn.iter().map(|n| cloud.points[n.index]));
            smallest_eigenvector(cov)
        })
        .collect();
    let mut out = cloud.clone();
    out.normals = normals;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    X,
    #[default]
    Y,
    Z,
}

impl Axis {
    pub fn unit(self) -> Vec3 {
        match self {
            Axis::X => Vec3::x(),
            Axis::Y => Vec3::y(),
            Axis::Z => Vec3::z(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RotationMode {
    #[default]
    UprightAxisOnly,
    FullSo3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub rotation_mode: RotationMode,
    pub up_axis: Axis,
    /// Translations are drawn from `[-translation_range, translation_range]` per axis.
    pub translation_range: f64,
    pub scale_range: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            rotation_mode: RotationMode::UprightAxisOnly,
            up_axis: Axis::Y,
            translation_range: 0.25,
            scale_range: (0.75, 1.25),
            seed: 0,
        }
    }
}

/// `p' = R (s ⊙ p) + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
    pub scale: Vec3,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
            scale: Vec3::repeat(1.0),
        }
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p.component_mul(&self.scale) + self.translation
    }

    pub fn is_isotropic(&self) -> bool {
        self.scale.x == self.scale.y && self.scale.y == self.scale.z
    }

    /// `self ∘ first`. Only representable when `self` scales isotropically.
    pub fn compose(&self, first: &SimilarityTransform) -> Option<SimilarityTransform> {
        if !self.is_isotropic() {
            return None;
        }
        let s = self.scale.x;
        Some(SimilarityTransform {
            rotation: self.rotation * first.rotation,
            translation: self.rotation * (first.translation * s) + self.translation,
            scale: first.scale * s,
        })
    }
}

pub fn sample_transform<R: Rng>(policy: &AugmentPolicy, rng: &mut R) -> SimilarityTransform {
    let rotation = match policy.rotation_mode {
        RotationMode::UprightAxisOnly => {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let axis = Unit::new_unchecked(policy.up_axis.unit());
            *UnitQuaternion::from_axis_angle(&axis, angle)
                .to_rotation_matrix()
                .matrix()
        }
        RotationMode::FullSo3 => random_rotation(rng),
    };
    let t = policy.translation_range;
    let translation = if t > 0.0 {
        Vec3::from_fn(|_, _| rng.random_range(-t..=t))
    } else {
        Vec3::zeros()
    };
    let (lo, hi) = policy.scale_range;
    let scale = if hi > lo {
        Vec3::from_fn(|_, _| rng.random_range(lo..=hi))
    } else {
        Vec3::repeat(lo)
    };
    SimilarityTransform {
        rotation,
        translation,
        scale,
    }
}

/// Haar-uniform rotation from a normalized Gaussian quaternion.
pub fn random_rotation<R: Rng>(rng: &mut R) -> Matrix3<f64> {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-9 {
            let quat = nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]);
            return *UnitQuaternion::from_quaternion(quat)
                .to_rotation_matrix()
                .matrix();
        }
    }
}

/// Normals are rotated and re-normalized; the anisotropic scale is not
/// transported to them.
pub fn apply_transform(cloud: &PointCloud, t: &SimilarityTransform) -> PointCloud {
    let mut out = cloud.clone();
    for p in &mut out.points {
        *p = t.apply_point(p);
    }
    for n in &mut out.normals {
        let r = t.rotation * *n;
        let len = r.norm();
        if len > 0.0 {
            *n = r / len;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub labels: Vec<u32>,
    pub centroids: Vec<Vec3>,
    /// Inertia after each Lloyd iteration.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
}

fn nearest_center(p: &Vec3, centers: &[Vec3]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = (p - c).norm_squared();
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding; empty clusters are re-seeded
/// at the point farthest from its centre.
pub fn kmeans(points: &[Vec3], k: usize, seed: u64) -> Result<KMeans, GeometryError> {
    if points.is_empty() {
        return Err(GeometryError::EmptyCloud);
    }
    if k == 0 || points.len() < k {
        return Err(GeometryError::TooFewPoints {
            needed: k.max(1),
            got: points.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = points.len();

    // k-means++ seeding.
    let mut chosen = vec![false; m];
    let first = rng.random_range(0..m);
    chosen[first] = true;
    let mut centers = vec![points[first]];
    let mut d2: Vec<f64> = points.iter().map(|p| (p - points[first]).norm_squared()).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && !chosen[i] {
                    if target < d {
                        pick = Some(i);
                        break;
                    }
                    target -= d;
                }
            }
            pick.or_else(|| (0..m).rev().find(|&i| !chosen[i] && d2[i] > 0.0))
        } else {
            None
        };
        // Remaining points coincide with chosen centres.
        let pick = pick.unwrap_or_else(|| (0..m).find(|&i| !chosen[i]).unwrap_or(0));
        chosen[pick] = true;
        centers.push(points[pick]);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min((p - points[pick]).norm_squared());
        }
    }

    let mut labels: Vec<u32> = vec![u32::MAX; m];
    let mut inertia_trace = Vec::new();
    let mut iterations = 0;
    for _ in 0..KMEANS_MAX_ITERS {
        iterations += 1;
        let mut changed = false;
        let mut dists = vec![0.0; m];
        for (i, p) in points.iter().enumerate() {
            let (j, d) = nearest_center(p, &centers);
            if labels[i] != j as u32 {
                labels[i] = j as u32;
                changed = true;
            }
            dists[i] = d;
        }
        // Re-seed empty clusters with the worst-fitting point.
        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l as usize] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            let far = (0..m)
                .filter(|&i| counts[labels[i] as usize] > 1)
                .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
            if let Some(i) = far {
                counts[labels[i] as usize] -= 1;
                labels[i] = j as u32;
                counts[j] = 1;
                dists[i] = 0.0;
                centers[j] = points[i];
                changed = true;
            }
        }
        // Update step.
        let mut sums = vec![Vec3::zeros(); k];
        for (i, p) in points.iter().enumerate() {
            sums[labels[i] as usize] += p;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j] / counts[j] as f64;
            }
        }
        let inertia: f64 = points
            .iter()
            .zip(&labels)
            .map(|(p, &l)| (p - centers[l as usize]).norm_squared())
            .sum();
        inertia_trace.push(inertia);
        if !changed {
            break;
        }
    }
    Ok(KMeans {
        labels,
        centroids: centers,
        inertia_trace,
        iterations,
    })
}

/// Over-segments the cloud into `k` patches on its coordinates.
pub fn kmeans_patches(cloud: &PointCloud, k: usize, seed: u64) -> Result<PointCloud, GeometryError> {
    let km = kmeans(&cloud.points, k, seed)?;
    let mut out = cloud.clone();
    out.patch_ids = Some(km.labels);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| Vec3::from_fn(|_, _| rng.random_range(-2.0..2.0)))
            .collect();
        PointCloud::new(pts)
    }

    fn max_coord_diff(a: &PointCloud, b: &PointCloud) -> f64 {
        a.points
            .iter()
            .zip(&b.points)
            .map(|(p, q)| (p - q).amax())
            .fold(0.0, f64::max)
    }

    #[test]
    fn normalize_symmetric_pair() {
        let c = PointCloud::new(vec![Vec3::new(2.0, 0.0, 0.0), Vec3::new(-2.0, 0.0, 0.0)]);
        let n = normalize_unit_sphere(&c).unwrap();
        assert_eq!(n.points, vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(-1.0, 0.0, 0.0)]);
    }

    #[test]
    fn normalize_is_idempotent_and_scale_invariant() {
        let c = random_cloud(100, 5);
        let n = normalize_unit_sphere(&c).unwrap();
        let nn = normalize_unit_sphere(&n).unwrap();
        assert!(max_coord_diff(&n, &nn) <= 1e-12);
        let max_norm = n.points.iter().map(|p| p.norm()).fold(0.0, f64::max);
        assert!(max_norm <= 1.0 + 1e-6);

        // Oracle: evaluate the definition directly on the scaled cloud.
        let mut scaled = c.clone();
        for p in &mut scaled.points {
            *p *= 3.7;
        }
        let ns = normalize_unit_sphere(&scaled).unwrap();
        assert!(max_coord_diff(&n, &ns) <= 1e-9);
    }

    #[test]
    fn normalize_empty_fails() {
        assert_eq!(
            normalize_unit_sphere(&PointCloud::default()),
            Err(GeometryError::EmptyCloud)
        );
    }

    #[test]
    fn pca_normals_on_plane() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = (0..50)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0))
            .collect();
        let c = estimate_normals_pca(&PointCloud::new(pts), 10).unwrap();
        for n in &c.normals {
            assert!((n.z.abs() - 1.0).abs() < 1e-6, "{n:?}");
        }
    }

    #[test]
    fn pca_normals_on_sphere_align_with_position() {
        // Fibonacci lattice: even coverage, so every 10-neighbourhood is a
        // well-spread surface patch.
        let n = 800;
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let pts: Vec<Vec3> = (0..n)
            .map(|i| {
                let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = (1.0 - y * y).sqrt();
                let t = golden * i as f64;
                Vec3::new(r * t.cos(), y, r * t.sin())
            })
            .collect();
        let c = estimate_normals_pca(&PointCloud::new(pts.clone()), 10).unwrap();
        for (p, n) in pts.iter().zip(&c.normals) {
            assert!(p.dot(n).abs() >= 0.99);
        }
    }

    #[test]
    fn pca_too_few_points() {
        let c = PointCloud::new(vec![Vec3::zeros(), Vec3::x()]);
        assert_eq!(
            estimate_normals_pca(&c, 10),
            Err(GeometryError::TooFewPoints { needed: 10, got: 2 })
        );
    }

    #[test]
    fn sample_transform_is_deterministic() {
        let policy = AugmentPolicy::default();
        let a = sample_transform(&policy, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_transform(&policy, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn upright_rotation_fixes_up_axis() {
        for axis in [Axis::X, Axis::Y, Axis::Z] {
            let policy = AugmentPolicy {
                up_axis: axis,
                ..Default::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            for _ in 0..100 {
                let t = sample_transform(&policy, &mut rng);
                assert!((t.rotation * axis.unit() - axis.unit()).amax() <= 1e-9);
            }
        }
    }

    #[test]
    fn sampled_transforms_respect_ranges() {
        for mode in [RotationMode::UprightAxisOnly, RotationMode::FullSo3] {
            let policy = AugmentPolicy {
                rotation_mode: mode,
                ..Default::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            for _ in 0..10_000 {
                let t = sample_transform(&policy, &mut rng);
                assert!(t.translation.iter().all(|v| (-0.25..=0.25).contains(v)));
                assert!(t.scale.iter().all(|v| (0.75..=1.25).contains(v)));
                let r = t.rotation;
                assert!((r.transpose() * r - Matrix3::identity()).amax() <= 1e-6);
                assert!((r.determinant() - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn identity_and_translation() {
        let c = random_cloud(20, 4);
        assert_eq!(apply_transform(&c, &SimilarityTransform::identity()), c);
        let t = SimilarityTransform {
            translation: Vec3::new(0.1, 0.0, 0.0),
            ..SimilarityTransform::identity()
        };
        let moved = apply_transform(&c, &t);
        for (p, q) in c.points.iter().zip(&moved.points) {
            assert_eq!(*q, p + Vec3::new(0.1, 0.0, 0.0));
        }
    }

    #[test]
    fn composition_matches_homogeneous_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let c = random_cloud(50, 8);
        for _ in 0..20 {
            let mut t1 = sample_transform(&AugmentPolicy::default(), &mut rng);
            let mut t2 = sample_transform(
                &AugmentPolicy {
                    rotation_mode: RotationMode::FullSo3,
                    ..Default::default()
                },
                &mut rng,
            );
            t1.scale = Vec3::repeat(rng.random_range(0.75..1.25));
            t2.scale = Vec3::repeat(rng.random_range(0.75..1.25));
            // Oracle: 4×4 homogeneous product.
            let homog = |t: &SimilarityTransform| {
                let mut m = nalgebra::Matrix4::identity();
                let a = t.rotation * Matrix3::from_diagonal(&t.scale);
                m.fixed_view_mut::<3, 3>(0, 0).copy_from(&a);
                m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t.translation);
                m
            };
            let m = homog(&t2) * homog(&t1);
            let composed = t2.compose(&t1).unwrap();
            let twice = apply_transform(&apply_transform(&c, &t1), &t2);
            let once = apply_transform(&c, &composed);
            for ((p, a), b) in c.points.iter().zip(&twice.points).zip(&once.points) {
                let h = m * p.push(1.0);
                assert!((a - b).amax() <= 1e-9);
                assert!((h.xyz() - b).amax() <= 1e-9);
            }
        }
    }

    #[test]
    fn anisotropic_outer_transform_does_not_compose() {
        let t = SimilarityTransform {
            scale: Vec3::new(1.0, 2.0, 1.0),
            ..SimilarityTransform::identity()
        };
        assert!(t.compose(&SimilarityTransform::identity()).is_none());
    }

    #[test]
    fn kmeans_separates_two_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut pts = Vec::new();
        for center in [Vec3::zeros(), Vec3::repeat(1.0)] {
            for _ in 0..50 {
                pts.push(center + Vec3::from_fn(|_, _| rng.random_range(-0.01..0.01)));
            }
        }
        let km = kmeans(&pts, 2, 1).unwrap();
        let a = km.labels[0];
        assert!(km.labels[..50].iter().all(|&l| l == a));
        assert!(km.labels[50..].iter().all(|&l| l != a));
    }

    #[test]
    fn kmeans_one_patch_per_point() {
        let c = random_cloud(30, 12);
        let km = kmeans(&c.points, 30, 4).unwrap();
        let mut labels = km.labels.clone();
        labels.sort_unstable();
        labels.dedup();
        assert_eq!(labels.len(), 30);
    }

    #[test]
    fn kmeans_too_few_points() {
        let c = random_cloud(5, 1);
        assert!(matches!(
            kmeans_patches(&c, 6, 0),
            Err(GeometryError::TooFewPoints { .. })
        ));
    }

    #[test]
    fn kmeans_hundred_patches_on_dense_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pts: Vec<Vec3> = (0..10_000)
            .map(|_| Vec3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal)).normalize())
            .collect();
        let km = kmeans(&pts, 100, 3).unwrap();
        let mut counts = vec![0usize; 100];
        let mut radius = vec![0.0f64; 100];
        for (p, &l) in pts.iter().zip(&km.labels) {
            counts[l as usize] += 1;
            radius[l as usize] += (p - km.centroids[l as usize]).norm();
        }
        assert!(counts.iter().all(|&c| c > 0));
        let mean_patch_radius: f64 =
            radius.iter().zip(&counts).map(|(r, &c)| r / c as f64).sum::<f64>() / 100.0;
        let centroid = pts.iter().fold(Vec3::zeros(), |a, p| a + p) / pts.len() as f64;
        let global = pts.iter().map(|p| (p - centroid).norm()).sum::<f64>() / pts.len() as f64;
        assert!(mean_patch_radius < global);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn normalize_ignores_scale_and_shift(
            seed in 0u64..1000,
            alpha in 0.1f64..10.0,
            shift in proptest::array::uniform3(-5.0f64..5.0),
        ) {
            let c = random_cloud(40, seed);
            let mut moved = c.clone();
            let shift = Vec3::from(shift);
            for p in &mut moved.points {
                *p = *p * alpha + shift;
            }
            let a = normalize_unit_sphere(&c).unwrap();
            let b = normalize_unit_sphere(&moved).unwrap();
            prop_assert!(max_coord_diff(&a, &b) <= 1e-9);
        }

        #[test]
        fn kmeans_inertia_non_increasing_and_deterministic(seed in 0u64..500, k in 2usize..12) {
            let c = random_cloud(120, seed);
            let a = kmeans(&c.points, k, seed).unwrap();
            let b = kmeans(&c.points, k, seed).unwrap();
            prop_assert_eq!(&a, &b);
            for w in a.inertia_trace.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12);
            }
            let mut seen = vec![false; k];
            for &l in &a.labels {
                seen[l as usize] = true;
            }
            prop_assert!(seen.iter().all(|&s| s));
        }

        #[test]
        fn transform_preserves_ids(seed in 0u64..1000) {
            let mut c = random_cloud(30, seed);
            c.patch_ids = Some((0..30).map(|i| i % 4).collect());
            let t = sample_transform(&AugmentPolicy::default(), &mut ChaCha8Rng::seed_from_u64(seed));
            let out = apply_transform(&c, &t);
            prop_assert_eq!(out.len(), c.len());
            prop_assert_eq!(&out.point_ids, &c.point_ids);
            prop_assert_eq!(&out.patch_ids, &c.patch_ids);
        }
    }
}
