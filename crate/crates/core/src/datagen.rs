//! Synthetic shapes with analytic normals, sampled uniformly by area.
//!
//! All solids are centred at the origin with `y` as the axis of symmetry.

use std::f64::consts::{PI, TAU};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Rotation3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{random_rotation, PointCloud, Vec3};
use crate::io::{io_err, read_point_cloud, write_atomic, write_point_cloud, IoError};
use crate::seed::{derive, rng_for};

pub const MIN_POINTS: usize = 64;
pub const MANIFEST_NAME: &str = "manifest.csv";

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid shape spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShapeKind {
    Sphere { radius: f64 },
    Box { half_extents: [f64; 3] },
    Cylinder { radius: f64, half_height: f64 },
    /// Base disc at `y = -height/2`, apex at `y = height/2`.
    Cone { radius: f64, height: f64 },
    Torus { major: f64, minor: f64 },
    /// Sphere (part 0) centred at `-separation/2` and box (part 1) at
    /// `+separation/2` along `x`.
    SphereBox {
        radius: f64,
        half_extent: f64,
        separation: f64,
    },
}

impl ShapeKind {
    pub fn name(&self) -> &'static str {
        match self {
            ShapeKind::Sphere { .. } => "sphere",
            ShapeKind::Box { .. } => "box",
            ShapeKind::Cylinder { .. } => "cylinder",
            ShapeKind::Cone { .. } => "cone",
            ShapeKind::Torus { .. } => "torus",
            ShapeKind::SphereBox { .. } => "sphere_box",
        }
    }

    fn validate(&self) -> Result<(), DatagenError> {
        let positive: Vec<f64> = match *self {
            ShapeKind::Sphere { radius } => vec![radius],
            ShapeKind::Box { half_extents } => half_extents.to_vec(),
            ShapeKind::Cylinder { radius, half_height } => vec![radius, half_height],
            ShapeKind::Cone { radius, height } => vec![radius, height],
            ShapeKind::Torus { major, minor } => {
                if minor >= major {
                    return Err(DatagenError::InvalidSpec("torus minor radius must be below the major".into()));
                }
                vec![major, minor]
            }
            ShapeKind::SphereBox {
                radius,
                half_extent,
                separation,
            } => vec![radius, half_extent, separation],
        };
        if positive.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(DatagenError::InvalidSpec(format!("{} parameters must be positive", self.name())))
        }
    }
}

/// Orientation applied after stretching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pose {
    #[default]
    Canonical,
    /// Uniform rotation about `y`.
    Yaw,
    /// Uniform rotation in SO(3).
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub points: usize,
    pub seed: u64,
    #[serde(default)]
    pub pose: Pose,
    /// Per-axis scale drawn from `[1 - stretch, 1 + stretch]`.
    #[serde(default)]
    pub stretch: f64,
}

impl ShapeSpec {
    pub fn validate(&self) -> Result<(), DatagenError> {
        if self.points < MIN_POINTS {
            return Err(DatagenError::InvalidSpec(format!(
                "need at least {MIN_POINTS} points, got {}",
                self.points
            )));
        }
        if !(0.0..1.0).contains(&self.stretch) {
            return Err(DatagenError::InvalidSpec("stretch must lie in [0, 1)".into()));
        }
        self.kind.validate()
    }
}

struct Sample {
    p: Vec3,
    n: Vec3,
    part: u32,
}

fn unit(rng: &mut ChaCha8Rng) -> f64 {
    rng.random::<f64>()
}

fn sphere_point(rng: &mut ChaCha8Rng, radius: f64, center: Vec3, part: u32) -> Sample {
    let n = loop {
        let v = Vec3::from_fn(|_, _| StandardNormal.sample(rng));
        let len = v.norm();
        if len > 1e-9 {
            break v / len;
        }
    };
    Sample {
        p: center + n * radius,
        n,
        part,
    }
}

fn box_point(rng: &mut ChaCha8Rng, h: [f64; 3], center: Vec3, part: u32) -> Sample {
    // Face pair orthogonal to axis a has area 4·h_b·h_c per face.
    let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
    let total: f64 = areas.iter().sum();
    let mut u = unit(rng) * total;
    let mut axis = 2;
    for (a, &w) in areas.iter().enumerate() {
        if u < w {
            axis = a;
            break;
        }
        u -= w;
    }
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let mut p = Vec3::zeros();
    let mut n = Vec3::zeros();
    for k in 0..3 {
        p[k] = if k == axis {
            sign * h[k]
        } else {
            (2.0 * unit(rng) - 1.0) * h[k]
        };
    }
    n[axis] = sign;
    Sample {
        p: center + p,
        n,
        part,
    }
}

fn cylinder_point(rng: &mut ChaCha8Rng, r: f64, hh: f64) -> Sample {
    let side = TAU * r * 2.0 * hh;
    let cap = PI * r * r;
    let u = unit(rng) * (side + 2.0 * cap);
    let theta = TAU * unit(rng);
    let (s, c) = theta.sin_cos();
    if u < side {
        let y = (2.0 * unit(rng) - 1.0) * hh;
        Sample {
            p: Vec3::new(r * c, y, r * s),
            n: Vec3::new(c, 0.0, s),
            part: 0,
        }
    } else {
        let sign = if u < side + cap { 1.0 } else { -1.0 };
        let rho = r * unit(rng).sqrt();
        Sample {
            p: Vec3::new(rho * c, sign * hh, rho * s),
            n: Vec3::new(0.0, sign, 0.0),
            part: 0,
        }
    }
}

fn cone_point(rng: &mut ChaCha8Rng, r: f64, h: f64) -> Sample {
    let slant = (r * r + h * h).sqrt();
    let side = PI * r * slant;
    let base = PI * r * r;
    let theta = TAU * unit(rng);
    let (s, c) = theta.sin_cos();
    if unit(rng) * (side + base) < side {
        // Lateral area grows linearly with distance from the apex.
        let t = unit(rng).sqrt();
        Sample {
            p: Vec3::new(r * t * c, h / 2.0 - h * t, r * t * s),
            n: Vec3::new(h * c, r, h * s) / slant,
            part: 0,
        }
    } else {
        let rho = r * unit(rng).sqrt();
        Sample {
            p: Vec3::new(rho * c, -h / 2.0, rho * s),
            n: Vec3::new(0.0, -1.0, 0.0),
            part: 0,
        }
    }
}

fn torus_point(rng: &mut ChaCha8Rng, big: f64, small: f64) -> Sample {
    // The area element is proportional to R + r·cos φ.
    let phi = loop {
        let phi = TAU * unit(rng);
        if unit(rng) * (big + small) <= big + small * phi.cos() {
            break phi;
        }
    };
    let theta = TAU * unit(rng);
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    let ring = big + small * cp;
    Sample {
        p: Vec3::new(ring * ct, small * sp, ring * st),
        n: Vec3::new(cp * ct, sp, cp * st),
        part: 0,
    }
}

/// Samples `spec.points` surface points with unit outward normals. Composite
/// shapes also carry part labels.
pub fn make_shape(spec: &ShapeSpec) -> Result<PointCloud, DatagenError> {
    spec.validate()?;
    let mut rng = rng_for(&[spec.seed]);
    let m = spec.points;
    let samples: Vec<Sample> = match spec.kind {
        ShapeKind::Sphere { radius } => (0..m).map(|_| sphere_point(&mut rng, radius, Vec3::zeros(), 0)).collect(),
        ShapeKind::Box { half_extents } => (0..m).map(|_| box_point(&mut rng, half_extents, Vec3::zeros(), 0)).collect(),
        ShapeKind::Cylinder { radius, half_height } => (0..m).map(|_| cylinder_point(&mut rng, radius, half_height)).collect(),
        ShapeKind::Cone { radius, height } => (0..m).map(|_| cone_point(&mut rng, radius, height)).collect(),
        ShapeKind::Torus { major, minor } => (0..m).map(|_| torus_point(&mut rng, major, minor)).collect(),
        ShapeKind::SphereBox {
            radius,
            half_extent,
            separation,
        } => {
            let sphere_area = 4.0 * PI * radius * radius;
            let box_area = 24.0 * half_extent * half_extent;
            let n0 = ((m as f64 * sphere_area / (sphere_area + box_area)).round() as usize).clamp(1, m - 1);
            let c0 = Vec3::new(-separation / 2.0, 0.0, 0.0);
            let c1 = Vec3::new(separation / 2.0, 0.0, 0.0);
            let mut out: Vec<Sample> = (0..n0).map(|_| sphere_point(&mut rng, radius, c0, 0)).collect();
            out.extend((n0..m).map(|_| box_point(&mut rng, [half_extent; 3], c1, 1)));
            out
        }
    };
    let rotation = match spec.pose {
        Pose::Canonical => Matrix3::identity(),
        Pose::Yaw => *Rotation3::from_axis_angle(&Vec3::y_axis(), TAU * unit(&mut rng)).matrix(),
        Pose::Full => random_rotation(&mut rng),
    };
    let stretch = Vec3::from_fn(|_, _| 1.0 + spec.stretch * (2.0 * unit(&mut rng) - 1.0));
    let rotate = |v: Vec3| rotation * v;
    let mut points = Vec::with_capacity(m);
    let mut normals = Vec::with_capacity(m);
    let mut parts = Vec::with_capacity(m);
    for s in samples {
        points.push(rotate(s.p.component_mul(&stretch)));
        // Normals transform by the inverse transpose of the stretch.
        normals.push(rotate(s.n.component_div(&stretch).normalize()));
        parts.push(s.part);
    }
    let mut cloud = PointCloud::with_normals(points, normals).expect("equal lengths");
    if matches!(spec.kind, ShapeKind::SphereBox { .. }) {
        cloud.part_labels = Some(parts);
    }
    Ok(cloud)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub kind: ShapeKind,
    #[serde(default)]
    pub pose: Pose,
    #[serde(default)]
    pub stretch: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub seed: u64,
    pub shapes_per_class: usize,
    pub points: usize,
    #[serde(rename = "class")]
    pub classes: Vec<ClassSpec>,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), DatagenError> {
        if self.classes.is_empty() {
            return Err(DatagenError::InvalidSpec("at least one class is required".into()));
        }
        if self.shapes_per_class == 0 {
            return Err(DatagenError::InvalidSpec("shapes_per_class must be positive".into()));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.name.is_empty() || c.name.contains([',', '/', '"']) {
                return Err(DatagenError::InvalidSpec(format!("class {i} has an unusable name")));
            }
            if self.classes[..i].iter().any(|o| o.name == c.name) {
                return Err(DatagenError::InvalidSpec(format!("duplicate class `{}`", c.name)));
            }
        }
        Ok(())
    }

    /// Shape specs in manifest order. Seeds are keyed by class and index, so
    /// classes never share a seed.
    pub fn shapes(&self) -> Vec<(String, ShapeSpec)> {
        let mut out = Vec::new();
        for (ci, c) in self.classes.iter().enumerate() {
            for i in 0..self.shapes_per_class {
                out.push((
                    c.name.clone(),
                    ShapeSpec {
                        kind: c.kind,
                        points: self.points,
                        seed: derive(&[self.seed, ci as u64, i as u64]),
                        pose: c.pose,
                        stretch: c.stretch,
                    },
                ));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub class: String,
    pub seed: u64,
    pub kind: String,
}

/// Writes one point-cloud file per shape plus `manifest.csv` into `out`.
/// Paths in the manifest are relative to it.
pub fn make_dataset(spec: &DatasetSpec, out: &Path) -> Result<Vec<ManifestEntry>, DatagenError> {
    spec.validate()?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let mut entries = Vec::new();
    let mut counters = vec![0usize; spec.classes.len()];
    for (class, shape) in spec.shapes() {
        let ci = spec.classes.iter().position(|c| c.name == class).expect("own class");
        let file = PathBuf::from(format!("{class}_{:04}.pts", counters[ci]));
        counters[ci] += 1;
        write_point_cloud(&out.join(&file), &make_shape(&shape)?)?;
        entries.push(ManifestEntry {
            path: file,
            class,
            seed: shape.seed,
            kind: shape.kind.name().into(),
        });
    }
    write_manifest(&out.join(MANIFEST_NAME), &entries)?;
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), DatagenError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for e in entries {
        w.serialize(e).map_err(|e| DatagenError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    }
    let bytes = w.into_inner().expect("in-memory writer");
    write_atomic(path, &bytes)?;
    Ok(())
}

/// Reads a manifest, resolving relative paths against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, DatagenError> {
    let bad = |message: String| DatagenError::Manifest {
        path: path.to_path_buf(),
        message,
    };
    let text = std::fs::read(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for row in csv::Reader::from_reader(text.as_slice()).deserialize() {
        let mut e: ManifestEntry = row.map_err(|e| bad(e.to_string()))?;
        if e.path.is_relative() {
            e.path = base.join(&e.path);
        }
        out.push(e);
    }
    if out.is_empty() {
        return Err(bad("no entries".into()));
    }
    Ok(out)
}

/// Class names in order of first appearance, and each entry's class index.
pub fn class_indices(entries: &[ManifestEntry]) -> (Vec<String>, Vec<usize>) {
    let mut names: Vec<String> = Vec::new();
    let idx = entries
        .iter()
        .map(|e| match names.iter().position(|n| *n == e.class) {
            Some(i) => i,
            None => {
                names.push(e.class.clone());
                names.len() - 1
            }
        })
        .collect();
    (names, idx)
}

pub fn load_entries(entries: &[ManifestEntry]) -> Result<Vec<PointCloud>, DatagenError> {
    entries
        .iter()
        .map(|e| read_point_cloud(&e.path).map_err(DatagenError::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::estimate_normals_pca;
    use crate::io::sha256_file;
    use std::collections::HashSet;

    fn spec(kind: ShapeKind) -> ShapeSpec {
        ShapeSpec {
            kind,
            points: 1000,
            seed: 11,
            pose: Pose::Canonical,
            stretch: 0.0,
        }
    }

    fn all_kinds() -> Vec<ShapeKind> {
        vec![
            ShapeKind::Sphere { radius: 1.0 },
            ShapeKind::Box {
                half_extents: [1.0, 0.6, 0.8],
            },
            ShapeKind::Cylinder {
                radius: 0.5,
                half_height: 0.8,
            },
            ShapeKind::Cone { radius: 0.6, height: 1.5 },
            ShapeKind::Torus { major: 0.8, minor: 0.3 },
            ShapeKind::SphereBox {
                radius: 0.5,
                half_extent: 0.4,
                separation: 1.0,
            },
        ]
    }

    #[test]
    fn unit_sphere_points_and_normals() {
        let c = make_shape(&spec(ShapeKind::Sphere { radius: 1.0 })).unwrap();
        assert_eq!(c.len(), 1000);
        for (p, n) in c.points.iter().zip(&c.normals) {
            assert!((p.norm() - 1.0).abs() < 1e-9);
            assert!((p - n).norm() < 1e-9);
        }
    }

    #[test]
    fn box_normals_are_axis_aligned() {
        let c = make_shape(&spec(ShapeKind::Box { half_extents: [1.0; 3] })).unwrap();
        let distinct: HashSet<[i8; 3]> = c
            .normals
            .iter()
            .map(|n| {
                assert_eq!(n.iter().filter(|v| v.abs() == 1.0).count(), 1);
                assert_eq!(n.iter().filter(|v| **v == 0.0).count(), 2);
                [n.x as i8, n.y as i8, n.z as i8]
            })
            .collect();
        assert_eq!(distinct.len(), 6);
        for p in &c.points {
            assert!((p.amax() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn composite_parts_partition_points() {
        let c = make_shape(&spec(ShapeKind::SphereBox {
            radius: 0.5,
            half_extent: 0.4,
            separation: 1.0,
        }))
        .unwrap();
        let parts = c.part_labels.as_ref().unwrap();
        assert_eq!(parts.len(), c.len());
        let n0 = parts.iter().filter(|&&p| p == 0).count();
        assert!(n0 > 0 && n0 < c.len());
        assert!(parts.iter().all(|&p| p <= 1));
        for (p, &l) in c.points.iter().zip(parts) {
            if l == 0 {
                assert!(((p - Vec3::new(-0.5, 0.0, 0.0)).norm() - 0.5).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn surfaces_satisfy_their_implicit_equations() {
        let cyl = make_shape(&spec(ShapeKind::Cylinder {
            radius: 0.5,
            half_height: 0.8,
        }))
        .unwrap();
        for p in &cyl.points {
            let rho = (p.x * p.x + p.z * p.z).sqrt();
            assert!((rho - 0.5).abs() < 1e-9 || ((p.y.abs() - 0.8).abs() < 1e-12 && rho <= 0.5 + 1e-12));
        }
        let torus = make_shape(&spec(ShapeKind::Torus { major: 0.8, minor: 0.3 })).unwrap();
        for (p, n) in torus.points.iter().zip(&torus.normals) {
            let rho = (p.x * p.x + p.z * p.z).sqrt();
            assert!(((rho - 0.8).powi(2) + p.y * p.y - 0.09).abs() < 1e-9);
            assert!((n.norm() - 1.0).abs() < 1e-12);
        }
        let cone = make_shape(&spec(ShapeKind::Cone { radius: 0.6, height: 1.5 })).unwrap();
        for p in &cone.points {
            let rho = (p.x * p.x + p.z * p.z).sqrt();
            let lateral = (rho - 0.6 * (0.75 - p.y) / 1.5).abs() < 1e-9;
            assert!(lateral || (p.y + 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn area_weighting_balances_cylinder_faces() {
        // Side area 2π·0.5·2 = 2π, caps π/4 each: 80% of samples on the side.
        let mut s = spec(ShapeKind::Cylinder {
            radius: 0.5,
            half_height: 1.0,
        });
        s.points = 20000;
        let c = make_shape(&s).unwrap();
        let side = c.normals.iter().filter(|n| n.y == 0.0).count() as f64 / 20000.0;
        assert!((side - 0.8).abs() < 0.015, "{side}");
    }

    #[test]
    fn analytic_normals_agree_with_pca() {
        for kind in all_kinds() {
            let mut s = spec(kind);
            s.points = 2000;
            s.pose = Pose::Full;
            s.stretch = 0.2;
            let c = make_shape(&s).unwrap();
            let est = estimate_normals_pca(&PointCloud::new(c.points.clone()), 16).unwrap();
            let mut dots: Vec<f64> = c.normals.iter().zip(&est.normals).map(|(a, b)| a.dot(b).abs()).collect();
            dots.sort_by(f64::total_cmp);
            let median = dots[dots.len() / 2];
            assert!(median >= 0.95, "{}: median |dot| {median}", kind.name());
        }
    }

    #[test]
    fn generation_is_deterministic_and_validated() {
        for kind in all_kinds() {
            assert_eq!(make_shape(&spec(kind)).unwrap(), make_shape(&spec(kind)).unwrap());
        }
        let mut s = spec(ShapeKind::Sphere { radius: 1.0 });
        s.points = 63;
        assert!(matches!(make_shape(&s), Err(DatagenError::InvalidSpec(_))));
        assert!(make_shape(&spec(ShapeKind::Sphere { radius: 0.0 })).is_err());
        assert!(make_shape(&spec(ShapeKind::Torus { major: 0.3, minor: 0.5 })).is_err());
    }

    fn three_classes(seed: u64) -> DatasetSpec {
        let text = format!(
            r#"
seed = {seed}
shapes_per_class = 20
points = 128

[[class]]
name = "ball"
kind = {{ type = "sphere", radius = 1.0 }}

[[class]]
name = "crate"
kind = {{ type = "box", half_extents = [1.0, 0.5, 0.5] }}
pose = "yaw"

[[class]]
name = "ring"
kind = {{ type = "torus", major = 0.8, minor = 0.2 }}
stretch = 0.1
"#
        );
        toml::from_str(&text).unwrap()
    }

    #[test]
    fn dataset_files_manifest_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let spec = three_classes(5);
        let entries = make_dataset(&spec, dir.path()).unwrap();
        assert_eq!(entries.len(), 60);
        let read = read_manifest(&dir.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(read.len(), 60);
        let files = std::fs::read_dir(dir.path()).unwrap().count();
        assert_eq!(files, 61);
        let (names, idx) = class_indices(&read);
        assert_eq!(names, vec!["ball", "crate", "ring"]);
        assert_eq!(idx[0], 0);
        assert_eq!(idx[59], 2);
        let clouds = load_entries(&read).unwrap();
        for (((class, shape), cloud), e) in spec.shapes().iter().zip(&clouds).zip(&read) {
            assert_eq!(&e.class, class);
            assert_eq!(&make_shape(shape).unwrap(), cloud);
        }
        let hashes: HashSet<String> = read.iter().map(|e| sha256_file(&e.path).unwrap()).collect();
        assert_eq!(hashes.len(), 60);
        let seeds: HashSet<u64> = read.iter().map(|e| e.seed).collect();
        assert_eq!(seeds.len(), 60);

        let again = tempfile::tempdir().unwrap();
        make_dataset(&spec, again.path()).unwrap();
        for e in &entries {
            assert_eq!(
                std::fs::read(dir.path().join(&e.path)).unwrap(),
                std::fs::read(again.path().join(&e.path)).unwrap()
            );
        }
    }

    #[test]
    fn dataset_spec_validation() {
        let mut s = three_classes(1);
        s.classes.clear();
        assert!(s.validate().is_err());
        let mut s = three_classes(1);
        s.classes[1].name = "ball".into();
        assert!(s.validate().is_err());
        assert!(toml::from_str::<DatasetSpec>("seed = 1\nshapes_per_class = 1\npoints = 64\nbogus = 2\nclass = []").is_err());
    }
}
