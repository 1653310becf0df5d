//! Sparse octree over the cube `[-1, 1]³` with parent, child and 27-neighbour
//! maps per level, and the 4-channel plane-fit signal on finest octants.
//!
//! Octants at each level are stored in ascending Morton-key order. The key
//! interleaves cell coordinates with x in the lowest bit, so the low three
//! bits of a key are its child slot under the parent:
//! bit0 = x ≥ centre.x, bit1 = y ≥ centre.y, bit2 = z ≥ centre.z.

use std::io::{self, Read, Write};

use nalgebra::Matrix3;
use thiserror::Error;

use crate::geometry::{covariance, largest_eigenvector, smallest_eigenvector, PointCloud, Vec3};

/// Marker for an unoccupied child or neighbour slot.
pub const EMPTY: u32 = u32::MAX;

/// Neighbour slot of the octant itself.
pub const SELF_SLOT: usize = 13;

pub const MAX_DEPTH: u32 = 16;

const BOUNDS_TOLERANCE: f64 = 1e-6;
const CACHE_MAGIC: &[u8; 4] = b"MIDO";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum OctreeError {
    #[error("point {index} at ({x}, {y}, {z}) lies outside the [-1, 1] cube")]
    PointOutOfBounds { index: usize, x: f64, y: f64, z: f64 },
    #[error("depth {0} is outside 1..={MAX_DEPTH}")]
    InvalidDepth(u32),
    #[error("cannot build an octree from an empty cloud")]
    EmptyCloud,
    #[error("octant {index} does not exist at level {level}")]
    InvalidIndex { level: u32, index: usize },
    #[error("cloud has no normals; estimate them before computing the input signal")]
    MissingNormals,
    #[error("cloud has {got} points but the octree was built from {expected}")]
    CloudMismatch { got: usize, expected: usize },
    #[error("octant {0} has no usable normal direction")]
    DegenerateNormal(usize),
    #[error("corrupt octree cache: {0}")]
    CorruptCache(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Level {
    pub keys: Vec<u64>,
    /// Index of each octant's parent at the previous level (`EMPTY` at the root).
    pub parent: Vec<u32>,
    /// Child indices at the next level (`EMPTY` for unoccupied or at the leaves).
    pub children: Vec<[u32; 8]>,
    /// Neighbour indices at this level, slot `(dz+1)*9 + (dy+1)*3 + (dx+1)`.
    pub neighbors: Vec<[u32; 27]>,
}

impl Level {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    fn find(&self, key: u64) -> Option<u32> {
        self.keys.binary_search(&key).ok().map(|i| i as u32)
    }
}

/// Per-leaf `(|n_x|, |n_y|, |n_z|, d)`.
pub type Signal = [f64; 4];

#[derive(Debug, Clone, PartialEq)]
pub struct InputSignal {
    pub values: Vec<Signal>,
    /// Leaves whose mean normal vanished and fell back to a covariance fit.
    pub degenerate_fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Octree {
    depth: u32,
    levels: Vec<Level>,
    point_to_octant: Vec<u32>,
    input_signal: Option<Vec<Signal>>,
}

fn spread_bits(mut v: u64) -> u64 {
    // Spread the low 21 bits so there are two zero bits between each.
    v &= 0x1f_ffff;
    v = (v | (v << 32)) & 0x001f_0000_0000_ffff;
    v = (v | (v << 16)) & 0x001f_0000_ff00_00ff;
    v = (v | (v << 8)) & 0x100f_00f0_0f00_f00f;
    v = (v | (v << 4)) & 0x10c3_0c30_c30c_30c3;
    v = (v | (v << 2)) & 0x1249_2492_4924_9249;
    v
}

fn compact_bits(mut v: u64) -> u64 {
    v &= 0x1249_2492_4924_9249;
    v = (v ^ (v >> 2)) & 0x10c3_0c30_c30c_30c3;
    v = (v ^ (v >> 4)) & 0x100f_00f0_0f00_f00f;
    v = (v ^ (v >> 8)) & 0x001f_0000_ff00_00ff;
    v = (v ^ (v >> 16)) & 0x001f_0000_0000_ffff;
    v = (v ^ (v >> 32)) & 0x1f_ffff;
    v
}

pub fn morton_encode(x: u32, y: u32, z: u32) -> u64 {
    spread_bits(x as u64) | (spread_bits(y as u64) << 1) | (spread_bits(z as u64) << 2)
}

pub fn morton_decode(key: u64) -> [u32; 3] {
    [
        compact_bits(key) as u32,
        compact_bits(key >> 1) as u32,
        compact_bits(key >> 2) as u32,
    ]
}

/// Neighbour slot for offsets in `{-1, 0, 1}`.
pub fn neighbor_slot(dx: i32, dy: i32, dz: i32) -> usize {
    ((dz + 1) * 9 + (dy + 1) * 3 + (dx + 1)) as usize
}

/// Edge length of an octant at `level` in the `[-1, 1]` cube.
pub fn edge_length(level: u32) -> f64 {
    2.0 / (1u64 << level) as f64
}

pub fn cell_center(level: u32, cell: [u32; 3]) -> Vec3 {
    let h = edge_length(level);
    Vec3::new(
        -1.0 + (cell[0] as f64 + 0.5) * h,
        -1.0 + (cell[1] as f64 + 0.5) * h,
        -1.0 + (cell[2] as f64 + 0.5) * h,
    )
}

fn point_cell(p: &Vec3, depth: u32) -> [u32; 3] {
    let n = (1u64 << depth) as f64;
    std::array::from_fn(|a| {
        let t = ((p[a] + 1.0) * 0.5 * n).floor();
        t.clamp(0.0, n - 1.0) as u32
    })
}

fn build_neighbors(level: &Level, lvl: u32) -> Vec<[u32; 27]> {
    let side = 1i64 << lvl;
    level
        .keys
        .iter()
        .map(|&key| {
            let [x, y, z] = morton_decode(key);
            let mut slots = [EMPTY; 27];
            for dz in -1..=1i32 {
                for dy in -1..=1i32 {
                    for dx in -1..=1i32 {
                        let (nx, ny, nz) = (x as i64 + dx as i64, y as i64 + dy as i64, z as i64 + dz as i64);
                        if nx < 0 || ny < 0 || nz < 0 || nx >= side || ny >= side || nz >= side {
                            continue;
                        }
                        let nk = morton_encode(nx as u32, ny as u32, nz as u32);
                        if let Some(i) = level.find(nk) {
                            slots[neighbor_slot(dx, dy, dz)] = i;
                        }
                    }
                }
            }
            slots
        })
        .collect()
}

impl Octree {
    /// Occupied octants are exactly those containing a point, plus ancestors.
    pub fn build(cloud: &PointCloud, depth: u32) -> Result<Octree, OctreeError> {
        if depth == 0 || depth > MAX_DEPTH {
            return Err(OctreeError::InvalidDepth(depth));
        }
        if cloud.is_empty() {
            return Err(OctreeError::EmptyCloud);
        }
        let limit = 1.0 + BOUNDS_TOLERANCE;
        let mut point_keys = Vec::with_capacity(cloud.len());
        for (i, p) in cloud.points.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite() && c.abs() <= limit) {
                return Err(OctreeError::PointOutOfBounds {
                    index: i,
                    x: p.x,
                    y: p.y,
                    z: p.z,
                });
            }
            let [x, y, z] = point_cell(p, depth);
            point_keys.push(morton_encode(x, y, z));
        }

        let mut keys_per_level: Vec<Vec<u64>> = vec![Vec::new(); depth as usize + 1];
        let mut leaf_keys = point_keys.clone();
        leaf_keys.sort_unstable();
        leaf_keys.dedup();
        keys_per_level[depth as usize] = leaf_keys;
        for l in (0..depth as usize).rev() {
            let mut k: Vec<u64> = keys_per_level[l + 1].iter().map(|k| k >> 3).collect();
            k.dedup();
            keys_per_level[l] = k;
        }

        let mut levels: Vec<Level> = keys_per_level
            .into_iter()
            .map(|keys| {
                let n = keys.len();
                Level {
                    keys,
                    parent: vec![EMPTY; n],
                    children: vec![[EMPTY; 8]; n],
                    neighbors: Vec::new(),
                }
            })
            .collect();

        for l in 1..=depth as usize {
            let (upper, lower) = levels.split_at_mut(l);
            let parent_level = &mut upper[l - 1];
            let level = &mut lower[0];
            // Keys are sorted, so parents appear in order: a merge walk suffices.
            let mut p = 0usize;
            for (i, &key) in level.keys.iter().enumerate() {
                let pk = key >> 3;
                while parent_level.keys[p] != pk {
                    p += 1;
                }
                level.parent[i] = p as u32;
                parent_level.children[p][(key & 7) as usize] = i as u32;
            }
        }
        for (l, level) in levels.iter_mut().enumerate() {
            level.neighbors = build_neighbors(level, l as u32);
        }

        let leaves = &levels[depth as usize];
        let point_to_octant = point_keys
            .iter()
            .map(|k| leaves.find(*k).expect("leaf key present"))
            .collect();

        Ok(Octree {
            depth,
            levels,
            point_to_octant,
            input_signal: None,
        })
    }

    /// Builds the tree and attaches the input signal.
    pub fn with_signal(cloud: &PointCloud, depth: u32) -> Result<Octree, OctreeError> {
        let mut tree = Self::build(cloud, depth)?;
        let signal = compute_input_signal(&tree, cloud)?;
        tree.input_signal = Some(signal.values);
        Ok(tree)
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn level(&self, level: u32) -> &Level {
        &self.levels[level as usize]
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn leaves(&self) -> &Level {
        &self.levels[self.depth as usize]
    }

    pub fn point_to_octant(&self) -> &[u32] {
        &self.point_to_octant
    }

    pub fn input_signal(&self) -> Option<&[Signal]> {
        self.input_signal.as_deref()
    }

    pub fn set_input_signal(&mut self, signal: Vec<Signal>) {
        self.input_signal = Some(signal);
    }

    pub fn cell(&self, level: u32, index: usize) -> [u32; 3] {
        morton_decode(self.levels[level as usize].keys[index])
    }

    pub fn neighbors(&self, level: u32, index: usize) -> Result<[u32; 27], OctreeError> {
        self.levels
            .get(level as usize)
            .and_then(|l| l.neighbors.get(index))
            .copied()
            .ok_or(OctreeError::InvalidIndex { level, index })
    }

    pub fn write_cache<W: Write>(&self, mut w: W) -> Result<(), OctreeError> {
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&CACHE_VERSION.to_le_bytes())?;
        w.write_all(&self.depth.to_le_bytes())?;
        for level in &self.levels {
            w.write_all(&(level.len() as u64).to_le_bytes())?;
            for k in &level.keys {
                w.write_all(&k.to_le_bytes())?;
            }
            for p in &level.parent {
                w.write_all(&p.to_le_bytes())?;
            }
            for c in level.children.iter().flatten() {
                w.write_all(&c.to_le_bytes())?;
            }
            for n in level.neighbors.iter().flatten() {
                w.write_all(&n.to_le_bytes())?;
            }
        }
        w.write_all(&(self.point_to_octant.len() as u64).to_le_bytes())?;
        for p in &self.point_to_octant {
            w.write_all(&p.to_le_bytes())?;
        }
        match &self.input_signal {
            Some(sig) => {
                w.write_all(&[1u8])?;
                for v in sig.iter().flatten() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            None => w.write_all(&[0u8])?,
        }
        Ok(())
    }

    pub fn read_cache<R: Read>(mut r: R) -> Result<Octree, OctreeError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(OctreeError::CorruptCache("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CACHE_VERSION {
            return Err(OctreeError::CorruptCache(format!("unsupported version {version}")));
        }
        let depth = read_u32(&mut r)?;
        if depth == 0 || depth > MAX_DEPTH {
            return Err(OctreeError::InvalidDepth(depth));
        }
        let mut levels = Vec::with_capacity(depth as usize + 1);
        for _ in 0..=depth {
            let n = read_len(&mut r)?;
            let keys = (0..n).map(|_| read_u64(&mut r)).collect::<Result<Vec<_>, _>>()?;
            let parent = (0..n).map(|_| read_u32(&mut r)).collect::<Result<Vec<_>, _>>()?;
            let mut children = vec![[EMPTY; 8]; n];
            for c in &mut children {
                for s in c.iter_mut() {
                    *s = read_u32(&mut r)?;
                }
            }
            let mut neighbors = vec![[EMPTY; 27]; n];
            for c in &mut neighbors {
                for s in c.iter_mut() {
                    *s = read_u32(&mut r)?;
                }
            }
            levels.push(Level {
                keys,
                parent,
                children,
                neighbors,
            });
        }
        let np = read_len(&mut r)?;
        let point_to_octant = (0..np).map(|_| read_u32(&mut r)).collect::<Result<Vec<_>, _>>()?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let input_signal = if flag[0] == 1 {
            let n = levels[depth as usize].len();
            let mut sig = vec![[0.0; 4]; n];
            for s in &mut sig {
                for v in s.iter_mut() {
                    *v = f64::from_le_bytes(read_array(&mut r)?);
                }
            }
            Some(sig)
        } else {
            None
        };
        Ok(Octree {
            depth,
            levels,
            point_to_octant,
            input_signal,
        })
    }
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> io::Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

fn read_len<R: Read>(r: &mut R) -> Result<usize, OctreeError> {
    let n = read_u64(r)?;
    if n > (1 << 32) {
        return Err(OctreeError::CorruptCache(format!("implausible length {n}")));
    }
    Ok(n as usize)
}

/// Plane fit per finest octant: the plane normal is the mean point normal,
/// the offset is measured from the octant centre in units of edge length.
/// Normal components enter the signal as absolute values.
pub fn compute_input_signal(octree: &Octree, cloud: &PointCloud) -> Result<InputSignal, OctreeError> {
    if !cloud.has_normals() {
        return Err(OctreeError::MissingNormals);
    }
    if cloud.len() != octree.point_to_octant.len() {
        return Err(OctreeError::CloudMismatch {
            got: cloud.len(),
            expected: octree.point_to_octant.len(),
        });
    }
    let depth = octree.depth;
    let leaves = octree.leaves();
    let n = leaves.len();
    // Group point indices by leaf (counting sort keeps input order inside a leaf).
    let mut start = vec![0usize; n + 1];
    for &o in &octree.point_to_octant {
        start[o as usize + 1] += 1;
    }
    for i in 0..n {
        start[i + 1] += start[i];
    }
    let mut fill = start.clone();
    let mut members = vec![0usize; cloud.len()];
    for (i, &o) in octree.point_to_octant.iter().enumerate() {
        members[fill[o as usize]] = i;
        fill[o as usize] += 1;
    }

    let edge = edge_length(depth);
    let mut degenerate = 0usize;
    let mut values = Vec::with_capacity(n);
    for leaf in 0..n {
        let idx = &members[start[leaf]..start[leaf + 1]];
        let count = idx.len() as f64;
        let centroid = idx.iter().fold(Vec3::zeros(), |a, &i| a + cloud.points[i]) / count;
        let mean_normal = idx.iter().fold(Vec3::zeros(), |a, &i| a + cloud.normals[i]) / count;
        let normal = if mean_normal.norm() >= 1e-8 {
            mean_normal.normalize()
        } else {
            degenerate += 1;
            fallback_normal(cloud, idx).ok_or(OctreeError::DegenerateNormal(leaf))?
        };
        let center = cell_center(depth, morton_decode(leaves.keys[leaf]));
        let d = normal.dot(&(centroid - center)) / edge;
        values.push([normal.x.abs(), normal.y.abs(), normal.z.abs(), d]);
    }
    Ok(InputSignal {
        values,
        degenerate_fallbacks: degenerate,
    })
}

/// Smallest-eigenvector of the point covariance; for fewer than three points,
/// or a rank-deficient spread, the principal axis of the normal tensor.
fn fallback_normal(cloud: &PointCloud, idx: &[usize]) -> Option<Vec3> {
    if idx.len() >= 3 {
        let cov = covariance(idx.iter().map(|&i| cloud.points[i]));
        let eig = nalgebra::SymmetricEigen::new(cov);
        let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        if ev[1] > 1e-12 && ev[0] < 0.5 * ev[1] {
            return Some(smallest_eigenvector(cov));
        }
    }
    let tensor = idx.iter().fold(Matrix3::zeros(), |a, &i| {
        let n = cloud.normals[i];
        a + n * n.transpose()
    });
    if tensor.amax() < 1e-12 {
        return None;
    }
    Some(largest_eigenvector(tensor))
}
