//! Several octrees concatenated level by level, with row offsets applied to
//! every index map. This is the structure the convolution, pooling and
//! upsampling kernels consume.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::octree::{neighbor_slot, Octree, EMPTY};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    Nearest,
    #[default]
    Trilinear,
}

/// Row-sparse linear map: output row `r` is `Σ weight · input[source]` over
/// `entries[offsets[r]..offsets[r + 1]]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseRows {
    pub offsets: Vec<usize>,
    pub entries: Vec<(u32, f64)>,
}

impl SparseRows {
    pub fn rows(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn row(&self, r: usize) -> &[(u32, f64)] {
        &self.entries[self.offsets[r]..self.offsets[r + 1]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelIndex {
    pub level: u32,
    pub len: usize,
    pub neighbors: Vec<[u32; 27]>,
    pub parent: Vec<u32>,
    pub children: Vec<[u32; 8]>,
    /// Row range of each shape: shape `b` owns `shape_offsets[b]..shape_offsets[b + 1]`.
    pub shape_offsets: Vec<usize>,
    /// Maps from the previous (coarser) level into this one; absent at level 0.
    pub upsample_nearest: Option<Arc<SparseRows>>,
    pub upsample_trilinear: Option<Arc<SparseRows>>,
}

impl LevelIndex {
    pub fn upsample_map(&self, mode: UpsampleMode) -> Option<&Arc<SparseRows>> {
        match mode {
            UpsampleMode::Nearest => self.upsample_nearest.as_ref(),
            UpsampleMode::Trilinear => self.upsample_trilinear.as_ref(),
        }
    }

    pub fn shape_count(&self) -> usize {
        self.shape_offsets.len() - 1
    }
}

#[derive(Debug, Clone)]
pub struct OctreeBatch {
    pub depth: u32,
    pub levels: Vec<Arc<LevelIndex>>,
    /// Finest-level row of every point, shapes concatenated in batch order.
    pub point_rows: Arc<Vec<u32>>,
    pub point_offsets: Vec<usize>,
    /// Input signal rows aligned with the finest level.
    pub signal: Vec<[f64; 4]>,
}

/// Trilinear weights from the 8 parent-level octants nearest to each child
/// centre. Per axis the child centre sits a quarter cell from its parent's
/// centre, giving weights 3/4 (own parent) and 1/4 (adjacent parent).
/// Unoccupied parents contribute nothing.
fn trilinear_map(tree: &Octree, child_level: u32) -> SparseRows {
    let parent_level = tree.level(child_level - 1);
    let level = tree.level(child_level);
    let mut offsets = Vec::with_capacity(level.len() + 1);
    let mut entries = Vec::with_capacity(level.len() * 8);
    offsets.push(0);
    for (i, &key) in level.keys.iter().enumerate() {
        let parent = level.parent[i] as usize;
        let odd = [(key & 1) != 0, (key & 2) != 0, (key & 4) != 0];
        let axis_taps = |a: usize| -> [(i32, f64); 2] {
            if odd[a] {
                [(0, 0.75), (1, 0.25)]
            } else {
                [(-1, 0.25), (0, 0.75)]
            }
        };
        let (tx, ty, tz) = (axis_taps(0), axis_taps(1), axis_taps(2));
        for &(dz, wz) in &tz {
            for &(dy, wy) in &ty {
                for &(dx, wx) in &tx {
                    let n = parent_level.neighbors[parent][neighbor_slot(dx, dy, dz)];
                    if n != EMPTY {
                        entries.push((n, wx * wy * wz));
                    }
                }
            }
        }
        offsets.push(entries.len());
    }
    SparseRows { offsets, entries }
}

fn nearest_map(tree: &Octree, child_level: u32) -> SparseRows {
    let level = tree.level(child_level);
    SparseRows {
        offsets: (0..=level.len()).collect(),
        entries: level.parent.iter().map(|&p| (p, 1.0)).collect(),
    }
}

fn shift(v: u32, by: usize) -> u32 {
    if v == EMPTY {
        EMPTY
    } else {
        v + by as u32
    }
}

impl OctreeBatch {
    /// All trees must share a depth and carry an input signal.
    pub fn new(trees: &[&Octree]) -> Result<Self, BatchError> {
        let first = trees.first().ok_or(BatchError::Empty)?;
        let depth = first.depth();
        for t in trees {
            if t.depth() != depth {
                return Err(BatchError::DepthMismatch {
                    expected: depth,
                    got: t.depth(),
                });
            }
            if t.input_signal().is_none() {
                return Err(BatchError::MissingSignal);
            }
        }
        let mut levels = Vec::with_capacity(depth as usize + 1);
        for l in 0..=depth {
            let mut idx = LevelIndex {
                level: l,
                len: 0,
                neighbors: Vec::new(),
                parent: Vec::new(),
                children: Vec::new(),
                shape_offsets: vec![0],
                upsample_nearest: None,
                upsample_trilinear: None,
            };
            let mut near = SparseRows {
                offsets: vec![0],
                entries: Vec::new(),
            };
            let mut tri = near.clone();
            let mut parent_base = 0usize;
            for t in trees {
                let lvl = t.level(l);
                let base = idx.len;
                idx.neighbors
                    .extend(lvl.neighbors.iter().map(|n| n.map(|v| shift(v, base))));
                idx.parent.extend(lvl.parent.iter().map(|&p| shift(p, parent_base)));
                idx.children.extend(lvl.children.iter().copied());
                if l > 0 {
                    for (map, dst) in [(nearest_map(t, l), &mut near), (trilinear_map(t, l), &mut tri)] {
                        let start = dst.entries.len();
                        dst.entries
                            .extend(map.entries.iter().map(|&(p, w)| (p + parent_base as u32, w)));
                        dst.offsets
                            .extend(map.offsets[1..].iter().map(|o| o + start));
                    }
                    parent_base += t.level(l - 1).len();
                }
                idx.len += lvl.len();
                idx.shape_offsets.push(idx.len);
            }
            if l > 0 {
                idx.upsample_nearest = Some(Arc::new(near));
                idx.upsample_trilinear = Some(Arc::new(tri));
            }
            levels.push(idx);
        }
        // Child indices need the next level's per-tree offsets.
        for l in 0..depth as usize {
            let next_offsets = levels[l + 1].shape_offsets.clone();
            let own = levels[l].shape_offsets.clone();
            let idx = &mut levels[l];
            for (b, w) in own.windows(2).enumerate() {
                for row in w[0]..w[1] {
                    idx.children[row] = idx.children[row].map(|c| shift(c, next_offsets[b]));
                }
            }
        }

        let mut point_rows = Vec::new();
        let mut point_offsets = vec![0];
        let mut signal = Vec::new();
        let leaf_offsets = &levels[depth as usize].shape_offsets;
        for (b, t) in trees.iter().enumerate() {
            point_rows.extend(t.point_to_octant().iter().map(|&o| o + leaf_offsets[b] as u32));
            point_offsets.push(point_rows.len());
            signal.extend_from_slice(t.input_signal().expect("checked above"));
        }

        Ok(OctreeBatch {
            depth,
            levels: levels.into_iter().map(Arc::new).collect(),
            point_rows: Arc::new(point_rows),
            point_offsets,
            signal,
        })
    }

    pub fn shape_count(&self) -> usize {
        self.point_offsets.len() - 1
    }

    pub fn level(&self, l: u32) -> &Arc<LevelIndex> {
        &self.levels[l as usize]
    }

    pub fn total_points(&self) -> usize {
        self.point_rows.len()
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum BatchError {
    #[error("cannot batch zero octrees")]
    Empty,
    #[error("octree depth {got} differs from batch depth {expected}")]
    DepthMismatch { expected: u32, got: u32 },
    #[error("octree has no input signal")]
    MissingSignal,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{PointCloud, Vec3};
    use crate::octree::cell_center;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tree(seed: u64, n: usize, depth: u32) -> Octree {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Vec3> = (0..n)
            .map(|_| Vec3::from_fn(|_, _| rng.random_range(-0.9..0.9)))
            .collect();
        let normals = vec![Vec3::z(); n];
        Octree::with_signal(&PointCloud::with_normals(pts, normals).unwrap(), depth).unwrap()
    }

    #[test]
    fn offsets_are_applied_consistently() {
        let a = tree(1, 50, 3);
        let b = tree(2, 80, 3);
        let batch = OctreeBatch::new(&[&a, &b]).unwrap();
        for l in 0..=3u32 {
            let idx = batch.level(l);
            let na = a.level(l).len();
            assert_eq!(idx.len, na + b.level(l).len());
            assert_eq!(idx.shape_offsets, vec![0, na, idx.len]);
            for (row, slots) in idx.neighbors.iter().enumerate() {
                for &s in slots {
                    if s != EMPTY {
                        // Neighbours never cross shapes.
                        assert_eq!((s as usize) < na, row < na);
                    }
                }
            }
            if l < 3 {
                let next = batch.level(l + 1);
                for (row, ch) in idx.children.iter().enumerate() {
                    for &c in ch {
                        if c != EMPTY {
                            assert_eq!(next.parent[c as usize] as usize, row);
                        }
                    }
                }
            }
        }
        assert_eq!(batch.total_points(), 130);
        assert_eq!(batch.point_offsets, vec![0, 50, 130]);
        let leaves_a = a.leaves().len() as u32;
        assert!(batch.point_rows[50..].iter().all(|&r| r >= leaves_a));
    }

    #[test]
    fn trilinear_weights_sum_to_one_with_full_parent_support() {
        // Dense 8³ block at depth 4 whose interior parents are all occupied.
        let mut pts = Vec::new();
        for z in 4..12 {
            for y in 4..12 {
                for x in 4..12 {
                    pts.push(cell_center(4, [x, y, z]));
                }
            }
        }
        let n = pts.len();
        let t = Octree::with_signal(&PointCloud::with_normals(pts, vec![Vec3::z(); n]).unwrap(), 4)
            .unwrap();
        let map = trilinear_map(&t, 4);
        let mut full = 0;
        for r in 0..map.rows() {
            let row = map.row(r);
            let cell = t.cell(4, r);
            if cell.iter().all(|&c| (6..10).contains(&c)) {
                full += 1;
                assert_eq!(row.len(), 8);
                let s: f64 = row.iter().map(|e| e.1).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        assert!(full > 0);
    }

    #[test]
    fn depth_mismatch_rejected() {
        let a = tree(1, 10, 3);
        let b = tree(2, 10, 4);
        assert_eq!(
            OctreeBatch::new(&[&a, &b]).unwrap_err(),
            BatchError::DepthMismatch { expected: 3, got: 4 }
        );
    }
}
