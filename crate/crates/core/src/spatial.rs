//! Static 3-D kd-tree for exact nearest-neighbour queries.
//!
//! Distances are squared Euclidean, accumulated in x, y, z order. Equal
//! distances resolve to the lowest point index, so results agree exactly
//! with a brute-force scan.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::Vector3;

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    // Implicit balanced tree: the node of range [lo, hi) sits at (lo + hi) / 2.
    order: Vec<u32>,
    axis: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist2: f64,
}

#[derive(PartialEq)]
struct HeapEntry(Neighbor);

impl Eq for HeapEntry {}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapEntry {
    // Max-heap on (distance, index): the worst candidate sits on top.
    fn cmp(&self, other: &Self) -> Ordering {
        self.0
            .dist2
            .total_cmp(&other.0.dist2)
            .then(self.0.index.cmp(&other.0.index))
    }
}

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
fn better(d: f64, i: usize, best: &Neighbor) -> bool {
    d < best.dist2 || (d == best.dist2 && i < best.index)
}

impl KdTree {
    pub fn new(points: &[Vector3<f64>]) -> Self {
        let points: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut axis = vec![0u8; points.len()];
        build(&points, &mut order, &mut axis);
        Self { points, order, axis }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn nearest(&self, query: &Vector3<f64>) -> Option<Neighbor> {
        if self.points.is_empty() {
            return None;
        }
        let q = [query.x, query.y, query.z];
        let mut best = Neighbor {
            index: usize::MAX,
            dist2: f64::INFINITY,
        };
        self.nearest_in(0, self.order.len(), &q, &mut best);
        Some(best)
    }

    /// The `k` nearest points sorted by distance, then index.
    pub fn k_nearest(&self, query: &Vector3<f64>, k: usize) -> Vec<Neighbor> {
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        let q = [query.x, query.y, query.z];
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.k_nearest_in(0, self.order.len(), &q, k, &mut heap);
        let mut out: Vec<Neighbor> = heap.into_iter().map(|e| e.0).collect();
        out.sort_by(|a, b| a.dist2.total_cmp(&b.dist2).then(a.index.cmp(&b.index)));
        out
    }

    fn nearest_in(&self, lo: usize, hi: usize, q: &[f64; 3], best: &mut Neighbor) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let idx = self.order[mid] as usize;
        let p = &self.points[idx];
        let d = dist2(p, q);
        if better(d, idx, best) {
            *best = Neighbor { index: idx, dist2: d };
        }
        let ax = self.axis[mid] as usize;
        let diff = q[ax] - p[ax];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.nearest_in(near.0, near.1, q, best);
        if diff * diff <= best.dist2 {
            self.nearest_in(far.0, far.1, q, best);
        }
    }

    fn k_nearest_in(
        &self,
        lo: usize,
        hi: usize,
        q: &[f64; 3],
        k: usize,
        heap: &mut BinaryHeap<HeapEntry>,
    ) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let idx = self.order[mid] as usize;
        let p = &self.points[idx];
        let d = dist2(p, q);
        if heap.len() < k {
            heap.push(HeapEntry(Neighbor { index: idx, dist2: d }));
        } else if let Some(top) = heap.peek() {
            if better(d, idx, &top.0) {
                heap.pop();
                heap.push(HeapEntry(Neighbor { index: idx, dist2: d }));
            }
        }
        let ax = self.axis[mid] as usize;
        let diff = q[ax] - p[ax];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.k_nearest_in(near.0, near.1, q, k, heap);
        let bound = if heap.len() < k {
            f64::INFINITY
        } else {
            heap.peek().map_or(f64::INFINITY, |e| e.0.dist2)
        };
        if diff * diff <= bound {
            self.k_nearest_in(far.0, far.1, q, k, heap);
        }
    }
}

fn build(points: &[[f64; 3]], order: &mut [u32], axis: &mut [u8]) {
    if order.len() <= 1 {
        return;
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in order.iter() {
        let p = &points[i as usize];
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let ax = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
        .unwrap_or(0);
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        points[a as usize][ax].total_cmp(&points[b as usize][ax])
    });
    axis[mid] = ax as u8;
    let (left, right) = order.split_at_mut(mid);
    let (aleft, aright) = axis.split_at_mut(mid);
    build(points, left, aleft);
    build(points, &mut right[1..], &mut aright[1..]);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect()
    }

    fn brute(points: &[Vector3<f64>], q: &Vector3<f64>) -> Neighbor {
        let mut best = Neighbor {
            index: usize::MAX,
            dist2: f64::INFINITY,
        };
        for (i, p) in points.iter().enumerate() {
            let d = dist2(&[p.x, p.y, p.z], &[q.x, q.y, q.z]);
            if d < best.dist2 {
                best = Neighbor { index: i, dist2: d };
            }
        }
        best
    }

    #[test]
    fn nearest_matches_brute_force() {
        let pts = random_points(500, 1);
        let tree = KdTree::new(&pts);
        for q in random_points(200, 2) {
            assert_eq!(tree.nearest(&q).unwrap(), brute(&pts, &q));
        }
    }

    #[test]
    fn k_nearest_matches_sorted_scan() {
        let pts = random_points(300, 3);
        let tree = KdTree::new(&pts);
        for q in random_points(50, 4) {
            let mut all: Vec<Neighbor> = pts
                .iter()
                .enumerate()
                .map(|(i, p)| Neighbor {
                    index: i,
                    dist2: dist2(&[p.x, p.y, p.z], &[q.x, q.y, q.z]),
                })
                .collect();
            all.sort_by(|a, b| a.dist2.total_cmp(&b.dist2).then(a.index.cmp(&b.index)));
            assert_eq!(tree.k_nearest(&q, 7), all[..7].to_vec());
        }
    }

    #[test]
    fn duplicate_points_resolve_to_lowest_index() {
        let p = Vector3::new(0.1, 0.2, 0.3);
        let pts = vec![Vector3::new(1.0, 1.0, 1.0), p, p, p];
        let tree = KdTree::new(&pts);
        assert_eq!(tree.nearest(&p).unwrap().index, 1);
        let knn = tree.k_nearest(&p, 2);
        assert_eq!(knn.iter().map(|n| n.index).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn empty_tree() {
        let tree = KdTree::new(&[]);
        assert!(tree.nearest(&Vector3::zeros()).is_none());
    }
}
