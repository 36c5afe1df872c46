//! Static 3D k-d tree for exact K-nearest-neighbour queries.
//!
//! Ordering is lexicographic on `(squared distance, point index)`, so equal
//! distances resolve to the lower index and results match a brute-force sort
//! exactly.

use std::cmp::Ordering;

#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    // implicit balanced tree over `order`: node for range [lo, hi) sits at (lo + hi) / 2
    order: Vec<usize>,
    axes: Vec<u8>,
}

/// K nearest points, closest first.
#[derive(Clone, Debug, PartialEq)]
pub struct KnnResult {
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
}

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
fn key_cmp(a: (f64, usize), b: (f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

impl KdTree {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        let n = points.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut axes = vec![0u8; n];
        build(&points, &mut order, &mut axes);
        KdTree { points, order, axes }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    /// The `k` nearest points to `query`. Returns fewer when the tree is smaller.
    pub fn knn(&self, query: &[f64; 3], k: usize) -> KnnResult {
        let k = k.min(self.points.len());
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        if k > 0 {
            self.search(query, k, 0, self.order.len(), &mut best);
        }
        KnnResult {
            indices: best.iter().map(|b| b.1).collect(),
            distances: best.iter().map(|b| b.0.sqrt()).collect(),
        }
    }

    pub fn nearest(&self, query: &[f64; 3]) -> (usize, f64) {
        let r = self.knn(query, 1);
        (r.indices[0], r.distances[0])
    }

    fn search(&self, q: &[f64; 3], k: usize, lo: usize, hi: usize, best: &mut Vec<(f64, usize)>) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let idx = self.order[mid];
        let p = &self.points[idx];
        let cand = (dist2(q, p), idx);
        if best.len() < k || key_cmp(cand, best[best.len() - 1]) == Ordering::Less {
            let pos = best.partition_point(|b| key_cmp(*b, cand) == Ordering::Less);
            best.insert(pos, cand);
            best.truncate(k);
        }
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.search(q, k, near.0, near.1, best);
        // `<=` keeps equal-distance candidates reachable for the index tie-break
        if best.len() < k || diff * diff <= best[best.len() - 1].0 {
            self.search(q, k, far.0, far.1, best);
        }
    }
}

fn build(points: &[[f64; 3]], order: &mut [usize], axes: &mut [u8]) {
    let n = order.len();
    if n == 0 {
        return;
    }
    // split on the axis with the widest spread
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in order.iter() {
        for a in 0..3 {
            lo[a] = lo[a].min(points[i][a]);
            hi[a] = hi[a].max(points[i][a]);
        }
    }
    let axis = (0..3).max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b]))).unwrap();
    let mid = n / 2;
    order.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b)));
    axes[mid] = axis as u8;
    let (left, rest) = order.split_at_mut(mid);
    let (left_axes, rest_axes) = axes.split_at_mut(mid);
    build(points, left, left_axes);
    build(points, &mut rest[1..], &mut rest_axes[1..]);
}

/// Reference implementation: full sort by `(distance, index)`.
pub fn brute_force_knn(points: &[[f64; 3]], query: &[f64; 3], k: usize) -> KnnResult {
    let mut all: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, p)| (dist2(query, p), i)).collect();
    all.sort_by(|a, b| key_cmp(*a, *b));
    all.truncate(k);
    KnnResult {
        indices: all.iter().map(|b| b.1).collect(),
        distances: all.iter().map(|b| b.0.sqrt()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_brute_force_on_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<[f64; 3]> = (0..300).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let tree = KdTree::new(pts.clone());
        for _ in 0..200 {
            let q = [rng.gen_range(-0.2..1.2), rng.gen_range(-0.2..1.2), rng.gen_range(-0.2..1.2)];
            for k in [1, 5, 17] {
                assert_eq!(tree.knn(&q, k), brute_force_knn(&pts, &q, k));
            }
        }
    }

    #[test]
    fn ties_resolve_to_lower_index() {
        // lattice points produce many exact ties
        let mut pts = Vec::new();
        for x in 0..4 {
            for y in 0..4 {
                for z in 0..4 {
                    pts.push([x as f64, y as f64, z as f64]);
                }
            }
        }
        let tree = KdTree::new(pts.clone());
        for q in [[1.5, 1.5, 1.5], [0.5, 0.0, 0.0], [2.0, 2.0, 2.5]] {
            for k in [1, 2, 8, 20] {
                assert_eq!(tree.knn(&q, k), brute_force_knn(&pts, &q, k));
            }
        }
    }

    #[test]
    fn duplicate_points() {
        let pts = vec![[0.0; 3], [0.0; 3], [1.0, 0.0, 0.0], [0.0; 3]];
        let tree = KdTree::new(pts.clone());
        let r = tree.knn(&[0.0; 3], 3);
        assert_eq!(r.indices, vec![0, 1, 3]);
    }
}
