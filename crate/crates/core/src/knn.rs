//! Exact 3D nearest-neighbor search.
//!
//! Results are identical to an exhaustive scan: squared distances use the
//! same `dx*dx + dy*dy + dz*dz` evaluation, pruning only discards subtrees
//! whose splitting-plane distance strictly exceeds the current best, and ties
//! resolve to the lowest point index.

use nalgebra::Vector3;

use crate::exec::Exec;

const LEAF_SIZE: usize = 8;

#[inline]
pub fn dist2(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

/// Balanced kd-tree stored implicitly over a permutation of point indices:
/// the node for range `[lo, hi)` sits at `mid = (lo + hi) / 2`.
pub struct KdTree<'a> {
    points: &'a [Vector3<f64>],
    order: Vec<usize>,
    axes: Vec<u8>,
}

impl<'a> KdTree<'a> {
    pub fn new(points: &'a [Vector3<f64>]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut axes = vec![0u8; points.len()];
        build(points, &mut order, &mut axes);
        Self { points, order, axes }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `(index, squared distance)` of the closest point, `None` if empty.
    pub fn nearest(&self, q: &Vector3<f64>) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(q, 0, self.order.len(), &mut best);
        Some(best)
    }

    fn consider(&self, q: &Vector3<f64>, idx: usize, best: &mut (usize, f64)) {
        let d = dist2(q, &self.points[idx]);
        if d < best.1 || (d == best.1 && idx < best.0) {
            *best = (idx, d);
        }
    }

    fn search(&self, q: &Vector3<f64>, lo: usize, hi: usize, best: &mut (usize, f64)) {
        if hi - lo <= LEAF_SIZE {
            for &idx in &self.order[lo..hi] {
                self.consider(q, idx, best);
            }
            return;
        }
        let mid = (lo + hi) / 2;
        let idx = self.order[mid];
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - self.points[idx][axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(q, near.0, near.1, best);
        self.consider(q, idx, best);
        if diff * diff <= best.1 {
            self.search(q, far.0, far.1, best);
        }
    }
}

fn build(points: &[Vector3<f64>], order: &mut [usize], axes: &mut [u8]) {
    let n = order.len();
    if n <= LEAF_SIZE {
        return;
    }
    let mut lo = points[order[0]];
    let mut hi = lo;
    for &i in order.iter() {
        lo = lo.inf(&points[i]);
        hi = hi.sup(&points[i]);
    }
    let axis = (hi - lo).imax();
    let mid = n / 2;
    order.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b)));
    axes[mid] = axis as u8;
    let (left, rest) = order.split_at_mut(mid);
    let (left_axes, rest_axes) = axes.split_at_mut(mid);
    build(points, left, left_axes);
    build(points, &mut rest[1..], &mut rest_axes[1..]);
}

/// For every query point, the index of and Euclidean distance to its nearest
/// neighbor in `targets`. Empty if `targets` is empty.
pub fn nearest_neighbors(queries: &[Vector3<f64>], targets: &[Vector3<f64>], exec: Exec) -> Vec<(usize, f64)> {
    if targets.is_empty() {
        return Vec::new();
    }
    let tree = KdTree::new(targets);
    exec.map_slice(queries, |q| {
        let (i, d2) = tree.nearest(q).expect("nonempty");
        (i, d2.sqrt())
    })
}
