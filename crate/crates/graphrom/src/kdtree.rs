//! Static 3D kd-tree for Euclidean k-nearest-neighbor queries.
//!
//! Results are fully deterministic: neighbors are ordered by squared
//! distance with ties broken by ascending point index, independent of tree
//! layout.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

/// One candidate neighbor; ordered by `(d2, idx)` so the heap's maximum is
/// the current worst candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Neighbor {
    d2: f64,
    idx: usize,
}

impl Eq for Neighbor {}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        // Distances are finite by construction.
        self.d2
            .partial_cmp(&other.d2)
            .unwrap()
            .then(self.idx.cmp(&other.idx))
    }
}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone)]
struct TreeNode {
    point: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

/// Immutable kd-tree over a point cloud. Points are referenced by their
/// index in the slice passed to [`KdTree::build`].
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    nodes: Vec<TreeNode>,
    root: Option<usize>,
}

impl KdTree {
    pub fn build(points: &[[f64; 3]]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut tree = KdTree {
            points: points.to_vec(),
            nodes: Vec::with_capacity(points.len()),
            root: None,
        };
        tree.root = tree.build_range(&mut order);
        tree
    }

    fn build_range(&mut self, order: &mut [usize]) -> Option<usize> {
        if order.is_empty() {
            return None;
        }
        // Split along the axis with the largest extent; on flat clouds this
        // avoids degenerate splits along a constant coordinate.
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in order.iter() {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).partial_cmp(&(hi[b] - lo[b])).unwrap())
            .unwrap();

        let mid = order.len() / 2;
        let points = &self.points;
        order.select_nth_unstable_by(mid, |&a, &b| {
            points[a][axis]
                .partial_cmp(&points[b][axis])
                .unwrap()
                .then(a.cmp(&b))
        });
        let point = order[mid];
        let (left_part, rest) = order.split_at_mut(mid);
        let right_part = &mut rest[1..];

        let left = self.build_range(left_part);
        let right = self.build_range(right_part);
        self.nodes.push(TreeNode {
            point,
            axis,
            left,
            right,
        });
        Some(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The `k` nearest points to `query`, as `(distance, index)` sorted by
    /// distance (ties by index). Returns fewer than `k` entries only when
    /// the cloud is smaller than `k`.
    pub fn knn(&self, query: &[f64; 3], k: usize) -> Vec<(f64, usize)> {
        self.knn_filtered(query, k, None)
    }

    /// Same as [`KdTree::knn`] but skipping one point index, for queries
    /// from a point that is itself part of the cloud.
    pub fn knn_excluding(&self, query: &[f64; 3], k: usize, exclude: usize) -> Vec<(f64, usize)> {
        self.knn_filtered(query, k, Some(exclude))
    }

    fn knn_filtered(
        &self,
        query: &[f64; 3],
        k: usize,
        exclude: Option<usize>,
    ) -> Vec<(f64, usize)> {
        if k == 0 {
            return Vec::new();
        }
        let mut heap: BinaryHeap<Neighbor> = BinaryHeap::with_capacity(k + 1);
        if let Some(root) = self.root {
            self.search(root, query, k, exclude, &mut heap);
        }
        let mut out: Vec<Neighbor> = heap.into_vec();
        out.sort_unstable();
        out.into_iter().map(|n| (n.d2.sqrt(), n.idx)).collect()
    }

    fn search(
        &self,
        node_id: usize,
        query: &[f64; 3],
        k: usize,
        exclude: Option<usize>,
        heap: &mut BinaryHeap<Neighbor>,
    ) {
        let node = &self.nodes[node_id];
        let p = &self.points[node.point];
        if exclude != Some(node.point) {
            let cand = Neighbor {
                d2: dist2(query, p),
                idx: node.point,
            };
            if heap.len() < k {
                heap.push(cand);
            } else if cand < *heap.peek().unwrap() {
                heap.pop();
                heap.push(cand);
            }
        }

        let delta = query[node.axis] - p[node.axis];
        let (near, far) = if delta <= 0.0 {
            (node.left, node.right)
        } else {
            (node.right, node.left)
        };
        if let Some(n) = near {
            self.search(n, query, k, exclude, heap);
        }
        // Visit the far side unless every point there is strictly farther
        // than the current worst candidate. Equality must still be visited
        // so that distance ties resolve by index, not tree layout.
        let must_visit = heap.len() < k || delta * delta <= heap.peek().unwrap().d2;
        if must_visit {
            if let Some(f) = far {
                self.search(f, query, k, exclude, heap);
            }
        }
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}
