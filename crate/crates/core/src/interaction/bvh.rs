//! Bounding-volume hierarchy over a point set for exact nearest-neighbor
//! queries. Median split on the widest axis; equal distances resolve to
//! the lowest point index so queries are fully deterministic.

use crate::error::{Error, Result};

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
struct Node {
    aabb_min: [f64; 3],
    aabb_max: [f64; 3],
    /// Children as node indices, or `None` for a leaf.
    children: Option<(usize, usize)>,
    /// Range into the permutation array (leaf only; internal nodes keep
    /// the range for bookkeeping).
    start: usize,
    end: usize,
}

/// Immutable nearest-point index over a flat `N x 3` coordinate slice.
#[derive(Debug, Clone)]
pub struct PointBvh {
    points: Vec<f64>,
    perm: Vec<usize>,
    nodes: Vec<Node>,
    root: usize,
}

impl PointBvh {
    /// Builds the hierarchy. Errors on an empty or non-finite point set.
    pub fn build(points: &[f64]) -> Result<Self> {
        if points.is_empty() || points.len() % 3 != 0 {
            return Err(Error::shape("point set must be a nonempty N x 3 array"));
        }
        if !points.iter().all(|x| x.is_finite()) {
            return Err(Error::numerical("point set contains non-finite coordinates"));
        }
        let n = points.len() / 3;
        let mut bvh = PointBvh {
            points: points.to_vec(),
            perm: (0..n).collect(),
            nodes: Vec::with_capacity(2 * n / LEAF_SIZE + 2),
            root: 0,
        };
        bvh.root = bvh.build_node(0, n);
        Ok(bvh)
    }

    pub fn len(&self) -> usize {
        self.points.len() / 3
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn aabb_of(&self, start: usize, end: usize) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &pi in &self.perm[start..end] {
            for d in 0..3 {
                let v = self.points[pi * 3 + d];
                lo[d] = lo[d].min(v);
                hi[d] = hi[d].max(v);
            }
        }
        (lo, hi)
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let (lo, hi) = self.aabb_of(start, end);
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node {
                aabb_min: lo,
                aabb_max: hi,
                children: None,
                start,
                end,
            });
            return self.nodes.len() - 1;
        }
        // Widest axis; split at the median ordering by (coordinate, index)
        // so equal coordinates have a stable side.
        let mut axis = 0;
        let mut width = hi[0] - lo[0];
        for d in 1..3 {
            if hi[d] - lo[d] > width {
                width = hi[d] - lo[d];
                axis = d;
            }
        }
        let mid = (start + end) / 2;
        let pts = &self.points;
        self.perm[start..end].sort_unstable_by(|&a, &b| {
            pts[a * 3 + axis]
                .partial_cmp(&pts[b * 3 + axis])
                .unwrap()
                .then(a.cmp(&b))
        });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes.push(Node {
            aabb_min: lo,
            aabb_max: hi,
            children: Some((left, right)),
            start,
            end,
        });
        self.nodes.len() - 1
    }

    fn aabb_dist_sq(node: &Node, q: [f64; 3]) -> f64 {
        let mut d2 = 0.0;
        for d in 0..3 {
            let v = if q[d] < node.aabb_min[d] {
                node.aabb_min[d] - q[d]
            } else if q[d] > node.aabb_max[d] {
                q[d] - node.aabb_max[d]
            } else {
                0.0
            };
            d2 += v * v;
        }
        d2
    }

    /// Returns `(index, distance)` of the nearest point to `q`; ties go to
    /// the lowest index.
    pub fn nearest(&self, q: [f64; 3]) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        self.nearest_rec(self.root, q, &mut best);
        (best.0, best.1.sqrt())
    }

    fn nearest_rec(&self, node_id: usize, q: [f64; 3], best: &mut (usize, f64)) {
        let node = &self.nodes[node_id];
        match node.children {
            None => {
                for &pi in &self.perm[node.start..node.end] {
                    let dx = self.points[pi * 3] - q[0];
                    let dy = self.points[pi * 3 + 1] - q[1];
                    let dz = self.points[pi * 3 + 2] - q[2];
                    let d2 = dx * dx + dy * dy + dz * dz;
                    if d2 < best.1 || (d2 == best.1 && pi < best.0) {
                        *best = (pi, d2);
                    }
                }
            }
            Some((l, r)) => {
                let dl = Self::aabb_dist_sq(&self.nodes[l], q);
                let dr = Self::aabb_dist_sq(&self.nodes[r], q);
                // Near child first; prune only on strict excess so that
                // equal-distance points in the far child can still win a
                // lower index.
                let (first, second, dfirst, dsecond) =
                    if dl <= dr { (l, r, dl, dr) } else { (r, l, dr, dl) };
                if dfirst <= best.1 {
                    self.nearest_rec(first, q, best);
                }
                if dsecond <= best.1 {
                    self.nearest_rec(second, q, best);
                }
            }
        }
    }
}
