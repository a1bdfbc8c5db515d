//! Bounding-volume hierarchy over mesh triangles.
//!
//! Traversal reports exactly the hit brute force would: the lexicographic
//! minimum of `(t, triangle index)`, because node boxes are padded and a
//! node is pruned only when its entry distance is strictly beyond the best
//! hit found so far.

use super::mesh::MIN_T;
use super::{OrientedPoint, Vec3};

const LEAF_SIZE: usize = 4;

#[derive(Clone, Debug)]
struct Node {
    lo: Vec3,
    hi: Vec3,
    kind: NodeKind,
}

#[derive(Clone, Debug)]
enum NodeKind {
    Leaf { start: usize, end: usize },
    Inner { left: usize, right: usize },
}

#[derive(Clone, Debug, Default)]
pub(crate) struct Bvh {
    nodes: Vec<Node>,
    order: Vec<usize>,
}

impl Bvh {
    pub(crate) fn build(vertices: &[Vec3], triangles: &[[usize; 3]]) -> Self {
        if triangles.is_empty() {
            return Self::default();
        }
        let bounds: Vec<(Vec3, Vec3)> = triangles
            .iter()
            .map(|&[a, b, c]| {
                let lo = vertices[a].inf(&vertices[b]).inf(&vertices[c]);
                let hi = vertices[a].sup(&vertices[b]).sup(&vertices[c]);
                (lo, hi)
            })
            .collect();
        let mut bvh = Self {
            nodes: Vec::with_capacity(2 * triangles.len() / LEAF_SIZE + 1),
            order: (0..triangles.len()).collect(),
        };
        bvh.build_node(&bounds, 0, triangles.len());
        bvh
    }

    fn build_node(&mut self, bounds: &[(Vec3, Vec3)], start: usize, end: usize) -> usize {
        let (mut lo, mut hi) = bounds[self.order[start]];
        for &i in &self.order[start + 1..end] {
            lo = lo.inf(&bounds[i].0);
            hi = hi.sup(&bounds[i].1);
        }
        let pad = (hi - lo).max() * 1e-9 + 1e-12;
        let (lo, hi) = (lo.add_scalar(-pad), hi.add_scalar(pad));
        let index = self.nodes.len();
        self.nodes.push(Node {
            lo,
            hi,
            kind: NodeKind::Leaf { start, end },
        });
        if end - start <= LEAF_SIZE {
            return index;
        }
        let centroid = |i: usize| (bounds[i].0 + bounds[i].1) * 0.5;
        let (mut clo, mut chi) = (centroid(self.order[start]), centroid(self.order[start]));
        for &i in &self.order[start..end] {
            clo = clo.inf(&centroid(i));
            chi = chi.sup(&centroid(i));
        }
        let axis = (chi - clo).imax();
        let mid = (start + end) / 2;
        self.order[start..end].sort_by(|&a, &b| centroid(a)[axis].total_cmp(&centroid(b)[axis]).then(a.cmp(&b)));
        let left = self.build_node(bounds, start, mid);
        let right = self.build_node(bounds, mid, end);
        self.nodes[index].kind = NodeKind::Inner { left, right };
        index
    }

    /// Entry distance of the ray into a node box, if it meets it before `limit`.
    fn enter(node: &Node, op: &OrientedPoint, limit: f64) -> Option<f64> {
        let mut t0 = MIN_T;
        let mut t1 = limit;
        for k in 0..3 {
            let (o, d) = (op.p[k], op.v[k]);
            if d == 0.0 {
                if o < node.lo[k] || o > node.hi[k] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d;
            let (mut a, mut b) = ((node.lo[k] - o) * inv, (node.hi[k] - o) * inv);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 > t1 {
                return None;
            }
        }
        Some(t0)
    }

    /// Minimum `(t, triangle)` over triangles reported by `hit`.
    pub(crate) fn closest_hit<F>(&self, op: &OrientedPoint, hit: F) -> Option<(f64, usize)>
    where
        F: Fn(usize) -> Option<f64>,
    {
        let root = self.nodes.first()?;
        let mut best: Option<(f64, usize)> = None;
        let limit = |best: &Option<(f64, usize)>| best.map_or(f64::INFINITY, |(t, _)| t);
        // margin keeps equal-t candidates from being pruned by box round-off
        let slack = |t: f64| t + t.abs() * 1e-12 + 1e-12;
        let mut stack = Vec::with_capacity(64);
        if Self::enter(root, op, f64::INFINITY).is_some() {
            stack.push(0usize);
        }
        while let Some(index) = stack.pop() {
            let node = &self.nodes[index];
            match node.kind {
                NodeKind::Leaf { start, end } => {
                    for &tri in &self.order[start..end] {
                        if let Some(t) = hit(tri) {
                            let better = match best {
                                None => true,
                                Some((bt, bi)) => t < bt || (t == bt && tri < bi),
                            };
                            if better {
                                best = Some((t, tri));
                            }
                        }
                    }
                }
                NodeKind::Inner { left, right } => {
                    let lim = slack(limit(&best));
                    let l = Self::enter(&self.nodes[left], op, lim);
                    let r = Self::enter(&self.nodes[right], op, lim);
                    match (l, r) {
                        (Some(tl), Some(tr)) => {
                            // visit the nearer child first
                            if tl <= tr {
                                stack.push(right);
                                stack.push(left);
                            } else {
                                stack.push(left);
                                stack.push(right);
                            }
                        }
                        (Some(_), None) => stack.push(left),
                        (None, Some(_)) => stack.push(right),
                        (None, None) => {}
                    }
                }
            }
        }
        best
    }
}
