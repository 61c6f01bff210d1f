//! Static k-d tree for exact nearest-neighbour queries.
//!
//! Distances are squared Euclidean. Ties between equidistant points resolve
//! to the lowest point index, so queries are reproducible and agree with an
//! exhaustive scan.

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// k-d tree over a flat, row-major coordinate buffer.
#[derive(Debug, Clone)]
pub struct KdTree {
    dim: usize,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

/// Squared Euclidean distance, summed in coordinate order.
#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl KdTree {
    /// Builds the tree over `points.len() / dim` points.
    pub fn build(points: &[f64], dim: usize) -> Self {
        assert!(dim > 0, "k-d tree dimension must be positive");
        debug_assert_eq!(points.len() % dim, 0);
        let n = points.len() / dim;
        let mut tree = KdTree {
            dim,
            order: (0..n).collect(),
            nodes: Vec::new(),
        };
        if n > 0 {
            tree.build_node(points, 0, n);
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    fn build_node(&mut self, points: &[f64], start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let dim = self.dim;
        let axis = (0..dim)
            .map(|a| {
                let (lo, hi) = self.order[start..end].iter().fold(
                    (f64::INFINITY, f64::NEG_INFINITY),
                    |(lo, hi), &i| {
                        let c = points[i * dim + a];
                        (lo.min(c), hi.max(c))
                    },
                );
                (a, hi - lo)
            })
            .fold((0, f64::NEG_INFINITY), |best, cur| {
                if cur.1 > best.1 {
                    cur
                } else {
                    best
                }
            })
            .0;
        let mid = start + (end - start) / 2;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a * dim + axis]
                .total_cmp(&points[b * dim + axis])
                .then(a.cmp(&b))
        });
        let value = points[self.order[mid] * dim + axis];
        self.nodes.push(Node::Split {
            axis,
            value,
            left: 0,
            right: 0,
        });
        let left = self.build_node(points, start, mid);
        let right = self.build_node(points, mid, end);
        if let Node::Split {
            left: l, right: r, ..
        } = &mut self.nodes[id]
        {
            *l = left;
            *r = right;
        }
        id
    }

    /// Index and squared distance of the point nearest to `query`.
    ///
    /// `points` must be the buffer the tree was built from. Returns `None`
    /// for an empty tree.
    pub fn nearest(&self, points: &[f64], query: &[f64]) -> Option<(usize, f64)> {
        debug_assert_eq!(query.len(), self.dim);
        if self.order.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(points, 0, query, &mut best);
        Some(best)
    }

    fn search(&self, points: &[f64], node: usize, query: &[f64], best: &mut (usize, f64)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = squared_distance(&points[i * self.dim..(i + 1) * self.dim], query);
                    if d < best.1 || (d == best.1 && i < best.0) {
                        *best = (i, d);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = query[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(points, near, query, best);
                // `<=` keeps equidistant points on the far side reachable for
                // the lowest-index tie-break.
                if diff * diff <= best.1 {
                    self.search(points, far, query, best);
                }
            }
        }
    }
}
