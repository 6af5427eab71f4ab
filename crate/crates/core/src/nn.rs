//! Exact k-nearest-neighbor search in the lengthscale-scaled metric.
//!
//! Points are divided by the lengthscales at build time, after which the
//! metric is plain Euclidean. Results are ordered by `(distance², index)`, so
//! ties go to the smaller index and both backends agree exactly.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, GpError, Result};
use crate::linalg::Matrix;

const LEAF_SIZE: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    BruteForce,
    #[default]
    KdTree,
}

impl std::str::FromStr for Backend {
    type Err = GpError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bruteforce" | "brute" => Ok(Backend::BruteForce),
            "kdtree" => Ok(Backend::KdTree),
            other => Err(GpError::InvalidConfig(format!("unknown backend '{other}'"))),
        }
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

#[inline]
fn before(a: (f64, usize), b: (f64, usize)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// Bounded, sorted candidate list.
struct KBest {
    k: usize,
    items: Vec<(f64, usize)>,
}

impl KBest {
    fn new(k: usize) -> Self {
        Self {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    fn worst(&self) -> f64 {
        if self.items.len() < self.k {
            f64::INFINITY
        } else {
            self.items[self.k - 1].0
        }
    }

    #[inline]
    fn offer(&mut self, cand: (f64, usize)) {
        if self.items.len() == self.k {
            if !before(cand, self.items[self.k - 1]) {
                return;
            }
            self.items.pop();
        }
        let pos = self.items.partition_point(|&it| before(it, cand));
        self.items.insert(pos, cand);
    }
}

#[derive(Clone, Debug)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { dim: usize, value: f64, left: usize, right: usize },
}

#[derive(Clone, Debug)]
struct KdTree {
    nodes: Vec<Node>,
    perm: Vec<usize>,
}

impl KdTree {
    fn build(points: &Matrix) -> Self {
        let mut tree = KdTree {
            nodes: Vec::new(),
            perm: (0..points.rows()).collect(),
        };
        let n = points.rows();
        tree.build_node(points, 0, n);
        tree
    }

    fn build_node(&mut self, pts: &Matrix, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        // split on the widest dimension at the median
        let d = pts.cols();
        let mut best = (0, -1.0);
        for dim in 0..d {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &i in &self.perm[start..end] {
                let v = pts[(i, dim)];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if hi - lo > best.1 {
                best = (dim, hi - lo);
            }
        }
        let dim = best.0;
        if best.1 <= 0.0 {
            // all points coincide
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        self.perm[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            pts[(a, dim)].total_cmp(&pts[(b, dim)]).then(a.cmp(&b))
        });
        let value = pts[(self.perm[mid], dim)];
        self.nodes.push(Node::Split {
            dim,
            value,
            left: 0,
            right: 0,
        });
        let left = self.build_node(pts, start, mid);
        let right = self.build_node(pts, mid, end);
        self.nodes[id] = Node::Split {
            dim,
            value,
            left,
            right,
        };
        id
    }

    fn search(
        &self,
        pts: &Matrix,
        node: usize,
        q: &[f64],
        rd: f64,
        off: &mut [f64],
        exclude: Option<usize>,
        best: &mut KBest,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.perm[start..end] {
                    if Some(i) == exclude {
                        continue;
                    }
                    best.offer((sq_dist(q, pts.row(i)), i));
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                // left holds coordinates <= value, right >= value
                let diff = q[dim] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.search(pts, near, q, rd, off, exclude, best);
                let old = off[dim];
                let far_rd = rd - old * old + diff * diff;
                // ties at the bound may still beat the worst by index
                if far_rd <= best.worst() {
                    off[dim] = diff;
                    self.search(pts, far, q, far_rd, off, exclude, best);
                    off[dim] = old;
                }
            }
        }
    }
}

/// Immutable nearest-neighbor index over lengthscale-scaled training inputs.
#[derive(Clone, Debug)]
pub struct NeighborIndex {
    scaled_points: Matrix,
    inv_lengthscales: Vec<f64>,
    backend: Backend,
    /// Log-lengthscales in effect when the index was built.
    built_with: Vec<f64>,
    tree: Option<KdTree>,
}

impl NeighborIndex {
    pub fn build(x: &Matrix, log_lengthscales: &[f64], backend: Backend) -> Result<Self> {
        if x.rows() == 0 {
            return Err(GpError::EmptyData);
        }
        check_dim(x.cols(), log_lengthscales.len())?;
        let inv: Vec<f64> = log_lengthscales.iter().map(|l| (-l).exp()).collect();
        let mut scaled = x.clone();
        for i in 0..scaled.rows() {
            for (v, s) in scaled.row_mut(i).iter_mut().zip(&inv) {
                *v *= s;
            }
        }
        let tree = match backend {
            Backend::KdTree => Some(KdTree::build(&scaled)),
            Backend::BruteForce => None,
        };
        Ok(Self {
            scaled_points: scaled,
            inv_lengthscales: inv,
            backend,
            built_with: log_lengthscales.to_vec(),
            tree,
        })
    }

    pub fn len(&self) -> usize {
        self.scaled_points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn built_with(&self) -> &[f64] {
        &self.built_with
    }

    pub fn dim(&self) -> usize {
        self.scaled_points.cols()
    }

    /// Up to `k` nearest indexed points to `x` (unscaled input coordinates),
    /// ascending by scaled distance, skipping `exclude`.
    pub fn query(&self, x: &[f64], k: usize, exclude: Option<usize>) -> Result<Vec<usize>> {
        check_dim(self.dim(), x.len())?;
        if k == 0 {
            return Err(GpError::InvalidConfig("k must be at least 1".into()));
        }
        let q: Vec<f64> = x.iter().zip(&self.inv_lengthscales).map(|(a, s)| a * s).collect();
        Ok(self.query_scaled(&q, k, exclude))
    }

    /// Neighbors of indexed point `i`, excluding itself.
    pub fn query_point(&self, i: usize, k: usize) -> Vec<usize> {
        let q = self.scaled_points.row(i).to_vec();
        self.query_scaled(&q, k, Some(i))
    }

    fn query_scaled(&self, q: &[f64], k: usize, exclude: Option<usize>) -> Vec<usize> {
        if k == 0 {
            return Vec::new();
        }
        let mut best = KBest::new(k);
        match &self.tree {
            Some(tree) => {
                let mut off = vec![0.0; q.len()];
                tree.search(&self.scaled_points, 0, q, 0.0, &mut off, exclude, &mut best);
            }
            None => {
                for i in 0..self.len() {
                    if Some(i) == exclude {
                        continue;
                    }
                    best.offer((sq_dist(q, self.scaled_points.row(i)), i));
                }
            }
        }
        best.items.into_iter().map(|(_, i)| i).collect()
    }

    /// Self-excluded neighbor lists for every indexed point.
    pub fn neighbor_table(&self, k: usize) -> NeighborTable {
        let n = self.len();
        let k = k.min(n.saturating_sub(1));
        let mut idx = Vec::with_capacity(n * k);
        for i in 0..n {
            let nb = self.query_point(i, k.max(1));
            debug_assert_eq!(nb.len(), k);
            idx.extend(nb.into_iter().take(k));
        }
        NeighborTable { k, idx }
    }
}

/// Precomputed `k` nearest neighbors (self excluded) of every training point.
#[derive(Clone, Debug, Default)]
pub struct NeighborTable {
    k: usize,
    idx: Vec<usize>,
}

impl NeighborTable {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.idx[i * self.k..(i + 1) * self.k]
    }

    pub fn len(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.idx.len() / self.k
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
