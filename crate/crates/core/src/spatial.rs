//! Kd-tree nearest-neighbor search, PCA normal estimation and tangent-plane
//! projection over LiDAR points.

use std::collections::BinaryHeap;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::error::{Error, Result};

const LEAF_SIZE: usize = 8;

#[derive(Clone, Debug)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Balanced kd-tree over a point slice. The tree stores point indices only;
/// queries take the same slice the tree was built from.
#[derive(Clone, Debug)]
pub struct KdTree {
    nodes: Vec<Node>,
    order: Vec<usize>,
    len: usize,
}

impl KdTree {
    pub fn build(points: &[Vector3<f64>]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidInput("non-finite point in spatial index".into()));
        }
        let mut tree = KdTree {
            nodes: Vec::with_capacity(2 * points.len() / LEAF_SIZE + 1),
            order: (0..points.len()).collect(),
            len: points.len(),
        };
        tree.build_node(points, 0, points.len());
        Ok(tree)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn build_node(&mut self, points: &[Vector3<f64>], start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for &i in &self.order[start..end] {
            lo = lo.inf(&points[i]);
            hi = hi.sup(&points[i]);
        }
        let axis = (hi - lo).imax();
        if hi[axis] - lo[axis] <= 0.0 {
            // all points identical
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
        });
        let value = points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build_node(points, start, mid);
        let right = self.build_node(points, mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    /// Nearest point to `q` as `(index, distance)`. Ties go to the lowest
    /// point index.
    pub fn nearest(&self, points: &[Vector3<f64>], q: &Vector3<f64>) -> (usize, f64) {
        let mut best = (f64::INFINITY, usize::MAX);
        self.nearest_rec(points, 0, q, &mut best);
        (best.1, best.0.sqrt())
    }

    fn nearest_rec(&self, points: &[Vector3<f64>], node: usize, q: &Vector3<f64>, best: &mut (f64, usize)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d2 = (points[i] - q).norm_squared();
                    if d2 < best.0 || (d2 == best.0 && i < best.1) {
                        *best = (d2, i);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.nearest_rec(points, near, q, best);
                if diff * diff <= best.0 {
                    self.nearest_rec(points, far, q, best);
                }
            }
        }
    }

    /// The `k` nearest points sorted by `(distance, index)`.
    pub fn knn(&self, points: &[Vector3<f64>], q: &Vector3<f64>, k: usize) -> Vec<(usize, f64)> {
        if k == 0 {
            return Vec::new();
        }
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        self.knn_rec(points, 0, q, k, &mut heap);
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| (c.index, c.d2.sqrt())).collect()
    }

    fn knn_rec(
        &self,
        points: &[Vector3<f64>],
        node: usize,
        q: &Vector3<f64>,
        k: usize,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let c = Candidate {
                        d2: (points[i] - q).norm_squared(),
                        index: i,
                    };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().expect("heap is full") {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.knn_rec(points, near, q, k, heap);
                let worst = if heap.len() < k {
                    f64::INFINITY
                } else {
                    heap.peek().map_or(f64::INFINITY, |c| c.d2)
                };
                if diff * diff <= worst {
                    self.knn_rec(points, far, q, k, heap);
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Candidate {
    d2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Nearest neighbor of `q` among `points` using `index`.
pub fn nearest(index: &KdTree, points: &[Vector3<f64>], q: &Vector3<f64>) -> (usize, f64) {
    index.nearest(points, q)
}

/// PCA normals over the `k` nearest neighbors of every point, oriented to
/// have a non-negative dot product with `reference`.
pub fn estimate_normals(points: &[Vector3<f64>], k: usize, reference: Vector3<f64>) -> Result<Vec<Vector3<f64>>> {
    if k < 3 {
        return Err(Error::InvalidInput(format!("normal estimation needs k >= 3, got {k}")));
    }
    if k > points.len() {
        return Err(Error::InvalidInput(format!(
            "k = {k} exceeds the point count {}",
            points.len()
        )));
    }
    let index = KdTree::build(points)?;
    estimate_normals_with_index(points, &index, k, reference)
}

pub(crate) fn estimate_normals_with_index(
    points: &[Vector3<f64>],
    index: &KdTree,
    k: usize,
    reference: Vector3<f64>,
) -> Result<Vec<Vector3<f64>>> {
    if k > points.len() {
        return Err(Error::InvalidInput(format!(
            "k = {k} exceeds the point count {}",
            points.len()
        )));
    }
    Ok(points
        .iter()
        .map(|p| {
            let neighbors: Vec<Vector3<f64>> = index
                .knn(points, p, k)
                .into_iter()
                .map(|(i, _)| points[i])
                .collect();
            let n = pca_normal(&neighbors);
            if n.dot(&reference) < 0.0 {
                -n
            } else {
                n
            }
        })
        .collect())
}

/// Smallest-eigenvalue eigenvector of the neighborhood covariance. Collinear
/// neighborhoods get the coordinate axis most orthogonal to the line,
/// projected off the line.
pub fn pca_normal(neighbors: &[Vector3<f64>]) -> Vector3<f64> {
    let n = neighbors.len() as f64;
    let centroid = neighbors.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for p in neighbors {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (l0, l1, l2) = (
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    );
    if l2 <= 0.0 {
        return Vector3::z();
    }
    let tol = 1e-12 * l2;
    if l1 <= tol && l0 <= tol {
        let line: Vector3<f64> = eig.eigenvectors.column(order[2]).into();
        let axes = [Vector3::x(), Vector3::y(), Vector3::z()];
        let mut pick = 0;
        for i in 1..3 {
            if line[i].abs() < line[pick].abs() {
                pick = i;
            }
        }
        let v = project_to_tangent(&axes[pick], &line);
        return v.normalize();
    }
    let v: Vector3<f64> = eig.eigenvectors.column(order[0]).into();
    v.normalize()
}

/// Removes the component of `n` along `normal`:
/// `n − (n·N / N·N) N`. Returns zero when `n` is parallel to `normal`.
pub fn project_to_tangent(n: &Vector3<f64>, normal: &Vector3<f64>) -> Vector3<f64> {
    n - normal * (n.dot(normal) / normal.dot(normal))
}
