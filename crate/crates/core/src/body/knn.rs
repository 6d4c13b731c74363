use nalgebra::Vector3;

use super::BodyError;

const LEAF_SIZE: usize = 8;

/// Exact k-nearest neighbours for a batch of queries, row-major `N × k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighbors {
    pub k: usize,
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
}

impl Neighbors {
    pub fn indices_of(&self, query: usize) -> &[usize] {
        &self.indices[query * self.k..(query + 1) * self.k]
    }

    pub fn distances_of(&self, query: usize) -> &[f64] {
        &self.distances[query * self.k..(query + 1) * self.k]
    }
}

#[derive(Clone, Debug)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Static kd-tree over a point set. Results are exact; equal distances are
/// ordered by smaller point index.
#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    perm: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn new(points: &[Vector3<f64>]) -> Self {
        let mut tree = Self { points: points.to_vec(), perm: (0..points.len()).collect(), nodes: Vec::new() };
        if !points.is_empty() {
            tree.build(0, points.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let (mut lo, mut hi) = (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY));
        for &i in &self.perm[start..end] {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let axis = (hi - lo).imax();
        let mid = start + (end - start) / 2;
        let pts = &self.points;
        self.perm[start..end].select_nth_unstable_by(mid - start, |&a, &b| pts[a][axis].total_cmp(&pts[b][axis]));
        let value = self.points[self.perm[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    /// The `k` nearest points to `q` as `(index, distance)`, nearest first.
    pub fn nearest(&self, q: &Vector3<f64>, k: usize) -> Vec<(usize, f64)> {
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        if k > 0 && !self.points.is_empty() {
            self.search(0, q, k, &mut best);
        }
        best.into_iter().map(|(d2, i)| (i, d2.sqrt())).collect()
    }

    fn search(&self, node: usize, q: &Vector3<f64>, k: usize, best: &mut Vec<(f64, usize)>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.perm[start..end] {
                    let d2 = (self.points[i] - q).norm_squared();
                    let key = (d2, i);
                    if best.len() == k && !less(&key, best.last().unwrap()) {
                        continue;
                    }
                    let pos = best.partition_point(|e| less(e, &key));
                    best.insert(pos, key);
                    best.truncate(k);
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, best);
                // `<=` keeps equal-distance candidates reachable for the index tie-break
                if best.len() < k || diff * diff <= best.last().unwrap().0 {
                    self.search(far, q, k, best);
                }
            }
        }
    }
}

fn less(a: &(f64, usize), b: &(f64, usize)) -> bool {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).is_lt()
}

fn check(vertices: &[Vector3<f64>], k: usize) -> Result<(), BodyError> {
    if vertices.is_empty() {
        return Err(BodyError::EmptyVertices);
    }
    if k > vertices.len() {
        return Err(BodyError::TooManyNeighbors { k, count: vertices.len() });
    }
    Ok(())
}

/// Exact k-NN through a kd-tree built over `vertices`.
pub fn nearest_vertices(queries: &[Vector3<f64>], vertices: &[Vector3<f64>], k: usize) -> Result<Neighbors, BodyError> {
    check(vertices, k)?;
    if vertices.len() <= LEAF_SIZE {
        return brute_force_knn(queries, vertices, k);
    }
    let tree = KdTree::new(vertices);
    let mut out = Neighbors { k, indices: Vec::with_capacity(queries.len() * k), distances: Vec::with_capacity(queries.len() * k) };
    for q in queries {
        for (i, d) in tree.nearest(q, k) {
            out.indices.push(i);
            out.distances.push(d);
        }
    }
    Ok(out)
}

/// All-pairs scan; the same ordering contract as [`nearest_vertices`].
pub fn brute_force_knn(queries: &[Vector3<f64>], vertices: &[Vector3<f64>], k: usize) -> Result<Neighbors, BodyError> {
    check(vertices, k)?;
    let mut out = Neighbors { k, indices: Vec::new(), distances: Vec::new() };
    for q in queries {
        let mut all: Vec<(f64, usize)> = vertices.iter().enumerate().map(|(i, v)| ((v - q).norm_squared(), i)).collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(d2, i) in &all[..k] {
            out.indices.push(i);
            out.distances.push(d2.sqrt());
        }
    }
    Ok(out)
}
