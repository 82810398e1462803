use std::collections::BinaryHeap;

use super::{key_cmp, sq_dist, Point3};

const LEAF_SIZE: usize = 12;

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

/// Static kd-tree over borrowed positions. The tree stores only a
/// permutation of point indices, so the caller keeps ownership of the data.
#[derive(Debug, Clone)]
pub struct KdTree {
    nodes: Vec<Node>,
    order: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate(f64, usize);

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        key_cmp(&(self.0, self.1), &(other.0, other.1))
    }
}

impl KdTree {
    pub fn build(points: &[Point3]) -> Self {
        let mut tree = Self {
            nodes: Vec::new(),
            order: (0..points.len()).collect(),
        };
        if !points.is_empty() {
            tree.build_node(points, 0, points.len());
        }
        tree
    }

    fn build_node(&mut self, points: &[Point3], start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(points[i][a]);
                hi[a] = hi[a].max(points[i][a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        let mid = start + (end - start) / 2;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
        });
        let value = points[self.order[mid]][axis];
        // placeholder, patched once both children exist
        self.nodes.push(Node::Leaf { start, end });
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

    /// Same contract as the brute-force search: `(sq_dist, index)` pairs
    /// ordered by distance then index.
    pub fn nearest(
        &self,
        points: &[Point3],
        q: &Point3,
        k: usize,
        exclude: Option<usize>,
    ) -> Vec<(f64, usize)> {
        if k == 0 || self.nodes.is_empty() {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, points, q, k, exclude, &mut heap);
        let mut out: Vec<(f64, usize)> = heap.into_iter().map(|c| (c.0, c.1)).collect();
        out.sort_unstable_by(key_cmp);
        out
    }

    fn search(
        &self,
        node: usize,
        points: &[Point3],
        q: &Point3,
        k: usize,
        exclude: Option<usize>,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if Some(i) == exclude {
                        continue;
                    }
                    let c = Candidate(sq_dist(q, &points[i]), i);
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
                self.search(near, points, q, k, exclude, heap);
                // equal-distance candidates may still win on index, so only
                // prune when the slab is strictly farther than the worst kept
                let worst = heap.peek().map(|c| c.0);
                if heap.len() < k || worst.is_some_and(|w| diff * diff <= w) {
                    self.search(far, points, q, k, exclude, heap);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_linear_scan_on_lattice_with_ties() {
        // lattice points produce many exact distance ties
        let mut pts = Vec::new();
        for x in 0..9 {
            for y in 0..9 {
                for z in 0..5 {
                    pts.push([x as f64, y as f64, z as f64]);
                }
            }
        }
        let tree = KdTree::build(&pts);
        for anchor in (0..pts.len()).step_by(7) {
            for k in [1, 6, 19, 27, 50] {
                let got = tree.nearest(&pts, &pts[anchor], k, Some(anchor));
                let mut all: Vec<_> = pts
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != anchor)
                    .map(|(i, p)| (sq_dist(&pts[anchor], p), i))
                    .collect();
                all.sort_by(key_cmp);
                all.truncate(k);
                assert_eq!(got, all);
            }
        }
    }

    #[test]
    fn random_queries_off_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Point3> = (0..700).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let tree = KdTree::build(&pts);
        for _ in 0..50 {
            let q = [rng.gen(), rng.gen(), rng.gen()];
            let got = tree.nearest(&pts, &q, 10, None);
            let mut all: Vec<_> = pts.iter().enumerate().map(|(i, p)| (sq_dist(&q, p), i)).collect();
            all.sort_by(key_cmp);
            all.truncate(10);
            assert_eq!(got, all);
        }
    }
}
