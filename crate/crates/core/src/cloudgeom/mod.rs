//! Point-cloud containers and the geometric primitives everything else is
//! built on: k-nearest-neighbor search, farthest point sampling, rigid
//! transforms, and a small catalogue of seeded synthetic scenes.
//!
//! Neighbor ordering is fully deterministic: the anchor comes first, the
//! remaining points follow by ascending squared distance and then by
//! ascending index. The brute-force and kd-tree search paths compute
//! distances with the same function so they agree bit-for-bit.

mod kdtree;
mod synth;

pub use kdtree::KdTree;
pub use synth::{synth_scene, SceneKind, SceneSpec};

use crate::error::{invalid, Result};

/// Above this many points [`SearchStrategy::Auto`] builds a kd-tree.
pub const KDTREE_THRESHOLD: usize = 4096;

pub type Point3 = [f64; 3];

#[inline]
pub fn sq_dist(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Labeled point cloud. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<Point3>,
    features: Vec<f64>,
    feature_dim: usize,
    labels: Vec<usize>,
    num_classes: usize,
}

impl PointCloud {
    pub fn new(positions: Vec<Point3>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        Self::with_features(positions, Vec::new(), 0, labels, num_classes)
    }

    /// `features` is row-major, `feature_dim` values per point. A
    /// `feature_dim` of zero means the cloud carries no features.
    pub fn with_features(
        positions: Vec<Point3>,
        features: Vec<f64>,
        feature_dim: usize,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let n = positions.len();
        if n == 0 {
            return Err(invalid("point cloud must contain at least one point"));
        }
        if num_classes == 0 {
            return Err(invalid("class count must be at least 1"));
        }
        if labels.len() != n {
            return Err(invalid(format!("{} labels for {} points", labels.len(), n)));
        }
        if features.len() != n * feature_dim {
            return Err(invalid(format!(
                "feature buffer has {} values, expected {} x {}",
                features.len(),
                n,
                feature_dim
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid("positions must be finite"));
        }
        Ok(Self {
            positions,
            features,
            feature_dim,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Point3] {
        &self.positions
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn features(&self) -> Option<&[f64]> {
        (self.feature_dim > 0).then_some(self.features.as_slice())
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    /// Subset by index, in the given order. Indices must be in range.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(invalid(format!("index {bad} out of range")));
        }
        let positions = indices.iter().map(|&i| self.positions[i]).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let features = indices
            .iter()
            .flat_map(|&i| self.feature(i).iter().copied())
            .collect();
        Self::with_features(positions, features, self.feature_dim, labels, self.num_classes)
    }
}

/// K nearest neighbors of one anchor. `neighbors[0]` is always the anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborList {
    pub anchor: usize,
    pub neighbors: Vec<usize>,
    pub sq_dists: Vec<f64>,
}

impl NeighborList {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SearchStrategy {
    #[default]
    Auto,
    BruteForce,
    KdTree,
}

/// Reusable neighbor-search structure over a fixed set of positions.
#[derive(Debug, Clone)]
pub struct KnnIndex<'a> {
    points: &'a [Point3],
    tree: Option<KdTree>,
}

impl<'a> KnnIndex<'a> {
    pub fn new(points: &'a [Point3], strategy: SearchStrategy) -> Self {
        let use_tree = match strategy {
            SearchStrategy::Auto => points.len() > KDTREE_THRESHOLD,
            SearchStrategy::BruteForce => false,
            SearchStrategy::KdTree => true,
        };
        let tree = use_tree.then(|| KdTree::build(points));
        Self { points, tree }
    }

    pub fn is_accelerated(&self) -> bool {
        self.tree.is_some()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Anchor first, then the `k - 1` closest other points.
    pub fn query(&self, anchor: usize, k: usize) -> Result<NeighborList> {
        let n = self.points.len();
        if anchor >= n {
            return Err(invalid(format!("anchor {anchor} out of range for {n} points")));
        }
        if k == 0 || k > n {
            return Err(invalid(format!("K = {k} must lie in [1, {n}]")));
        }
        let q = self.points[anchor];
        let rest = self.nearest(&q, k - 1, Some(anchor));
        let mut neighbors = Vec::with_capacity(k);
        let mut sq_dists = Vec::with_capacity(k);
        neighbors.push(anchor);
        sq_dists.push(0.0);
        for (d, i) in rest {
            neighbors.push(i);
            sq_dists.push(d);
        }
        Ok(NeighborList {
            anchor,
            neighbors,
            sq_dists,
        })
    }

    /// The `k` closest points to an arbitrary query, as `(sq_dist, index)`
    /// sorted by distance then index, optionally skipping one index.
    pub fn nearest(&self, q: &Point3, k: usize, exclude: Option<usize>) -> Vec<(f64, usize)> {
        match &self.tree {
            Some(tree) => tree.nearest(self.points, q, k, exclude),
            None => brute_nearest(self.points, q, k, exclude),
        }
    }
}

pub(crate) fn key_cmp(a: &(f64, usize), b: &(f64, usize)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

fn brute_nearest(points: &[Point3], q: &Point3, k: usize, exclude: Option<usize>) -> Vec<(f64, usize)> {
    let mut all: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, p)| (sq_dist(q, p), i))
        .collect();
    let k = k.min(all.len());
    if k == 0 {
        return Vec::new();
    }
    if k < all.len() {
        all.select_nth_unstable_by(k - 1, key_cmp);
        all.truncate(k);
    }
    all.sort_unstable_by(key_cmp);
    all
}

/// K nearest neighbors of `anchor`, anchor included as the first entry.
pub fn knn(cloud: &PointCloud, anchor: usize, k: usize) -> Result<NeighborList> {
    KnnIndex::new(cloud.positions(), SearchStrategy::Auto).query(anchor, k)
}

/// Greedy farthest point sampling starting from `start`.
pub fn fps(points: &[Point3], m: usize, start: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if m == 0 || m > n {
        return Err(invalid(format!("sample size {m} must lie in [1, {n}]")));
    }
    if start >= n {
        return Err(invalid(format!(
            "start index {start} out of range for {n} points"
        )));
    }
    let mut chosen = Vec::with_capacity(m);
    let mut min_d = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut current = start;
    loop {
        chosen.push(current);
        taken[current] = true;
        if chosen.len() == m {
            break;
        }
        let c = points[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let d = sq_dist(&c, p);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(chosen)
}

pub type Rotation = [[f64; 3]; 3];

pub const ORTHONORMAL_TOL: f64 = 1e-9;

pub fn rigid_transform(cloud: &PointCloud, rotation: &Rotation, translation: &Point3) -> Result<PointCloud> {
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| rotation[k][i] * rotation[k][j]).sum();
            let expect = if i == j { 1.0 } else { 0.0 };
            // NaN entries fail too
            let within = (dot - expect).abs() <= ORTHONORMAL_TOL;
            if !within {
                return Err(invalid(format!(
                    "rotation is not orthonormal: (R^T R)[{i}][{j}] = {dot}"
                )));
            }
        }
    }
    let positions = cloud
        .positions()
        .iter()
        .map(|p| {
            let mut out = [0.0; 3];
            for (r, o) in out.iter_mut().enumerate() {
                *o = rotation[r][0] * p[0] + rotation[r][1] * p[1] + rotation[r][2] * p[2] + translation[r];
            }
            out
        })
        .collect();
    PointCloud::with_features(
        positions,
        cloud.features.clone(),
        cloud.feature_dim,
        cloud.labels.clone(),
        cloud.num_classes,
    )
}

/// Rotation about the z axis by `angle` radians.
pub fn rotation_z(angle: f64) -> Rotation {
    let (s, c) = angle.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(xs: &[f64]) -> PointCloud {
        let pos = xs.iter().map(|&x| [x, 0.0, 0.0]).collect();
        PointCloud::new(pos, vec![0; xs.len()], 1).unwrap()
    }

    #[test]
    fn knn_nearer_endpoint() {
        let c = line(&[0.0, 1.0, 3.0]);
        assert_eq!(knn(&c, 1, 2).unwrap().neighbors, vec![1, 0]);
    }

    #[test]
    fn knn_full_set() {
        let c = line(&[5.0, 0.0, 3.0, 1.0]);
        let nl = knn(&c, 1, 4).unwrap();
        assert_eq!(nl.neighbors, vec![1, 3, 2, 0]);
        assert_eq!(nl.sq_dists, vec![0.0, 1.0, 9.0, 25.0]);
    }

    #[test]
    fn knn_duplicates_lower_index_first() {
        // anchor 3 shares its position with 1 and 4
        let c = line(&[9.0, 2.0, 7.0, 2.0, 2.0]);
        let nl = knn(&c, 3, 4).unwrap();
        assert_eq!(nl.neighbors, vec![3, 1, 4, 2]);
    }

    #[test]
    fn knn_rejects_bad_arguments() {
        let c = line(&[0.0, 1.0]);
        assert!(knn(&c, 0, 3).is_err());
        assert!(knn(&c, 2, 1).is_err());
        assert!(knn(&c, 0, 0).is_err());
    }

    #[test]
    fn fps_examples() {
        let c = line(&[0.0, 1.0, 10.0]);
        assert_eq!(fps(c.positions(), 1, 1).unwrap(), vec![1]);
        assert_eq!(fps(c.positions(), 2, 0).unwrap(), vec![0, 2]);
        let mut all = fps(c.positions(), 3, 0).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2]);
        assert!(fps(c.positions(), 4, 0).is_err());
        assert!(fps(c.positions(), 1, 3).is_err());
    }

    #[test]
    fn fps_tie_prefers_lower_index() {
        // 0 and 2 are equidistant from the start
        let c = line(&[-1.0, 0.0, 1.0]);
        assert_eq!(fps(c.positions(), 2, 1).unwrap(), vec![1, 0]);
    }

    #[test]
    fn rigid_transform_cases() {
        let c = PointCloud::new(vec![[1.0, 0.0, 0.0], [0.0, 2.0, 1.0]], vec![0, 1], 2).unwrap();
        let id = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert_eq!(rigid_transform(&c, &id, &[0.0; 3]).unwrap(), c);

        let r = rigid_transform(&c, &rotation_z(std::f64::consts::FRAC_PI_2), &[0.0; 3]).unwrap();
        let p = r.positions()[0];
        assert!(p[0].abs() < 1e-15 && (p[1] - 1.0).abs() < 1e-15 && p[2] == 0.0);
        assert_eq!(r.labels(), c.labels());

        let t = rigid_transform(&c, &id, &[3.0, -1.0, 2.0]).unwrap();
        assert_eq!(
            sq_dist(&t.positions()[0], &t.positions()[1]),
            sq_dist(&c.positions()[0], &c.positions()[1])
        );

        let skew = [[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(rigid_transform(&c, &skew, &[0.0; 3]).is_err());
    }

    #[test]
    fn cloud_validation() {
        assert!(PointCloud::new(vec![], vec![], 1).is_err());
        assert!(PointCloud::new(vec![[0.0; 3]], vec![1], 1).is_err());
        assert!(PointCloud::new(vec![[0.0; 3]], vec![0, 0], 1).is_err());
        assert!(PointCloud::new(vec![[0.0; 3]], vec![0], 0).is_err());
        assert!(PointCloud::with_features(vec![[0.0; 3]], vec![1.0], 2, vec![0], 1).is_err());
    }
}
