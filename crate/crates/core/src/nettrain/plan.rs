//! Label- and weight-independent geometry for one cloud: sampled subsets,
//! aggregation groups, upsampling maps, refinement neighborhoods and, for
//! labeled clouds, per-stage ambiguity targets and margins.

use crate::aef::{self, AmbiguityMap, NeighborPartition};
use crate::autograd::Tensor;
use crate::cloudgeom::{fps, KnnIndex, Point3, PointCloud, SearchStrategy};
use crate::error::{invalid, Result};
use crate::margin_contrast::{margin_map, MarginMap};
use crate::refine::refine_neighborhoods;

use super::{mine_labels, ModelConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct StageSupervision {
    pub labels: Vec<usize>,
    pub partitions: Vec<NeighborPartition>,
    pub ambiguity: AmbiguityMap,
    pub margins: MarginMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    pub stage: usize,
    /// Into the parent stage.
    pub indices: Vec<usize>,
    /// Centered, unscaled.
    pub positions: Vec<Point3>,
    pub group_k: usize,
    /// `n * group_k` parent indices, each group led by the sampled point.
    pub groups: Vec<usize>,
    /// `[n * group_k, 3]` neighbor offsets divided by the mean offset length.
    pub offsets: Tensor,
    /// For every parent point, its nearest point in this stage.
    pub upsample: Vec<usize>,
    /// For every parent point, its `interp_k` nearest points in this stage
    /// and their normalized inverse-distance weights.
    pub interp: Vec<Vec<(usize, f64)>>,
    pub refine_neighbors: Vec<Vec<usize>>,
    pub supervision: Option<StageSupervision>,
}

impl StagePlan {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CloudPlan {
    pub len: usize,
    pub positions: Vec<Point3>,
    /// `[n, 3 + feature_dim]`: positions scaled into the unit ball, then the
    /// cloud's own features.
    pub input: Tensor,
    pub labels: Option<Vec<usize>>,
    pub stages: Vec<StagePlan>,
}

fn centered(points: &[Point3]) -> Vec<Point3> {
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points {
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    c.iter_mut().for_each(|v| *v /= n);
    points
        .iter()
        .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
        .collect()
}

fn norm(p: &Point3) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

/// Inverse-distance weights; an exact hit takes all the weight.
fn interp_weights(found: &[(f64, usize)]) -> Vec<(usize, f64)> {
    if let Some(&(_, i)) = found.iter().find(|(d, _)| *d == 0.0) {
        return vec![(i, 1.0)];
    }
    let inv: Vec<f64> = found.iter().map(|(d, _)| 1.0 / d.sqrt()).collect();
    let total: f64 = inv.iter().sum();
    found.iter().zip(inv).map(|((_, i), w)| (*i, w / total)).collect()
}

/// Stage sizes for a cloud of `n` points.
pub fn stage_sizes(n: usize, ratios: &[usize]) -> Vec<usize> {
    let mut sizes = Vec::with_capacity(ratios.len());
    let mut m = n;
    for &r in ratios {
        m = m.div_ceil(r.max(1));
        sizes.push(m);
    }
    sizes
}

impl CloudPlan {
    /// `with_labels` controls whether supervision is derived from the
    /// cloud's labels; inference plans never look at them.
    pub fn build(cloud: &PointCloud, cfg: &ModelConfig, with_labels: bool) -> Result<Self> {
        cfg.validate()?;
        let n = cloud.len();
        let sizes = stage_sizes(n, &cfg.ratios);
        if sizes.iter().any(|&m| m < 2) {
            return Err(invalid(format!(
                "{n} points are too few for {} stages",
                cfg.dims.len()
            )));
        }
        let positions = centered(cloud.positions());
        let radius = positions.iter().map(norm).fold(0.0, f64::max);
        let scale = if radius > 0.0 { 1.0 / radius } else { 1.0 };
        let fd = cloud.feature_dim();
        let mut input = Vec::with_capacity(n * (3 + fd));
        for (i, p) in positions.iter().enumerate() {
            input.extend(p.iter().map(|v| v * scale));
            input.extend_from_slice(cloud.feature(i));
        }
        let input = Tensor::matrix(n, 3 + fd, input)?;
        let labels = with_labels.then(|| cloud.labels().to_vec());

        let mut stages = Vec::with_capacity(sizes.len());
        let mut parent_pos = positions.clone();
        let mut parent_labels = labels.clone();
        for (s, &m) in sizes.iter().enumerate() {
            let stage = s + 1;
            let indices = fps(&parent_pos, m, 0)?;
            let pos: Vec<Point3> = indices.iter().map(|&i| parent_pos[i]).collect();

            let parent_index = KnnIndex::new(&parent_pos, SearchStrategy::Auto);
            let group_k = cfg.group_k.min(parent_pos.len());
            let mut groups = Vec::with_capacity(m * group_k);
            let mut raw = Vec::with_capacity(m * group_k * 3);
            for &c in &indices {
                let nl = parent_index.query(c, group_k)?;
                for &j in &nl.neighbors {
                    groups.push(j);
                    raw.extend((0..3).map(|a| parent_pos[j][a] - parent_pos[c][a]));
                }
            }
            let mean_len =
                raw.chunks(3).map(|d| norm(&[d[0], d[1], d[2]])).sum::<f64>() / (m * group_k) as f64;
            if mean_len > 0.0 {
                raw.iter_mut().for_each(|v| *v /= mean_len);
            }
            let offsets = Tensor::matrix(m * group_k, 3, raw)?;

            let stage_index = KnnIndex::new(&pos, SearchStrategy::Auto);
            let upsample = parent_pos
                .iter()
                .map(|q| stage_index.nearest(q, 1, None)[0].1)
                .collect();
            let interp = parent_pos
                .iter()
                .map(|q| interp_weights(&stage_index.nearest(q, cfg.interp_k.min(m), None)))
                .collect();
            let refine_neighbors = refine_neighborhoods(&pos, cfg.refine.k_tilde)?;

            let supervision = match &parent_labels {
                Some(pl) => {
                    let stage_labels = mine_labels(pl, &indices)?;
                    let partitions = aef::partitions(&pos, &stage_labels, cfg.aef.k, SearchStrategy::Auto)?;
                    let values = partitions
                        .iter()
                        .map(|p| aef::partition_ambiguity(p, &cfg.aef))
                        .collect();
                    let ambiguity = AmbiguityMap { values, stage };
                    let margins = margin_map(&ambiguity, &cfg.margin);
                    Some(StageSupervision {
                        labels: stage_labels,
                        partitions,
                        ambiguity,
                        margins,
                    })
                }
                None => None,
            };
            parent_labels = supervision.as_ref().map(|s| s.labels.clone());
            stages.push(StagePlan {
                stage,
                indices,
                positions: pos.clone(),
                group_k,
                groups,
                offsets,
                upsample,
                interp,
                refine_neighbors,
                supervision,
            });
            parent_pos = pos;
        }
        Ok(Self {
            len: n,
            positions,
            input,
            labels,
            stages,
        })
    }

    pub fn supervised(&self) -> bool {
        self.labels.is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloudgeom::{synth_scene, SceneKind, SceneSpec};

    fn plan(points: usize) -> CloudPlan {
        let cloud = synth_scene(&SceneSpec::new(SceneKind::PlanarBoundary, points, 0.0, 1)).unwrap();
        CloudPlan::build(&cloud, &ModelConfig::default(), true).unwrap()
    }

    #[test]
    fn stage_bookkeeping() {
        let p = plan(200);
        assert_eq!(p.len, 400);
        assert_eq!(p.stages.len(), 2);
        let mut parent = p.len;
        for st in &p.stages {
            assert!(st.indices.iter().all(|&i| i < parent));
            assert_eq!(st.upsample.len(), parent);
            assert!(st.upsample.iter().all(|&u| u < st.len()));
            assert_eq!(st.groups.len(), st.len() * st.group_k);
            let sup = st.supervision.as_ref().unwrap();
            assert_eq!(sup.labels.len(), st.len());
            assert_eq!(sup.ambiguity.values.len(), st.len());
            // a sampled point maps back onto itself
            for (k, &i) in st.indices.iter().enumerate() {
                assert_eq!(st.positions[st.upsample[i]], st.positions[k]);
            }
            parent = st.len();
        }
        assert_eq!(stage_sizes(400, &[4, 4]), vec![100, 25]);
    }

    #[test]
    fn unlabeled_plan_has_no_supervision() {
        let cloud = synth_scene(&SceneSpec::new(SceneKind::TwoRooms, 50, 0.0, 3)).unwrap();
        let p = CloudPlan::build(&cloud, &ModelConfig::default(), false).unwrap();
        assert!(p.stages.iter().all(|s| s.supervision.is_none()));
    }

    #[test]
    fn tiny_cloud_rejected() {
        let cloud =
            PointCloud::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]], vec![0, 1, 0], 2).unwrap();
        assert!(CloudPlan::build(&cloud, &ModelConfig::default(), true).is_err());
    }
}
