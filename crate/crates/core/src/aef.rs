//! Per-point ambiguity from local label geometry.
//!
//! Each anchor's K-neighborhood is split into same-label (intra) and
//! other-label (inter) points. Two closeness centralities, count over
//! summed squared distance, feed an inverse sigmoid; neighborhoods that are
//! entirely intra score 0 and anchors that are alone in their class score 1.

use crate::cloudgeom::{KnnIndex, NeighborList, PointCloud, SearchStrategy};
use crate::error::{invalid, Result};

pub const DEFAULT_K: usize = 24;
pub const DEFAULT_BETA: f64 = 0.04;
pub const DEFAULT_DUP_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AefConfig {
    pub k: usize,
    pub beta: f64,
    pub dup_epsilon: f64,
}

impl Default for AefConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            beta: DEFAULT_BETA,
            dup_epsilon: DEFAULT_DUP_EPSILON,
        }
    }
}

impl AefConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(invalid(format!("K must be at least 2, got {}", self.k)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(invalid(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.dup_epsilon > 0.0 && self.dup_epsilon <= 1e-6) {
            return Err(invalid(format!(
                "dup_epsilon must lie in (0, 1e-6], got {}",
                self.dup_epsilon
            )));
        }
        Ok(())
    }
}

/// Intra/inter split of one anchor's neighborhood.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborPartition {
    pub anchor: usize,
    /// Same label as the anchor, anchor included (first).
    pub intra: Vec<usize>,
    pub inter: Vec<usize>,
    pub d_plus: f64,
    pub d_minus: f64,
}

impl NeighborPartition {
    pub fn k(&self) -> usize {
        self.intra.len() + self.inter.len()
    }

    pub fn from_neighbors(list: &NeighborList, labels: &[usize]) -> Self {
        let own = labels[list.anchor];
        let mut intra = Vec::new();
        let mut inter = Vec::new();
        let mut d_plus = 0.0;
        let mut d_minus = 0.0;
        for (&j, &d) in list.neighbors.iter().zip(&list.sq_dists) {
            if labels[j] == own {
                intra.push(j);
                d_plus += d;
            } else {
                inter.push(j);
                d_minus += d;
            }
        }
        Self {
            anchor: list.anchor,
            intra,
            inter,
            d_plus,
            d_minus,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Closeness {
    pub cc_plus: f64,
    pub cc_minus: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmbiguityMap {
    pub values: Vec<f64>,
    pub stage: usize,
}

pub fn partition_neighbors(cloud: &PointCloud, anchor: usize, k: usize) -> Result<NeighborPartition> {
    let list = crate::cloudgeom::knn(cloud, anchor, k)?;
    Ok(NeighborPartition::from_neighbors(&list, cloud.labels()))
}

pub fn closeness(part: &NeighborPartition, dup_epsilon: f64) -> Closeness {
    let cc_plus = part.intra.len() as f64 / part.d_plus.max(dup_epsilon);
    let cc_minus = if part.inter.is_empty() {
        0.0
    } else {
        part.inter.len() as f64 / part.d_minus.max(dup_epsilon)
    };
    Closeness { cc_plus, cc_minus }
}

/// Inverse-sigmoid ambiguity of a mixed neighborhood, kept strictly inside
/// (0, 1) even when the exponential saturates.
pub fn inverse_sigmoid(cc: Closeness, beta: f64) -> f64 {
    let g = 1.0 / (1.0 + (beta * (cc.cc_plus - cc.cc_minus)).exp());
    g.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

pub fn ambiguity(cc: Closeness, intra_count: usize, k: usize, beta: f64) -> f64 {
    if intra_count >= k {
        0.0
    } else if intra_count <= 1 {
        1.0
    } else {
        inverse_sigmoid(cc, beta)
    }
}

pub fn partition_ambiguity(part: &NeighborPartition, cfg: &AefConfig) -> f64 {
    let cc = closeness(part, cfg.dup_epsilon);
    ambiguity(cc, part.intra.len(), part.k(), cfg.beta)
}

/// Partitions for every point, `K` capped at the cloud size.
pub fn partitions(
    positions: &[crate::cloudgeom::Point3],
    labels: &[usize],
    k: usize,
    strategy: SearchStrategy,
) -> Result<Vec<NeighborPartition>> {
    if positions.len() != labels.len() {
        return Err(invalid("positions and labels differ in length"));
    }
    let k = k.min(positions.len());
    let index = KnnIndex::new(positions, strategy);
    (0..positions.len())
        .map(|i| {
            index
                .query(i, k)
                .map(|nl| NeighborPartition::from_neighbors(&nl, labels))
        })
        .collect()
}

pub fn ambiguity_map(cloud: &PointCloud, cfg: &AefConfig) -> Result<AmbiguityMap> {
    ambiguity_map_with(cloud, cfg, SearchStrategy::Auto)
}

pub fn ambiguity_map_with(
    cloud: &PointCloud,
    cfg: &AefConfig,
    strategy: SearchStrategy,
) -> Result<AmbiguityMap> {
    cfg.validate()?;
    if cfg.k > cloud.len() {
        return Err(invalid(format!(
            "K = {} exceeds the {} points in the cloud",
            cfg.k,
            cloud.len()
        )));
    }
    let parts = partitions(cloud.positions(), cloud.labels(), cfg.k, strategy)?;
    Ok(AmbiguityMap {
        values: parts.iter().map(|p| partition_ambiguity(p, cfg)).collect(),
        stage: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn worked_cloud() -> PointCloud {
        PointCloud::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0]],
            vec![0, 0, 1, 1],
            2,
        )
        .unwrap()
    }

    #[test]
    fn worked_partition() {
        let p = partition_neighbors(&worked_cloud(), 0, 4).unwrap();
        assert_eq!(p.intra, vec![0, 1]);
        assert_eq!(p.inter, vec![2, 3]);
        assert_eq!(p.d_plus, 1.0);
        assert_eq!(p.d_minus, 8.0);
        let cc = closeness(&p, DEFAULT_DUP_EPSILON);
        assert_eq!(cc.cc_plus, 2.0);
        assert_eq!(cc.cc_minus, 0.25);
        let a = ambiguity(cc, 2, 4, 0.04);
        assert!((a - 0.482_507_9).abs() < 1e-6, "{a}");
        assert_eq!(a, 1.0 / (1.0 + 0.07f64.exp()));
    }

    #[test]
    fn branch_cases() {
        let cc = Closeness {
            cc_plus: 3.0,
            cc_minus: 1.0,
        };
        assert_eq!(ambiguity(cc, 5, 5, 0.04), 0.0);
        assert_eq!(ambiguity(cc, 1, 5, 0.04), 1.0);
        let mid = ambiguity(cc, 3, 5, 0.04);
        assert!(mid > 0.0 && mid < 1.0);
    }

    #[test]
    fn pure_and_lonely_neighborhoods() {
        let c = PointCloud::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]], vec![0, 0, 0], 1).unwrap();
        let p = partition_neighbors(&c, 1, 3).unwrap();
        assert!(p.inter.is_empty());
        assert_eq!(p.intra.len(), 3);
        assert_eq!(closeness(&p, 1e-9).cc_minus, 0.0);

        let c = PointCloud::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]], vec![1, 0, 0], 2).unwrap();
        let p = partition_neighbors(&c, 0, 3).unwrap();
        assert_eq!(p.intra, vec![0]);
        assert_eq!(
            partition_ambiguity(
                &p,
                &AefConfig {
                    k: 3,
                    ..Default::default()
                }
            ),
            1.0
        );
    }

    #[test]
    fn duplicate_positions_stay_finite() {
        let c = PointCloud::new(vec![[0.0; 3], [0.0; 3], [1.0, 0.0, 0.0]], vec![0, 0, 1], 2).unwrap();
        let p = partition_neighbors(&c, 0, 3).unwrap();
        assert_eq!(p.d_plus, 0.0);
        let cc = closeness(&p, 1e-9);
        assert_eq!(cc.cc_plus, 2.0 / 1e-9);
        assert!(cc.cc_plus.is_finite());
        let a = ambiguity(cc, 2, 3, 0.04);
        assert!(a > 0.0 && a < 1e-300);
    }

    #[test]
    fn single_class_cloud_is_unambiguous() {
        let pos = (0..30).map(|i| [i as f64 * 0.3, (i % 4) as f64, 0.0]).collect();
        let c = PointCloud::new(pos, vec![0; 30], 1).unwrap();
        let m = ambiguity_map(
            &c,
            &AefConfig {
                k: 8,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(m.values.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(AefConfig {
            k: 1,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(AefConfig {
            beta: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(AefConfig {
            dup_epsilon: 1e-3,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(AefConfig::default().validate().is_ok());
        let c = worked_cloud();
        assert!(ambiguity_map(
            &c,
            &AefConfig {
                k: 5,
                ..Default::default()
            }
        )
        .is_err());
    }
}
