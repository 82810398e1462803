//! Ambiguity-driven margins and the adaptive-margin contrastive objective.
//!
//! For an anchor `i` with intra neighbors `j` and inter neighbors `k`:
//!
//! ```text
//! emb_ij = exp((sim(f_i, f_j) - m_i) / tau)
//! emb_ik = exp(sim(f_i, f_k) / tau)
//! l_i    = -ln( sum_j emb_ij / (sum_j emb_ij + sum_k emb_ik) )
//! ```
//!
//! The objective averages `l_i` over anchors whose neighborhood contains at
//! least one inter point. Gradients are analytic; margins and partitions are
//! constants.

use crate::aef::{AmbiguityMap, NeighborPartition};
use crate::error::{invalid, Result};

pub const NORM_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginConfig {
    pub mu: f64,
    pub nu: f64,
    pub tau: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self {
            mu: -1.0,
            nu: 0.5,
            tau: 0.3,
        }
    }
}

impl MarginConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(invalid(format!("tau must be positive, got {}", self.tau)));
        }
        if !self.mu.is_finite() || !self.nu.is_finite() {
            return Err(invalid("mu and nu must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginMap {
    pub values: Vec<f64>,
    pub stage: usize,
}

pub fn margin(a: f64, cfg: &MarginConfig) -> f64 {
    cfg.mu * a + cfg.nu
}

pub fn margin_map(amb: &AmbiguityMap, cfg: &MarginConfig) -> MarginMap {
    MarginMap {
        values: amb.values.iter().map(|&a| margin(a, cfg)).collect(),
        stage: amb.stage,
    }
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Cosine similarity with both norms clamped below by `norm_epsilon`.
pub fn cosine_sim(u: &[f64], v: &[f64], norm_epsilon: f64) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    let nu = dot(u, u).sqrt().max(norm_epsilon);
    let nv = dot(v, v).sqrt().max(norm_epsilon);
    (dot(u, v) / (nu * nv)).clamp(-1.0, 1.0)
}

/// Adds `scale * d sim / d u` into `gu` and `scale * d sim / d v` into `gv`.
fn accumulate_cosine_grad(
    u: &[f64],
    v: &[f64],
    norm_epsilon: f64,
    scale: f64,
    gu: &mut [f64],
    gv: &mut [f64],
) {
    let lu = dot(u, u).sqrt();
    let lv = dot(v, v).sqrt();
    let nu = lu.max(norm_epsilon);
    let nv = lv.max(norm_epsilon);
    let s = dot(u, v) / (nu * nv);
    let inv = 1.0 / (nu * nv);
    let su = if lu > norm_epsilon { s / (lu * lu) } else { 0.0 };
    let sv = if lv > norm_epsilon { s / (lv * lv) } else { 0.0 };
    for d in 0..u.len() {
        gu[d] += scale * (v[d] * inv - su * u[d]);
        gv[d] += scale * (u[d] * inv - sv * v[d]);
    }
}

/// `(emb_ij, emb_ik)` for one intra and one inter similarity.
pub fn contrastive_embeddings(sim_plus: f64, sim_minus: f64, m: f64, tau: f64) -> (f64, f64) {
    (((sim_plus - m) / tau).exp(), (sim_minus / tau).exp())
}

/// Features plus the per-anchor neighborhood structure they are contrasted on.
#[derive(Debug, Clone, Copy)]
pub struct ContrastBatch<'a> {
    /// Row-major, `dim` values per point.
    pub features: &'a [f64],
    pub dim: usize,
    pub partitions: &'a [NeighborPartition],
    pub margins: &'a [f64],
}

impl ContrastBatch<'_> {
    pub fn len(&self) -> usize {
        self.partitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.partitions.is_empty()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.partitions.len();
        if self.dim == 0 {
            return Err(invalid("feature dimension must be positive"));
        }
        if self.features.len() != n * self.dim {
            return Err(invalid(format!(
                "feature buffer has {} values, expected {} x {}",
                self.features.len(),
                n,
                self.dim
            )));
        }
        if self.margins.len() != n {
            return Err(invalid(format!(
                "{} margins for {} points",
                self.margins.len(),
                n
            )));
        }
        for (i, p) in self.partitions.iter().enumerate() {
            if p.anchor != i {
                return Err(invalid(format!("partition {i} is anchored at {}", p.anchor)));
            }
            if let Some(&bad) = p.intra.iter().chain(&p.inter).find(|&&j| j >= n) {
                return Err(invalid(format!("partition {i} references point {bad}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmLoss {
    pub loss: f64,
    /// Same layout as the batch features.
    pub grad: Vec<f64>,
    /// d loss / d m_i, useful for margin sensitivity checks.
    pub margin_grad: Vec<f64>,
    /// Anchors that contributed (non-empty inter set).
    pub active: usize,
}

/// Per-anchor term and its partial derivatives with respect to each
/// similarity, intra first then inter.
struct AnchorTerm {
    loss: f64,
    d_intra: Vec<f64>,
    d_inter: Vec<f64>,
    d_margin: f64,
}

fn anchor_term(sims_plus: &[f64], sims_minus: &[f64], m: f64, tau: f64) -> AnchorTerm {
    let xs: Vec<f64> = sims_plus.iter().map(|s| (s - m) / tau).collect();
    let ys: Vec<f64> = sims_minus.iter().map(|s| s / tau).collect();
    let top = xs.iter().chain(&ys).copied().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = xs.iter().map(|x| (x - top).exp()).collect();
    let ey: Vec<f64> = ys.iter().map(|y| (y - top).exp()).collect();
    let p: f64 = ex.iter().sum();
    let q: f64 = ey.iter().sum();
    let total = p + q;
    AnchorTerm {
        loss: total.ln() - p.ln(),
        d_intra: ex.iter().map(|e| (e / total - e / p) / tau).collect(),
        d_inter: ey.iter().map(|e| e / total / tau).collect(),
        d_margin: q / total / tau,
    }
}

pub fn loss_am(batch: &ContrastBatch<'_>, cfg: &MarginConfig) -> Result<AmLoss> {
    cfg.validate()?;
    batch.validate()?;
    let n = batch.len();
    let dim = batch.dim;
    let mut grad = vec![0.0; n * dim];
    let mut margin_grad = vec![0.0; n];
    let active: Vec<usize> = (0..n)
        .filter(|&i| !batch.partitions[i].inter.is_empty())
        .collect();
    if active.is_empty() {
        return Ok(AmLoss {
            loss: 0.0,
            grad,
            margin_grad,
            active: 0,
        });
    }
    let scale = 1.0 / active.len() as f64;
    let mut loss = 0.0;
    let mut gi = vec![0.0; dim];
    let mut gj = vec![0.0; dim];
    for &i in &active {
        let part = &batch.partitions[i];
        let fi = batch.row(i);
        let sp: Vec<f64> = part
            .intra
            .iter()
            .map(|&j| cosine_sim(fi, batch.row(j), NORM_EPSILON))
            .collect();
        let sm: Vec<f64> = part
            .inter
            .iter()
            .map(|&k| cosine_sim(fi, batch.row(k), NORM_EPSILON))
            .collect();
        let term = anchor_term(&sp, &sm, batch.margins[i], cfg.tau);
        loss += term.loss;
        margin_grad[i] = scale * term.d_margin;

        let pairs = part
            .intra
            .iter()
            .zip(&term.d_intra)
            .chain(part.inter.iter().zip(&term.d_inter));
        for (&j, &ds) in pairs {
            gi.iter_mut().for_each(|g| *g = 0.0);
            gj.iter_mut().for_each(|g| *g = 0.0);
            accumulate_cosine_grad(fi, batch.row(j), NORM_EPSILON, scale * ds, &mut gi, &mut gj);
            for d in 0..dim {
                grad[i * dim + d] += gi[d];
                grad[j * dim + d] += gj[d];
            }
        }
    }
    Ok(AmLoss {
        loss: loss * scale,
        grad,
        margin_grad,
        active: active.len(),
    })
}

/// `lambda * l_ce + (1 - lambda) * sum(l_am)`.
pub fn loss_seg(l_ce: f64, l_am_stages: &[f64], lambda: f64) -> f64 {
    lambda * l_ce + (1.0 - lambda) * l_am_stages.iter().sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn margin_values() {
        let cfg = MarginConfig::default();
        assert_eq!(margin(0.5, &cfg), 0.0);
        assert_eq!(margin(1.0, &cfg), -0.5);
        assert_relative_eq!(margin(0.2, &cfg), 0.3, epsilon = 1e-15);
    }

    #[test]
    fn cosine_cases() {
        let u = [0.3, -1.2, 2.0];
        assert_relative_eq!(cosine_sim(&u, &u, NORM_EPSILON), 1.0, epsilon = 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0], NORM_EPSILON), 0.0);
        let neg: Vec<f64> = u.iter().map(|x| -x).collect();
        assert_relative_eq!(cosine_sim(&u, &neg, NORM_EPSILON), -1.0, epsilon = 1e-15);
        assert_eq!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0], NORM_EPSILON), 0.0);
    }

    #[test]
    fn embedding_values() {
        let (e, _) = contrastive_embeddings(1.0, 0.0, 0.0, 0.3);
        assert_relative_eq!(e, 28.031_624_8, epsilon = 1e-6);
        let (e, k) = contrastive_embeddings(1.0, 0.0, 0.5, 0.3);
        assert_relative_eq!(e, 5.294_490_1, epsilon = 1e-6);
        assert_eq!(k, 1.0);
        let (e0, _) = contrastive_embeddings(0.4, 0.0, 0.0, 0.3);
        assert_eq!(e0, (0.4f64 / 0.3).exp());
    }

    fn pair_batch() -> (Vec<f64>, Vec<NeighborPartition>) {
        // anchor 0 with its own intra entry (sim 1) and one orthogonal inter point
        let feats = vec![1.0, 0.0, 0.0, 1.0];
        let parts = vec![
            NeighborPartition {
                anchor: 0,
                intra: vec![0],
                inter: vec![1],
                d_plus: 0.0,
                d_minus: 1.0,
            },
            NeighborPartition {
                anchor: 1,
                intra: vec![1],
                inter: vec![],
                d_plus: 0.0,
                d_minus: 0.0,
            },
        ];
        (feats, parts)
    }

    #[test]
    fn hand_evaluated_losses() {
        let (feats, parts) = pair_batch();
        let cfg = MarginConfig {
            mu: 0.0,
            nu: 0.0,
            tau: 0.3,
        };
        let b = ContrastBatch {
            features: &feats,
            dim: 2,
            partitions: &parts,
            margins: &[0.0, 0.0],
        };
        let l = loss_am(&b, &cfg).unwrap();
        assert_eq!(l.active, 1);
        assert_relative_eq!(l.loss, (1.0 + (-10.0f64 / 3.0).exp()).ln(), epsilon = 1e-14);
        assert_relative_eq!(l.loss, 0.035_06, epsilon = 1e-5);

        let b = ContrastBatch {
            margins: &[0.5, 0.5],
            ..b
        };
        let l = loss_am(&b, &cfg).unwrap();
        let e = (5.0f64 / 3.0).exp();
        assert_relative_eq!(l.loss, -(e / (e + 1.0)).ln(), epsilon = 1e-14);
        assert_relative_eq!(l.loss, 0.173_01, epsilon = 1e-5);
    }

    #[test]
    fn no_inter_sets_means_zero() {
        let feats = vec![1.0, 2.0, 3.0, 4.0];
        let parts: Vec<_> = (0..2)
            .map(|i| NeighborPartition {
                anchor: i,
                intra: vec![i, 1 - i],
                inter: vec![],
                d_plus: 1.0,
                d_minus: 0.0,
            })
            .collect();
        let b = ContrastBatch {
            features: &feats,
            dim: 2,
            partitions: &parts,
            margins: &[0.1, 0.2],
        };
        let l = loss_am(&b, &MarginConfig::default()).unwrap();
        assert_eq!(l.loss, 0.0);
        assert!(l.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn rejects_inconsistent_batches() {
        let (feats, parts) = pair_batch();
        let b = ContrastBatch {
            features: &feats[..3],
            dim: 2,
            partitions: &parts,
            margins: &[0.0, 0.0],
        };
        assert!(loss_am(&b, &MarginConfig::default()).is_err());
        let b = ContrastBatch {
            features: &feats,
            dim: 2,
            partitions: &parts,
            margins: &[0.0],
        };
        assert!(loss_am(&b, &MarginConfig::default()).is_err());
        let b = ContrastBatch {
            features: &feats,
            dim: 2,
            partitions: &parts,
            margins: &[0.0, 0.0],
        };
        assert!(loss_am(
            &b,
            &MarginConfig {
                tau: 0.0,
                ..Default::default()
            }
        )
        .is_err());
    }

    #[test]
    fn seg_combination() {
        assert_relative_eq!(loss_seg(2.0, &[0.2, 0.3], 0.1), 0.65, epsilon = 1e-15);
        assert_eq!(loss_seg(2.0, &[0.2, 0.3], 1.0), 2.0);
        assert_eq!(loss_seg(2.0, &[0.5], 0.0), 0.5);
    }
}
