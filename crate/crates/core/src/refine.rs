//! Masked refinement of stage embeddings from predicted ambiguity.
//!
//! Anchors whose predicted ambiguity falls inside `[epsilon_lo, epsilon_hi]`
//! are pulled toward the embedding of their least ambiguous neighbor. All
//! reads within a stage come from the pre-refinement snapshot, so the result
//! does not depend on visiting order.

use crate::cloudgeom::{KnnIndex, Point3, SearchStrategy};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CrossMaskMode {
    /// Only the lowest-index minimizer is selected.
    #[default]
    Single,
    /// Every neighbor attaining the minimum is selected and summed.
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    pub epsilon_lo: f64,
    pub epsilon_hi: f64,
    pub gamma: f64,
    pub k_tilde: usize,
    pub cross_mask_mode: CrossMaskMode,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            epsilon_lo: 0.9,
            epsilon_hi: 1.0,
            gamma: 1.0,
            k_tilde: 12,
            cross_mask_mode: CrossMaskMode::Single,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.epsilon_lo) || !unit(self.epsilon_hi) || !unit(self.gamma) {
            return Err(invalid("epsilon_lo, epsilon_hi and gamma must lie in [0, 1]"));
        }
        if self.epsilon_lo > self.epsilon_hi {
            return Err(invalid(format!(
                "epsilon_lo {} exceeds epsilon_hi {}",
                self.epsilon_lo, self.epsilon_hi
            )));
        }
        if self.k_tilde < 2 {
            return Err(invalid(format!(
                "k_tilde must be at least 2, got {}",
                self.k_tilde
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossMask {
    pub pooled: f64,
    pub bits: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub self_mask: Vec<bool>,
    /// Neighbor indices (anchor excluded), aligned with `cross_mask` bits.
    pub neighbors: Vec<Vec<usize>>,
    pub cross_mask: Vec<Vec<bool>>,
    pub pooled: Vec<f64>,
}

pub fn self_mask(a_pred: f64, cfg: &RefineConfig) -> bool {
    a_pred >= cfg.epsilon_lo && a_pred <= cfg.epsilon_hi
}

/// Minimum pooling with the lowest-index minimizer selected.
pub fn cross_mask(neighbor_ambiguities: &[f64]) -> Result<CrossMask> {
    cross_mask_with(neighbor_ambiguities, CrossMaskMode::Single)
}

pub fn cross_mask_with(neighbor_ambiguities: &[f64], mode: CrossMaskMode) -> Result<CrossMask> {
    let (first, rest) = neighbor_ambiguities
        .split_first()
        .ok_or_else(|| invalid("cross mask needs at least one neighbor"))?;
    let (mut best, mut at) = (*first, 0usize);
    for (h, &a) in rest.iter().enumerate() {
        if a < best {
            best = a;
            at = h + 1;
        }
    }
    let bits = match mode {
        CrossMaskMode::Single => (0..neighbor_ambiguities.len()).map(|h| h == at).collect(),
        CrossMaskMode::Sum => neighbor_ambiguities.iter().map(|&a| a == best).collect(),
    };
    Ok(CrossMask { pooled: best, bits })
}

/// `gamma * sum(sources) + (1 - gamma) * own`, shared with the tape op so
/// both paths produce identical bits.
pub(crate) fn blend_rows<'a>(
    own: &[f64],
    mut sources: impl Iterator<Item = &'a [f64]>,
    gamma: f64,
) -> Vec<f64> {
    let mut acc: Vec<f64> = match sources.next() {
        Some(first) => first.to_vec(),
        None => return own.to_vec(),
    };
    for s in sources {
        for (a, v) in acc.iter_mut().zip(s) {
            *a += v;
        }
    }
    acc.iter()
        .zip(own)
        .map(|(r, f)| gamma * r + (1.0 - gamma) * f)
        .collect()
}

pub fn refine_embedding(
    f: &[f64],
    neighbor_features: &[&[f64]],
    self_bit: bool,
    cross_bits: &[bool],
    gamma: f64,
) -> Result<Vec<f64>> {
    if neighbor_features.len() != cross_bits.len() {
        return Err(invalid(format!(
            "{} neighbor features for {} cross bits",
            neighbor_features.len(),
            cross_bits.len()
        )));
    }
    if let Some(bad) = neighbor_features.iter().find(|g| g.len() != f.len()) {
        return Err(invalid(format!(
            "neighbor feature of length {} for anchor of length {}",
            bad.len(),
            f.len()
        )));
    }
    if !self_bit {
        return Ok(f.to_vec());
    }
    let selected = neighbor_features
        .iter()
        .zip(cross_bits)
        .filter(|(_, &b)| b)
        .map(|(g, _)| *g);
    let mut selected = selected.peekable();
    if selected.peek().is_none() {
        // f* is the zero vector when no neighbor is flagged
        return Ok(f.iter().map(|v| (1.0 - gamma) * v).collect());
    }
    Ok(blend_rows(f, selected, gamma))
}

/// `K̃ - 1` nearest neighbors of every point, anchor excluded.
pub fn refine_neighborhoods(positions: &[Point3], k_tilde: usize) -> Result<Vec<Vec<usize>>> {
    if positions.len() < 2 {
        return Err(invalid("refinement needs at least two points"));
    }
    let k = k_tilde.min(positions.len());
    let index = KnnIndex::new(positions, SearchStrategy::Auto);
    (0..positions.len())
        .map(|i| index.query(i, k).map(|nl| nl.neighbors[1..].to_vec()))
        .collect()
}

/// Masks for a whole stage given precomputed neighborhoods.
pub fn build_masks(pred: &[f64], neighborhoods: &[Vec<usize>], cfg: &RefineConfig) -> Result<MaskSet> {
    if pred.len() != neighborhoods.len() {
        return Err(invalid("one neighborhood per predicted ambiguity required"));
    }
    let mut out = MaskSet {
        self_mask: Vec::with_capacity(pred.len()),
        neighbors: neighborhoods.to_vec(),
        cross_mask: Vec::with_capacity(pred.len()),
        pooled: Vec::with_capacity(pred.len()),
    };
    for (i, nbrs) in neighborhoods.iter().enumerate() {
        let amb: Vec<f64> = nbrs.iter().map(|&h| pred[h]).collect();
        let cm = cross_mask_with(&amb, cfg.cross_mask_mode)?;
        out.self_mask.push(self_mask(pred[i], cfg));
        out.cross_mask.push(cm.bits);
        out.pooled.push(cm.pooled);
    }
    Ok(out)
}

impl MaskSet {
    /// Per-row source lists for the tape refine op: empty when the anchor
    /// is left alone.
    pub fn sources(&self) -> Vec<Vec<usize>> {
        self.self_mask
            .iter()
            .zip(self.neighbors.iter().zip(&self.cross_mask))
            .map(|(&s, (nbrs, bits))| {
                if !s {
                    return Vec::new();
                }
                nbrs.iter()
                    .zip(bits)
                    .filter(|(_, &b)| b)
                    .map(|(&h, _)| h)
                    .collect()
            })
            .collect()
    }
}

/// Refines a `[n, dim]` row-major feature buffer for one stage.
pub fn refine_stage(
    features: &[f64],
    dim: usize,
    pred: &[f64],
    positions: &[Point3],
    cfg: &RefineConfig,
) -> Result<(Vec<f64>, MaskSet)> {
    cfg.validate()?;
    let n = positions.len();
    if pred.len() != n || features.len() != n * dim || dim == 0 {
        return Err(invalid("features, predictions and positions disagree in length"));
    }
    let nbrs = refine_neighborhoods(positions, cfg.k_tilde)?;
    let masks = build_masks(pred, &nbrs, cfg)?;
    let row = |i: usize| &features[i * dim..(i + 1) * dim];
    let mut out = Vec::with_capacity(features.len());
    for i in 0..n {
        let neighbor_features: Vec<&[f64]> = masks.neighbors[i].iter().map(|&h| row(h)).collect();
        out.extend(refine_embedding(
            row(i),
            &neighbor_features,
            masks.self_mask[i],
            &masks.cross_mask[i],
            cfg.gamma,
        )?);
    }
    Ok((out, masks))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_mask_bounds() {
        let cfg = RefineConfig::default();
        assert!(self_mask(0.95, &cfg));
        assert!(!self_mask(0.5, &cfg));
        assert!(self_mask(0.9, &cfg));
        assert!(self_mask(1.0, &cfg));
    }

    #[test]
    fn cross_mask_examples() {
        let cm = cross_mask(&[0.3, 0.1, 0.7]).unwrap();
        assert_eq!(cm.pooled, 0.1);
        assert_eq!(cm.bits, vec![false, true, false]);
        assert_eq!(
            cross_mask(&[0.2, 0.2, 0.9]).unwrap().bits,
            vec![true, false, false]
        );
        assert_eq!(cross_mask(&[0.4]).unwrap().bits, vec![true]);
        assert!(cross_mask(&[]).is_err());
        let sum = cross_mask_with(&[0.2, 0.2, 0.9], CrossMaskMode::Sum).unwrap();
        assert_eq!(sum.bits, vec![true, true, false]);
    }

    #[test]
    fn refine_embedding_examples() {
        let f = [0.1, 0.7, -3.0];
        let g = [5.0, 6.0, 7.0];
        let h = [1.0, 1.0, 1.0];
        for gamma in [0.0, 0.3, 0.6, 1.0] {
            let out = refine_embedding(&f, &[&g, &h], false, &[true, false], gamma).unwrap();
            assert_eq!(out, f.to_vec());
        }
        let out = refine_embedding(&f, &[&g, &h], true, &[true, false], 1.0).unwrap();
        assert_eq!(out, g.to_vec());
        let out = refine_embedding(&[1.0, 0.0], &[&[0.0, 1.0]], true, &[true], 0.6).unwrap();
        assert!((out[0] - 0.4).abs() < 1e-15 && (out[1] - 0.6).abs() < 1e-15);
        assert!(refine_embedding(&f, &[&g], true, &[true, false], 1.0).is_err());
    }

    #[test]
    fn hand_built_stage() {
        // anchor 0 is highly ambiguous; neighbor 2 is the least ambiguous
        let positions = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.5]];
        let pred = [0.95, 0.4, 0.1, 0.3];
        let feats = [1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0];
        let cfg = RefineConfig {
            k_tilde: 4,
            ..Default::default()
        };
        let (out, masks) = refine_stage(&feats, 2, &pred, &positions, &cfg).unwrap();
        assert_eq!(masks.self_mask, vec![true, false, false, false]);
        assert_eq!(masks.pooled[0], 0.1);
        assert_eq!(&out[0..2], &[3.0, 3.0]);
        assert_eq!(&out[2..], &feats[2..]);

        let cfg0 = RefineConfig { gamma: 0.0, ..cfg };
        let (out, _) = refine_stage(&feats, 2, &pred, &positions, &cfg0).unwrap();
        assert_eq!(out, feats.to_vec());
        let high = RefineConfig {
            epsilon_lo: 0.99,
            ..cfg
        };
        let (out, _) = refine_stage(&feats, 2, &pred, &positions, &high).unwrap();
        assert_eq!(out, feats.to_vec());
    }

    #[test]
    fn config_validation() {
        assert!(RefineConfig {
            epsilon_lo: 0.95,
            epsilon_hi: 0.9,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(RefineConfig {
            gamma: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(RefineConfig {
            k_tilde: 1,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
