//! Overall accuracy, mean class accuracy and mean IoU, plus the same scores
//! restricted to ambiguity levels.

use std::fmt;

use crate::error::{invalid, Result};

pub const BIN_TOLERANCE: f64 = 1e-12;

/// Rows are ground truth, columns prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, gt: usize, pred: usize) -> Result<()> {
        if gt >= self.classes || pred >= self.classes {
            return Err(invalid(format!(
                "label pair ({gt}, {pred}) outside {} classes",
                self.classes
            )));
        }
        self.counts[gt * self.classes + pred] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(invalid("confusion matrices differ in class count"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn row_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|g| self.get(g, c)).sum()
    }
}

pub fn confusion(pred: &[usize], gt: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if pred.len() != gt.len() {
        return Err(invalid(format!(
            "{} predictions for {} labels",
            pred.len(),
            gt.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (&p, &g) in pred.iter().zip(gt) {
        cm.add(g, p)?;
    }
    Ok(cm)
}

/// Percentages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub oa: f64,
    pub macc: f64,
    pub miou: f64,
}

/// Classes absent from both ground truth and prediction are left out of
/// the means. An empty matrix scores zero everywhere.
pub fn scores(cm: &ConfusionMatrix) -> Scores {
    let total = cm.total();
    if total == 0 {
        return Scores {
            oa: 0.0,
            macc: 0.0,
            miou: 0.0,
        };
    }
    let trace: u64 = (0..cm.classes).map(|c| cm.get(c, c)).sum();
    let mut acc = Vec::new();
    let mut iou = Vec::new();
    for c in 0..cm.classes {
        let row = cm.row_sum(c);
        let col = cm.col_sum(c);
        if row == 0 && col == 0 {
            continue;
        }
        let tp = cm.get(c, c) as f64;
        // a class only ever predicted has no ground truth to be accurate on
        if row > 0 {
            acc.push(tp / row as f64);
        }
        iou.push(tp / ((row + col) as f64 - tp));
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            100.0 * v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Scores {
        oa: 100.0 * trace as f64 / total as f64,
        macc: mean(&acc),
        miou: mean(&iou),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AmbiguityBin {
    Zero,
    Low,
    Half,
    High,
    One,
}

impl AmbiguityBin {
    pub const ALL: [AmbiguityBin; 5] = [
        AmbiguityBin::Zero,
        AmbiguityBin::Low,
        AmbiguityBin::Half,
        AmbiguityBin::High,
        AmbiguityBin::One,
    ];

    pub fn of(a: f64) -> Self {
        if a.abs() <= BIN_TOLERANCE {
            Self::Zero
        } else if (a - 0.5).abs() <= BIN_TOLERANCE {
            Self::Half
        } else if (a - 1.0).abs() <= BIN_TOLERANCE {
            Self::One
        } else if a < 0.5 {
            Self::Low
        } else {
            Self::High
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Zero => "{0}",
            Self::Low => "(0,0.5)",
            Self::Half => "{0.5}",
            Self::High => "(0.5,1)",
            Self::One => "{1}",
        }
    }

    /// Anything strictly above zero.
    pub fn is_ambiguous(self) -> bool {
        self != Self::Zero
    }
}

impl fmt::Display for AmbiguityBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinRow {
    pub bin: AmbiguityBin,
    pub points: usize,
    pub matrix: ConfusionMatrix,
    pub scores: Scores,
}

pub fn breakdown(pred: &[usize], gt: &[usize], ambiguity: &[f64], classes: usize) -> Result<Vec<BinRow>> {
    if pred.len() != gt.len() || gt.len() != ambiguity.len() {
        return Err(invalid("predictions, labels and ambiguities differ in length"));
    }
    let mut mats: Vec<ConfusionMatrix> = (0..5).map(|_| ConfusionMatrix::new(classes)).collect();
    for ((&p, &g), &a) in pred.iter().zip(gt).zip(ambiguity) {
        mats[AmbiguityBin::of(a) as usize].add(g, p)?;
    }
    Ok(AmbiguityBin::ALL
        .iter()
        .zip(mats)
        .map(|(&bin, matrix)| BinRow {
            bin,
            points: matrix.total() as usize,
            scores: scores(&matrix),
            matrix,
        })
        .collect())
}

/// Scores over every point whose ambiguity is above zero.
pub fn ambiguous_scores(pred: &[usize], gt: &[usize], ambiguity: &[f64], classes: usize) -> Result<Scores> {
    let rows = breakdown(pred, gt, ambiguity, classes)?;
    let mut cm = ConfusionMatrix::new(classes);
    for r in rows.iter().filter(|r| r.bin.is_ambiguous()) {
        cm.merge(&r.matrix)?;
    }
    Ok(scores(&cm))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_tally() {
        let cm = confusion(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert_eq!(
            (cm.get(0, 0), cm.get(0, 1), cm.get(1, 0), cm.get(1, 1)),
            (1, 0, 1, 2)
        );
        let s = scores(&cm);
        assert!((s.oa - 75.0).abs() < 1e-12);
        assert!((s.macc - 250.0 / 3.0).abs() < 1e-12);
        assert!((s.miou - 175.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_empty() {
        let cm = confusion(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(
            scores(&cm),
            Scores {
                oa: 100.0,
                macc: 100.0,
                miou: 100.0
            }
        );
        let empty = confusion(&[], &[], 3).unwrap();
        assert_eq!(empty.total(), 0);
        assert!(confusion(&[3], &[0], 3).is_err());
        assert!(confusion(&[0], &[0, 1], 3).is_err());
    }

    #[test]
    fn absent_class_excluded() {
        let with_gap = scores(&confusion(&[0, 0, 2], &[0, 2, 2], 3).unwrap());
        let without = scores(&confusion(&[0, 0, 1], &[0, 1, 1], 2).unwrap());
        assert_eq!(with_gap, without);
    }

    #[test]
    fn bins() {
        assert_eq!(AmbiguityBin::of(0.0), AmbiguityBin::Zero);
        assert_eq!(AmbiguityBin::of(1e-13), AmbiguityBin::Zero);
        assert_eq!(AmbiguityBin::of(0.2), AmbiguityBin::Low);
        assert_eq!(AmbiguityBin::of(0.5 + 1e-13), AmbiguityBin::Half);
        assert_eq!(AmbiguityBin::of(0.7), AmbiguityBin::High);
        assert_eq!(AmbiguityBin::of(1.0), AmbiguityBin::One);
    }

    #[test]
    fn unambiguous_fills_zero_bin_only() {
        let rows = breakdown(&[0, 1], &[0, 1], &[0.0, 0.0], 2).unwrap();
        assert_eq!(rows[0].points, 2);
        assert!(rows[1..].iter().all(|r| r.points == 0));
    }
}
