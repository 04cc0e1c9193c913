//! Confusion-matrix classification metrics: overall accuracy, average
//! (per-class) accuracy, and Cohen's kappa.

use alloc::vec;
use alloc::vec::Vec;

/// Integer confusion matrix; rows index the true class, columns the
/// predicted class.
#[derive(Clone, Debug, PartialEq)]
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

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Self {
        assert_eq!(counts.len(), classes * classes);
        Self { classes, counts }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn record(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.classes + pred] += 1;
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.counts[truth * self.classes..(truth + 1) * self.classes]
            .iter()
            .sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.classes).map(|r| self.get(r, pred)).sum()
    }
}

/// Aggregate scores; fractions in `[0, 1]` (kappa in `[-1, 1]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub confusion: ConfusionMatrix,
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    /// Per-class recall; `None` for classes without test pixels.
    pub per_class: Vec<Option<f64>>,
}

/// Computes OA, AA, and kappa from a confusion matrix.
///
/// AA averages recall over classes that have at least one test pixel.
/// Kappa is `(p_o − p_e) / (1 − p_e)` with the expected agreement from the
/// marginals; when `p_e = 1` (a single represented class) it degenerates
/// to 1 for perfect agreement and 0 otherwise.
pub fn compute_metrics(confusion: ConfusionMatrix) -> Metrics {
    let k = confusion.classes();
    let total = confusion.total();
    if total == 0 {
        return Metrics {
            confusion,
            oa: 0.0,
            aa: 0.0,
            kappa: 0.0,
            per_class: vec![None; k],
        };
    }
    let diag: u64 = (0..k).map(|c| confusion.get(c, c)).sum();
    let oa = diag as f64 / total as f64;

    let mut per_class = Vec::with_capacity(k);
    let mut aa_sum = 0.0;
    let mut aa_n = 0usize;
    for c in 0..k {
        let row = confusion.row_sum(c);
        if row == 0 {
            per_class.push(None);
        } else {
            let recall = confusion.get(c, c) as f64 / row as f64;
            per_class.push(Some(recall));
            aa_sum += recall;
            aa_n += 1;
        }
    }
    let aa = if aa_n > 0 { aa_sum / aa_n as f64 } else { 0.0 };

    let mut expected: u128 = 0;
    for c in 0..k {
        expected += confusion.row_sum(c) as u128 * confusion.col_sum(c) as u128;
    }
    let p_e = expected as f64 / (total as f64 * total as f64);
    let kappa = if (1.0 - p_e).abs() < 1e-15 {
        if oa >= 1.0 {
            1.0
        } else {
            0.0
        }
    } else {
        (oa - p_e) / (1.0 - p_e)
    };

    Metrics {
        confusion,
        oa,
        aa,
        kappa,
        per_class,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let mut cm = ConfusionMatrix::new(3);
        for c in 0..3 {
            for _ in 0..5 {
                cm.record(c, c);
            }
        }
        let m = compute_metrics(cm);
        assert_eq!(m.oa, 1.0);
        assert_eq!(m.aa, 1.0);
        assert_eq!(m.kappa, 1.0);
    }

    #[test]
    fn hand_computed_two_class_case() {
        // [[8, 2], [3, 7]]: p_o = 15/20, marginals 10/10 and 11/9,
        // p_e = (10·11 + 10·9)/400 = 0.5, kappa = 0.25/0.5 = 0.5
        let cm = ConfusionMatrix::from_counts(2, vec![8, 2, 3, 7]);
        let m = compute_metrics(cm);
        assert_eq!(m.oa, 0.75);
        assert_eq!(m.aa, 0.75);
        assert_eq!(m.kappa, 0.5);
    }

    #[test]
    fn absent_class_is_excluded_from_aa() {
        // class 1 has no test pixels
        let cm = ConfusionMatrix::from_counts(3, vec![4, 0, 0, 0, 0, 0, 1, 0, 3]);
        let m = compute_metrics(cm);
        assert_eq!(m.per_class[1], None);
        assert!((m.aa - (1.0 + 0.75) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn single_class_degeneracy() {
        let cm = ConfusionMatrix::from_counts(2, vec![5, 0, 0, 0]);
        let m = compute_metrics(cm);
        assert_eq!(m.oa, 1.0);
        assert_eq!(m.kappa, 1.0);

        let cm = ConfusionMatrix::from_counts(2, vec![3, 2, 0, 0]);
        // predictions split but only one true class; p_e < 1 here
        let m = compute_metrics(cm);
        assert!(m.kappa.abs() <= 1.0);
    }
}
